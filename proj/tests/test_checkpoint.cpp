// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>

#include "dprobe/checkpoint.hpp"
#include "dprobe/nn/optim.hpp"

using namespace dprobe;
namespace fs = std::filesystem;

namespace {

DenoiserConfig tiny() {
    DenoiserConfig c;
    c.image_size = 8;
    c.stage_channels = {4, 8};
    c.groups = 2;
    c.time_embed_dim = 8;
    c.attention_resolutions = {4};
    c.init_seed = 5;
    return c;
}

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / "dprobe-test-checkpoint";
    fs::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST(Checkpoint, RoundTripPreservesEverything) {
    UNet<float> net(tiny());
    nn::ema_update(net.params(), 0.9);
    net.params().entries()[3].value[0] = 42.0f;
    net.params().adam_step = 17;
    const CheckpointMeta meta{{{"epochs", 3}}, {{"epoch", 2}, {"val_loss", 0.5}}};
    const auto path = scratch("a.dprb");
    save_checkpoint(path, net, meta);

    auto loaded = load_checkpoint<float>(path);
    const auto& a = net.params().entries();
    const auto& b = loaded.net->params().entries();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].name, b[i].name);
        EXPECT_TRUE(a[i].value == b[i].value) << a[i].name;
        EXPECT_TRUE(a[i].ema == b[i].ema) << a[i].name;
    }
    EXPECT_EQ(loaded.net->params().adam_step, 17);
    EXPECT_EQ(loaded.meta.training, meta.training);
    EXPECT_EQ(loaded.meta.extra, meta.extra);
    EXPECT_EQ(nlohmann::json(loaded.net->config()), nlohmann::json(tiny()));
    EXPECT_EQ(loaded.sha256, io::file_sha256(path));
}

TEST(Checkpoint, EncodingIsDeterministic) {
    UNet<float> a(tiny()), b(tiny());
    EXPECT_EQ(encode_checkpoint(a, {}), encode_checkpoint(b, {}));
}

TEST(Checkpoint, CorruptFilesAreRejected) {
    const auto path = scratch("bad.dprb");
    io::write_file(path, "NOPE!");
    EXPECT_THROW(load_checkpoint<float>(path), IoError);
    UNet<float> net(tiny());
    auto bytes = encode_checkpoint(net, {});
    io::write_file(path, bytes.substr(0, bytes.size() / 2));
    EXPECT_THROW(load_checkpoint<float>(path), IoError);
    EXPECT_THROW(load_checkpoint<double>(scratch("missing.dprb")), IoError);
}

TEST(Checkpoint, DtypeMismatchIsRejected) {
    UNet<float> net(tiny());
    const auto path = scratch("f32.dprb");
    save_checkpoint(path, net, {});
    EXPECT_THROW(load_checkpoint<double>(path), IoError);
}
