// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dprobe/error.hpp"
#include "dprobe/io.hpp"
#include "dprobe/rng.hpp"
#include "dprobe/tensor.hpp"

namespace dprobe::data {

enum class Provenance { real, synthetic, augmented };

inline std::string to_string(Provenance p) {
    switch (p) {
        case Provenance::real: return "real";
        case Provenance::synthetic: return "synthetic";
        case Provenance::augmented: return "augmented";
    }
    return "?";
}

inline Provenance provenance_from_string(const std::string& s) {
    if (s == "real") return Provenance::real;
    if (s == "synthetic") return Provenance::synthetic;
    if (s == "augmented") return Provenance::augmented;
    throw DataError("unknown provenance '" + s + "'");
}

/// Single-channel images in [0, 1] with labels and per-item provenance.
/// `ids` are stable item ids; `parents[i]` is the id of the original an augmented item was derived
/// from (its own id otherwise).
struct LabeledImageSet {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> pixels;
    std::vector<int> labels;
    std::vector<std::string> class_names;
    std::vector<Provenance> provenance;
    std::vector<std::int64_t> ids;
    std::vector<std::int64_t> parents;
    std::vector<std::string> transforms;

    std::size_t size() const { return labels.size(); }
    std::size_t pixels_per_image() const { return height * width; }
    std::size_t class_count() const { return class_names.size(); }

    std::span<const float> image(std::size_t i) const {
        return {pixels.data() + i * pixels_per_image(), pixels_per_image()};
    }
    std::span<float> image(std::size_t i) { return {pixels.data() + i * pixels_per_image(), pixels_per_image()}; }

    void push(std::span<const float> img, int label, Provenance prov, std::int64_t id, std::int64_t parent,
              std::string transform = {}) {
        if (img.size() != pixels_per_image()) throw ShapeError("image size does not match set geometry");
        pixels.insert(pixels.end(), img.begin(), img.end());
        labels.push_back(label);
        provenance.push_back(prov);
        ids.push_back(id);
        parents.push_back(parent);
        transforms.push_back(std::move(transform));
    }

    /// Empty set with the same geometry and label space.
    LabeledImageSet empty_like() const {
        LabeledImageSet s;
        s.height = height;
        s.width = width;
        s.class_names = class_names;
        return s;
    }

    LabeledImageSet subset(std::span<const std::size_t> idx) const {
        LabeledImageSet s = empty_like();
        for (auto i : idx) s.push(image(i), labels[i], provenance[i], ids[i], parents[i], transforms[i]);
        return s;
    }

    /// [B, 1, H, W] tensor of the given items.
    template <class T = float>
    Tensor<T> batch(std::span<const std::size_t> idx) const {
        Tensor<T> out({idx.size(), 1, height, width});
        for (std::size_t b = 0; b < idx.size(); ++b) {
            const auto img = image(idx[b]);
            std::copy(img.begin(), img.end(), out.data() + b * pixels_per_image());
        }
        return out;
    }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> c(class_count(), 0);
        for (int l : labels) ++c.at(static_cast<std::size_t>(l));
        return c;
    }

    void validate() const {
        if (pixels.size() != size() * pixels_per_image()) throw DataError("pixel buffer size mismatch");
        for (int l : labels)
            if (l < 0 || static_cast<std::size_t>(l) >= class_count())
                throw DataError("label " + std::to_string(l) + " outside class range");
        for (float p : pixels)
            if (!(p >= 0.0f && p <= 1.0f)) throw DataError("pixel outside [0, 1]");
    }
};

// ---------------------------------------------------------------------------
// Raw tensor format "DPIM1": magic, u32 n, u32 H, u32 W, n*H*W little-endian f32 in [0, 1].

inline std::string encode_dpim(std::size_t n, std::size_t h, std::size_t w, std::span<const float> pixels) {
    io::Writer wr;
    wr.put_bytes("DPIM1");
    wr.put<std::uint32_t>(static_cast<std::uint32_t>(n));
    wr.put<std::uint32_t>(static_cast<std::uint32_t>(h));
    wr.put<std::uint32_t>(static_cast<std::uint32_t>(w));
    wr.put_span(pixels);
    return wr.bytes();
}

struct RawImages {
    std::size_t n = 0, height = 0, width = 0;
    std::vector<float> pixels;
};

inline RawImages decode_dpim(const std::vector<char>& bytes, const std::string& ctx) {
    io::Reader r(bytes.data(), bytes.size(), ctx);
    if (r.get_bytes(5) != "DPIM1") throw IoError(ctx + ": bad magic");
    RawImages out;
    out.n = r.get<std::uint32_t>();
    out.height = r.get<std::uint32_t>();
    out.width = r.get<std::uint32_t>();
    out.pixels.resize(out.n * out.height * out.width);
    r.get_into(std::span<float>(out.pixels));
    if (r.remaining() != 0) throw IoError(ctx + ": trailing bytes");
    return out;
}

inline RawImages read_dpim(const std::filesystem::path& p) { return decode_dpim(io::read_file(p), p.string()); }

/// Labels: "<image-index>,<class-id>" per line.
inline std::string encode_labels(std::span<const int> labels) {
    std::string s;
    for (std::size_t i = 0; i < labels.size(); ++i) s += std::to_string(i) + "," + std::to_string(labels[i]) + "\n";
    return s;
}

inline std::vector<int> read_labels(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw IoError("cannot open label file " + p.string());
    std::vector<std::pair<std::size_t, int>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw IoError(p.string() + ": malformed line '" + line + "'");
        rows.emplace_back(std::stoul(line.substr(0, comma)), std::stoi(line.substr(comma + 1)));
    }
    std::vector<int> labels(rows.size(), -1);
    for (auto [i, l] : rows) {
        if (i >= labels.size()) throw IoError(p.string() + ": image index " + std::to_string(i) + " out of range");
        labels[i] = l;
    }
    return labels;
}

/// Label map: "<dir-name>,<class-id>" per line; several names may share one id.
inline std::map<std::string, int> read_label_map(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw IoError("cannot open label map " + p.string());
    std::map<std::string, int> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto comma = line.rfind(',');
        if (comma == std::string::npos) throw IoError(p.string() + ": malformed line '" + line + "'");
        out[line.substr(0, comma)] = std::stoi(line.substr(comma + 1));
    }
    return out;
}

inline std::string encode_label_map(const std::vector<std::string>& class_names) {
    std::string s;
    for (std::size_t i = 0; i < class_names.size(); ++i) s += class_names[i] + "," + std::to_string(i) + "\n";
    return s;
}

/// Writes <stem>.dpim, <stem>.labels and <stem>.items.csv (id, parent, provenance, transform).
inline void write_set(const std::filesystem::path& dir, const std::string& stem, const LabeledImageSet& s) {
    io::write_file(dir / (stem + ".dpim"), encode_dpim(s.size(), s.height, s.width, s.pixels));
    io::write_file(dir / (stem + ".labels"), encode_labels(s.labels));
    std::string items = "index,id,parent,provenance,transform\n";
    for (std::size_t i = 0; i < s.size(); ++i)
        items += std::to_string(i) + "," + std::to_string(s.ids[i]) + "," + std::to_string(s.parents[i]) + "," +
                 to_string(s.provenance[i]) + "," + s.transforms[i] + "\n";
    io::write_file(dir / (stem + ".items.csv"), items);
    io::write_file(dir / "label_map.csv", encode_label_map(s.class_names));
}

inline LabeledImageSet read_set(const std::filesystem::path& dir, const std::string& stem) {
    const auto raw = read_dpim(dir / (stem + ".dpim"));
    LabeledImageSet s;
    s.height = raw.height;
    s.width = raw.width;
    s.pixels = raw.pixels;
    s.labels = read_labels(dir / (stem + ".labels"));
    if (s.labels.size() != raw.n) throw DataError(stem + ": label count does not match image count");
    const auto lm = read_label_map(dir / "label_map.csv");
    int max_id = -1;
    for (const auto& [name, id] : lm) max_id = std::max(max_id, id);
    s.class_names.assign(static_cast<std::size_t>(max_id + 1), "");
    for (const auto& [name, id] : lm) s.class_names[static_cast<std::size_t>(id)] = name;
    s.provenance.assign(raw.n, Provenance::real);
    s.ids.resize(raw.n);
    std::iota(s.ids.begin(), s.ids.end(), 0);
    s.parents = s.ids;
    s.transforms.assign(raw.n, "");
    const auto items_path = dir / (stem + ".items.csv");
    if (std::filesystem::exists(items_path)) {
        std::ifstream in(items_path);
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::vector<std::string> f;
            std::stringstream ss(line);
            std::string cell;
            while (std::getline(ss, cell, ',')) f.push_back(cell);
            if (f.size() < 4) throw DataError(items_path.string() + ": malformed line");
            const auto i = std::stoul(f[0]);
            if (i >= raw.n) throw DataError(items_path.string() + ": index out of range");
            s.ids[i] = std::stoll(f[1]);
            s.parents[i] = std::stoll(f[2]);
            s.provenance[i] = provenance_from_string(f[3]);
            s.transforms[i] = f.size() > 4 ? f[4] : "";
        }
    }
    s.validate();
    return s;
}

// ---------------------------------------------------------------------------
// Resizing: separable resampling, area averaging when shrinking an axis, bilinear when growing.

namespace detail {

/// Row-stochastic (dst x src) weight matrix for one axis, stored sparsely.
inline std::vector<std::vector<std::pair<std::size_t, double>>> axis_weights(std::size_t src, std::size_t dst) {
    std::vector<std::vector<std::pair<std::size_t, double>>> w(dst);
    const double scale = static_cast<double>(src) / static_cast<double>(dst);
    for (std::size_t o = 0; o < dst; ++o) {
        if (dst < src) {
            const double lo = o * scale, hi = (o + 1) * scale;
            for (auto i = static_cast<std::size_t>(std::floor(lo)); i < src && static_cast<double>(i) < hi; ++i) {
                const double cover = std::min(hi, i + 1.0) - std::max(lo, static_cast<double>(i));
                if (cover > 0) w[o].emplace_back(i, cover / scale);
            }
        } else {
            const double c = std::clamp((o + 0.5) * scale - 0.5, 0.0, static_cast<double>(src - 1));
            const auto i0 = static_cast<std::size_t>(std::floor(c));
            const std::size_t i1 = std::min(i0 + 1, src - 1);
            const double f = c - static_cast<double>(i0);
            w[o].emplace_back(i0, 1.0 - f);
            if (i1 != i0) w[o].emplace_back(i1, f);
        }
    }
    return w;
}

}  // namespace detail

inline std::vector<float> resize(std::span<const float> img, std::size_t h, std::size_t w, std::size_t th,
                                 std::size_t tw) {
    if (h == th && w == tw) return {img.begin(), img.end()};
    const auto wy = detail::axis_weights(h, th), wx = detail::axis_weights(w, tw);
    std::vector<double> tmp(h * tw, 0.0);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < tw; ++x)
            for (auto [i, a] : wx[x]) tmp[y * tw + x] += a * img[y * w + i];
    std::vector<float> out(th * tw);
    for (std::size_t y = 0; y < th; ++y)
        for (std::size_t x = 0; x < tw; ++x) {
            double v = 0.0;
            for (auto [i, a] : wy[y]) v += a * tmp[i * tw + x];
            out[y * tw + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    return out;
}

// ---------------------------------------------------------------------------
// Portable graymap / pixmap.

struct DecodedImage {
    std::size_t height = 0, width = 0;
    std::vector<float> pixels;  ///< luminance in [0, 1]
};

/// Decodes P2/P5 graymaps and P3/P6 pixmaps (luminance 0.299 R + 0.587 G + 0.114 B).
inline DecodedImage decode_pnm(const std::vector<char>& bytes, const std::string& ctx) {
    std::size_t pos = 0;
    const auto token = [&]() -> std::string {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
        std::string t;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos])) && bytes[pos] != '#')
            t.push_back(bytes[pos++]);
        if (t.empty()) throw IoError(ctx + ": truncated header");
        return t;
    };
    const auto number = [&]() {
        const std::string t = token();
        std::size_t v = 0;
        auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
        if (ec != std::errc{} || p != t.data() + t.size()) throw IoError(ctx + ": bad header field '" + t + "'");
        return v;
    };
    const std::string magic = token();
    if (magic != "P2" && magic != "P5" && magic != "P3" && magic != "P6") throw IoError(ctx + ": not a PNM image");
    DecodedImage img;
    img.width = number();
    img.height = number();
    const std::size_t maxval = number();
    if (img.width == 0 || img.height == 0 || maxval == 0 || maxval > 65535) throw IoError(ctx + ": bad dimensions");
    const bool color = magic == "P3" || magic == "P6";
    const bool binary = magic == "P5" || magic == "P6";
    const std::size_t ch = color ? 3 : 1, count = img.width * img.height * ch;
    std::vector<double> raw(count);
    if (binary) {
        ++pos;  // single whitespace after maxval
        const std::size_t bpp = maxval > 255 ? 2 : 1;
        if (pos + count * bpp > bytes.size()) throw IoError(ctx + ": truncated pixel data");
        for (std::size_t i = 0; i < count; ++i) {
            const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos + i * bpp);
            raw[i] = bpp == 2 ? (p[0] << 8 | p[1]) : p[0];
        }
    } else {
        for (std::size_t i = 0; i < count; ++i) raw[i] = static_cast<double>(number());
    }
    img.pixels.resize(img.width * img.height);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        const double v = color ? 0.299 * raw[3 * i] + 0.587 * raw[3 * i + 1] + 0.114 * raw[3 * i + 2] : raw[i];
        img.pixels[i] = static_cast<float>(std::clamp(v / static_cast<double>(maxval), 0.0, 1.0));
    }
    return img;
}

inline std::string encode_pgm(std::span<const float> img, std::size_t h, std::size_t w) {
    std::string s = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    for (float v : img) s.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
    return s;
}

/// Interleaved RGB in [0, 1] -> binary pixmap.
inline std::string encode_ppm(std::span<const float> rgb, std::size_t h, std::size_t w) {
    std::string s = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    for (float v : rgb) s.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
    return s;
}

// ---------------------------------------------------------------------------
// Ingestion of a directory-per-class tree.

struct IngestReport {
    std::size_t loaded = 0;
    std::size_t skipped_corrupt = 0;
    std::vector<std::string> skipped_files;
};

/// Loads <root>/<class-dir>/<files>. Files may be PGM/PPM images or DPIM bundles. Images are
/// converted to luminance, resized to target x target without padding and kept in [0, 1].
/// Corrupt and zero-byte files are skipped and counted. `label_map` maps directory names to ids
/// (several directories may merge into one id); when empty, ids follow sorted directory order.
inline LabeledImageSet ingest(const std::filesystem::path& root, std::size_t target,
                              const std::map<std::string, int>& label_map, IngestReport* report = nullptr) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw IoError("ingest: " + root.string() + " is not a directory");
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    std::map<std::string, int> ids = label_map;
    if (ids.empty())
        for (std::size_t i = 0; i < dirs.size(); ++i) ids[dirs[i].filename().string()] = static_cast<int>(i);
    int max_id = -1;
    for (const auto& [n, id] : ids) max_id = std::max(max_id, id);

    LabeledImageSet set;
    set.height = set.width = target;
    set.class_names.assign(static_cast<std::size_t>(max_id + 1), "");
    for (const auto& d : dirs) {
        const std::string name = d.filename().string();
        const auto it = ids.find(name);
        if (it == ids.end()) continue;
        auto& cname = set.class_names[static_cast<std::size_t>(it->second)];
        if (cname.empty()) cname = name;
    }
    IngestReport local;
    IngestReport& rep = report ? *report : local;
    std::int64_t next_id = 0;
    for (const auto& d : dirs) {
        const std::string name = d.filename().string();
        const auto it = ids.find(name);
        if (it == ids.end()) continue;
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(d))
            if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        if (files.empty()) throw DataError("ingest: class directory '" + name + "' is empty");
        for (const auto& f : files) {
            try {
                if (fs::file_size(f) == 0) throw IoError("zero-byte file");
                const auto bytes = io::read_file(f);
                const auto add = [&](std::span<const float> img, std::size_t h, std::size_t w) {
                    const auto r = resize(img, h, w, target, target);
                    set.push(r, it->second, Provenance::real, next_id, next_id);
                    ++next_id;
                    ++rep.loaded;
                };
                if (f.extension() == ".dpim") {
                    const auto raw = decode_dpim(bytes, f.string());
                    const std::size_t per = raw.height * raw.width;
                    for (std::size_t i = 0; i < raw.n; ++i)
                        add({raw.pixels.data() + i * per, per}, raw.height, raw.width);
                } else {
                    const auto img = decode_pnm(bytes, f.string());
                    add(img.pixels, img.height, img.width);
                }
            } catch (const Error&) {
                ++rep.skipped_corrupt;
                rep.skipped_files.push_back(f.string());
            }
        }
    }
    if (rep.skipped_corrupt) std::clog << "ingest: skipped " << rep.skipped_corrupt << " corrupt file(s)\n";
    return set;
}

// ---------------------------------------------------------------------------
// Augmentation: one label-preserving transform per synthetic item.

inline const std::vector<std::string>& transform_names() {
    static const std::vector<std::string> names{"hflip",     "vflip",     "rot180",   "scale-0.10",
                                                "scale-0.05", "scale+0.05", "scale+0.10"};
    return names;
}

inline std::vector<float> apply_transform(std::span<const float> img, std::size_t h, std::size_t w,
                                          const std::string& name) {
    std::vector<float> out(img.size());
    if (name == "hflip") {
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) out[y * w + x] = img[y * w + (w - 1 - x)];
    } else if (name == "vflip") {
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) out[y * w + x] = img[(h - 1 - y) * w + x];
    } else if (name == "rot180") {
        for (std::size_t i = 0; i < img.size(); ++i) out[i] = img[img.size() - 1 - i];
    } else if (name.rfind("scale", 0) == 0) {
        const float f = 1.0f + std::stof(name.substr(5));
        for (std::size_t i = 0; i < img.size(); ++i) out[i] = std::clamp(img[i] * f, 0.0f, 1.0f);
    } else {
        throw ConfigError("unknown augmentation '" + name + "'");
    }
    return out;
}

enum class AugmentMode { balanced, long_tail };

struct AugmentOptions {
    AugmentMode mode = AugmentMode::balanced;
    std::size_t quota_per_class = 0;  ///< balanced: fill each class up to this many items
    std::size_t multiplier = 1;       ///< long-tail: augmented copies per real item
    std::uint64_t seed = 0;
};

struct AugmentReport {
    std::vector<std::size_t> added_per_class;
    std::vector<std::string> warnings;
};

/// Adds augmented items to a training split. Each (parent, transform) pair is used at most once;
/// pairs are drawn in a seeded order. Unreachable quotas emit a warning and the maximum achievable.
inline LabeledImageSet augment(const LabeledImageSet& train, const AugmentOptions& opt, AugmentReport* report = nullptr) {
    for (auto p : train.provenance)
        if (p == Provenance::augmented) throw ContractError("augment: input already contains augmented items");
    LabeledImageSet out = train;
    AugmentReport local;
    AugmentReport& rep = report ? *report : local;
    rep.added_per_class.assign(train.class_count(), 0);
    const auto& tf = transform_names();
    std::int64_t next_id = 0;
    for (auto id : train.ids) next_id = std::max(next_id, id + 1);
    next_id += std::int64_t{1} << 40;
    for (std::size_t c = 0; c < train.class_count(); ++c) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < train.size(); ++i)
            if (train.labels[i] == static_cast<int>(c)) members.push_back(i);
        if (members.empty()) continue;
        std::vector<std::pair<std::size_t, std::size_t>> pairs;
        if (opt.mode == AugmentMode::balanced) {
            for (auto m : members)
                for (std::size_t k = 0; k < tf.size(); ++k) pairs.emplace_back(m, k);
            Rng rng(opt.seed, "augment", c);
            std::shuffle(pairs.begin(), pairs.end(), rng.engine());
            const std::size_t need = opt.quota_per_class > members.size() ? opt.quota_per_class - members.size() : 0;
            if (need > pairs.size())
                rep.warnings.push_back("class " + std::to_string(c) + ": quota " + std::to_string(opt.quota_per_class) +
                                       " unreachable, emitting " + std::to_string(members.size() + pairs.size()));
            pairs.resize(std::min(need, pairs.size()));
        } else {
            const std::size_t m = std::min(opt.multiplier, tf.size());
            if (opt.multiplier > tf.size())
                rep.warnings.push_back("multiplier " + std::to_string(opt.multiplier) + " exceeds " +
                                       std::to_string(tf.size()) + " transforms");
            for (auto mem : members) {
                std::vector<std::size_t> ks(tf.size());
                std::iota(ks.begin(), ks.end(), 0);
                Rng rng(opt.seed, "augment-lt", static_cast<std::uint64_t>(train.ids[mem]));
                std::shuffle(ks.begin(), ks.end(), rng.engine());
                for (std::size_t j = 0; j < m; ++j) pairs.emplace_back(mem, ks[j]);
            }
        }
        for (auto [m, k] : pairs) {
            const auto img = apply_transform(train.image(m), train.height, train.width, tf[k]);
            out.push(img, static_cast<int>(c), Provenance::augmented, next_id++, train.ids[m], tf[k]);
            ++rep.added_per_class[c];
        }
    }
    for (const auto& w : rep.warnings) std::clog << "augment: " << w << "\n";
    return out;
}

// ---------------------------------------------------------------------------
// Stratified splits.

struct SplitPlan {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;
    std::uint64_t seed = 0;
    std::size_t min_class_count = 0;  ///< classes with fewer items are dropped (long-tail rule: 5)
    std::size_t max_per_class = 0;    ///< 0 = keep all; otherwise random subsample per class

    void validate() const {
        if (train < 0 || val < 0 || test < 0 || std::abs(train + val + test - 1.0) > 1e-9)
            throw ConfigError("split ratios must be nonnegative and sum to 1");
    }
};

struct Splits {
    LabeledImageSet train, val, test;
    std::vector<std::string> log;
};

/// Class-stratified, parent-grouped split. Every split receives at least one group of each kept
/// class; classes that cannot populate all three splits, or fall under min_class_count, are dropped
/// and logged. Labels keep their original ids.
inline Splits split(const LabeledImageSet& set, const SplitPlan& plan) {
    plan.validate();
    Splits out{set.empty_like(), set.empty_like(), set.empty_like(), {}};
    for (std::size_t c = 0; c < set.class_count(); ++c) {
        std::map<std::int64_t, std::vector<std::size_t>> groups;
        for (std::size_t i = 0; i < set.size(); ++i)
            if (set.labels[i] == static_cast<int>(c)) groups[set.parents[i]].push_back(i);
        std::vector<std::vector<std::size_t>> g;
        for (auto& [p, members] : groups) g.push_back(std::move(members));
        Rng rng(plan.seed, "split", c);
        std::shuffle(g.begin(), g.end(), rng.engine());
        if (plan.max_per_class && g.size() > plan.max_per_class) g.resize(plan.max_per_class);
        const std::size_t n = g.size();
        if (n == 0) continue;
        if (n < plan.min_class_count || n < 3) {
            out.log.push_back("dropped class " + std::to_string(c) + " (" + set.class_names[c] + ") with " +
                              std::to_string(n) + " item(s)");
            continue;
        }
        std::size_t n_val = static_cast<std::size_t>(std::floor(plan.val * n + 0.5));
        std::size_t n_test = static_cast<std::size_t>(std::floor(plan.test * n + 0.5));
        if (plan.val > 0) n_val = std::max<std::size_t>(n_val, 1);
        if (plan.test > 0) n_test = std::max<std::size_t>(n_test, 1);
        const std::size_t n_train = n - n_val - n_test;
        std::size_t k = 0;
        const auto take = [&](LabeledImageSet& dst, std::size_t count) {
            for (std::size_t j = 0; j < count; ++j, ++k)
                for (auto i : g[k]) dst.push(set.image(i), set.labels[i], set.provenance[i], set.ids[i], set.parents[i], set.transforms[i]);
        };
        take(out.train, n_train);
        take(out.val, n_val);
        take(out.test, n_test);
    }
    for (const auto& l : out.log) std::clog << "split: " << l << "\n";
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic fine-grained "organisms": elliptical body with internal banding, radial spines
// and an optional trailing flagellum, on a dark background with sensor noise.

struct Morphology {
    double eccentricity = 0.3;  ///< 1 - minor/major axis ratio
    int spines = 0;
    double banding = 2.0;  ///< band periods along the major axis
    bool flagellum = false;
    double size = 0.30;  ///< semi-major axis as a fraction of the image size
};

struct SyntheticSpec {
    std::size_t image_size = 32;
    std::vector<Morphology> classes;
    double noise = 0.03;            ///< additive Gaussian sensor noise (std)
    double rotation_jitter = 2 * std::numbers::pi;  ///< orientation drawn from [0, jitter)
    double position_jitter = 0.06;  ///< centre offset as a fraction of the image size
    double scale_jitter = 0.08;
    double brightness_jitter = 0.08;

    /// k classes from a shared base organism: eccentricity, spine count, flagellum and banding
    /// toggle between two nearby levels following the binary digits of the class index.
    static SyntheticSpec fine_grained(std::size_t k, std::size_t image_size, double delta = 1.0) {
        SyntheticSpec s;
        s.image_size = image_size;
        for (std::size_t c = 0; c < k; ++c) {
            Morphology m;
            m.eccentricity = 0.25 + delta * 0.25 * static_cast<double>(c & 1);
            m.spines = (c & 2) ? static_cast<int>(std::lround(2 + 2 * delta)) : 2;
            m.flagellum = (c & 4) != 0;
            m.banding = 1.5 + delta * 1.5 * static_cast<double>((c >> 3) & 1);
            s.classes.push_back(m);
        }
        return s;
    }
};

namespace detail {

inline double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
    const double vx = bx - ax, vy = by - ay;
    const double len2 = vx * vx + vy * vy;
    double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

}  // namespace detail

inline std::vector<float> render_organism(const Morphology& m, const SyntheticSpec& spec, Rng& rng) {
    const std::size_t S = spec.image_size;
    const double size = static_cast<double>(S);
    const double theta = rng.uniform() * spec.rotation_jitter;
    const double cx = size / 2 + (rng.uniform() * 2 - 1) * spec.position_jitter * size;
    const double cy = size / 2 + (rng.uniform() * 2 - 1) * spec.position_jitter * size;
    const double scale = 1.0 + (rng.uniform() * 2 - 1) * spec.scale_jitter;
    const double bright = 0.8 + (rng.uniform() * 2 - 1) * spec.brightness_jitter;
    const double band_phase = rng.uniform() * 2 * std::numbers::pi;
    const double spine_phase = rng.uniform() * 2 * std::numbers::pi;
    const double a = m.size * size * scale;
    const double b = a * (1.0 - m.eccentricity);
    const double ct = std::cos(theta), st = std::sin(theta);
    const double spine_len = 0.35 * a, line_w = std::max(0.45, 0.035 * size);

    std::vector<std::array<double, 4>> segments;
    for (int k = 0; k < m.spines; ++k) {
        const double phi = spine_phase + 2 * std::numbers::pi * k / m.spines;
        const double ex = a * std::cos(phi), ey = b * std::sin(phi);
        const double nx = std::cos(phi) / a, ny = std::sin(phi) / b;
        const double nn = std::sqrt(nx * nx + ny * ny);
        segments.push_back({ex, ey, ex + spine_len * nx / nn, ey + spine_len * ny / nn});
    }
    if (m.flagellum) {
        double px = -a, py = 0.0;
        const int pieces = 6;
        for (int k = 1; k <= pieces; ++k) {
            const double qx = -a - 0.9 * a * k / pieces;
            const double qy = 0.18 * a * std::sin(k * std::numbers::pi / 2);
            segments.push_back({px, py, qx, qy});
            px = qx;
            py = qy;
        }
    }

    std::vector<float> img(S * S);
    const int ss = 2;
    for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
            double acc = 0.0;
            for (int sy = 0; sy < ss; ++sy)
                for (int sx = 0; sx < ss; ++sx) {
                    const double px = x + (sx + 0.5) / ss - cx, py = y + (sy + 0.5) / ss - cy;
                    const double u = ct * px + st * py, v = -st * px + ct * py;
                    double val = 0.05;
                    const double r = (u * u) / (a * a) + (v * v) / (b * b);
                    if (r <= 1.0) {
                        const double band = 0.5 + 0.5 * std::cos(2 * std::numbers::pi * m.banding * u / (2 * a) + band_phase);
                        val = bright * (0.72 + 0.28 * band) * (1.0 - 0.25 * r);
                    } else {
                        for (const auto& sgm : segments)
                            if (detail::segment_distance(u, v, sgm[0], sgm[1], sgm[2], sgm[3]) <= line_w) {
                                val = 0.7 * bright;
                                break;
                            }
                    }
                    acc += val;
                }
            const double noisy = acc / (ss * ss) + spec.noise * rng.normal();
            img[y * S + x] = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
        }
    return img;
}

/// n_per_class rendered organisms per class, interleaved by class, bit-identical for a fixed seed.
inline LabeledImageSet synthesize(const SyntheticSpec& spec, std::size_t n_per_class, std::uint64_t seed) {
    LabeledImageSet s;
    s.height = s.width = spec.image_size;
    for (std::size_t c = 0; c < spec.classes.size(); ++c) s.class_names.push_back("class_" + std::to_string(c));
    std::int64_t id = 0;
    for (std::size_t i = 0; i < n_per_class; ++i)
        for (std::size_t c = 0; c < spec.classes.size(); ++c) {
            Rng rng(seed, "synthesize", c, i);
            const auto img = render_organism(spec.classes[c], spec, rng);
            s.push(img, static_cast<int>(c), Provenance::synthetic, id, id);
            ++id;
        }
    return s;
}

}  // namespace dprobe::data
