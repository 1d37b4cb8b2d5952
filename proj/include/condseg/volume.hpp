#pragma once

// Volume and label-map containers, the CSG1 on-disk format, and the
// preprocessing operations: min-max normalization, isotropic resampling,
// intensity/flip augmentation, and random cropping.

#include <array>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <utility>

#include "condseg/common.hpp"

namespace condseg {

struct BadMagicError : std::runtime_error {
    explicit BadMagicError(const std::string& what) : std::runtime_error(what) {}
};
struct BadVersionError : std::runtime_error {
    explicit BadVersionError(const std::string& what) : std::runtime_error(what) {}
};
struct TruncatedError : std::runtime_error {
    explicit TruncatedError(const std::string& what) : std::runtime_error(what) {}
};

struct Volume {
    Shape dims; // D, H, W
    std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};
    uint32_t modality = 0;
    std::vector<float> intensities;

    int64_t voxels() const { return numel(dims); }
};

struct LabelMap {
    Shape dims;
    std::vector<uint8_t> classes;
};

namespace detail {

inline void check_volume(const Volume& v, const LabelMap* labels) {
    if (v.dims.size() != 3 || v.dims[0] < 1 || v.dims[1] < 1 || v.dims[2] < 1)
        throw ShapeError("volume: bad dims " + shape_str(v.dims));
    if (static_cast<int64_t>(v.intensities.size()) != v.voxels())
        throw ShapeError("volume: payload size does not match dims");
    for (float s : v.spacing)
        if (!(s > 0.0f)) throw std::invalid_argument("volume: spacing must be positive");
    if (labels) {
        if (labels->dims != v.dims) throw ShapeError("volume: label dims differ");
        if (labels->classes.size() != v.intensities.size())
            throw ShapeError("volume: label payload size does not match dims");
    }
}

template <class V>
void write_raw(std::ofstream& f, const V& value) {
    f.write(reinterpret_cast<const char*>(&value), sizeof(V));
}

template <class V>
V read_raw(std::ifstream& f, const char* what) {
    V value;
    f.read(reinterpret_cast<char*>(&value), sizeof(V));
    if (!f) throw TruncatedError(std::string("volume read: truncated at ") + what);
    return value;
}

} // namespace detail

inline constexpr char kVolumeMagic[4] = {'C', 'S', 'G', '1'};
inline constexpr uint32_t kVolumeVersion = 1;

inline void write_volume(const std::string& path, const Volume& vol, const LabelMap* labels = nullptr) {
    detail::check_volume(vol, labels);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    f.write(kVolumeMagic, 4);
    detail::write_raw(f, kVolumeVersion);
    for (int64_t d : vol.dims) detail::write_raw(f, static_cast<uint32_t>(d));
    for (float s : vol.spacing) detail::write_raw(f, s);
    detail::write_raw(f, vol.modality);
    detail::write_raw(f, static_cast<uint8_t>(labels ? 1 : 0));
    f.write(reinterpret_cast<const char*>(vol.intensities.data()),
            static_cast<std::streamsize>(vol.intensities.size() * sizeof(float)));
    if (labels)
        f.write(reinterpret_cast<const char*>(labels->classes.data()),
                static_cast<std::streamsize>(labels->classes.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
}

struct ReadResult {
    Volume vol;
    bool has_labels = false;
    LabelMap labels;
};

inline ReadResult read_volume(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for read: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f) throw TruncatedError("volume read: truncated at magic");
    if (std::memcmp(magic, kVolumeMagic, 4) != 0)
        throw BadMagicError("volume read: bad magic in " + path);
    uint32_t version = detail::read_raw<uint32_t>(f, "version");
    if (version != kVolumeVersion)
        throw BadVersionError("volume read: unsupported version " + std::to_string(version));
    ReadResult r;
    for (int i = 0; i < 3; ++i) r.vol.dims.push_back(detail::read_raw<uint32_t>(f, "dims"));
    for (int i = 0; i < 3; ++i) r.vol.spacing[static_cast<size_t>(i)] = detail::read_raw<float>(f, "spacing");
    r.vol.modality = detail::read_raw<uint32_t>(f, "modality");
    uint8_t has_labels = detail::read_raw<uint8_t>(f, "label flag");
    int64_t n = numel(r.vol.dims);
    if (n < 1 || n > (int64_t(1) << 34)) throw TruncatedError("volume read: implausible dims");
    r.vol.intensities.resize(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(r.vol.intensities.data()),
           static_cast<std::streamsize>(static_cast<size_t>(n) * sizeof(float)));
    if (f.gcount() != static_cast<std::streamsize>(static_cast<size_t>(n) * sizeof(float)))
        throw TruncatedError("volume read: intensity payload short");
    if (has_labels) {
        r.has_labels = true;
        r.labels.dims = r.vol.dims;
        r.labels.classes.resize(static_cast<size_t>(n));
        f.read(reinterpret_cast<char*>(r.labels.classes.data()), static_cast<std::streamsize>(n));
        if (f.gcount() != static_cast<std::streamsize>(n))
            throw TruncatedError("volume read: label payload short");
    }
    return r;
}

// min-max to [0,1]; a constant volume maps to all zeros with a warning
inline Volume normalize_intensity(const Volume& vol) {
    detail::check_volume(vol, nullptr);
    float lo = vol.intensities[0], hi = vol.intensities[0];
    for (float v : vol.intensities) {
        if (!std::isfinite(v)) throw NonFiniteError("normalize_intensity: non-finite input");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    Volume out = vol;
    if (hi == lo) {
        std::fprintf(stderr, "warning: constant volume, normalizing to zeros\n");
        std::fill(out.intensities.begin(), out.intensities.end(), 0.0f);
        return out;
    }
    float scale = 1.0f / (hi - lo);
    for (auto& v : out.intensities) v = (v - lo) * scale;
    return out;
}

// trilinear for intensities, nearest-neighbor for labels; voxel centers at
// (i + 0.5) * spacing; identity (bit-exact) when already at the target spacing
inline std::pair<Volume, LabelMap> resample_isotropic(const Volume& vol, const LabelMap& labels,
                                                      double target_spacing) {
    detail::check_volume(vol, &labels);
    if (!(target_spacing > 0.0)) throw std::invalid_argument("resample: target spacing must be positive");
    if (vol.spacing[0] == target_spacing && vol.spacing[1] == target_spacing &&
        vol.spacing[2] == target_spacing)
        return {vol, labels};

    int64_t id = vol.dims[0], ih = vol.dims[1], iw = vol.dims[2];
    Shape odims;
    for (int a = 0; a < 3; ++a) {
        double extent = static_cast<double>(vol.dims[static_cast<size_t>(a)]) *
                        static_cast<double>(vol.spacing[static_cast<size_t>(a)]);
        odims.push_back(std::max<int64_t>(1, static_cast<int64_t>(std::llround(extent / target_spacing))));
    }
    Volume out;
    out.dims = odims;
    out.spacing = {static_cast<float>(target_spacing), static_cast<float>(target_spacing),
                   static_cast<float>(target_spacing)};
    out.modality = vol.modality;
    out.intensities.resize(static_cast<size_t>(numel(odims)));
    LabelMap olab;
    olab.dims = odims;
    olab.classes.resize(out.intensities.size());

    auto src_coord = [&](int64_t i, int a) {
        return ((static_cast<double>(i) + 0.5) * target_spacing) /
                   static_cast<double>(vol.spacing[static_cast<size_t>(a)]) -
               0.5;
    };
    size_t o = 0;
    for (int64_t z = 0; z < odims[0]; ++z) {
        double sz = src_coord(z, 0);
        for (int64_t y = 0; y < odims[1]; ++y) {
            double sy = src_coord(y, 1);
            for (int64_t x = 0; x < odims[2]; ++x, ++o) {
                double sx = src_coord(x, 2);
                int64_t z0 = static_cast<int64_t>(std::floor(sz));
                int64_t y0 = static_cast<int64_t>(std::floor(sy));
                int64_t x0 = static_cast<int64_t>(std::floor(sx));
                double fz = sz - static_cast<double>(z0), fy = sy - static_cast<double>(y0),
                       fx = sx - static_cast<double>(x0);
                auto cl = [](int64_t v, int64_t n) { return std::min(std::max<int64_t>(v, 0), n - 1); };
                double acc = 0.0;
                for (int dz = 0; dz < 2; ++dz)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            double w = (dz ? fz : 1.0 - fz) * (dy ? fy : 1.0 - fy) * (dx ? fx : 1.0 - fx);
                            int64_t zi = cl(z0 + dz, id), yi = cl(y0 + dy, ih), xi = cl(x0 + dx, iw);
                            acc += w * static_cast<double>(
                                           vol.intensities[static_cast<size_t>((zi * ih + yi) * iw + xi)]);
                        }
                out.intensities[o] = static_cast<float>(acc);
                int64_t zn = cl(static_cast<int64_t>(std::llround(sz)), id);
                int64_t yn = cl(static_cast<int64_t>(std::llround(sy)), ih);
                int64_t xn = cl(static_cast<int64_t>(std::llround(sx)), iw);
                olab.classes[o] = labels.classes[static_cast<size_t>((zn * ih + yn) * iw + xn)];
            }
        }
    }
    return {out, olab};
}

// intensity x -> clamp(a*x + b, 0, 1); axis flips applied identically to labels
inline std::pair<Volume, LabelMap> augment_with(const Volume& vol, const LabelMap& labels, double a,
                                                double b, const std::array<bool, 3>& flip) {
    detail::check_volume(vol, &labels);
    Volume out = vol;
    LabelMap olab = labels;
    int64_t d = vol.dims[0], h = vol.dims[1], w = vol.dims[2];
    size_t o = 0;
    for (int64_t z = 0; z < d; ++z) {
        int64_t sz = flip[0] ? d - 1 - z : z;
        for (int64_t y = 0; y < h; ++y) {
            int64_t sy = flip[1] ? h - 1 - y : y;
            for (int64_t x = 0; x < w; ++x, ++o) {
                int64_t sx = flip[2] ? w - 1 - x : x;
                size_t s = static_cast<size_t>((sz * h + sy) * w + sx);
                double v = a * static_cast<double>(vol.intensities[s]) + b;
                out.intensities[o] = static_cast<float>(std::min(1.0, std::max(0.0, v)));
                olab.classes[o] = labels.classes[s];
            }
        }
    }
    return {out, olab};
}

// a in [0.9, 1.1], b in [-0.1, 0.1], each axis flipped with probability 0.5
inline std::pair<Volume, LabelMap> augment(const Volume& vol, const LabelMap& labels, Rng& rng) {
    double a = rng.uniform(0.9, 1.1);
    double b = rng.uniform(-0.1, 0.1);
    std::array<bool, 3> flip{rng.bernoulli(0.5), rng.bernoulli(0.5), rng.bernoulli(0.5)};
    return augment_with(vol, labels, a, b, flip);
}

// cubic aligned crop with corner uniform over valid offsets
inline std::pair<Volume, LabelMap> random_crop(const Volume& vol, const LabelMap& labels, int64_t crop,
                                               Rng& rng) {
    detail::check_volume(vol, &labels);
    if (crop < 1 || crop > vol.dims[0] || crop > vol.dims[1] || crop > vol.dims[2])
        throw ShapeError("random_crop: crop " + std::to_string(crop) + " exceeds dims " + shape_str(vol.dims));
    int64_t cz = rng.uniform_int(0, vol.dims[0] - crop);
    int64_t cy = rng.uniform_int(0, vol.dims[1] - crop);
    int64_t cx = rng.uniform_int(0, vol.dims[2] - crop);
    Volume out;
    out.dims = {crop, crop, crop};
    out.spacing = vol.spacing;
    out.modality = vol.modality;
    out.intensities.resize(static_cast<size_t>(crop * crop * crop));
    LabelMap olab;
    olab.dims = out.dims;
    olab.classes.resize(out.intensities.size());
    int64_t h = vol.dims[1], w = vol.dims[2];
    size_t o = 0;
    for (int64_t z = 0; z < crop; ++z)
        for (int64_t y = 0; y < crop; ++y) {
            size_t s = static_cast<size_t>(((cz + z) * h + cy + y) * w + cx);
            std::copy(vol.intensities.begin() + static_cast<int64_t>(s),
                      vol.intensities.begin() + static_cast<int64_t>(s) + crop,
                      out.intensities.begin() + static_cast<int64_t>(o));
            std::copy(labels.classes.begin() + static_cast<int64_t>(s),
                      labels.classes.begin() + static_cast<int64_t>(s) + crop,
                      olab.classes.begin() + static_cast<int64_t>(o));
            o += static_cast<size_t>(crop);
        }
    return {out, olab};
}

} // namespace condseg
