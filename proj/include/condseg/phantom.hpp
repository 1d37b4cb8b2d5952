#pragma once

// Synthetic two-modality phantom generator: nested ellipsoid "substructures"
// rendered with modality-specific intensity tables, multiplicative bias field,
// and Gaussian noise, plus per-sample pose jitter so no two samples align.
// Also the dataset manifest and the generate-everything entry point.

#include <filesystem>
#include <sstream>

#include "condseg/volume.hpp"

namespace condseg {

struct StructureSpec {
    std::array<double, 3> center_base{0.0, 0.0, 0.0}; // normalized [-1, 1] coords
    double center_jitter = 0.02;
    std::array<double, 3> axes_base{0.2, 0.2, 0.2}; // semi-axes, normalized
    double axes_jitter = 0.015;
};

struct ModalityAppearance {
    std::vector<double> class_means; // per class id, background first
    double noise_std = 0.03;
    double bias_amplitude = 0.2;
    double bias_freq = 1.0; // max cycles across the volume
};

struct PhantomSpec {
    int64_t num_structures = 7;
    int64_t size = 48;
    double rot_jitter = 0.3;    // radians per Euler angle
    double trans_jitter = 0.05; // normalized units
    double min_separation = 0.2;
    std::vector<StructureSpec> structures;
    std::vector<ModalityAppearance> appearance;

    int64_t num_classes() const { return num_structures + 1; }

    static PhantomSpec defaults() {
        PhantomSpec s;
        StructureSpec body;
        body.center_base = {0.0, 0.0, 0.0};
        body.axes_base = {0.85, 0.80, 0.78};
        body.axes_jitter = 0.02;
        s.structures.push_back(body);
        const double r = 0.45;
        const std::array<std::array<double, 3>, 6> centers{{{r, 0, 0},
                                                            {-r, 0, 0},
                                                            {0, r, 0},
                                                            {0, -r, 0},
                                                            {0, 0, r},
                                                            {0, 0, -r}}};
        // volumes step ~1.6x so every structure is identifiable from local
        // shape alone, without seeing where it sits in the whole phantom
        const std::array<std::array<double, 3>, 6> axes{{{0.10, 0.08, 0.08},
                                                         {0.13, 0.11, 0.10},
                                                         {0.11, 0.16, 0.12},
                                                         {0.13, 0.19, 0.14},
                                                         {0.14, 0.15, 0.19},
                                                         {0.16, 0.18, 0.22}}};
        for (int i = 0; i < 6; ++i) {
            StructureSpec st;
            st.center_base = centers[static_cast<size_t>(i)];
            st.axes_base = axes[static_cast<size_t>(i)];
            s.structures.push_back(st);
        }
        // modality A: evenly spread means under a weak gain field, so its
        // classes separate on intensity alone; modality B: near-tied means
        // under a strong gain field, so B needs shape context to disambiguate
        ModalityAppearance a;
        a.class_means = {0.05, 0.18, 0.31, 0.44, 0.57, 0.70, 0.83, 0.96};
        a.noise_std = 0.02;
        a.bias_amplitude = 0.05;
        a.bias_freq = 1.0;
        ModalityAppearance b;
        b.class_means = {0.30, 0.85, 0.10, 0.65, 0.36, 0.91, 0.56, 0.22};
        b.noise_std = 0.03;
        b.bias_amplitude = 0.15;
        b.bias_freq = 1.2;
        s.appearance = {a, b};
        return s;
    }

    void validate() const {
        if (num_structures < 1 || static_cast<int64_t>(structures.size()) != num_structures)
            throw std::invalid_argument("phantom spec: need one structure spec per structure");
        if (size < 8) throw std::invalid_argument("phantom spec: size too small");
        if (appearance.size() < 1) throw std::invalid_argument("phantom spec: no modality appearance");
        for (const auto& ap : appearance) {
            if (static_cast<int64_t>(ap.class_means.size()) != num_classes())
                throw std::invalid_argument("phantom spec: class mean table size mismatch");
            for (double m : ap.class_means)
                if (m < 0.0 || m > 1.0) throw std::invalid_argument("phantom spec: class means must be in [0,1]");
            if (ap.noise_std < 0.0 || ap.bias_amplitude < 0.0 || ap.bias_freq <= 0.0)
                throw std::invalid_argument("phantom spec: bad appearance parameters");
        }
        for (size_t i = 0; i + 1 < appearance.size(); ++i)
            for (size_t j = i + 1; j < appearance.size(); ++j)
                for (int64_t c = 0; c < num_classes(); ++c)
                    if (std::abs(appearance[i].class_means[static_cast<size_t>(c)] -
                                 appearance[j].class_means[static_cast<size_t>(c)]) < min_separation)
                        throw std::invalid_argument("phantom spec: modality tables closer than min separation");
        for (const auto& st : structures)
            for (double a : st.axes_base)
                if (a - st.axes_jitter <= 0.0)
                    throw std::invalid_argument("phantom spec: structure axes can degenerate");
    }
};

namespace detail {

using Mat3 = std::array<std::array<double, 3>, 3>;

inline Mat3 euler_rotation(double az, double ay, double ax) {
    double cz = std::cos(az), sz = std::sin(az);
    double cy = std::cos(ay), sy = std::sin(ay);
    double cx = std::cos(ax), sx = std::sin(ax);
    Mat3 r;
    r[0] = {cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx};
    r[1] = {sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx};
    r[2] = {-sy, cy * sx, cy * cx};
    return r;
}

struct PlacedStructure {
    std::array<double, 3> center;
    std::array<double, 3> axes;
};

} // namespace detail

// Deterministic in (seed, spec, m). Label = highest-index structure containing
// the voxel; intensity = class mean * bias field + noise, clamped to [0, 1].
inline std::pair<Volume, LabelMap> generate_phantom(uint64_t seed, const PhantomSpec& spec, int64_t m) {
    spec.validate();
    if (m < 0 || m >= static_cast<int64_t>(spec.appearance.size()))
        throw ModalityError("generate_phantom: modality " + std::to_string(m) + " has no appearance table");
    const int64_t n = spec.size;
    const double half = static_cast<double>(n) / 2.0;
    const auto& ap = spec.appearance[static_cast<size_t>(m)];

    Volume vol;
    vol.dims = {n, n, n};
    vol.modality = static_cast<uint32_t>(m);
    vol.intensities.resize(static_cast<size_t>(n * n * n));
    LabelMap lab;
    lab.dims = vol.dims;
    lab.classes.assign(vol.intensities.size(), 0);

    std::vector<int64_t> counts;
    for (int attempt = 0; attempt < 10; ++attempt) {
        Rng rng(derive_seed(seed, static_cast<uint64_t>(m), static_cast<uint64_t>(attempt)));
        detail::Mat3 rot = detail::euler_rotation(rng.uniform(-spec.rot_jitter, spec.rot_jitter),
                                                  rng.uniform(-spec.rot_jitter, spec.rot_jitter),
                                                  rng.uniform(-spec.rot_jitter, spec.rot_jitter));
        std::array<double, 3> trans{rng.uniform(-spec.trans_jitter, spec.trans_jitter),
                                    rng.uniform(-spec.trans_jitter, spec.trans_jitter),
                                    rng.uniform(-spec.trans_jitter, spec.trans_jitter)};
        std::vector<detail::PlacedStructure> placed;
        for (const auto& st : spec.structures) {
            detail::PlacedStructure p;
            std::array<double, 3> c; // body-frame center with jitter
            for (int i = 0; i < 3; ++i)
                c[static_cast<size_t>(i)] = st.center_base[static_cast<size_t>(i)] +
                                            rng.uniform(-st.center_jitter, st.center_jitter);
            for (int i = 0; i < 3; ++i)
                p.center[static_cast<size_t>(i)] = rot[static_cast<size_t>(i)][0] * c[0] +
                                                   rot[static_cast<size_t>(i)][1] * c[1] +
                                                   rot[static_cast<size_t>(i)][2] * c[2] +
                                                   trans[static_cast<size_t>(i)];
            for (int i = 0; i < 3; ++i)
                p.axes[static_cast<size_t>(i)] = st.axes_base[static_cast<size_t>(i)] +
                                                 rng.uniform(-st.axes_jitter, st.axes_jitter);
            placed.push_back(p);
        }

        counts.assign(static_cast<size_t>(spec.num_classes()), 0);
        size_t o = 0;
        for (int64_t z = 0; z < n; ++z) {
            double pz = (static_cast<double>(z) - (static_cast<double>(n) - 1.0) / 2.0) / half;
            for (int64_t y = 0; y < n; ++y) {
                double py = (static_cast<double>(y) - (static_cast<double>(n) - 1.0) / 2.0) / half;
                for (int64_t x = 0; x < n; ++x, ++o) {
                    double px = (static_cast<double>(x) - (static_cast<double>(n) - 1.0) / 2.0) / half;
                    uint8_t cls = 0;
                    for (size_t s = 0; s < placed.size(); ++s) {
                        const auto& p = placed[s];
                        // rotate the offset back into the structure frame
                        double dx = px - p.center[0], dy = py - p.center[1], dz = pz - p.center[2];
                        double ux = rot[0][0] * dx + rot[1][0] * dy + rot[2][0] * dz;
                        double uy = rot[0][1] * dx + rot[1][1] * dy + rot[2][1] * dz;
                        double uz = rot[0][2] * dx + rot[1][2] * dy + rot[2][2] * dz;
                        double q = ux * ux / (p.axes[0] * p.axes[0]) + uy * uy / (p.axes[1] * p.axes[1]) +
                                   uz * uz / (p.axes[2] * p.axes[2]);
                        if (q <= 1.0) cls = static_cast<uint8_t>(s + 1);
                    }
                    lab.classes[o] = cls;
                    ++counts[cls];
                }
            }
        }
        bool degenerate = false;
        for (int64_t c = 1; c < spec.num_classes(); ++c)
            if (counts[static_cast<size_t>(c)] == 0) degenerate = true;
        if (!degenerate) {
            // appearance pass continues the same stream
            std::array<std::array<double, 4>, 3> waves; // per product: fz, fy, fx, phase
            for (auto& wv : waves) {
                for (int i = 0; i < 3; ++i) wv[static_cast<size_t>(i)] = rng.uniform(0.2, ap.bias_freq);
                wv[3] = rng.uniform(0.0, 2.0 * 3.141592653589793);
            }
            o = 0;
            for (int64_t z = 0; z < n; ++z) {
                double pz = static_cast<double>(z) / static_cast<double>(n);
                for (int64_t y = 0; y < n; ++y) {
                    double py = static_cast<double>(y) / static_cast<double>(n);
                    for (int64_t x = 0; x < n; ++x, ++o) {
                        double px = static_cast<double>(x) / static_cast<double>(n);
                        double s = 0.0;
                        for (const auto& wv : waves)
                            s += std::cos(2.0 * 3.141592653589793 * (wv[0] * pz + wv[3])) *
                                 std::cos(2.0 * 3.141592653589793 * (wv[1] * py + wv[3] * 0.5)) *
                                 std::cos(2.0 * 3.141592653589793 * (wv[2] * px + wv[3] * 0.25));
                        double bias = std::exp(ap.bias_amplitude * s / 3.0);
                        double base = ap.class_means[lab.classes[o]];
                        double noise = ap.noise_std > 0.0 ? ap.noise_std * rng.normal() : 0.0;
                        double v = base * bias + noise;
                        vol.intensities[o] = static_cast<float>(std::min(1.0, std::max(0.0, v)));
                    }
                }
            }
            return {vol, lab};
        }
    }
    throw std::runtime_error("generate_phantom: degenerate geometry after bounded retries");
}

struct ManifestEntry {
    std::string path; // relative to the manifest directory
    int64_t modality = 0;
    std::string split; // train | val | test
};

struct Manifest {
    uint64_t seed = 0;
    int64_t size = 0;
    int64_t num_classes = 0;
    int64_t num_modalities = 0;
    std::string root; // directory holding the files, set on read
    std::vector<ManifestEntry> entries;

    std::vector<ManifestEntry> select(const std::string& split, int64_t modality = -1) const {
        std::vector<ManifestEntry> out;
        for (const auto& e : entries)
            if (e.split == split && (modality < 0 || e.modality == modality)) out.push_back(e);
        return out;
    }

    std::string resolve(const ManifestEntry& e) const {
        return root.empty() ? e.path : root + "/" + e.path;
    }
};

inline void write_manifest(const std::string& path, const Manifest& m) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    f << "condseg-manifest v1\n";
    f << "seed " << m.seed << "\n";
    f << "size " << m.size << "\n";
    f << "classes " << m.num_classes << "\n";
    f << "modalities " << m.num_modalities << "\n";
    for (const auto& e : m.entries) f << "sample " << e.split << " " << e.modality << " " << e.path << "\n";
    if (!f) throw std::runtime_error("write failed: " + path);
}

inline Manifest read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open for read: " + path);
    Manifest m;
    m.root = std::filesystem::path(path).parent_path().string();
    std::string line;
    if (!std::getline(f, line) || line != "condseg-manifest v1")
        throw BadMagicError("manifest: bad header in " + path);
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream is(line);
        std::string key;
        is >> key;
        if (key == "seed")
            is >> m.seed;
        else if (key == "size")
            is >> m.size;
        else if (key == "classes")
            is >> m.num_classes;
        else if (key == "modalities")
            is >> m.num_modalities;
        else if (key == "sample") {
            ManifestEntry e;
            is >> e.split >> e.modality >> e.path;
            if (!is) throw TruncatedError("manifest: malformed sample line: " + line);
            m.entries.push_back(e);
        } else {
            throw BadVersionError("manifest: unknown key " + key);
        }
    }
    return m;
}

struct DatasetCounts {
    int64_t train_a = 16, train_b = 8;
    int64_t val_a = 4, val_b = 4;
    int64_t test_a = 8, test_b = 8;
};

// Generates, normalizes, and writes every sample plus the manifest. Each
// sample's RNG is derived from (seed, modality, per-modality index), so the
// split layout is deterministic.
inline Manifest gen_dataset(const std::string& dir, uint64_t seed, const PhantomSpec& spec,
                            const DatasetCounts& counts) {
    spec.validate();
    if (spec.appearance.size() < 2)
        throw std::invalid_argument("gen_dataset: two modality appearance tables required");
    std::filesystem::create_directories(dir);
    Manifest m;
    m.seed = seed;
    m.size = spec.size;
    m.num_classes = spec.num_classes();
    m.num_modalities = 2;
    m.root = dir;

    std::array<int64_t, 2> next_index{0, 0};
    auto emit = [&](const std::string& split, int64_t modality, int64_t count) {
        for (int64_t i = 0; i < count; ++i) {
            int64_t idx = next_index[static_cast<size_t>(modality)]++;
            auto [vol, lab] =
                generate_phantom(derive_seed(seed, static_cast<uint64_t>(modality), static_cast<uint64_t>(idx)),
                                 spec, modality);
            vol = normalize_intensity(vol);
            char name[64];
            std::snprintf(name, sizeof(name), "%s_m%lld_%03lld.csg", split.c_str(),
                          static_cast<long long>(modality), static_cast<long long>(idx));
            write_volume(dir + "/" + name, vol, &lab);
            m.entries.push_back({name, modality, split});
        }
    };
    emit("train", 0, counts.train_a);
    emit("train", 1, counts.train_b);
    emit("val", 0, counts.val_a);
    emit("val", 1, counts.val_b);
    emit("test", 0, counts.test_a);
    emit("test", 1, counts.test_b);
    write_manifest(dir + "/manifest.txt", m);
    return m;
}

} // namespace condseg
