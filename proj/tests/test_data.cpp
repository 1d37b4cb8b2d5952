#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "condseg/phantom.hpp"

using namespace condseg;
namespace fs = std::filesystem;

namespace {

// regularized upper incomplete gamma Q(a, x): series for x < a+1, Lentz
// continued fraction otherwise
double igamma_q(double a, double x) {
    if (x < 0.0 || a <= 0.0) throw std::invalid_argument("igamma_q domain");
    if (x == 0.0) return 1.0;
    double gln = std::lgamma(a);
    if (x < a + 1.0) {
        double ap = a, sum = 1.0 / a, del = sum;
        for (int i = 0; i < 500; ++i) {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if (std::abs(del) < std::abs(sum) * 1e-14) break;
        }
        return 1.0 - sum * std::exp(-x + a * std::log(x) - gln);
    }
    double b = x + 1.0 - a, c = 1e300, d = 1.0 / b, h = d;
    for (int i = 1; i <= 500; ++i) {
        double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < 1e-300) d = 1e-300;
        c = b + an / c;
        if (std::abs(c) < 1e-300) c = 1e-300;
        d = 1.0 / d;
        double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < 1e-14) break;
    }
    return std::exp(-x + a * std::log(x) - gln) * h;
}

double chi_square_p(const std::vector<int64_t>& observed, const std::vector<double>& expected) {
    double stat = 0.0;
    for (size_t i = 0; i < observed.size(); ++i) {
        double d = static_cast<double>(observed[i]) - expected[i];
        stat += d * d / expected[i];
    }
    double dof = static_cast<double>(observed.size()) - 1.0;
    return igamma_q(dof / 2.0, stat / 2.0);
}

fs::path test_dir() {
    auto p = fs::temp_directory_path() / "condseg_data_tests";
    fs::create_directories(p);
    return p;
}

Volume make_vol(Shape dims, uint64_t seed) {
    Volume v;
    v.dims = dims;
    v.intensities.resize(static_cast<size_t>(numel(dims)));
    Rng rng(seed);
    for (auto& x : v.intensities) x = static_cast<float>(rng.uniform());
    return v;
}

LabelMap make_labels(Shape dims, uint64_t seed, int64_t classes) {
    LabelMap l;
    l.dims = dims;
    l.classes.resize(static_cast<size_t>(numel(dims)));
    Rng rng(seed);
    for (auto& c : l.classes) c = static_cast<uint8_t>(rng.uniform_int(0, classes - 1));
    return l;
}

} // namespace

TEST_CASE("volume file round trip is bit exact") {
    auto dir = test_dir();
    Volume v = make_vol({5, 4, 3}, 1);
    v.spacing = {1.5f, 0.75f, 2.0f};
    v.modality = 1;
    LabelMap l = make_labels({5, 4, 3}, 2, 8);

    auto p = (dir / "roundtrip.csg").string();
    write_volume(p, v, &l);
    auto r = read_volume(p);
    CHECK(r.vol.dims == v.dims);
    CHECK(r.vol.spacing == v.spacing);
    CHECK(r.vol.modality == v.modality);
    CHECK(r.has_labels);
    CHECK(std::memcmp(r.vol.intensities.data(), v.intensities.data(), v.intensities.size() * 4) == 0);
    CHECK(r.labels.classes == l.classes);

    auto p2 = (dir / "nolabels.csg").string();
    write_volume(p2, v);
    auto r2 = read_volume(p2);
    CHECK_FALSE(r2.has_labels);
    CHECK(std::memcmp(r2.vol.intensities.data(), v.intensities.data(), v.intensities.size() * 4) == 0);
}

TEST_CASE("volume read distinguishes error kinds") {
    auto dir = test_dir();
    Volume v = make_vol({3, 3, 3}, 3);
    LabelMap l = make_labels({3, 3, 3}, 4, 4);
    auto good = (dir / "good.csg").string();
    write_volume(good, v, &l);

    auto corrupt = [&](const std::string& name, int64_t offset, char byte) {
        auto path = (dir / name).string();
        fs::copy_file(good, path, fs::copy_options::overwrite_existing);
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(offset);
        f.write(&byte, 1);
        return path;
    };
    CHECK_THROWS_AS(read_volume(corrupt("badmagic.csg", 0, 'X')), BadMagicError);
    CHECK_THROWS_AS(read_volume(corrupt("badversion.csg", 4, 9)), BadVersionError);

    auto shortpath = (dir / "short.csg").string();
    fs::copy_file(good, shortpath, fs::copy_options::overwrite_existing);
    fs::resize_file(shortpath, fs::file_size(shortpath) - 10);
    CHECK_THROWS_AS(read_volume(shortpath), TruncatedError);

    // header promises more voxels than the payload holds
    auto lying = (dir / "lying.csg").string();
    fs::copy_file(good, lying, fs::copy_options::overwrite_existing);
    {
        std::fstream f(lying, std::ios::in | std::ios::out | std::ios::binary);
        uint32_t big = 64;
        f.seekp(8);
        f.write(reinterpret_cast<const char*>(&big), 4);
    }
    CHECK_THROWS_AS(read_volume(lying), TruncatedError);

    CHECK_THROWS_AS(read_volume((dir / "missing.csg").string()), std::runtime_error);
}

TEST_CASE("normalize intensity endpoints and constant volume") {
    Volume v;
    v.dims = {1, 1, 2};
    v.intensities = {10.0f, 20.0f};
    auto n = normalize_intensity(v);
    CHECK(n.intensities[0] == 0.0f);
    CHECK(n.intensities[1] == 1.0f);

    Volume c;
    c.dims = {1, 1, 3};
    c.intensities = {7.0f, 7.0f, 7.0f};
    auto z = normalize_intensity(c);
    for (float x : z.intensities) CHECK(x == 0.0f);

    Volume r = make_vol({4, 4, 4}, 5);
    for (auto& x : r.intensities) x = 3.0f + 5.0f * x;
    auto nr = normalize_intensity(r);
    float lo = 1e30f, hi = -1e30f;
    for (float x : nr.intensities) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    CHECK(lo == 0.0f);
    CHECK(hi == 1.0f);

    Volume bad = c;
    bad.intensities[1] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(normalize_intensity(bad), NonFiniteError);
}

TEST_CASE("resample identity at target spacing is bit exact") {
    Volume v = make_vol({4, 5, 6}, 6);
    LabelMap l = make_labels({4, 5, 6}, 7, 8);
    auto [ov, ol] = resample_isotropic(v, l, 1.0);
    CHECK(std::memcmp(ov.intensities.data(), v.intensities.data(), v.intensities.size() * 4) == 0);
    CHECK(ol.classes == l.classes);
}

TEST_CASE("resample downsamples a linear ramp to sample centers") {
    Volume v;
    v.dims = {2, 2, 8};
    v.intensities.resize(32);
    LabelMap l;
    l.dims = v.dims;
    l.classes.resize(32);
    for (int64_t z = 0; z < 2; ++z)
        for (int64_t y = 0; y < 2; ++y)
            for (int64_t x = 0; x < 8; ++x) {
                v.intensities[static_cast<size_t>((z * 2 + y) * 8 + x)] = static_cast<float>(x);
                l.classes[static_cast<size_t>((z * 2 + y) * 8 + x)] = static_cast<uint8_t>(x);
            }
    auto [ov, ol] = resample_isotropic(v, l, 2.0);
    CHECK(ov.dims == Shape{1, 1, 4});
    CHECK(ov.spacing[0] == 2.0f);
    for (int64_t x = 0; x < 4; ++x) {
        CHECK(ov.intensities[static_cast<size_t>(x)] ==
              doctest::Approx(2.0 * static_cast<double>(x) + 0.5).epsilon(1e-6));
        CHECK(ol.classes[static_cast<size_t>(x)] == static_cast<uint8_t>(2 * x + 1)); // nearest to 2x+0.5
    }
}

TEST_CASE("augment identity and involution") {
    Volume v = make_vol({4, 5, 6}, 8);
    LabelMap l = make_labels({4, 5, 6}, 9, 8);
    auto [iv, il] = augment_with(v, l, 1.0, 0.0, {false, false, false});
    CHECK(std::memcmp(iv.intensities.data(), v.intensities.data(), v.intensities.size() * 4) == 0);
    CHECK(il.classes == l.classes);

    for (int axis = 0; axis < 3; ++axis) {
        std::array<bool, 3> f{axis == 0, axis == 1, axis == 2};
        auto [fv, fl] = augment_with(v, l, 1.0, 0.0, f);
        auto [bv, bl] = augment_with(fv, fl, 1.0, 0.0, f);
        CHECK(std::memcmp(bv.intensities.data(), v.intensities.data(), v.intensities.size() * 4) == 0);
        CHECK(bl.classes == l.classes);
    }
}

TEST_CASE("augment preserves class histogram and clamps intensities") {
    Volume v = make_vol({6, 6, 6}, 10);
    LabelMap l = make_labels({6, 6, 6}, 11, 8);
    std::vector<int64_t> before(8, 0);
    for (uint8_t c : l.classes) ++before[c];
    Rng rng(12);
    for (int iter = 0; iter < 10; ++iter) {
        auto [av, al] = augment(v, l, rng);
        std::vector<int64_t> after(8, 0);
        for (uint8_t c : al.classes) ++after[c];
        CHECK(after == before);
        for (float x : av.intensities) {
            CHECK(x >= 0.0f);
            CHECK(x <= 1.0f);
        }
    }
    Rng r1(13), r2(13);
    auto [a1, b1] = augment(v, l, r1);
    auto [a2, b2] = augment(v, l, r2);
    CHECK(std::memcmp(a1.intensities.data(), a2.intensities.data(), a1.intensities.size() * 4) == 0);
    CHECK(b1.classes == b2.classes);
}

TEST_CASE("crop of full size returns the whole volume") {
    Volume v = make_vol({5, 5, 5}, 14);
    LabelMap l = make_labels({5, 5, 5}, 15, 4);
    Rng rng(16);
    auto [cv, cl] = random_crop(v, l, 5, rng);
    CHECK(std::memcmp(cv.intensities.data(), v.intensities.data(), v.intensities.size() * 4) == 0);
    CHECK(cl.classes == l.classes);
    CHECK_THROWS_AS(random_crop(v, l, 6, rng), ShapeError);
}

TEST_CASE("crop keeps intensities and labels aligned") {
    Shape dims{9, 8, 7};
    Volume v;
    v.dims = dims;
    v.intensities.resize(static_cast<size_t>(numel(dims)));
    LabelMap l;
    l.dims = dims;
    l.classes.resize(v.intensities.size());
    for (int64_t i = 0; i < numel(dims); ++i) {
        v.intensities[static_cast<size_t>(i)] = static_cast<float>(i);
        l.classes[static_cast<size_t>(i)] = static_cast<uint8_t>(i % 251);
    }
    Rng rng(17);
    for (int iter = 0; iter < 20; ++iter) {
        auto [cv, cl] = random_crop(v, l, 4, rng);
        for (size_t i = 0; i < cv.intensities.size(); ++i) {
            auto src = static_cast<int64_t>(cv.intensities[i]);
            CHECK(cl.classes[i] == static_cast<uint8_t>(src % 251));
        }
    }
}

TEST_CASE("crop corners are uniform over valid offsets") {
    Shape dims{12, 10, 9};
    int64_t crop = 8;
    Volume v;
    v.dims = dims;
    v.intensities.resize(static_cast<size_t>(numel(dims)));
    LabelMap l;
    l.dims = dims;
    l.classes.assign(v.intensities.size(), 0);
    for (int64_t i = 0; i < numel(dims); ++i) v.intensities[static_cast<size_t>(i)] = static_cast<float>(i);

    int64_t vz = dims[0] - crop + 1, vy = dims[1] - crop + 1, vx = dims[2] - crop + 1;
    std::vector<int64_t> observed(static_cast<size_t>(vz * vy * vx), 0);
    Rng rng(18);
    const int64_t draws = 10000;
    for (int64_t i = 0; i < draws; ++i) {
        auto [cv, cl] = random_crop(v, l, crop, rng);
        auto corner = static_cast<int64_t>(cv.intensities[0]);
        int64_t cz = corner / (dims[1] * dims[2]);
        int64_t cy = corner / dims[2] % dims[1];
        int64_t cx = corner % dims[2];
        ++observed[static_cast<size_t>((cz * vy + cy) * vx + cx)];
    }
    std::vector<double> expected(observed.size(),
                                 static_cast<double>(draws) / static_cast<double>(observed.size()));
    CHECK(chi_square_p(observed, expected) > 0.01);
}

TEST_CASE("phantom generation is deterministic") {
    PhantomSpec spec = PhantomSpec::defaults();
    spec.size = 24;
    auto [v1, l1] = generate_phantom(99, spec, 0);
    auto [v2, l2] = generate_phantom(99, spec, 0);
    CHECK(std::memcmp(v1.intensities.data(), v2.intensities.data(), v1.intensities.size() * 4) == 0);
    CHECK(l1.classes == l2.classes);

    auto [v3, l3] = generate_phantom(99, spec, 1);
    CHECK(std::memcmp(v1.intensities.data(), v3.intensities.data(), v1.intensities.size() * 4) != 0);

    CHECK_THROWS_AS(generate_phantom(99, spec, 2), ModalityError);
}

TEST_CASE("noiseless phantom equals the class table") {
    PhantomSpec spec = PhantomSpec::defaults();
    spec.size = 24;
    for (auto& ap : spec.appearance) {
        ap.noise_std = 0.0;
        ap.bias_amplitude = 0.0;
    }
    for (int64_t m : {0, 1}) {
        auto [vol, lab] = generate_phantom(7, spec, m);
        const auto& table = spec.appearance[static_cast<size_t>(m)].class_means;
        for (size_t i = 0; i < vol.intensities.size(); ++i)
            REQUIRE(vol.intensities[i] == static_cast<float>(table[lab.classes[i]]));
    }
}

TEST_CASE("phantom class histogram matches analytic ellipsoid volumes") {
    PhantomSpec spec = PhantomSpec::defaults();
    spec.size = 64;
    for (auto& st : spec.structures) {
        st.center_jitter = 0.0;
        st.axes_jitter = 0.0;
    }
    const double pi = 3.141592653589793;
    const double unit = 32.0; // voxels per normalized unit at 64^3
    std::vector<double> ellipsoid(spec.structures.size());
    for (size_t s = 0; s < spec.structures.size(); ++s) {
        const auto& a = spec.structures[s].axes_base;
        ellipsoid[s] = 4.0 / 3.0 * pi * a[0] * a[1] * a[2] * unit * unit * unit;
    }
    // later structures overwrite the body, so its analytic count is the
    // difference; the inner six are disjoint and fully contained
    std::vector<double> analytic(ellipsoid);
    for (size_t s = 1; s < ellipsoid.size(); ++s) analytic[0] -= ellipsoid[s];

    for (uint64_t seed : {21, 22, 23}) {
        auto [vol, lab] = generate_phantom(seed, spec, 0);
        std::vector<int64_t> counts(static_cast<size_t>(spec.num_classes()), 0);
        for (uint8_t c : lab.classes) ++counts[c];
        for (size_t s = 0; s < analytic.size(); ++s) {
            double got = static_cast<double>(counts[s + 1]);
            CHECK(std::abs(got - analytic[s]) / analytic[s] < 0.05);
        }
    }
}

TEST_CASE("generated modalities keep the configured intensity gap") {
    PhantomSpec spec = PhantomSpec::defaults();
    spec.size = 32;
    auto [va, la] = generate_phantom(5, spec, 0);
    auto [vb, lb] = generate_phantom(5, spec, 1);
    for (int64_t c = 0; c < spec.num_classes(); ++c) {
        auto mean_of = [&](const Volume& v, const LabelMap& l) {
            double acc = 0.0;
            int64_t n = 0;
            for (size_t i = 0; i < l.classes.size(); ++i)
                if (l.classes[i] == c) {
                    acc += v.intensities[i];
                    ++n;
                }
            return acc / static_cast<double>(std::max<int64_t>(n, 1));
        };
        CHECK(std::abs(mean_of(va, la) - mean_of(vb, lb)) > 0.1);
    }
}

TEST_CASE("phantom spec validation rejects bad configs") {
    PhantomSpec spec = PhantomSpec::defaults();
    spec.appearance[0].class_means.pop_back();
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);

    spec = PhantomSpec::defaults();
    spec.appearance[1].class_means = spec.appearance[0].class_means;
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);

    spec = PhantomSpec::defaults();
    spec.structures[2].axes_base = {0.01, 0.01, 0.01};
    spec.structures[2].axes_jitter = 0.02;
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

TEST_CASE("dataset generation writes a deterministic manifest and files") {
    PhantomSpec spec = PhantomSpec::defaults();
    spec.size = 24;
    DatasetCounts counts;
    counts.train_a = 2;
    counts.train_b = 1;
    counts.val_a = 1;
    counts.val_b = 1;
    counts.test_a = 1;
    counts.test_b = 1;

    auto d1 = (test_dir() / "ds1").string();
    auto d2 = (test_dir() / "ds2").string();
    fs::remove_all(d1);
    fs::remove_all(d2);
    auto m1 = gen_dataset(d1, 42, spec, counts);
    auto m2 = gen_dataset(d2, 42, spec, counts);

    CHECK(m1.entries.size() == 7);
    CHECK(m1.select("train").size() == 3);
    CHECK(m1.select("train", 1).size() == 1);
    CHECK(m1.select("val").size() == 2);
    CHECK(m1.select("test").size() == 2);

    auto read_bytes = [](const std::string& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    };
    CHECK(read_bytes(d1 + "/manifest.txt") == read_bytes(d2 + "/manifest.txt"));
    for (const auto& e : m1.entries) CHECK(read_bytes(m1.resolve(e)) == read_bytes(d2 + "/" + e.path));

    auto loaded = read_manifest(d1 + "/manifest.txt");
    CHECK(loaded.seed == 42);
    CHECK(loaded.size == 24);
    CHECK(loaded.num_classes == 8);
    CHECK(loaded.entries.size() == 7);
    auto rr = read_volume(loaded.resolve(loaded.entries[0]));
    CHECK(rr.has_labels);
    CHECK(rr.vol.dims == Shape{24, 24, 24});
    // stored volumes are normalized
    float lo = 1e30f, hi = -1e30f;
    for (float x : rr.vol.intensities) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    CHECK(lo >= 0.0f);
    CHECK(hi <= 1.0f);
}

TEST_CASE("manifest read rejects malformed files") {
    auto dir = test_dir();
    auto bad = [&](const std::string& name, const std::string& content) {
        auto p = (dir / name).string();
        std::ofstream f(p);
        f << content;
        return p;
    };
    CHECK_THROWS_AS(read_manifest(bad("h.txt", "not-a-manifest\n")), BadMagicError);
    CHECK_THROWS_AS(read_manifest(bad("k.txt", "condseg-manifest v1\nbogus 3\n")), BadVersionError);
    CHECK_THROWS_AS(read_manifest(bad("s.txt", "condseg-manifest v1\nsample train\n")), TruncatedError);
}
