#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "condseg/infer.hpp"
#include "condseg/trainer.hpp"

using namespace condseg;
namespace fs = std::filesystem;

namespace {

fs::path test_dir() {
    auto p = fs::temp_directory_path() / "condseg_infer_tests";
    fs::create_directories(p);
    return p;
}

std::string read_bytes(const std::string& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

// emits, for every window, a constant that encodes the call index; class c is
// offset by 10c so per-class planes stay distinguishable
class CallCounterModel : public Model<float> {
  public:
    explicit CallCounterModel(int64_t classes) : classes_(classes) {}
    Tensor<float> forward(const Tensor<float>& x, int64_t) override {
        const auto& s = x.shape();
        Shape out{s[0], classes_, s[2], s[3], s[4]};
        std::vector<float> v(static_cast<size_t>(numel(out)));
        int64_t vox = s[2] * s[3] * s[4];
        for (int64_t c = 0; c < classes_; ++c)
            for (int64_t i = 0; i < vox; ++i)
                v[static_cast<size_t>(c * vox + i)] = static_cast<float>(calls_ + 10 * c);
        ++calls_;
        return Tensor<float>::from(std::move(out), std::move(v));
    }
    ParamRegistry<float>& params() override { return reg_; }
    const ParamRegistry<float>& params() const override { return reg_; }
    int64_t num_modalities() const override { return 1; }
    int64_t num_classes() const override { return classes_; }
    std::string kind() const override { return "stub"; }
    int64_t divisor() const override { return 1; }
    std::unique_ptr<Model<float>> clone_with_modalities(int64_t) const override {
        return std::make_unique<CallCounterModel>(classes_);
    }
    int64_t calls() const { return calls_; }

  private:
    int64_t classes_;
    int64_t calls_ = 0;
    ParamRegistry<float> reg_;
};

// predicts class round(10 * intensity); an oracle when intensities encode labels
class IntensityOracleModel : public Model<float> {
  public:
    explicit IntensityOracleModel(int64_t classes) : classes_(classes) {}
    Tensor<float> forward(const Tensor<float>& x, int64_t) override {
        const auto& s = x.shape();
        Shape out{s[0], classes_, s[2], s[3], s[4]};
        std::vector<float> v(static_cast<size_t>(numel(out)));
        int64_t vox = s[2] * s[3] * s[4];
        for (int64_t b = 0; b < s[0]; ++b)
            for (int64_t c = 0; c < classes_; ++c)
                for (int64_t i = 0; i < vox; ++i) {
                    float xi = x.data()[static_cast<size_t>(b * vox + i)];
                    v[static_cast<size_t>((b * classes_ + c) * vox + i)] =
                        -std::abs(10.0f * xi - static_cast<float>(c));
                }
        return Tensor<float>::from(std::move(out), std::move(v));
    }
    ParamRegistry<float>& params() override { return reg_; }
    const ParamRegistry<float>& params() const override { return reg_; }
    int64_t num_modalities() const override { return 1; }
    int64_t num_classes() const override { return classes_; }
    std::string kind() const override { return "stub"; }
    int64_t divisor() const override { return 1; }
    std::unique_ptr<Model<float>> clone_with_modalities(int64_t) const override {
        return std::make_unique<IntensityOracleModel>(classes_);
    }

  private:
    int64_t classes_;
    ParamRegistry<float> reg_;
};

Volume rand_vol(Shape dims, uint64_t seed) {
    Volume v;
    v.dims = dims;
    v.intensities.resize(static_cast<size_t>(numel(dims)));
    Rng rng(seed);
    for (auto& x : v.intensities) x = static_cast<float>(rng.uniform());
    return v;
}

} // namespace

TEST_CASE("window planning enumerates half-overlap offsets") {
    auto plan = plan_windows({64, 64, 64}, 32, 0.5);
    for (int axis = 0; axis < 3; ++axis)
        CHECK(plan.offsets[axis] == std::vector<int64_t>{0, 16, 32});
    CHECK(plan.num_windows() == 27);

    auto clamped = plan_windows({48, 64, 48}, 32, 0.5);
    CHECK(clamped.offsets[0] == std::vector<int64_t>{0, 16});
    CHECK(clamped.offsets[1] == std::vector<int64_t>{0, 16, 32});
    CHECK(clamped.offsets[2] == std::vector<int64_t>{0, 16});

    auto single = plan_windows({32, 32, 32}, 32, 0.5);
    for (int axis = 0; axis < 3; ++axis) CHECK(single.offsets[axis] == std::vector<int64_t>{0});

    auto disjoint = plan_windows({64, 64, 64}, 32, 0.0);
    for (int axis = 0; axis < 3; ++axis) CHECK(disjoint.offsets[axis] == std::vector<int64_t>{0, 32});

    CHECK_THROWS_AS(plan_windows({16, 64, 64}, 32, 0.5), ShapeError);
    CHECK_THROWS_AS(plan_windows({64, 64, 64}, 32, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(plan_windows({64, 64}, 32, 0.5), ShapeError);
}

TEST_CASE("window plans always cover every voxel") {
    Rng rng(3);
    for (int iter = 0; iter < 50; ++iter) {
        Shape dims{rng.uniform_int(9, 40), rng.uniform_int(9, 40), rng.uniform_int(9, 40)};
        int64_t w = rng.uniform_int(4, 9);
        double ov = rng.uniform(0.0, 0.9);
        auto plan = plan_windows(dims, w, ov);
        for (int axis = 0; axis < 3; ++axis) {
            const auto& offs = plan.offsets[axis];
            CHECK(offs.front() == 0);
            CHECK(offs.back() == dims[axis] - w);
            for (size_t i = 1; i < offs.size(); ++i) {
                CHECK(offs[i] > offs[i - 1]);
                CHECK(offs[i] - offs[i - 1] <= w); // no gap between consecutive windows
            }
        }
    }
}

TEST_CASE("single-window inference equals direct forward bit for bit") {
    UnetConfig uc;
    uc.num_classes = 4;
    uc.modalities = 2;
    uc.widths = {4, 6, 8, 10};
    CondUNet<float> model(uc, 5);
    Volume vol = rand_vol({16, 16, 16}, 6);
    auto plan = plan_windows(vol.dims, 16, 0.5);
    CHECK(plan.num_windows() == 1);

    auto res = sliding_infer(model, vol, 1, plan);
    NoGradGuard ngg;
    std::vector<float> buf(vol.intensities.begin(), vol.intensities.end());
    auto direct = model.forward(Tensor<float>::from({1, 1, 16, 16, 16}, std::move(buf)), 1);
    CHECK(res.logits.shape() == direct.shape());
    CHECK(std::memcmp(res.logits.data().data(), direct.data().data(), direct.data().size() * 4) == 0);

    for (size_t i = 0; i < res.labels.classes.size(); ++i) {
        int64_t vox = 16 * 16 * 16;
        float best = direct.data()[i];
        uint8_t arg = 0;
        for (int64_t c = 1; c < 4; ++c)
            if (direct.data()[static_cast<size_t>(c * vox) + i] > best) {
                best = direct.data()[static_cast<size_t>(c * vox) + i];
                arg = static_cast<uint8_t>(c);
            }
        REQUIRE(res.labels.classes[i] == arg);
    }
}

TEST_CASE("constant stub yields a constant label map under any plan") {
    IntensityOracleModel model(3); // constant volume -> constant prediction
    Volume vol;
    vol.dims = {12, 10, 8};
    vol.intensities.assign(static_cast<size_t>(numel(vol.dims)), 0.2f); // class 2 wins
    for (double ov : {0.0, 0.25, 0.5}) {
        auto res = sliding_infer(model, vol, 0, plan_windows(vol.dims, 6, ov));
        for (uint8_t c : res.labels.classes) REQUIRE(c == 2);
    }
}

TEST_CASE("overlap averaging matches the hand computation") {
    CallCounterModel model(2);
    Volume vol = rand_vol({4, 4, 6}, 7);
    auto plan = plan_windows(vol.dims, 4, 0.5);
    CHECK(plan.offsets[2] == std::vector<int64_t>{0, 2});
    CHECK(plan.num_windows() == 2);

    auto res = sliding_infer(model, vol, 0, plan);
    CHECK(model.calls() == 2);
    // window 0 emits 0, window 1 emits 1 (plus 10 per class); x in [2,4) is
    // covered by both
    int64_t vox = 4 * 4 * 6;
    for (int64_t c = 0; c < 2; ++c)
        for (int64_t z = 0; z < 4; ++z)
            for (int64_t y = 0; y < 4; ++y)
                for (int64_t x = 0; x < 6; ++x) {
                    float got = res.logits.data()[static_cast<size_t>(c * vox + (z * 4 + y) * 6 + x)];
                    float base = static_cast<float>(10 * c);
                    float want = x < 2 ? base : x < 4 ? base + 0.5f : base + 1.0f;
                    REQUIRE(got == want);
                }
    for (uint8_t c : res.labels.classes) REQUIRE(c == 1);
}

TEST_CASE("plan and volume dims must agree") {
    IntensityOracleModel model(2);
    Volume vol = rand_vol({8, 8, 8}, 9);
    auto plan = plan_windows({10, 8, 8}, 8, 0.5);
    CHECK_THROWS_AS(sliding_infer(model, vol, 0, plan), ShapeError);
}

TEST_CASE("oracle model scores perfect dice through validate_model") {
    SampleSet data;
    Rng rng(11);
    for (int64_t m = 0; m < 2; ++m) {
        Volume v;
        v.dims = {12, 12, 12};
        v.modality = static_cast<uint32_t>(m);
        v.intensities.resize(12 * 12 * 12);
        LabelMap l;
        l.dims = v.dims;
        l.classes.resize(v.intensities.size());
        for (size_t i = 0; i < v.intensities.size(); ++i) {
            auto c = static_cast<uint8_t>(rng.uniform_int(0, 3));
            l.classes[i] = c;
            v.intensities[i] = static_cast<float>(c) / 10.0f; // intensity encodes the label
        }
        data.by_modality[m].push_back(data.vols.size());
        data.vols.push_back(std::move(v));
        data.labels.push_back(std::move(l));
        data.modality.push_back(m);
    }

    IntensityOracleModel oracle(4);
    auto rows = validate_model<float>(oracle, data, 8, 0.5);
    REQUIRE(rows.size() == 2);
    for (const auto& r : rows) {
        CHECK(r.mean_dice == 1.0);
        CHECK(r.whole_foreground == 1.0);
        for (double d : r.per_class) CHECK(d == 1.0);
    }

    // all-background stub: foreground dice collapses to zero
    IntensityOracleModel bg(4);
    for (auto& v : data.vols) for (auto& x : v.intensities) x = 0.0f;
    auto zrows = validate_model<float>(bg, data, 8, 0.5);
    for (const auto& r : zrows) {
        CHECK(r.mean_dice == 0.0);
        CHECK(r.whole_foreground == 0.0);
    }
}

TEST_CASE("validate rows agree with the metric computed directly") {
    UnetConfig uc;
    uc.num_classes = 4;
    uc.modalities = 1;
    uc.widths = {4, 6, 8, 10};
    CondUNet<float> model(uc, 13);

    SampleSet data;
    Volume v = rand_vol({16, 16, 16}, 14);
    LabelMap l;
    l.dims = v.dims;
    l.classes.resize(v.intensities.size());
    Rng rng(15);
    for (auto& c : l.classes) c = static_cast<uint8_t>(rng.uniform_int(0, 3));
    data.by_modality[0].push_back(0);
    data.vols.push_back(v);
    data.labels.push_back(l);
    data.modality.push_back(0);

    auto rows = validate_model<float>(model, data, 8, 0.5);
    REQUIRE(rows.size() == 1);

    auto res = sliding_infer(model, v, 0, plan_windows(v.dims, 8, 0.5));
    auto dice = dice_metric(res.labels.classes, l.classes, 4);
    CHECK(rows[0].mean_dice == dice.mean_foreground);
    CHECK(rows[0].whole_foreground == dice.whole_foreground);
    for (size_t c = 0; c < rows[0].per_class.size(); ++c)
        CHECK(rows[0].per_class[c] == dice.per_class[c + 1]);
}

TEST_CASE("slice dump writes exact ppm bytes") {
    auto dir = (test_dir() / "slices").string();
    fs::remove_all(dir);
    Volume vol;
    vol.dims = {1, 2, 2};
    vol.intensities = {0.0f, 0.5f, 0.25f, 1.0f};
    LabelMap gt;
    gt.dims = vol.dims;
    gt.classes = {0, 1, 0, 2};

    dump_slices(vol, &gt, nullptr, 0, {0}, dir);

    std::string header = "P6\n2 2\n255\n";
    auto px = [](int r, int g, int b) {
        std::string s;
        s += static_cast<char>(r);
        s += static_cast<char>(g);
        s += static_cast<char>(b);
        return s;
    };
    CHECK(read_bytes(dir + "/slice_a0_i0_img.ppm") ==
          header + px(0, 0, 0) + px(128, 128, 128) + px(64, 64, 64) + px(255, 255, 255));
    CHECK(read_bytes(dir + "/slice_a0_i0_gt.ppm") ==
          header + px(0, 0, 0) + px(230, 60, 60) + px(64, 64, 64) + px(60, 160, 230));
    CHECK_FALSE(fs::exists(dir + "/slice_a0_i0_pred.ppm"));
}

TEST_CASE("empty labels overlay reduces to the grayscale image") {
    auto dir = (test_dir() / "slices_empty").string();
    fs::remove_all(dir);
    Volume vol = rand_vol({4, 5, 6}, 17);
    LabelMap empty;
    empty.dims = vol.dims;
    empty.classes.assign(vol.intensities.size(), 0);
    dump_slices(vol, &empty, &empty, 1, {2}, dir);
    auto img = read_bytes(dir + "/slice_a1_i2_img.ppm");
    CHECK(read_bytes(dir + "/slice_a1_i2_gt.ppm") == img);
    CHECK(read_bytes(dir + "/slice_a1_i2_pred.ppm") == img);
}

TEST_CASE("slice palette is stable across runs") {
    auto d1 = (test_dir() / "pal1").string();
    auto d2 = (test_dir() / "pal2").string();
    fs::remove_all(d1);
    fs::remove_all(d2);
    Volume vol = rand_vol({6, 6, 6}, 18);
    LabelMap l;
    l.dims = vol.dims;
    l.classes.resize(vol.intensities.size());
    Rng rng(19);
    for (auto& c : l.classes) c = static_cast<uint8_t>(rng.uniform_int(0, 7));
    dump_slices(vol, &l, &l, 2, {0, 3, 5}, d1);
    dump_slices(vol, &l, &l, 2, {0, 3, 5}, d2);
    for (const auto& e : fs::directory_iterator(d1)) {
        auto name = e.path().filename().string();
        CHECK(read_bytes(e.path().string()) == read_bytes(d2 + "/" + name));
    }
}

TEST_CASE("slice dump rejects bad indices") {
    Volume vol = rand_vol({4, 4, 4}, 20);
    auto dir = (test_dir() / "slices_err").string();
    CHECK_THROWS_AS(dump_slices(vol, nullptr, nullptr, 3, {0}, dir), std::out_of_range);
    CHECK_THROWS_AS(dump_slices(vol, nullptr, nullptr, 0, {4}, dir), std::out_of_range);
    CHECK_THROWS_AS(dump_slices(vol, nullptr, nullptr, 0, {-1}, dir), std::out_of_range);
    LabelMap wrong;
    wrong.dims = {4, 4, 5};
    wrong.classes.assign(80, 0);
    CHECK_THROWS_AS(dump_slices(vol, &wrong, nullptr, 0, {0}, dir), ShapeError);
}

TEST_CASE("cvit fixed-window inference matches direct forward") {
    VitConfig vc;
    vc.num_classes = 2;
    vc.modalities = 2;
    vc.input_dims = {8, 8, 8};
    vc.patch = 4;
    vc.dim = 8;
    vc.depth = 1;
    vc.heads = 2;
    vc.mlp_ratio = 2;
    CVitUnetr<float> model(vc, 21);
    Volume vol = rand_vol({8, 8, 8}, 22);
    auto res = sliding_infer(model, vol, 1, plan_windows(vol.dims, 8, 0.5));
    NoGradGuard ngg;
    std::vector<float> buf(vol.intensities.begin(), vol.intensities.end());
    auto direct = model.forward(Tensor<float>::from({1, 1, 8, 8, 8}, std::move(buf)), 1);
    CHECK(std::memcmp(res.logits.data().data(), direct.data().data(), direct.data().size() * 4) == 0);
}
