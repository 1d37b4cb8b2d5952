#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "condseg/conv.hpp"
#include "condseg/gradcheck.hpp"
#include "condseg/loss.hpp"

using namespace condseg;

namespace {

// saturated logits whose softmax is numerically the given hard labels
Tensor<double> hard_logits(const std::vector<uint8_t>& labels, Shape shape) {
    int64_t b = shape[0], c = shape[1];
    int64_t spatial = numel(shape) / (b * c);
    std::vector<double> v(static_cast<size_t>(numel(shape)), -30.0);
    for (int64_t i = 0; i < b; ++i)
        for (int64_t s = 0; s < spatial; ++s)
            v[static_cast<size_t>((i * c + labels[static_cast<size_t>(i * spatial + s)]) * spatial + s)] = 30.0;
    return Tensor<double>::from(shape, std::move(v));
}

Tensor<double> randn_logits(Shape shape, uint64_t seed, bool rg = false) {
    Rng rng(seed);
    std::vector<double> v(static_cast<size_t>(numel(shape)));
    for (auto& x : v) x = rng.normal();
    return Tensor<double>::from(shape, std::move(v), rg);
}

} // namespace

TEST_CASE("dice loss near zero for perfect prediction") {
    Rng rng(1);
    std::vector<uint8_t> labels(64);
    for (auto& l : labels) l = static_cast<uint8_t>(rng.uniform_int(0, 2));
    auto logits = hard_logits(labels, {1, 3, 4, 4, 4});
    LossConfig cfg;
    auto loss = dice_loss(logits, labels, cfg);
    CHECK(loss.item() < 1e-3);
    CHECK(loss.item() >= 0.0);
}

TEST_CASE("dice loss approaches one for disjoint prediction") {
    std::vector<uint8_t> labels(27, 2);
    std::vector<uint8_t> pred(27, 1);
    auto logits = hard_logits(pred, {1, 3, 3, 3, 3});
    LossConfig cfg;
    CHECK(dice_loss(logits, labels, cfg).item() > 0.999);
}

TEST_CASE("dice loss two-voxel overlap oracle") {
    // pred foreground {0,1}, gt foreground {1,2}: binary Dice 2*1/(2+2) = 0.5
    std::vector<uint8_t> gt{0, 1, 1, 0, 0, 0, 0, 0};
    std::vector<uint8_t> pr{1, 1, 0, 0, 0, 0, 0, 0};
    auto logits = hard_logits(pr, {1, 2, 2, 2, 2});
    LossConfig cfg;
    cfg.smooth = 0.0;
    CHECK(dice_loss(logits, gt, cfg).item() == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("dice loss matches count oracle over all binary 2x2x2 masks") {
    NoGradGuard ng;
    LossConfig cfg;
    const double s = cfg.smooth;
    for (int pm = 0; pm < 256; ++pm) {
        for (int gm = 0; gm < 256; ++gm) {
            std::vector<uint8_t> pred(8), gt(8);
            int np = 0, ngt = 0, ni = 0;
            for (int v = 0; v < 8; ++v) {
                pred[static_cast<size_t>(v)] = static_cast<uint8_t>((pm >> v) & 1);
                gt[static_cast<size_t>(v)] = static_cast<uint8_t>((gm >> v) & 1);
                np += pred[static_cast<size_t>(v)];
                ngt += gt[static_cast<size_t>(v)];
                ni += pred[static_cast<size_t>(v)] & gt[static_cast<size_t>(v)];
            }
            auto logits = hard_logits(pred, {1, 2, 2, 2, 2});
            double expect = 1.0 - (2.0 * ni + s) / (np + ngt + s);
            double got = dice_loss(logits, gt, cfg).item();
            REQUIRE(got == doctest::Approx(expect).epsilon(1e-9));
        }
    }
}

TEST_CASE("correcting a wrong voxel lowers the dice loss") {
    NoGradGuard ng;
    Rng rng(2);
    LossConfig cfg;
    for (int iter = 0; iter < 100; ++iter) {
        std::vector<uint8_t> gt(8), pred(8);
        for (auto& v : gt) v = static_cast<uint8_t>(rng.uniform_int(0, 1));
        for (auto& v : pred) v = static_cast<uint8_t>(rng.uniform_int(0, 1));
        std::vector<int> wrong;
        for (int v = 0; v < 8; ++v)
            if (pred[static_cast<size_t>(v)] != gt[static_cast<size_t>(v)]) wrong.push_back(v);
        if (wrong.empty()) continue;
        double before = dice_loss(hard_logits(pred, {1, 2, 2, 2, 2}), gt, cfg).item();
        int fix = wrong[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(wrong.size()) - 1))];
        pred[static_cast<size_t>(fix)] = gt[static_cast<size_t>(fix)];
        double after = dice_loss(hard_logits(pred, {1, 2, 2, 2, 2}), gt, cfg).item();
        CHECK(after < before);
    }
}

TEST_CASE("dice loss sums per class over the whole batch") {
    // batch of two volumes, foreground split across them
    std::vector<uint8_t> gt{1, 0, 0, 0, /* second sample */ 0, 1, 0, 0};
    std::vector<uint8_t> pr{1, 0, 0, 0, 0, 0, 0, 1};
    auto logits = hard_logits(pr, {2, 2, 1, 2, 2});
    LossConfig cfg;
    cfg.smooth = 0.0;
    // counts pooled over batch: inter 1, |p| 2, |g| 2
    CHECK(dice_loss(logits, gt, cfg).item() == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("focal single voxel direct oracle") {
    auto logits = Tensor<double>::from({1, 2, 1, 1, 1}, {std::log(0.9), std::log(0.1)});
    std::vector<uint8_t> labels{0};
    LossConfig cfg;
    double expect = 0.01 * (-std::log(0.9));
    CHECK(focal_loss(logits, labels, cfg).item() == doctest::Approx(expect).epsilon(1e-9));
    CHECK(focal_loss(logits, labels, cfg).item() == doctest::Approx(1.0536e-3).epsilon(1e-3));
}

TEST_CASE("focal with zero gamma equals cross entropy") {
    auto logits = randn_logits({2, 4, 3, 3, 3}, 3);
    Rng rng(4);
    std::vector<uint8_t> labels(54);
    for (auto& l : labels) l = static_cast<uint8_t>(rng.uniform_int(0, 3));
    LossConfig cfg;
    cfg.gamma = 0.0;
    double got = focal_loss(logits, labels, cfg).item();

    // naive cross entropy
    double ce = 0.0;
    const auto& v = logits.data();
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t s = 0; s < 27; ++s) {
            double mx = -1e300;
            for (int64_t c = 0; c < 4; ++c) mx = std::max(mx, v[static_cast<size_t>((b * 4 + c) * 27 + s)]);
            double denom = 0.0;
            for (int64_t c = 0; c < 4; ++c) denom += std::exp(v[static_cast<size_t>((b * 4 + c) * 27 + s)] - mx);
            uint8_t l = labels[static_cast<size_t>(b * 27 + s)];
            ce -= v[static_cast<size_t>((b * 4 + l) * 27 + s)] - mx - std::log(denom);
        }
    ce /= 54.0;
    CHECK(got == doctest::Approx(ce).epsilon(1e-6));
}

TEST_CASE("focal contribution vanishes at certainty") {
    auto logits = Tensor<double>::from({1, 2, 1, 1, 1}, {100.0, -100.0});
    std::vector<uint8_t> labels{0};
    LossConfig cfg;
    CHECK(focal_loss(logits, labels, cfg).item() == 0.0);
}

TEST_CASE("focal is monotone decreasing in the true-class probability") {
    LossConfig cfg;
    double prev = 1e300;
    for (double pt : {0.1, 0.25, 0.4, 0.55, 0.7, 0.85, 0.95}) {
        auto logits = Tensor<double>::from({1, 2, 1, 1, 1}, {std::log(pt), std::log(1.0 - pt)});
        std::vector<uint8_t> labels{0};
        double f = focal_loss(logits, labels, cfg).item();
        CHECK(f < prev);
        prev = f;
    }
}

TEST_CASE("focal applies per-class alpha weights") {
    auto logits = Tensor<double>::from({1, 2, 1, 1, 1}, {std::log(0.1), std::log(0.9)});
    std::vector<uint8_t> labels{1};
    LossConfig cfg;
    cfg.alpha = {0.3, 0.7};
    double expect = 0.7 * 0.01 * (-std::log(0.9));
    CHECK(focal_loss(logits, labels, cfg).item() == doctest::Approx(expect).epsilon(1e-9));
    cfg.alpha = {0.3};
    CHECK_THROWS_AS(focal_loss(logits, labels, cfg), ShapeError);
}

TEST_CASE("loss rejects out-of-range labels and bad shapes") {
    auto logits = randn_logits({1, 3, 2, 2, 2}, 5);
    std::vector<uint8_t> bad(8, 3);
    LossConfig cfg;
    CHECK_THROWS_AS(dice_loss(logits, bad, cfg), std::out_of_range);
    CHECK_THROWS_AS(focal_loss(logits, bad, cfg), std::out_of_range);
    std::vector<uint8_t> short_labels(7, 0);
    CHECK_THROWS_AS(dice_loss(logits, short_labels, cfg), ShapeError);
}

TEST_CASE("combined loss is the weighted sum of its parts") {
    auto logits = randn_logits({1, 3, 2, 2, 2}, 6);
    Rng rng(7);
    std::vector<uint8_t> labels(8);
    for (auto& l : labels) l = static_cast<uint8_t>(rng.uniform_int(0, 2));
    LossConfig cfg;
    cfg.lambda_dice = 2.0;
    cfg.lambda_focal = 3.0;
    auto parts = combined_loss(logits, labels, cfg);
    CHECK(parts.total.item() ==
          doctest::Approx(2.0 * parts.dice.item() + 3.0 * parts.focal.item()).epsilon(1e-12));

    cfg.lambda_dice = 0.0;
    cfg.lambda_focal = 1.0;
    auto focal_only = combined_loss(logits, labels, cfg);
    CHECK(focal_only.total.item() == doctest::Approx(focal_only.focal.item()).epsilon(1e-12));

    cfg.lambda_dice = 1.0;
    auto unit = combined_loss(logits, labels, cfg);
    CHECK(unit.total.item() == doctest::Approx(unit.dice.item() + unit.focal.item()).epsilon(1e-7));
}

TEST_CASE("combined loss gradcheck through a tiny conv model") {
    auto x = randn_logits({1, 2, 3, 3, 3}, 8, true);
    Rng rng(9);
    std::vector<double> wv(3 * 2 * 27);
    for (auto& v : wv) v = 0.3 * rng.normal();
    auto w = Tensor<double>::from({3, 2, 3, 3, 3}, std::move(wv), true);
    auto b = Tensor<double>::from({3}, {0.1, -0.2, 0.05}, true);
    std::vector<uint8_t> labels(27);
    for (auto& l : labels) l = static_cast<uint8_t>(rng.uniform_int(0, 2));
    LossConfig cfg;
    auto report = gradcheck<double>(
        [&]() { return combined_loss(conv3d(x, w, b, 1, 1), labels, cfg).total; }, {x, w, b}, 1e-3, 1e-4);
    CHECK(report.ok);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("dice metric basic oracles") {
    std::vector<uint8_t> a{1, 1, 0, 0};
    std::vector<uint8_t> b{0, 1, 1, 0};
    auto r = dice_metric(a, b, 2);
    CHECK(r.per_class[1] == doctest::Approx(0.5));
    CHECK(r.mean_foreground == doctest::Approx(0.5));

    auto same = dice_metric(b, b, 2);
    CHECK(same.per_class[0] == 1.0);
    CHECK(same.per_class[1] == 1.0);
    CHECK(same.mean_foreground == 1.0);
    CHECK(same.whole_foreground == 1.0);

    std::vector<uint8_t> none{0, 0, 0, 0};
    auto miss = dice_metric(none, b, 2);
    CHECK(miss.per_class[1] == 0.0);
    CHECK(miss.whole_foreground == 0.0);
}

TEST_CASE("dice metric absent-class convention and symmetry") {
    std::vector<uint8_t> a{1, 2, 0, 0, 1, 0};
    std::vector<uint8_t> b{1, 0, 2, 0, 2, 0};
    auto ab = dice_metric(a, b, 4);
    auto ba = dice_metric(b, a, 4);
    for (int c = 0; c < 4; ++c) CHECK(ab.per_class[static_cast<size_t>(c)] == ba.per_class[static_cast<size_t>(c)]);
    CHECK(ab.whole_foreground == ba.whole_foreground);
    CHECK(ab.per_class[3] == 1.0); // class 3 absent in both
    CHECK(ab.mean_foreground ==
          doctest::Approx((ab.per_class[1] + ab.per_class[2] + 1.0) / 3.0).epsilon(1e-12));

    // masks overlap although classes disagree
    std::vector<uint8_t> p{1, 0};
    std::vector<uint8_t> g{2, 0};
    auto r = dice_metric(p, g, 3);
    CHECK(r.per_class[1] == 0.0);
    CHECK(r.per_class[2] == 0.0);
    CHECK(r.whole_foreground == 1.0);

    CHECK_THROWS_AS(dice_metric(p, a, 3), ShapeError);
    std::vector<uint8_t> oob{5, 0};
    CHECK_THROWS_AS(dice_metric(oob, g, 3), std::out_of_range);
}
