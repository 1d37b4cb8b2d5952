#pragma once

// 64-bit finite-difference verification of every differentiable operation and
// of the micro models end to end, shared by the gradcheck CLI command and the
// acceptance suite

#include "condseg/gradcheck.hpp"
#include "condseg/loss.hpp"
#include "condseg/models.hpp"

namespace condseg {

struct SuiteResult {
    std::string name;
    double max_rel_err = 0.0;
    double tol = 0.0;
    size_t checked = 0;
    bool ok = false;
};

namespace detail {

inline Tensor<double> gc_randn(Shape shape, Rng& rng, double scale = 1.0) {
    return Tensor<double>::randn(std::move(shape), rng, scale, true);
}

inline void run_check(std::vector<SuiteResult>& out, const std::string& name,
                      const std::function<Tensor<double>()>& build, std::vector<Tensor<double>> leaves,
                      double h, double tol) {
    auto rep = gradcheck<double>(build, std::move(leaves), h, tol);
    out.push_back({name, rep.max_rel_err, tol, rep.checked, rep.ok});
}

} // namespace detail

inline std::vector<SuiteResult> run_gradcheck_suite(bool include_models = true) {
    using detail::gc_randn;
    using detail::run_check;
    std::vector<SuiteResult> out;
    Rng rng(1234);
    const double hs = 1e-6, ts = 1e-6; // smooth scalar ops
    const double hm = 1e-3, tm = 1e-4; // compositions and models

    {
        auto a = gc_randn({3, 4}, rng);
        auto b = gc_randn({3, 4}, rng);
        run_check(out, "add", [&] { return sum_all(add(a, b)); }, {a, b}, hs, ts);
        run_check(out, "sub", [&] { return sum_all(sub(a, b)); }, {a, b}, hs, ts);
        run_check(out, "mul", [&] { return sum_all(mul(a, b)); }, {a, b}, hs, ts);
        run_check(out, "mul_scalar", [&] { return sum_all(mul(a, 1.7)); }, {a}, hs, ts);
    }
    {
        auto a = gc_randn({3, 4}, rng);
        auto b = Tensor<double>::from({3, 4}, std::vector<double>(12, 0.0), true);
        for (auto& v : b.data()) v = 1.5 + rng.uniform();
        run_check(out, "div", [&] { return sum_all(div(a, b)); }, {a, b}, hs, ts);
        run_check(out, "div_scalar", [&] { return sum_all(div(1.0, b)); }, {b}, hs, ts);
    }
    {
        auto a = gc_randn({2, 3, 4}, rng);
        auto b = gc_randn({1, 3, 1}, rng);
        run_check(out, "broadcast_add", [&] { return sum_all(add(a, b)); }, {a, b}, hs, ts);
        run_check(out, "broadcast_mul", [&] { return sum_all(mul(a, b)); }, {a, b}, hs, ts);
    }
    {
        auto a = Tensor<double>::from({8}, std::vector<double>(8, 0.0), true);
        for (auto& v : a.data()) v = 0.5 + rng.uniform();
        run_check(out, "pow", [&] { return sum_all(pow(a, 2.5)); }, {a}, hs, ts);
        run_check(out, "log", [&] { return sum_all(log(a)); }, {a}, hs, ts);
        run_check(out, "sqrt", [&] { return sum_all(sqrt(a)); }, {a}, hs, ts);
    }
    {
        auto a = gc_randn({8}, rng);
        run_check(out, "exp", [&] { return sum_all(exp(a)); }, {a}, hs, ts);
        run_check(out, "neg", [&] { return sum_all(mul(neg(a), a)); }, {a}, hs, ts);
        run_check(out, "gelu", [&] { return sum_all(mul(gelu(a), a)); }, {a}, hm, tm);
    }
    {
        auto a = gc_randn({2, 5}, rng);
        auto w = gc_randn({2, 5}, rng);
        run_check(out, "softmax", [&] { return sum_all(mul(softmax(a, 1), w)); }, {a, w}, hm, tm);
        run_check(out, "log_softmax", [&] { return sum_all(mul(log_softmax(a, 1), w)); }, {a, w}, hm, tm);
        run_check(out, "max_reduce", [&] { return sum_all(sub(a, max_reduce(a, {1}, true))); }, {a}, hs,
                  ts);
    }
    {
        auto a = gc_randn({3, 4}, rng);
        auto b = gc_randn({4, 2}, rng);
        run_check(out, "matmul", [&] { return sum_all(matmul(a, b)); }, {a, b}, hs, ts);
        auto bt = gc_randn({2, 5, 4, 3}, rng);
        auto ct = gc_randn({2, 5, 3, 2}, rng);
        run_check(out, "matmul_batched", [&] { return sum_all(matmul(bt, ct)); }, {bt, ct}, hs, ts);
    }
    {
        auto a = gc_randn({2, 3, 4}, rng);
        auto w = gc_randn({4, 3, 2}, rng);
        run_check(out, "permute", [&] { return sum_all(mul(permute(a, {2, 1, 0}), w)); }, {a, w}, hs, ts);
        auto w2 = gc_randn({24}, rng);
        run_check(out, "reshape", [&] { return sum_all(mul(reshape(a, {24}), w2)); }, {a, w2}, hs, ts);
        run_check(out, "slice", [&] { return sum_all(slice(a, {{0, 2}, {1, 3}, {0, 4}})); }, {a}, hs, ts);
        run_check(out, "select0", [&] { return sum_all(select0(a, 1)); }, {a}, hs, ts);
        auto b = gc_randn({2, 2, 4}, rng);
        run_check(out, "concat",
                  [&] { return sum_all(mul(concat(std::vector<Tensor<double>>{a, b}, 1), 0.7)); }, {a, b},
                  hs, ts);
    }
    {
        auto a = gc_randn({2, 3, 4}, rng);
        run_check(out, "sum_axes", [&] { return sum_all(mul(sum(a, {1}), 0.3)); }, {a}, hs, ts);
        run_check(out, "mean_axes", [&] { return sum_all(mul(mean(a, {0, 2}), 0.3)); }, {a}, hs, ts);
        run_check(out, "mean_all", [&] { return mean_all(mul(a, a)); }, {a}, hs, ts);
    }
    {
        auto x = gc_randn({2, 3, 4, 4, 4}, rng);
        auto n = gc_randn({2, 3, 5}, rng);
        run_check(out, "instance_norm", [&] { return sum_all(mul(instance_norm(x), x)); }, {x}, hm, tm);
        run_check(out, "instance_norm_tokens", [&] { return sum_all(mul(instance_norm_tokens(n), n)); },
                  {n}, hm, tm);
    }
    {
        auto x = gc_randn({2, 3, 4, 4, 4}, rng);
        auto cp = CinParams<double>::make(2, 3);
        Tensor<double> g = cp.gamma, b = cp.beta;
        for (auto& v : g.data()) v = 1.0 + 0.3 * rng.uniform();
        for (auto& v : b.data()) v = 0.2 * rng.uniform();
        run_check(out, "cin", [&] { return sum_all(mul(cin(x, 1, cp), x)); }, {x, g, b}, hm, tm);
        auto tk = gc_randn({2, 6, 3}, rng);
        run_check(out, "cin_tokens", [&] { return sum_all(mul(cin_tokens(tk, 0, cp), tk)); }, {tk, g, b},
                  hm, tm);
        auto ip = InParams<double>::make(3);
        Tensor<double> ig = ip.gamma, ib = ip.beta;
        run_check(out, "in_affine", [&] { return sum_all(mul(in_affine(x, ip), x)); }, {x, ig, ib}, hm, tm);
    }
    {
        auto x = gc_randn({1, 2, 5, 5, 5}, rng, 0.5);
        auto w = gc_randn({3, 2, 3, 3, 3}, rng, 0.3);
        auto b = gc_randn({3}, rng, 0.1);
        run_check(out, "conv3d", [&] { return mean_all(mul(conv3d(x, w, b, 1, 1), 0.5)); }, {x, w, b}, hm,
                  tm);
        run_check(out, "conv3d_stride2", [&] { return mean_all(conv3d(x, w, b, 2, 1)); }, {x, w, b}, hm, tm);
        auto wt = gc_randn({2, 3, 2, 2, 2}, rng, 0.3);
        run_check(out, "conv_transpose3d", [&] { return mean_all(conv_transpose3d(x, wt, b, 2, 0)); },
                  {x, wt, b}, hm, tm);
    }
    {
        auto logits = gc_randn({1, 3, 2, 2, 2}, rng);
        std::vector<uint8_t> labels(8);
        for (auto& l : labels) l = static_cast<uint8_t>(rng.uniform_int(0, 2));
        LossConfig lcfg;
        run_check(out, "dice_loss", [&] { return dice_loss(logits, labels, lcfg); }, {logits}, hm, tm);
        run_check(out, "focal_loss", [&] { return focal_loss(logits, labels, lcfg); }, {logits}, hm, tm);
        run_check(out, "combined_loss",
                  [&] { return combined_loss(logits, labels, lcfg).total; }, {logits}, hm, tm);
    }

    if (include_models) {
        {
            VitConfig vc;
            vc.num_classes = 2;
            vc.modalities = 2;
            vc.input_dims = {8, 8, 8};
            vc.patch = 4;
            vc.dim = 8;
            vc.depth = 1;
            vc.heads = 2;
            vc.mlp_ratio = 4;
            CVitUnetr<double> model(vc, 77);
            Rng drng(78);
            auto x = Tensor<double>::randn({1, 1, 8, 8, 8}, drng);
            std::vector<uint8_t> labels(512);
            for (auto& l : labels) l = static_cast<uint8_t>(drng.uniform_int(0, 1));
            LossConfig lcfg;
            std::vector<Tensor<double>> leaves;
            for (const auto& e : model.params().entries()) leaves.push_back(e.tensor);
            auto build = [&] {
                auto a = combined_loss(model.forward(x, 0), labels, lcfg).total;
                auto b = combined_loss(model.forward(x, 1), labels, lcfg).total;
                // the 0.1 scale keeps O(h^2) truncation of the central
                // difference below tol at h=1e-3; error is linear in the
                // scale while the smallest gradients stay ~1e9 above the
                // cancellation noise floor
                return mul(add(a, b), 0.1);
            };
            run_check(out, "cvit_micro_end_to_end", build, leaves, hm, tm);
        }
        {
            UnetConfig uc;
            uc.num_classes = 2;
            uc.modalities = 2;
            uc.widths = {4, 6, 8, 10};
            CondUNet<double> model(uc, 79);
            Rng drng(80);
            auto x = Tensor<double>::randn({1, 1, 16, 16, 16}, drng);
            std::vector<uint8_t> labels(4096);
            for (auto& l : labels) l = static_cast<uint8_t>(drng.uniform_int(0, 1));
            LossConfig lcfg;
            // full-parameter finite differences would dominate the budget, so
            // spot-check one tensor per layer kind
            std::vector<Tensor<double>> leaves;
            for (const auto& e : model.params().entries())
                if (e.name == "stem.w" || e.name == "enc0.n1.gamma" || e.name == "enc3.n2.beta" ||
                    e.name == "down1.b" || e.name == "up2.b" || e.name == "dec0.n1.gamma" ||
                    e.name == "head.b")
                    leaves.push_back(e.tensor);
            auto build = [&] {
                auto a = combined_loss(model.forward(x, 0), labels, lcfg).total;
                auto b = combined_loss(model.forward(x, 1), labels, lcfg).total;
                return add(a, b);
            };
            run_check(out, "cond_unet_micro_spot", build, leaves, hm, tm);
        }
    }
    return out;
}

inline bool suite_passed(const std::vector<SuiteResult>& results) {
    for (const auto& r : results)
        if (!r.ok) return false;
    return !results.empty();
}

} // namespace condseg
