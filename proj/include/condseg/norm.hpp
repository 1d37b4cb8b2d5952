#pragma once

// Normalization layers: instance norm, conditional instance norm with
// per-modality affine banks, layer norm. Statistics use population variance
// with epsilon added inside the square root.

#include "condseg/ops.hpp"

namespace condseg {

inline constexpr double kNormEps = 1e-5;

namespace detail {

template <class T>
Tensor<T> normalize_core(const Tensor<T>& z, const std::vector<int>& stat_axes, double eps) {
    Tensor<T> mu = mean(z, stat_axes, true);
    Tensor<T> xc = sub(z, mu);
    Tensor<T> var = mean(mul(xc, xc), stat_axes, true);
    return div(xc, condseg::sqrt(add(var, static_cast<T>(eps))));
}

} // namespace detail

// layout (batch, channel, spatial...): statistics per (sample, channel) over
// all spatial axes
template <class T>
Tensor<T> instance_norm(const Tensor<T>& z, double eps = kNormEps) {
    if (z.shape().size() < 3)
        throw ShapeError("instance_norm: expected (batch, channel, spatial...), got " + shape_str(z.shape()));
    std::vector<int> axes;
    for (size_t i = 2; i < z.shape().size(); ++i) axes.push_back(static_cast<int>(i));
    return detail::normalize_core(z, axes, eps);
}

// token layout (batch, tokens, channels): statistics over the token axis per
// (sample, channel)
template <class T>
Tensor<T> instance_norm_tokens(const Tensor<T>& z, double eps = kNormEps) {
    if (z.shape().size() != 3)
        throw ShapeError("instance_norm_tokens: expected (batch, tokens, channels), got " +
                         shape_str(z.shape()));
    return detail::normalize_core(z, {1}, eps);
}

// Per-modality affine banks over instance statistics. gamma/beta are [M, C]
// leaves; only the selected bank row receives gradient.
template <class T>
struct CinParams {
    int64_t num_modalities = 1;
    int64_t channels = 0;
    Tensor<T> gamma; // [M, C]
    Tensor<T> beta;  // [M, C]
    double eps = kNormEps;

    static CinParams make(int64_t M, int64_t C, double eps = kNormEps) {
        if (M < 1 || C < 1) throw ShapeError("CinParams: M and C must be positive");
        CinParams p;
        p.num_modalities = M;
        p.channels = C;
        p.gamma = Tensor<T>::ones({M, C}, true);
        p.beta = Tensor<T>::zeros({M, C}, true);
        p.eps = eps;
        return p;
    }

    int64_t param_count() const { return 2 * num_modalities * channels; }

    void check_modality(int64_t m) const {
        if (m < 0 || m >= num_modalities)
            throw ModalityError("modality " + std::to_string(m) + " outside [0, " +
                                std::to_string(num_modalities) + ")");
    }
};

// volumetric layout (batch, channel, spatial...)
template <class T>
Tensor<T> cin(const Tensor<T>& z, int64_t m, const CinParams<T>& params) {
    params.check_modality(m);
    if (z.shape().size() < 3 || z.shape()[1] != params.channels)
        throw ShapeError("cin: expected channel axis of " + std::to_string(params.channels) + ", got " +
                         shape_str(z.shape()));
    Tensor<T> core = instance_norm(z, params.eps);
    Shape affine_shape{params.channels};
    for (size_t i = 2; i < z.shape().size(); ++i) affine_shape.push_back(1);
    Tensor<T> g = reshape(select0(params.gamma, m), affine_shape);
    Tensor<T> b = reshape(select0(params.beta, m), affine_shape);
    return add(mul(core, g), b);
}

// token layout (batch, tokens, channels): channels last, statistics over tokens
template <class T>
Tensor<T> cin_tokens(const Tensor<T>& z, int64_t m, const CinParams<T>& params) {
    params.check_modality(m);
    if (z.shape().size() != 3 || z.shape()[2] != params.channels)
        throw ShapeError("cin_tokens: expected (batch, tokens, " + std::to_string(params.channels) +
                         "), got " + shape_str(z.shape()));
    Tensor<T> core = instance_norm_tokens(z, params.eps);
    return add(mul(core, select0(params.gamma, m)), select0(params.beta, m));
}

// Unconditional affine instance norm (single gamma/beta pair, no modality
// banks). Deliberately a distinct type from CinParams so decoder norms never
// enter conditional-parameter accounting.
template <class T>
struct InParams {
    int64_t channels = 0;
    Tensor<T> gamma; // [C]
    Tensor<T> beta;  // [C]
    double eps = kNormEps;

    static InParams make(int64_t C, double eps = kNormEps) {
        if (C < 1) throw ShapeError("InParams: C must be positive");
        InParams p;
        p.channels = C;
        p.gamma = Tensor<T>::ones({C}, true);
        p.beta = Tensor<T>::zeros({C}, true);
        p.eps = eps;
        return p;
    }

    int64_t param_count() const { return 2 * channels; }
};

// volumetric layout (batch, channel, spatial...)
template <class T>
Tensor<T> in_affine(const Tensor<T>& z, const InParams<T>& params) {
    if (z.shape().size() < 3 || z.shape()[1] != params.channels)
        throw ShapeError("in_affine: expected channel axis of " + std::to_string(params.channels) + ", got " +
                         shape_str(z.shape()));
    Tensor<T> core = instance_norm(z, params.eps);
    Shape affine_shape{params.channels};
    for (size_t i = 2; i < z.shape().size(); ++i) affine_shape.push_back(1);
    return add(mul(core, reshape(params.gamma, affine_shape)), reshape(params.beta, affine_shape));
}

template <class T>
struct LnParams {
    int64_t dim = 0;
    Tensor<T> gamma; // [K]
    Tensor<T> beta;  // [K]
    double eps = kNormEps;

    static LnParams make(int64_t K, double eps = kNormEps) {
        if (K < 1) throw ShapeError("LnParams: K must be positive");
        LnParams p;
        p.dim = K;
        p.gamma = Tensor<T>::ones({K}, true);
        p.beta = Tensor<T>::zeros({K}, true);
        p.eps = eps;
        return p;
    }

    int64_t param_count() const { return 2 * dim; }
};

// statistics along the last (feature) axis of each token independently
template <class T>
Tensor<T> layer_norm(const Tensor<T>& z, const LnParams<T>& params) {
    if (z.shape().empty() || z.shape().back() != params.dim)
        throw ShapeError("layer_norm: expected trailing axis of " + std::to_string(params.dim) + ", got " +
                         shape_str(z.shape()));
    int last = static_cast<int>(z.shape().size()) - 1;
    Tensor<T> core = detail::normalize_core(z, {last}, params.eps);
    return add(mul(core, params.gamma), params.beta);
}

} // namespace condseg
