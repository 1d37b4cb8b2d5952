#pragma once

// Differentiable tensor operations: broadcasting elementwise arithmetic,
// matmul, reductions, shape movement, softmax family, GELU.
// All kernels are serial with a fixed accumulation order, so repeated runs
// are bit-identical.

#include <cmath>
#include <cstring>
#include <numeric>

#include "condseg/tensor.hpp"

namespace condseg {

// ---------------------------------------------------------------------------
// broadcasting helpers (trailing-dimension alignment)

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (size_t i = 0; i < rank; ++i) {
        int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError("broadcast: incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// strides of `in` viewed as shape `out` (0 on broadcast axes), out.size() >= in.size()
inline std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<int64_t> st(out.size(), 0);
    auto in_st = row_major_strides(in);
    size_t off = out.size() - in.size();
    for (size_t i = 0; i < in.size(); ++i) {
        if (in[i] == out[off + i])
            st[off + i] = in_st[i];
        else if (in[i] == 1)
            st[off + i] = 0;
        else
            throw ShapeError("broadcast: cannot view " + shape_str(in) + " as " + shape_str(out));
    }
    return st;
}

namespace detail {

// Apply f over the broadcast iteration space. Offsets for the innermost axis
// advance by the (possibly zero) trailing strides; outer coordinates are
// decomposed once per row.
template <class T, class F>
void binary_iter(const Shape& out_shape, const T* a, const std::vector<int64_t>& sa, const T* b,
                 const std::vector<int64_t>& sb, T* out, F f) {
    size_t rank = out_shape.size();
    if (rank == 0) {
        out[0] = f(a[0], b[0]);
        return;
    }
    int64_t inner = out_shape[rank - 1];
    int64_t sa_in = sa[rank - 1], sb_in = sb[rank - 1];
    int64_t outer = 1;
    for (size_t i = 0; i + 1 < rank; ++i) outer *= out_shape[i];
    for (int64_t o = 0; o < outer; ++o) {
        int64_t rem = o, offa = 0, offb = 0;
        for (size_t i = rank - 1; i-- > 0;) {
            int64_t c = rem % out_shape[i];
            rem /= out_shape[i];
            offa += c * sa[i];
            offb += c * sb[i];
        }
        T* po = out + o * inner;
        if (sa_in == 1 && sb_in == 1) {
            const T* pa = a + offa;
            const T* pb = b + offb;
            for (int64_t j = 0; j < inner; ++j) po[j] = f(pa[j], pb[j]);
        } else if (sa_in == 1 && sb_in == 0) {
            const T* pa = a + offa;
            T vb = b[offb];
            for (int64_t j = 0; j < inner; ++j) po[j] = f(pa[j], vb);
        } else if (sa_in == 0 && sb_in == 1) {
            T va = a[offa];
            const T* pb = b + offb;
            for (int64_t j = 0; j < inner; ++j) po[j] = f(va, pb[j]);
        } else {
            for (int64_t j = 0; j < inner; ++j) po[j] = f(a[offa + j * sa_in], b[offb + j * sb_in]);
        }
    }
}

} // namespace detail

// Sum `g` (of shape `gshape`) down to `target` shape: the gradient rule for a
// broadcast operand.
template <class T>
std::vector<T> reduce_to_shape(const std::vector<T>& g, const Shape& gshape, const Shape& target) {
    if (gshape == target) return g;
    std::vector<T> out(static_cast<size_t>(numel(target)), T(0));
    auto st = broadcast_strides(target, gshape);
    size_t rank = gshape.size();
    if (rank == 0) {
        out[0] = g[0];
        return out;
    }
    int64_t inner = gshape[rank - 1];
    int64_t s_in = st[rank - 1];
    int64_t outer = 1;
    for (size_t i = 0; i + 1 < rank; ++i) outer *= gshape[i];
    for (int64_t o = 0; o < outer; ++o) {
        int64_t rem = o, off = 0;
        for (size_t i = rank - 1; i-- > 0;) {
            int64_t c = rem % gshape[i];
            rem /= gshape[i];
            off += c * st[i];
        }
        const T* pg = g.data() + o * inner;
        if (s_in == 1) {
            T* po = out.data() + off;
            for (int64_t j = 0; j < inner; ++j) po[j] += pg[j];
        } else { // s_in == 0
            T acc = 0;
            for (int64_t j = 0; j < inner; ++j) acc += pg[j];
            out[off] += acc;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// elementwise binary ops

namespace detail {

template <class T, class Fwd, class BwdA, class BwdB>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, BwdA dfa, BwdB dfb) {
    Shape out_shape = broadcast_shape(a.shape(), b.shape());
    auto sa = broadcast_strides(a.shape(), out_shape);
    auto sb = broadcast_strides(b.shape(), out_shape);
    std::vector<T> out(static_cast<size_t>(numel(out_shape)));
    binary_iter(out_shape, a.data().data(), sa, b.data().data(), sb, out.data(), fwd);
    (void)name;

    Tensor<T> an = a, bn = b;
    return make_op<T>(
        out_shape, std::move(out), {a, b},
        [an, bn, out_shape, sa, sb, dfa, dfb](Node<T>& n) {
            const std::vector<T>& g = n.grad;
            const T* pa = an.data().data();
            const T* pb = bn.data().data();
            if (an.node()->requires_grad) {
                std::vector<T> ga(g.size());
                binary_iter(out_shape, pa, sa, pb, sb, ga.data(), dfa);
                for (size_t i = 0; i < g.size(); ++i) ga[i] *= g[i];
                an.node()->accumulate_grad(reduce_to_shape(ga, out_shape, an.shape()));
            }
            if (bn.node()->requires_grad) {
                std::vector<T> gb(g.size());
                binary_iter(out_shape, pa, sa, pb, sb, gb.data(), dfb);
                for (size_t i = 0; i < g.size(); ++i) gb[i] *= g[i];
                bn.node()->accumulate_grad(reduce_to_shape(gb, out_shape, bn.shape()));
            }
        });
}

} // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    for (T v : b.data())
        if (v == T(0)) throw NonFiniteError("div: zero divisor");
    return detail::binary_op<T>(
        "div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
        [](T x, T y) { return -x / (y * y); });
}

template <class T>
Tensor<T> pow(const Tensor<T>& a, const Tensor<T>& b) {
    for (size_t i = 0; i < b.data().size(); ++i) {
        double e = static_cast<double>(b.data()[i]);
        bool integral = e == std::floor(e);
        if (!integral) {
            for (T v : a.data())
                if (v < T(0)) throw NonFiniteError("pow: negative base with non-integer exponent");
            break;
        }
    }
    return detail::binary_op<T>(
        "pow", a, b, [](T x, T y) { return static_cast<T>(std::pow(x, y)); },
        [](T x, T y) { return static_cast<T>(y * std::pow(x, y - T(1))); },
        [](T x, T y) {
            if (x <= T(0)) return T(0); // d/dy undefined at x<=0; only reached when b requires grad
            return static_cast<T>(std::pow(x, y) * std::log(x));
        });
}

template <class T> Tensor<T> add(const Tensor<T>& a, T s) { return add(a, Tensor<T>::scalar(s)); }
template <class T> Tensor<T> sub(const Tensor<T>& a, T s) { return sub(a, Tensor<T>::scalar(s)); }
template <class T> Tensor<T> sub(T s, const Tensor<T>& a) { return sub(Tensor<T>::scalar(s), a); }
template <class T> Tensor<T> mul(const Tensor<T>& a, T s) { return mul(a, Tensor<T>::scalar(s)); }
template <class T> Tensor<T> div(const Tensor<T>& a, T s) { return div(a, Tensor<T>::scalar(s)); }
template <class T> Tensor<T> div(T s, const Tensor<T>& a) { return div(Tensor<T>::scalar(s), a); }
template <class T> Tensor<T> pow(const Tensor<T>& a, T s) { return pow(a, Tensor<T>::scalar(s)); }

template <class T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <class T> Tensor<T> operator+(const Tensor<T>& a, T s) { return add(a, s); }
template <class T> Tensor<T> operator-(const Tensor<T>& a, T s) { return sub(a, s); }
template <class T> Tensor<T> operator*(const Tensor<T>& a, T s) { return mul(a, s); }
template <class T> Tensor<T> operator/(const Tensor<T>& a, T s) { return div(a, s); }
template <class T> Tensor<T> operator*(T s, const Tensor<T>& a) { return mul(a, s); }
template <class T> Tensor<T> operator-(T s, const Tensor<T>& a) { return sub(s, a); }

template <class T>
Tensor<T> neg(const Tensor<T>& a) { return mul(a, T(-1)); }

// ---------------------------------------------------------------------------
// elementwise unary ops

namespace detail {

template <class T, class Fwd, class Bwd>
Tensor<T> unary_op(const char* name, const Tensor<T>& a, Fwd fwd, Bwd dfdx, bool check_finite) {
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.data()[i]);
    if (check_finite && !all_finite(out)) throw NonFiniteError(std::string(name) + ": non-finite result");
    Tensor<T> an = a;
    return make_op<T>(a.shape(), std::move(out), {a}, [an, dfdx](Node<T>& n) {
        if (!an.node()->requires_grad) return;
        std::vector<T> ga(n.grad.size());
        const T* x = an.data().data();
        const T* y = n.data.data();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] = n.grad[i] * dfdx(x[i], y[i]);
        an.node()->accumulate_grad(ga);
    });
}

} // namespace detail

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
    return detail::unary_op<T>(
        "exp", a, [](T x) { return static_cast<T>(std::exp(x)); }, [](T, T y) { return y; }, true);
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
    for (T v : a.data())
        if (v <= T(0)) throw NonFiniteError("log: non-positive input");
    return detail::unary_op<T>(
        "log", a, [](T x) { return static_cast<T>(std::log(x)); }, [](T x, T) { return T(1) / x; }, false);
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& a) {
    for (T v : a.data())
        if (v < T(0)) throw NonFiniteError("sqrt: negative input");
    return detail::unary_op<T>(
        "sqrt", a, [](T x) { return static_cast<T>(std::sqrt(x)); },
        [](T, T y) { return T(1) / (T(2) * y); }, false);
}

// exact-erf GELU
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    return detail::unary_op<T>(
        "gelu", a,
        [=](T x) {
            double xd = static_cast<double>(x);
            return static_cast<T>(0.5 * xd * (1.0 + std::erf(xd * inv_sqrt2)));
        },
        [=](T x, T) {
            double xd = static_cast<double>(x);
            double cdf = 0.5 * (1.0 + std::erf(xd * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * xd * xd);
            return static_cast<T>(cdf + xd * pdf);
        },
        false);
}

// ---------------------------------------------------------------------------
// GEMM kernels (row-major). Fixed accumulation order; the lane-split dot in
// gemm_nt keeps auto-vectorization available without -ffast-math.

template <class T>
void gemm_nn(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, bool accumulate) {
    if (!accumulate) std::memset(C, 0, static_cast<size_t>(M * N) * sizeof(T));
    for (int64_t i = 0; i < M; ++i) {
        T* c = C + i * N;
        const T* a = A + i * K;
        for (int64_t k = 0; k < K; ++k) {
            T av = a[k];
            const T* b = B + k * N;
            for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C[M,N] (+)= A[M,K] * B[N,K]^T
template <class T>
void gemm_nt(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, bool accumulate) {
    constexpr int64_t L = 16;
    for (int64_t i = 0; i < M; ++i) {
        const T* a = A + i * K;
        T* c = C + i * N;
        for (int64_t j = 0; j < N; ++j) {
            const T* b = B + j * K;
            T lanes[L] = {};
            int64_t k = 0;
            for (; k + L <= K; k += L)
                for (int64_t l = 0; l < L; ++l) lanes[l] += a[k + l] * b[k + l];
            T acc = 0;
            for (int64_t l = 0; l < L; ++l) acc += lanes[l];
            for (; k < K; ++k) acc += a[k] * b[k];
            if (accumulate)
                c[j] += acc;
            else
                c[j] = acc;
        }
    }
}

// C[M,N] (+)= A[K,M]^T * B[K,N]
template <class T>
void gemm_tn(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, bool accumulate) {
    if (!accumulate) std::memset(C, 0, static_cast<size_t>(M * N) * sizeof(T));
    for (int64_t k = 0; k < K; ++k) {
        const T* a = A + k * M;
        const T* b = B + k * N;
        for (int64_t i = 0; i < M; ++i) {
            T av = a[i];
            T* c = C + i * N;
            for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// matmul over the last two axes with broadcastable batch dims
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    const Shape& ash = a.shape();
    const Shape& bsh = b.shape();
    if (ash.size() < 2 || bsh.size() < 2)
        throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(ash) + " and " + shape_str(bsh));
    int64_t n = ash[ash.size() - 2], k = ash[ash.size() - 1];
    int64_t k2 = bsh[bsh.size() - 2], p = bsh[bsh.size() - 1];
    if (k != k2)
        throw ShapeError("matmul: inner dimensions differ: " + shape_str(ash) + " x " + shape_str(bsh));

    Shape abatch(ash.begin(), ash.end() - 2), bbatch(bsh.begin(), bsh.end() - 2);
    Shape obatch = broadcast_shape(abatch, bbatch);
    auto sa = broadcast_strides(abatch, obatch);
    auto sb = broadcast_strides(bbatch, obatch);
    int64_t nbatch = numel(obatch);

    Shape out_shape = obatch;
    out_shape.push_back(n);
    out_shape.push_back(p);
    std::vector<T> out(static_cast<size_t>(numel(out_shape)));

    auto batch_offsets = [](const Shape& obatch_, const std::vector<int64_t>& sa_,
                            const std::vector<int64_t>& sb_, int64_t idx, int64_t& offa, int64_t& offb) {
        int64_t rem = idx;
        offa = 0;
        offb = 0;
        for (size_t i = obatch_.size(); i-- > 0;) {
            int64_t c = rem % obatch_[i];
            rem /= obatch_[i];
            offa += c * sa_[i];
            offb += c * sb_[i];
        }
    };

    for (int64_t bi = 0; bi < nbatch; ++bi) {
        int64_t oa, ob;
        batch_offsets(obatch, sa, sb, bi, oa, ob);
        gemm_nn(n, p, k, a.data().data() + oa * n * k, b.data().data() + ob * k * p,
                out.data() + bi * n * p, false);
    }

    Tensor<T> an = a, bn = b;
    return make_op<T>(
        out_shape, std::move(out), {a, b},
        [an, bn, obatch, sa, sb, n, k, p, nbatch, batch_offsets](Node<T>& m) {
            const T* g = m.grad.data();
            if (an.node()->requires_grad) {
                an.node()->ensure_grad();
                T* ga = an.node()->grad.data();
                for (int64_t bi = 0; bi < nbatch; ++bi) {
                    int64_t oa, ob;
                    batch_offsets(obatch, sa, sb, bi, oa, ob);
                    // dA = dC * B^T, accumulated (handles broadcast batches)
                    gemm_nt(n, k, p, g + bi * n * p, bn.data().data() + ob * k * p, ga + oa * n * k, true);
                }
            }
            if (bn.node()->requires_grad) {
                bn.node()->ensure_grad();
                T* gb = bn.node()->grad.data();
                for (int64_t bi = 0; bi < nbatch; ++bi) {
                    int64_t oa, ob;
                    batch_offsets(obatch, sa, sb, bi, oa, ob);
                    // dB = A^T * dC
                    gemm_tn(k, p, n, an.data().data() + oa * n * k, g + bi * n * p, gb + ob * k * p, true);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// reductions

namespace detail {

inline std::vector<int> normalize_axes(const std::vector<int>& axes, size_t rank) {
    std::vector<int> out;
    for (int ax : axes) {
        int a = ax < 0 ? ax + static_cast<int>(rank) : ax;
        if (a < 0 || a >= static_cast<int>(rank))
            throw ShapeError("reduce: axis " + std::to_string(ax) + " out of range for rank " + std::to_string(rank));
        out.push_back(a);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

struct ReducePlan {
    Shape keep_shape;          // input shape with reduced axes set to 1
    std::vector<int64_t> out_strides_in; // for each input axis: stride into input
    std::vector<int64_t> red_sizes;
    std::vector<int64_t> red_strides;
    std::vector<int64_t> kept_sizes;
    std::vector<int64_t> kept_strides;
    int64_t count = 1; // reduced element count
};

inline ReducePlan make_reduce_plan(const Shape& in, const std::vector<int>& axes) {
    ReducePlan p;
    p.keep_shape = in;
    auto st = row_major_strides(in);
    std::vector<bool> reduced(in.size(), false);
    for (int a : axes) reduced[static_cast<size_t>(a)] = true;
    for (size_t i = 0; i < in.size(); ++i) {
        if (reduced[i]) {
            p.keep_shape[i] = 1;
            p.red_sizes.push_back(in[i]);
            p.red_strides.push_back(st[i]);
            p.count *= in[i];
        } else {
            p.kept_sizes.push_back(in[i]);
            p.kept_strides.push_back(st[i]);
        }
    }
    return p;
}

// iterate kept coordinates; for each output cell call fn(out_index, base_offset)
template <class Fn>
void for_each_out(const ReducePlan& p, Fn fn) {
    int64_t total = 1;
    for (int64_t s : p.kept_sizes) total *= s;
    for (int64_t o = 0; o < total; ++o) {
        int64_t rem = o, off = 0;
        for (size_t i = p.kept_sizes.size(); i-- > 0;) {
            int64_t c = rem % p.kept_sizes[i];
            rem /= p.kept_sizes[i];
            off += c * p.kept_strides[i];
        }
        fn(o, off);
    }
}

template <class Fn>
void for_each_red(const ReducePlan& p, int64_t base, Fn fn) {
    int64_t total = p.count;
    for (int64_t r = 0; r < total; ++r) {
        int64_t rem = r, off = base;
        for (size_t i = p.red_sizes.size(); i-- > 0;) {
            int64_t c = rem % p.red_sizes[i];
            rem /= p.red_sizes[i];
            off += c * p.red_strides[i];
        }
        fn(off);
    }
}

} // namespace detail

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape);

template <class T>
Tensor<T> sum(const Tensor<T>& a, const std::vector<int>& axes, bool keepdims = false) {
    auto ax = detail::normalize_axes(axes, a.shape().size());
    auto plan = detail::make_reduce_plan(a.shape(), ax);
    std::vector<T> out(static_cast<size_t>(numel(plan.keep_shape)), T(0));
    const T* x = a.data().data();
    detail::for_each_out(plan, [&](int64_t o, int64_t base) {
        T acc = 0;
        detail::for_each_red(plan, base, [&](int64_t off) { acc += x[off]; });
        out[o] = acc;
    });

    Tensor<T> an = a;
    Shape keep = plan.keep_shape;
    Tensor<T> res = make_op<T>(keep, std::move(out), {a}, [an, plan](Node<T>& n) {
        if (!an.node()->requires_grad) return;
        an.node()->ensure_grad();
        T* ga = an.node()->grad.data();
        const T* g = n.grad.data();
        detail::for_each_out(plan, [&](int64_t o, int64_t base) {
            T gv = g[o];
            detail::for_each_red(plan, base, [&](int64_t off) { ga[off] += gv; });
        });
    });
    if (keepdims) return res;
    Shape squeezed;
    std::vector<bool> reduced(a.shape().size(), false);
    for (int axis : ax) reduced[static_cast<size_t>(axis)] = true;
    for (size_t i = 0; i < a.shape().size(); ++i)
        if (!reduced[i]) squeezed.push_back(a.shape()[i]);
    return reshape(res, squeezed);
}

template <class T>
Tensor<T> mean(const Tensor<T>& a, const std::vector<int>& axes, bool keepdims = false) {
    auto ax = detail::normalize_axes(axes, a.shape().size());
    int64_t count = 1;
    for (int axis : ax) count *= a.shape()[static_cast<size_t>(axis)];
    return mul(sum(a, axes, keepdims), T(1) / static_cast<T>(count));
}

template <class T>
Tensor<T> max_reduce(const Tensor<T>& a, const std::vector<int>& axes, bool keepdims = false) {
    auto ax = detail::normalize_axes(axes, a.shape().size());
    auto plan = detail::make_reduce_plan(a.shape(), ax);
    std::vector<T> out(static_cast<size_t>(numel(plan.keep_shape)));
    auto argmax = std::make_shared<std::vector<int64_t>>(out.size());
    const T* x = a.data().data();
    detail::for_each_out(plan, [&](int64_t o, int64_t base) {
        T best = -std::numeric_limits<T>::infinity();
        int64_t bi = base;
        detail::for_each_red(plan, base, [&](int64_t off) {
            if (x[off] > best) {
                best = x[off];
                bi = off;
            }
        });
        out[o] = best;
        (*argmax)[static_cast<size_t>(o)] = bi;
    });

    Tensor<T> an = a;
    Tensor<T> res = make_op<T>(plan.keep_shape, std::move(out), {a}, [an, argmax](Node<T>& n) {
        if (!an.node()->requires_grad) return;
        an.node()->ensure_grad();
        for (size_t o = 0; o < argmax->size(); ++o) an.node()->grad[static_cast<size_t>((*argmax)[o])] += n.grad[o];
    });
    if (keepdims) return res;
    Shape squeezed;
    std::vector<bool> reduced(a.shape().size(), false);
    for (int axis : ax) reduced[static_cast<size_t>(axis)] = true;
    for (size_t i = 0; i < a.shape().size(); ++i)
        if (!reduced[i]) squeezed.push_back(a.shape()[i]);
    return reshape(res, squeezed);
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
    std::vector<int> axes(a.shape().size());
    std::iota(axes.begin(), axes.end(), 0);
    if (axes.empty()) return a;
    return sum(a, axes, false);
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
    return mul(sum_all(a), T(1) / static_cast<T>(a.size()));
}

// ---------------------------------------------------------------------------
// movement ops

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
    if (numel(new_shape) != a.size())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
    std::vector<T> out = a.data();
    Tensor<T> an = a;
    return make_op<T>(std::move(new_shape), std::move(out), {a}, [an](Node<T>& n) {
        if (!an.node()->requires_grad) return;
        an.node()->accumulate_grad(n.grad);
    });
}

template <class T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& perm) {
    size_t rank = a.shape().size();
    if (perm.size() != rank) throw ShapeError("permute: perm rank mismatch");
    std::vector<bool> used(rank, false);
    Shape out_shape(rank);
    for (size_t i = 0; i < rank; ++i) {
        int p = perm[i];
        if (p < 0 || p >= static_cast<int>(rank) || used[static_cast<size_t>(p)])
            throw ShapeError("permute: invalid permutation");
        used[static_cast<size_t>(p)] = true;
        out_shape[i] = a.shape()[static_cast<size_t>(p)];
    }
    auto in_st = row_major_strides(a.shape());
    // stride of output axis i in the input buffer
    std::vector<int64_t> gather_st(rank);
    for (size_t i = 0; i < rank; ++i) gather_st[i] = in_st[static_cast<size_t>(perm[i])];

    std::vector<T> out(a.data().size());
    const T* x = a.data().data();
    if (rank == 0) {
        out[0] = x[0];
    } else {
        int64_t inner = out_shape[rank - 1];
        int64_t s_in = gather_st[rank - 1];
        int64_t outer = 1;
        for (size_t i = 0; i + 1 < rank; ++i) outer *= out_shape[i];
        for (int64_t o = 0; o < outer; ++o) {
            int64_t rem = o, off = 0;
            for (size_t i = rank - 1; i-- > 0;) {
                int64_t c = rem % out_shape[i];
                rem /= out_shape[i];
                off += c * gather_st[i];
            }
            T* po = out.data() + o * inner;
            for (int64_t j = 0; j < inner; ++j) po[j] = x[off + j * s_in];
        }
    }

    std::vector<int> inv(rank);
    for (size_t i = 0; i < rank; ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);

    Tensor<T> an = a;
    return make_op<T>(out_shape, std::move(out), {a}, [an, inv, out_shape](Node<T>& n) {
        if (!an.node()->requires_grad) return;
        NoGradGuard ng;
        Tensor<T> g = Tensor<T>::from(out_shape, n.grad);
        Tensor<T> gp = permute(g, inv);
        an.node()->accumulate_grad(gp.data());
    });
}

// half-open [start, stop) ranges, one per axis
template <class T>
Tensor<T> slice(const Tensor<T>& a, const std::vector<std::pair<int64_t, int64_t>>& ranges) {
    size_t rank = a.shape().size();
    if (ranges.size() != rank) throw ShapeError("slice: ranges rank mismatch");
    Shape out_shape(rank);
    for (size_t i = 0; i < rank; ++i) {
        auto [s, e] = ranges[i];
        if (s < 0 || e > a.shape()[i] || s >= e)
            throw ShapeError("slice: invalid range on axis " + std::to_string(i));
        out_shape[i] = e - s;
    }
    auto in_st = row_major_strides(a.shape());
    std::vector<T> out(static_cast<size_t>(numel(out_shape)));
    const T* x = a.data().data();
    int64_t inner = rank ? out_shape[rank - 1] : 1;
    int64_t outer = numel(out_shape) / inner;
    for (int64_t o = 0; o < outer; ++o) {
        int64_t rem = o, off = 0;
        for (size_t i = rank >= 1 ? rank - 1 : 0; i-- > 0;) {
            int64_t c = rem % out_shape[i];
            rem /= out_shape[i];
            off += (c + ranges[i].first) * in_st[i];
        }
        off += rank ? ranges[rank - 1].first : 0;
        std::memcpy(out.data() + o * inner, x + off, static_cast<size_t>(inner) * sizeof(T));
    }

    Tensor<T> an = a;
    return make_op<T>(out_shape, std::move(out), {a}, [an, ranges, out_shape, in_st](Node<T>& n) {
        if (!an.node()->requires_grad) return;
        an.node()->ensure_grad();
        T* ga = an.node()->grad.data();
        size_t rank = out_shape.size();
        int64_t inner = rank ? out_shape[rank - 1] : 1;
        int64_t outer = static_cast<int64_t>(n.grad.size()) / inner;
        for (int64_t o = 0; o < outer; ++o) {
            int64_t rem = o, off = 0;
            for (size_t i = rank >= 1 ? rank - 1 : 0; i-- > 0;) {
                int64_t c = rem % out_shape[i];
                rem /= out_shape[i];
                off += (c + ranges[i].first) * in_st[i];
            }
            off += rank ? ranges[rank - 1].first : 0;
            const T* pg = n.grad.data() + o * inner;
            for (int64_t j = 0; j < inner; ++j) ga[off + j] += pg[j];
        }
    });
}

// drop axis 0 after selecting index i (used for e.g. per-modality bank rows)
template <class T>
Tensor<T> select0(const Tensor<T>& a, int64_t i) {
    if (a.shape().empty() || i < 0 || i >= a.shape()[0])
        throw ShapeError("select0: index " + std::to_string(i) + " out of range for " + shape_str(a.shape()));
    std::vector<std::pair<int64_t, int64_t>> ranges;
    ranges.emplace_back(i, i + 1);
    for (size_t d = 1; d < a.shape().size(); ++d) ranges.emplace_back(0, a.shape()[d]);
    Shape out(a.shape().begin() + 1, a.shape().end());
    return reshape(slice(a, ranges), out);
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    size_t rank = parts[0].shape().size();
    int ax = axis < 0 ? axis + static_cast<int>(rank) : axis;
    if (ax < 0 || ax >= static_cast<int>(rank)) throw ShapeError("concat: axis out of range");
    Shape out_shape = parts[0].shape();
    int64_t axis_total = 0;
    for (const auto& p : parts) {
        if (p.shape().size() != rank) throw ShapeError("concat: rank mismatch");
        for (size_t i = 0; i < rank; ++i)
            if (static_cast<int>(i) != ax && p.shape()[i] != out_shape[i])
                throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(out_shape));
        axis_total += p.shape()[static_cast<size_t>(ax)];
    }
    out_shape[static_cast<size_t>(ax)] = axis_total;

    int64_t inner = 1;
    for (size_t i = static_cast<size_t>(ax) + 1; i < rank; ++i) inner *= out_shape[i];
    int64_t outer = 1;
    for (size_t i = 0; i < static_cast<size_t>(ax); ++i) outer *= out_shape[i];

    std::vector<T> out(static_cast<size_t>(numel(out_shape)));
    int64_t out_block = axis_total * inner;
    int64_t written = 0;
    for (const auto& p : parts) {
        int64_t blk = p.shape()[static_cast<size_t>(ax)] * inner;
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + o * out_block + written, p.data().data() + o * blk,
                        static_cast<size_t>(blk) * sizeof(T));
        written += blk;
    }

    std::vector<Tensor<T>> parents = parts;
    std::vector<int64_t> blocks;
    for (const auto& p : parts) blocks.push_back(p.shape()[static_cast<size_t>(ax)] * inner);
    return make_op<T>(out_shape, std::move(out), parents,
                      [parents, blocks, outer, out_block](Node<T>& n) {
                          int64_t off = 0;
                          for (size_t pi = 0; pi < parents.size(); ++pi) {
                              const auto& p = parents[pi];
                              int64_t blk = blocks[pi];
                              if (p.node()->requires_grad) {
                                  p.node()->ensure_grad();
                                  T* gp = p.node()->grad.data();
                                  for (int64_t o = 0; o < outer; ++o) {
                                      const T* g = n.grad.data() + o * out_block + off;
                                      T* dst = gp + o * blk;
                                      for (int64_t j = 0; j < blk; ++j) dst[j] += g[j];
                                  }
                              }
                              off += blk;
                          }
                      });
}

// ---------------------------------------------------------------------------
// softmax family along one axis

namespace detail {

struct AxisPlan {
    int64_t outer, len, inner;
};

inline AxisPlan axis_plan(const Shape& s, int axis) {
    int ax = axis < 0 ? axis + static_cast<int>(s.size()) : axis;
    if (ax < 0 || ax >= static_cast<int>(s.size()))
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    AxisPlan p{1, s[static_cast<size_t>(ax)], 1};
    for (int i = 0; i < ax; ++i) p.outer *= s[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(ax) + 1; i < s.size(); ++i) p.inner *= s[i];
    return p;
}

} // namespace detail

template <class T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
    auto p = detail::axis_plan(a.shape(), axis);
    std::vector<T> out(a.data().size());
    const T* x = a.data().data();
    for (int64_t o = 0; o < p.outer; ++o) {
        for (int64_t i = 0; i < p.inner; ++i) {
            int64_t base = o * p.len * p.inner + i;
            T mx = x[base];
            for (int64_t j = 1; j < p.len; ++j) mx = std::max(mx, x[base + j * p.inner]);
            T denom = 0;
            for (int64_t j = 0; j < p.len; ++j) {
                T e = static_cast<T>(std::exp(static_cast<double>(x[base + j * p.inner] - mx)));
                out[static_cast<size_t>(base + j * p.inner)] = e;
                denom += e;
            }
            for (int64_t j = 0; j < p.len; ++j) out[static_cast<size_t>(base + j * p.inner)] /= denom;
        }
    }
    Tensor<T> an = a;
    return make_op<T>(a.shape(), std::move(out), {a}, [an, p](Node<T>& n) {
        if (!an.node()->requires_grad) return;
        an.node()->ensure_grad();
        T* ga = an.node()->grad.data();
        const T* y = n.data.data();
        const T* g = n.grad.data();
        for (int64_t o = 0; o < p.outer; ++o) {
            for (int64_t i = 0; i < p.inner; ++i) {
                int64_t base = o * p.len * p.inner + i;
                T dot = 0;
                for (int64_t j = 0; j < p.len; ++j) {
                    int64_t idx = base + j * p.inner;
                    dot += g[idx] * y[idx];
                }
                for (int64_t j = 0; j < p.len; ++j) {
                    int64_t idx = base + j * p.inner;
                    ga[idx] += y[idx] * (g[idx] - dot);
                }
            }
        }
    });
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& a, int axis) {
    auto p = detail::axis_plan(a.shape(), axis);
    std::vector<T> out(a.data().size());
    const T* x = a.data().data();
    for (int64_t o = 0; o < p.outer; ++o) {
        for (int64_t i = 0; i < p.inner; ++i) {
            int64_t base = o * p.len * p.inner + i;
            T mx = x[base];
            for (int64_t j = 1; j < p.len; ++j) mx = std::max(mx, x[base + j * p.inner]);
            T denom = 0;
            for (int64_t j = 0; j < p.len; ++j)
                denom += static_cast<T>(std::exp(static_cast<double>(x[base + j * p.inner] - mx)));
            T lse = mx + static_cast<T>(std::log(static_cast<double>(denom)));
            for (int64_t j = 0; j < p.len; ++j) {
                int64_t idx = base + j * p.inner;
                out[static_cast<size_t>(idx)] = x[idx] - lse;
            }
        }
    }
    Tensor<T> an = a;
    return make_op<T>(a.shape(), std::move(out), {a}, [an, p](Node<T>& n) {
        if (!an.node()->requires_grad) return;
        an.node()->ensure_grad();
        T* ga = an.node()->grad.data();
        const T* lsm = n.data.data();
        const T* g = n.grad.data();
        for (int64_t o = 0; o < p.outer; ++o) {
            for (int64_t i = 0; i < p.inner; ++i) {
                int64_t base = o * p.len * p.inner + i;
                T gsum = 0;
                for (int64_t j = 0; j < p.len; ++j) gsum += g[base + j * p.inner];
                for (int64_t j = 0; j < p.len; ++j) {
                    int64_t idx = base + j * p.inner;
                    ga[idx] += g[idx] - static_cast<T>(std::exp(static_cast<double>(lsm[idx]))) * gsum;
                }
            }
        }
    });
}

} // namespace condseg
