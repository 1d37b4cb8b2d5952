#pragma once

// 3D convolution and transposed convolution via im2col + GEMM.
// The col2im step is a gather (each destination voxel sums its own kernel
// contributions), which fixes the accumulation order.

#include <optional>

#include "condseg/ops.hpp"

namespace condseg {

namespace detail {

// col[C*k^3, Ds*Hs*Ws] from x[C, Dd*Hd*Wd]; mapping big = s*small - p + kpos,
// zero where the big index falls outside.
template <class T>
void im2col3d(const T* x, T* col, int64_t C, int64_t k, int64_t s, int64_t p, int64_t Dd, int64_t Hd,
              int64_t Wd, int64_t Ds, int64_t Hs, int64_t Ws) {
    int64_t Vs = Ds * Hs * Ws;
    int64_t row = 0;
    for (int64_t c = 0; c < C; ++c) {
        const T* xc = x + c * Dd * Hd * Wd;
        for (int64_t kd = 0; kd < k; ++kd)
            for (int64_t kh = 0; kh < k; ++kh)
                for (int64_t kw = 0; kw < k; ++kw, ++row) {
                    T* dst = col + row * Vs;
                    for (int64_t sd = 0; sd < Ds; ++sd) {
                        int64_t dd = sd * s - p + kd;
                        bool din = dd >= 0 && dd < Dd;
                        for (int64_t sh = 0; sh < Hs; ++sh) {
                            int64_t dh = sh * s - p + kh;
                            bool hin = din && dh >= 0 && dh < Hd;
                            T* d = dst + (sd * Hs + sh) * Ws;
                            if (!hin) {
                                std::memset(d, 0, static_cast<size_t>(Ws) * sizeof(T));
                                continue;
                            }
                            const T* src = xc + (dd * Hd + dh) * Wd;
                            for (int64_t sw = 0; sw < Ws; ++sw) {
                                int64_t dw = sw * s - p + kw;
                                d[sw] = (dw >= 0 && dw < Wd) ? src[dw] : T(0);
                            }
                        }
                    }
                }
    }
}

// dst[C, Dd*Hd*Wd] (+)= gather of col[C*k^3, Ds*Hs*Ws], same mapping as im2col3d
template <class T>
void col2im3d(const T* col, T* dst, int64_t C, int64_t k, int64_t s, int64_t p, int64_t Dd, int64_t Hd,
              int64_t Wd, int64_t Ds, int64_t Hs, int64_t Ws, bool accumulate) {
    int64_t Vs = Ds * Hs * Ws;
    for (int64_t c = 0; c < C; ++c) {
        const T* colc = col + c * k * k * k * Vs;
        T* out = dst + c * Dd * Hd * Wd;
        for (int64_t dd = 0; dd < Dd; ++dd)
            for (int64_t dh = 0; dh < Hd; ++dh)
                for (int64_t dw = 0; dw < Wd; ++dw) {
                    T acc = 0;
                    for (int64_t kd = 0; kd < k; ++kd) {
                        int64_t t = dd + p - kd;
                        if (t < 0 || t % s) continue;
                        int64_t sd = t / s;
                        if (sd >= Ds) continue;
                        for (int64_t kh = 0; kh < k; ++kh) {
                            int64_t u = dh + p - kh;
                            if (u < 0 || u % s) continue;
                            int64_t sh = u / s;
                            if (sh >= Hs) continue;
                            for (int64_t kw = 0; kw < k; ++kw) {
                                int64_t v = dw + p - kw;
                                if (v < 0 || v % s) continue;
                                int64_t sw = v / s;
                                if (sw >= Ws) continue;
                                acc += colc[((kd * k + kh) * k + kw) * Vs + (sd * Hs + sh) * Ws + sw];
                            }
                        }
                    }
                    int64_t idx = (dd * Hd + dh) * Wd + dw;
                    if (accumulate)
                        out[idx] += acc;
                    else
                        out[idx] = acc;
                }
    }
}

inline void check_conv_args(const Shape& xs, const Shape& ws, int stride, int padding) {
    if (xs.size() != 5) throw ShapeError("conv3d: input must be [B,C,D,H,W], got " + shape_str(xs));
    if (ws.size() != 5) throw ShapeError("conv3d: weight must be rank 5, got " + shape_str(ws));
    if (ws[2] != ws[3] || ws[3] != ws[4]) throw ShapeError("conv3d: kernel must be cubic, got " + shape_str(ws));
    if (stride < 1) throw ShapeError("conv3d: stride must be >= 1");
    if (padding < 0) throw ShapeError("conv3d: padding must be >= 0");
}

} // namespace detail

// x [B,Cin,D,H,W], w [Cout,Cin,k,k,k], out [B,Cout,Do,Ho,Wo] with
// O = (S + 2p - k) / s + 1 (floor).
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<std::optional<Tensor<T>>>& bias, int stride,
                 int padding) {
    detail::check_conv_args(x.shape(), w.shape(), stride, padding);
    int64_t B = x.shape()[0], Cin = x.shape()[1], D = x.shape()[2], H = x.shape()[3], W = x.shape()[4];
    int64_t Cout = w.shape()[0], k = w.shape()[2];
    if (w.shape()[1] != Cin)
        throw ShapeError("conv3d: weight expects " + std::to_string(w.shape()[1]) + " input channels, input has " +
                         std::to_string(Cin));
    if (bias && bias->shape() != Shape{Cout}) throw ShapeError("conv3d: bias must be [Cout]");
    int64_t s = stride, p = padding;
    int64_t Do = (D + 2 * p - k) / s + 1;
    int64_t Ho = (H + 2 * p - k) / s + 1;
    int64_t Wo = (W + 2 * p - k) / s + 1;
    if (D + 2 * p < k || Do < 1 || Ho < 1 || Wo < 1)
        throw ShapeError("conv3d: kernel " + std::to_string(k) + " does not fit input " + shape_str(x.shape()) +
                         " with padding " + std::to_string(padding));
    int64_t Vo = Do * Ho * Wo;
    int64_t CK = Cin * k * k * k;

    std::vector<T> out(static_cast<size_t>(B * Cout * Vo));
    std::vector<T> col(static_cast<size_t>(CK * Vo));
    for (int64_t b = 0; b < B; ++b) {
        detail::im2col3d(x.data().data() + b * Cin * D * H * W, col.data(), Cin, k, s, p, D, H, W, Do, Ho, Wo);
        gemm_nn(Cout, Vo, CK, w.data().data(), col.data(), out.data() + b * Cout * Vo, false);
        if (bias) {
            T* ob = out.data() + b * Cout * Vo;
            for (int64_t c = 0; c < Cout; ++c) {
                T bv = bias->data()[static_cast<size_t>(c)];
                for (int64_t v = 0; v < Vo; ++v) ob[c * Vo + v] += bv;
            }
        }
    }

    Shape out_shape{B, Cout, Do, Ho, Wo};
    std::vector<Tensor<T>> parents{x, w};
    if (bias) parents.push_back(*bias);
    Tensor<T> xn = x, wn = w;
    std::optional<Tensor<T>> bn = bias;
    return make_op<T>(out_shape, std::move(out), parents,
                      [xn, wn, bn, B, Cin, Cout, D, H, W, Do, Ho, Wo, k, s, p, CK, Vo](Node<T>& n) {
                          const T* g = n.grad.data();
                          bool need_x = xn.node()->requires_grad;
                          bool need_w = wn.node()->requires_grad;
                          std::vector<T> col;
                          if (need_w) col.resize(static_cast<size_t>(CK * Vo));
                          std::vector<T> dcol;
                          if (need_x) dcol.resize(static_cast<size_t>(CK * Vo));
                          if (need_x) xn.node()->ensure_grad();
                          if (need_w) wn.node()->ensure_grad();
                          for (int64_t b = 0; b < B; ++b) {
                              const T* gb = g + b * Cout * Vo;
                              if (need_w) {
                                  detail::im2col3d(xn.data().data() + b * Cin * D * H * W, col.data(), Cin, k,
                                                   s, p, D, H, W, Do, Ho, Wo);
                                  gemm_nt(Cout, CK, Vo, gb, col.data(), wn.node()->grad.data(), true);
                              }
                              if (need_x) {
                                  gemm_tn(CK, Vo, Cout, wn.data().data(), gb, dcol.data(), false);
                                  detail::col2im3d(dcol.data(), xn.node()->grad.data() + b * Cin * D * H * W,
                                                   Cin, k, s, p, D, H, W, Do, Ho, Wo, true);
                              }
                          }
                          if (bn && bn->node()->requires_grad) {
                              bn->node()->ensure_grad();
                              T* gbias = bn->node()->grad.data();
                              for (int64_t b = 0; b < B; ++b)
                                  for (int64_t c = 0; c < Cout; ++c) {
                                      const T* gc = g + (b * Cout + c) * Vo;
                                      T acc = 0;
                                      for (int64_t v = 0; v < Vo; ++v) acc += gc[v];
                                      gbias[c] += acc;
                                  }
                          }
                      });
}

// x [B,Cin,D,H,W], w [Cin,Cout,k,k,k], out spatial O = (S - 1) * s - 2p + k.
template <class T>
Tensor<T> conv_transpose3d(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<std::optional<Tensor<T>>>& bias,
                           int stride, int padding) {
    detail::check_conv_args(x.shape(), w.shape(), stride, padding);
    int64_t B = x.shape()[0], Cin = x.shape()[1], D = x.shape()[2], H = x.shape()[3], W = x.shape()[4];
    int64_t Cout = w.shape()[1], k = w.shape()[2];
    if (w.shape()[0] != Cin)
        throw ShapeError("conv_transpose3d: weight expects " + std::to_string(w.shape()[0]) +
                         " input channels, input has " + std::to_string(Cin));
    if (bias && bias->shape() != Shape{Cout}) throw ShapeError("conv_transpose3d: bias must be [Cout]");
    int64_t s = stride, p = padding;
    int64_t Do = (D - 1) * s - 2 * p + k;
    int64_t Ho = (H - 1) * s - 2 * p + k;
    int64_t Wo = (W - 1) * s - 2 * p + k;
    if (Do < 1 || Ho < 1 || Wo < 1)
        throw ShapeError("conv_transpose3d: empty output for input " + shape_str(x.shape()));
    int64_t Vi = D * H * W;
    int64_t CK = Cout * k * k * k;

    std::vector<T> out(static_cast<size_t>(B * Cout * Do * Ho * Wo));
    std::vector<T> col(static_cast<size_t>(CK * Vi));
    for (int64_t b = 0; b < B; ++b) {
        // col[Cout*k^3, Vi] = W^T x_b, then scatter to the larger grid
        gemm_tn(CK, Vi, Cin, w.data().data(), x.data().data() + b * Cin * Vi, col.data(), false);
        detail::col2im3d(col.data(), out.data() + b * Cout * Do * Ho * Wo, Cout, k, s, p, Do, Ho, Wo, D, H, W,
                         false);
        if (bias) {
            T* ob = out.data() + b * Cout * Do * Ho * Wo;
            int64_t Vo = Do * Ho * Wo;
            for (int64_t c = 0; c < Cout; ++c) {
                T bv = bias->data()[static_cast<size_t>(c)];
                for (int64_t v = 0; v < Vo; ++v) ob[c * Vo + v] += bv;
            }
        }
    }

    Shape out_shape{B, Cout, Do, Ho, Wo};
    std::vector<Tensor<T>> parents{x, w};
    if (bias) parents.push_back(*bias);
    Tensor<T> xn = x, wn = w;
    std::optional<Tensor<T>> bn = bias;
    return make_op<T>(out_shape, std::move(out), parents,
                      [xn, wn, bn, B, Cin, Cout, D, H, W, Do, Ho, Wo, k, s, p, CK, Vi](Node<T>& n) {
                          const T* g = n.grad.data();
                          bool need_x = xn.node()->requires_grad;
                          bool need_w = wn.node()->requires_grad;
                          int64_t Vo = Do * Ho * Wo;
                          std::vector<T> dcol;
                          if (need_x || need_w) dcol.resize(static_cast<size_t>(CK * Vi));
                          if (need_x) xn.node()->ensure_grad();
                          if (need_w) wn.node()->ensure_grad();
                          for (int64_t b = 0; b < B; ++b) {
                              const T* gb = g + b * Cout * Vo;
                              if (need_x || need_w)
                                  detail::im2col3d(gb, dcol.data(), Cout, k, s, p, Do, Ho, Wo, D, H, W);
                              if (need_x)
                                  gemm_nn(Cin, Vi, CK, wn.data().data(), dcol.data(),
                                          xn.node()->grad.data() + b * Cin * Vi, true);
                              if (need_w)
                                  gemm_nt(Cin, CK, Vi, xn.data().data() + b * Cin * Vi, dcol.data(),
                                          wn.node()->grad.data(), true);
                          }
                          if (bn && bn->node()->requires_grad) {
                              bn->node()->ensure_grad();
                              T* gbias = bn->node()->grad.data();
                              for (int64_t b = 0; b < B; ++b)
                                  for (int64_t c = 0; c < Cout; ++c) {
                                      const T* gc = g + (b * Cout + c) * Vo;
                                      T acc = 0;
                                      for (int64_t v = 0; v < Vo; ++v) acc += gc[v];
                                      gbias[c] += acc;
                                  }
                          }
                      });
}

} // namespace condseg
