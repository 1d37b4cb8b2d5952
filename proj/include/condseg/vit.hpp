#pragma once

// Conditional ViT encoder: cubic patch embedding with learnable positional
// table, pre-norm transformer blocks whose normalizations are CIN, and
// exported intermediate latents (taps) for a UNet-style decoder.

#include "condseg/norm.hpp"

namespace condseg {

// [B, 1, D, H, W] -> [B, N, P^3]; patch order is raster z-major then y then x,
// voxels within a patch in the same order
template <class T>
Tensor<T> patchify(const Tensor<T>& vol, int64_t P) {
    if (vol.shape().size() != 5 || vol.shape()[1] != 1)
        throw ShapeError("patchify: expected [B,1,D,H,W], got " + shape_str(vol.shape()));
    int64_t B = vol.shape()[0], D = vol.shape()[2], H = vol.shape()[3], W = vol.shape()[4];
    if (P < 1 || D % P || H % P || W % P)
        throw ShapeError("patchify: dims " + shape_str(vol.shape()) + " not divisible by P=" + std::to_string(P));
    int64_t gd = D / P, gh = H / P, gw = W / P;
    Tensor<T> x = reshape(vol, {B, gd, P, gh, P, gw, P});
    x = permute(x, {0, 1, 3, 5, 2, 4, 6}); // [B, gd, gh, gw, P, P, P]
    return reshape(x, {B, gd * gh * gw, P * P * P});
}

template <class T>
Tensor<T> unpatchify(const Tensor<T>& patches, int64_t P, const Shape& vol_shape) {
    int64_t B = vol_shape[0], D = vol_shape[2], H = vol_shape[3], W = vol_shape[4];
    int64_t gd = D / P, gh = H / P, gw = W / P;
    if (patches.shape() != Shape{B, gd * gh * gw, P * P * P})
        throw ShapeError("unpatchify: got " + shape_str(patches.shape()) + " for volume " + shape_str(vol_shape));
    Tensor<T> x = reshape(patches, {B, gd, gh, gw, P, P, P});
    x = permute(x, {0, 1, 4, 2, 5, 3, 6});
    return reshape(x, vol_shape);
}

// [B, N, K] token grid -> [B, K, gd, gh, gw] voxel-grid feature map
template <class T>
Tensor<T> tokens_to_grid(const Tensor<T>& z, int64_t gd, int64_t gh, int64_t gw) {
    int64_t B = z.shape()[0], K = z.shape()[2];
    if (z.shape()[1] != gd * gh * gw)
        throw ShapeError("tokens_to_grid: " + shape_str(z.shape()) + " does not hold a " + std::to_string(gd) +
                         "x" + std::to_string(gh) + "x" + std::to_string(gw) + " grid");
    return permute(reshape(z, {B, gd, gh, gw, K}), {0, 4, 1, 2, 3});
}

template <class T>
struct PatchEmbedding {
    int64_t P = 0, K = 0, N = 0;
    Tensor<T> E;     // [P^3, K]
    Tensor<T> E_pos; // [N, K], zero-initialized

    static PatchEmbedding make(int64_t P, int64_t K, int64_t N, Rng& rng) {
        PatchEmbedding e;
        e.P = P;
        e.K = K;
        e.N = N;
        std::vector<T> w(static_cast<size_t>(P * P * P * K));
        for (auto& v : w) v = static_cast<T>(rng.trunc_normal(0.0, 0.02, -0.04, 0.04));
        e.E = Tensor<T>::from({P * P * P, K}, std::move(w), true);
        e.E_pos = Tensor<T>::zeros({N, K}, true);
        return e;
    }
};

// patches [B, N, P^3] -> z0 [B, N, K]
template <class T>
Tensor<T> embed(const Tensor<T>& patches, const PatchEmbedding<T>& emb) {
    if (patches.shape().size() != 3 || patches.shape()[2] != emb.P * emb.P * emb.P ||
        patches.shape()[1] != emb.N)
        throw ShapeError("embed: got " + shape_str(patches.shape()) + ", expected [B," + std::to_string(emb.N) +
                         "," + std::to_string(emb.P * emb.P * emb.P) + "]");
    return add(matmul(patches, emb.E), emb.E_pos);
}

template <class T>
struct MsaWeights {
    int64_t K = 0, heads = 0;
    Tensor<T> Wq, Wk, Wv, Wo; // [K, K]
    Tensor<T> bq, bk, bv, bo; // [K]

    static MsaWeights make(int64_t K, int64_t heads, Rng& rng) {
        if (K % heads) throw ShapeError("msa: K=" + std::to_string(K) + " not divisible by heads");
        MsaWeights w;
        w.K = K;
        w.heads = heads;
        auto proj = [&]() {
            std::vector<T> v(static_cast<size_t>(K * K));
            for (auto& x : v) x = static_cast<T>(rng.trunc_normal(0.0, 0.02, -0.04, 0.04));
            return Tensor<T>::from({K, K}, std::move(v), true);
        };
        w.Wq = proj();
        w.Wk = proj();
        w.Wv = proj();
        w.Wo = proj();
        w.bq = Tensor<T>::zeros({K}, true);
        w.bk = Tensor<T>::zeros({K}, true);
        w.bv = Tensor<T>::zeros({K}, true);
        w.bo = Tensor<T>::zeros({K}, true);
        return w;
    }
};

namespace detail {

// [B, N, K] -> [B, h, N, K/h]
template <class T>
Tensor<T> split_heads(const Tensor<T>& x, int64_t heads) {
    int64_t B = x.shape()[0], N = x.shape()[1], K = x.shape()[2];
    return permute(reshape(x, {B, N, heads, K / heads}), {0, 2, 1, 3});
}

} // namespace detail

// post-softmax attention probabilities [B, h, N, N] (exposed for testing the
// row-stochastic property)
template <class T>
Tensor<T> msa_attention(const Tensor<T>& z, const MsaWeights<T>& w) {
    Tensor<T> q = detail::split_heads(add(matmul(z, w.Wq), w.bq), w.heads);
    Tensor<T> k = detail::split_heads(add(matmul(z, w.Wk), w.bk), w.heads);
    T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(w.K / w.heads)));
    Tensor<T> scores = mul(matmul(q, permute(k, {0, 1, 3, 2})), scale);
    return softmax(scores, 3);
}

// z [B, N, K] -> [B, N, K]
template <class T>
Tensor<T> msa(const Tensor<T>& z, const MsaWeights<T>& w) {
    if (z.shape().size() != 3 || z.shape()[2] != w.K)
        throw ShapeError("msa: expected [B,N," + std::to_string(w.K) + "], got " + shape_str(z.shape()));
    int64_t B = z.shape()[0], N = z.shape()[1];
    Tensor<T> attn = msa_attention(z, w);
    Tensor<T> v = detail::split_heads(add(matmul(z, w.Wv), w.bv), w.heads);
    Tensor<T> ctx = matmul(attn, v);                      // [B, h, N, K/h]
    ctx = reshape(permute(ctx, {0, 2, 1, 3}), {B, N, w.K});
    return add(matmul(ctx, w.Wo), w.bo);
}

template <class T>
struct MlpWeights {
    Tensor<T> W1, b1, W2, b2; // [K, rK], [rK], [rK, K], [K]

    static MlpWeights make(int64_t K, int64_t r, Rng& rng) {
        MlpWeights w;
        auto proj = [&](int64_t rows, int64_t cols) {
            std::vector<T> v(static_cast<size_t>(rows * cols));
            for (auto& x : v) x = static_cast<T>(rng.trunc_normal(0.0, 0.02, -0.04, 0.04));
            return Tensor<T>::from({rows, cols}, std::move(v), true);
        };
        w.W1 = proj(K, r * K);
        w.b1 = Tensor<T>::zeros({r * K}, true);
        w.W2 = proj(r * K, K);
        w.b2 = Tensor<T>::zeros({K}, true);
        return w;
    }
};

template <class T>
Tensor<T> mlp(const Tensor<T>& z, const MlpWeights<T>& w) {
    return add(matmul(gelu(add(matmul(z, w.W1), w.b1)), w.W2), w.b2);
}

template <class T>
struct TransformerBlock {
    CinParams<T> norm1, norm2;
    MsaWeights<T> attn;
    MlpWeights<T> ffn;

    static TransformerBlock make(int64_t K, int64_t heads, int64_t r, int64_t M, Rng& rng) {
        TransformerBlock b;
        b.norm1 = CinParams<T>::make(M, K);
        b.attn = MsaWeights<T>::make(K, heads, rng);
        b.norm2 = CinParams<T>::make(M, K);
        b.ffn = MlpWeights<T>::make(K, r, rng);
        return b;
    }
};

// z_hat = MSA(CIN(z_prev, m)) + z_prev ; z = MLP(CIN(z_hat, m)) + z_hat
template <class T>
Tensor<T> block_forward(const Tensor<T>& z_prev, int64_t m, const TransformerBlock<T>& blk) {
    Tensor<T> zh = add(msa(cin_tokens(z_prev, m, blk.norm1), blk.attn), z_prev);
    return add(mlp(cin_tokens(zh, m, blk.norm2), blk.ffn), zh);
}

// evenly spaced block indices {L/4, L/2, 3L/4, L}, deduplicated, always ending
// at L
inline std::vector<int> default_taps(int64_t L) {
    std::vector<int> taps;
    for (int64_t i = 1; i <= 4; ++i) {
        int64_t t = std::max<int64_t>(1, i * L / 4);
        if (taps.empty() || taps.back() != t) taps.push_back(static_cast<int>(t));
    }
    if (taps.back() != L) taps.push_back(static_cast<int>(L));
    return taps;
}

template <class T>
struct CVitEncoder {
    int64_t P = 8, K = 64, L = 4, heads = 4, r = 4, M = 2;
    Shape input_dims; // {D, H, W}, fixed because E_pos is learned per position
    PatchEmbedding<T> patch;
    std::vector<TransformerBlock<T>> blocks;
    CinParams<T> final_norm; // applied after block L, feeds the decoder
    std::vector<int> taps;

    static CVitEncoder make(Shape input_dims, int64_t P, int64_t K, int64_t L, int64_t heads, int64_t r,
                            int64_t M, Rng& rng) {
        CVitEncoder e;
        e.P = P;
        e.K = K;
        e.L = L;
        e.heads = heads;
        e.r = r;
        e.M = M;
        e.input_dims = input_dims;
        for (int64_t d : input_dims)
            if (d % P) throw ShapeError("encoder: input dims " + shape_str(input_dims) + " not divisible by P");
        int64_t N = (input_dims[0] / P) * (input_dims[1] / P) * (input_dims[2] / P);
        e.patch = PatchEmbedding<T>::make(P, K, N, rng);
        for (int64_t i = 0; i < L; ++i) e.blocks.push_back(TransformerBlock<T>::make(K, heads, r, M, rng));
        e.final_norm = CinParams<T>::make(M, K);
        e.taps = default_taps(L);
        return e;
    }

    // sum of CIN channel counts, the SigmaC of the overhead formula
    int64_t cin_channels() const { return 2 * L * K + K; }
};

template <class T>
struct EncodeResult {
    Tensor<T> z0;
    std::vector<Tensor<T>> taps; // one per tap index; the last one is CIN-normalized
};

template <class T>
EncodeResult<T> encode(const Tensor<T>& vol, int64_t m, const CVitEncoder<T>& enc) {
    if (vol.shape().size() != 5 ||
        Shape{vol.shape()[2], vol.shape()[3], vol.shape()[4]} != enc.input_dims)
        throw ShapeError("encode: expected [B,1," + std::to_string(enc.input_dims[0]) + "," +
                         std::to_string(enc.input_dims[1]) + "," + std::to_string(enc.input_dims[2]) +
                         "], got " + shape_str(vol.shape()));
    EncodeResult<T> out;
    Tensor<T> z = embed(patchify(vol, enc.P), enc.patch);
    out.z0 = z;
    size_t next_tap = 0;
    for (int64_t i = 1; i <= enc.L; ++i) {
        z = block_forward(z, m, enc.blocks[static_cast<size_t>(i - 1)]);
        if (next_tap < enc.taps.size() && enc.taps[next_tap] == i) {
            if (i == enc.L)
                out.taps.push_back(cin_tokens(z, m, enc.final_norm));
            else
                out.taps.push_back(z);
            ++next_tap;
        }
    }
    return out;
}

} // namespace condseg
