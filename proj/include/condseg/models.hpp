#pragma once

// Segmentation models: a conditional 3D UNet whose encoder normalizations are
// CIN, and a conditional-ViT encoder with a UNETR-style convolutional decoder.
// Both expose a named parameter registry used by the optimizer, checkpoints,
// and parameter accounting.

#include <array>
#include <memory>

#include "condseg/conv.hpp"
#include "condseg/vit.hpp"

namespace condseg {

template <class T>
struct ParamEntry {
    std::string name;
    Tensor<T> tensor;
    bool conditional = false; // belongs to a per-modality CIN bank
    bool decay = true;        // participates in weight decay
};

struct ParamCount {
    int64_t total = 0;
    int64_t conditional = 0; // all CIN bank entries, 2*M*SigmaC
    int64_t overhead = 0;    // added by modalities beyond the first, 2*(M-1)*SigmaC
    double overhead_ratio = 0.0;
};

template <class T>
class ParamRegistry {
  public:
    void add(std::string name, const Tensor<T>& t, bool conditional = false, bool decay = true) {
        if (find(name)) throw std::invalid_argument("duplicate parameter name: " + name);
        entries_.push_back({std::move(name), t, conditional, decay});
    }

    void add_cin(const std::string& prefix, CinParams<T>& p) {
        add(prefix + ".gamma", p.gamma, true, false);
        add(prefix + ".beta", p.beta, true, false);
    }

    void add_in(const std::string& prefix, InParams<T>& p) {
        add(prefix + ".gamma", p.gamma, false, false);
        add(prefix + ".beta", p.beta, false, false);
    }

    const std::vector<ParamEntry<T>>& entries() const { return entries_; }

    const ParamEntry<T>* find(const std::string& name) const {
        for (const auto& e : entries_)
            if (e.name == name) return &e;
        return nullptr;
    }

    ParamCount count(int64_t num_modalities) const {
        ParamCount c;
        for (const auto& e : entries_) {
            int64_t n = numel(e.tensor.shape());
            c.total += n;
            if (e.conditional) c.conditional += n;
        }
        if (c.conditional % num_modalities)
            throw ShapeError("conditional parameter count not divisible by modality count");
        c.overhead = c.conditional / num_modalities * (num_modalities - 1);
        c.overhead_ratio = c.total ? static_cast<double>(c.overhead) / static_cast<double>(c.total) : 0.0;
        return c;
    }

    void zero_grad() {
        for (auto& e : entries_) e.tensor.zero_grad();
    }

  private:
    std::vector<ParamEntry<T>> entries_;
};

namespace detail {

template <class T>
Tensor<T> make_conv_weight(int64_t cout, int64_t cin, int64_t k, Rng& rng) {
    double std = std::sqrt(2.0 / static_cast<double>(cin * k * k * k));
    std::vector<T> v(static_cast<size_t>(cout * cin * k * k * k));
    for (auto& x : v) x = static_cast<T>(rng.trunc_normal(0.0, std, -2.0 * std, 2.0 * std));
    return Tensor<T>::from({cout, cin, k, k, k}, std::move(v), true);
}

// transpose-conv layout [Cin, Cout, k, k, k]
template <class T>
Tensor<T> make_deconv_weight(int64_t cin, int64_t cout, int64_t k, Rng& rng) {
    double std = std::sqrt(2.0 / static_cast<double>(cin * k * k * k));
    std::vector<T> v(static_cast<size_t>(cin * cout * k * k * k));
    for (auto& x : v) x = static_cast<T>(rng.trunc_normal(0.0, std, -2.0 * std, 2.0 * std));
    return Tensor<T>::from({cin, cout, k, k, k}, std::move(v), true);
}

template <class T>
Tensor<T> make_bias(int64_t c) {
    return Tensor<T>::zeros({c}, true);
}

} // namespace detail

// Pre-activation residual block with conditional normalization:
// y = x + conv(gelu(cin(conv(gelu(cin(x, m))), m)))
template <class T>
struct CondResBlock {
    CinParams<T> n1, n2;
    Tensor<T> w1, b1, w2, b2;

    static CondResBlock make(int64_t c, int64_t M, Rng& rng) {
        CondResBlock blk;
        blk.n1 = CinParams<T>::make(M, c);
        blk.w1 = detail::make_conv_weight<T>(c, c, 3, rng);
        blk.b1 = detail::make_bias<T>(c);
        blk.n2 = CinParams<T>::make(M, c);
        blk.w2 = detail::make_conv_weight<T>(c, c, 3, rng);
        blk.b2 = detail::make_bias<T>(c);
        return blk;
    }

    Tensor<T> forward(const Tensor<T>& x, int64_t m) const {
        Tensor<T> h = conv3d(gelu(cin(x, m, n1)), w1, b1, 1, 1);
        h = conv3d(gelu(cin(h, m, n2)), w2, b2, 1, 1);
        return add(x, h);
    }

    void register_into(ParamRegistry<T>& reg, const std::string& prefix) {
        reg.add_cin(prefix + ".n1", n1);
        reg.add(prefix + ".w1", w1);
        reg.add(prefix + ".b1", b1, false, false);
        reg.add_cin(prefix + ".n2", n2);
        reg.add(prefix + ".w2", w2);
        reg.add(prefix + ".b2", b2, false, false);
    }
};

// Decoder counterpart with unconditional norms and a 1x1x1 projection shortcut
// (the block changes channel count, cin -> cout).
template <class T>
struct DecResBlock {
    InParams<T> n1, n2;
    Tensor<T> w1, b1, w2, b2, wp, bp;

    static DecResBlock make(int64_t cin_ch, int64_t cout_ch, Rng& rng) {
        DecResBlock blk;
        blk.n1 = InParams<T>::make(cin_ch);
        blk.w1 = detail::make_conv_weight<T>(cout_ch, cin_ch, 3, rng);
        blk.b1 = detail::make_bias<T>(cout_ch);
        blk.n2 = InParams<T>::make(cout_ch);
        blk.w2 = detail::make_conv_weight<T>(cout_ch, cout_ch, 3, rng);
        blk.b2 = detail::make_bias<T>(cout_ch);
        blk.wp = detail::make_conv_weight<T>(cout_ch, cin_ch, 1, rng);
        blk.bp = detail::make_bias<T>(cout_ch);
        return blk;
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        Tensor<T> h = conv3d(gelu(in_affine(x, n1)), w1, b1, 1, 1);
        h = conv3d(gelu(in_affine(h, n2)), w2, b2, 1, 1);
        return add(conv3d(x, wp, bp, 1, 0), h);
    }

    void register_into(ParamRegistry<T>& reg, const std::string& prefix) {
        reg.add_in(prefix + ".n1", n1);
        reg.add(prefix + ".w1", w1);
        reg.add(prefix + ".b1", b1, false, false);
        reg.add_in(prefix + ".n2", n2);
        reg.add(prefix + ".w2", w2);
        reg.add(prefix + ".b2", b2, false, false);
        reg.add(prefix + ".wp", wp);
        reg.add(prefix + ".bp", bp, false, false);
    }
};

template <class T>
class Model {
  public:
    virtual ~Model() = default;
    virtual Tensor<T> forward(const Tensor<T>& x, int64_t m) = 0;
    virtual ParamRegistry<T>& params() = 0;
    virtual const ParamRegistry<T>& params() const = 0;
    virtual int64_t num_modalities() const = 0;
    virtual int64_t num_classes() const = 0;
    virtual std::string kind() const = 0;
    // {} when any input divisible by divisor() works; fixed spatial dims otherwise
    virtual Shape fixed_input() const { return {}; }
    virtual int64_t divisor() const = 0;
    virtual std::unique_ptr<Model<T>> clone_with_modalities(int64_t M) const = 0;

    ParamCount param_count() const { return params().count(num_modalities()); }
};

struct UnetConfig {
    int64_t num_classes = 8;
    int64_t modalities = 2;
    std::array<int64_t, 4> widths{16, 32, 64, 128};
};

template <class T>
class CondUNet final : public Model<T> {
  public:
    CondUNet(const UnetConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
        Rng rng(derive_seed(init_seed, 1, 0));
        const auto& w = cfg.widths;
        stem_w_ = detail::make_conv_weight<T>(w[0], 1, 3, rng);
        stem_b_ = detail::make_bias<T>(w[0]);
        for (int i = 0; i < 4; ++i) enc_.push_back(CondResBlock<T>::make(w[static_cast<size_t>(i)], cfg.modalities, rng));
        for (int i = 0; i < 3; ++i) {
            down_w_.push_back(detail::make_conv_weight<T>(w[static_cast<size_t>(i + 1)], w[static_cast<size_t>(i)], 3, rng));
            down_b_.push_back(detail::make_bias<T>(w[static_cast<size_t>(i + 1)]));
        }
        for (int i = 2; i >= 0; --i) {
            up_w_.push_back(detail::make_deconv_weight<T>(w[static_cast<size_t>(i + 1)], w[static_cast<size_t>(i)], 2, rng));
            up_b_.push_back(detail::make_bias<T>(w[static_cast<size_t>(i)]));
            dec_.push_back(DecResBlock<T>::make(2 * w[static_cast<size_t>(i)], w[static_cast<size_t>(i)], rng));
        }
        head_w_ = detail::make_conv_weight<T>(cfg.num_classes, w[0], 1, rng);
        head_b_ = detail::make_bias<T>(cfg.num_classes);

        reg_.add("stem.w", stem_w_);
        reg_.add("stem.b", stem_b_, false, false);
        for (int i = 0; i < 4; ++i) enc_[static_cast<size_t>(i)].register_into(reg_, "enc" + std::to_string(i));
        for (int i = 0; i < 3; ++i) {
            reg_.add("down" + std::to_string(i) + ".w", down_w_[static_cast<size_t>(i)]);
            reg_.add("down" + std::to_string(i) + ".b", down_b_[static_cast<size_t>(i)], false, false);
        }
        for (int i = 0; i < 3; ++i) {
            std::string lvl = std::to_string(2 - i);
            reg_.add("up" + lvl + ".w", up_w_[static_cast<size_t>(i)]);
            reg_.add("up" + lvl + ".b", up_b_[static_cast<size_t>(i)], false, false);
            dec_[static_cast<size_t>(i)].register_into(reg_, "dec" + lvl);
        }
        reg_.add("head.w", head_w_);
        reg_.add("head.b", head_b_, false, false);
    }

    Tensor<T> forward(const Tensor<T>& x, int64_t m) override {
        if (x.shape().size() != 5 || x.shape()[1] != 1)
            throw ShapeError("cond_unet: expected [B,1,D,H,W], got " + shape_str(x.shape()));
        for (size_t i = 2; i < 5; ++i)
            if (x.shape()[i] % 8 || x.shape()[i] < 8)
                throw ShapeError("cond_unet: spatial dims must be positive multiples of 8, got " +
                                 shape_str(x.shape()));
        Tensor<T> s0 = enc_[0].forward(conv3d(x, stem_w_, stem_b_, 1, 1), m);
        Tensor<T> s1 = enc_[1].forward(conv3d(s0, down_w_[0], down_b_[0], 2, 1), m);
        Tensor<T> s2 = enc_[2].forward(conv3d(s1, down_w_[1], down_b_[1], 2, 1), m);
        Tensor<T> bott = enc_[3].forward(conv3d(s2, down_w_[2], down_b_[2], 2, 1), m);
        Tensor<T> d = dec_[0].forward(concat(std::vector<Tensor<T>>{conv_transpose3d(bott, up_w_[0], up_b_[0], 2, 0), s2}, 1));
        d = dec_[1].forward(concat(std::vector<Tensor<T>>{conv_transpose3d(d, up_w_[1], up_b_[1], 2, 0), s1}, 1));
        d = dec_[2].forward(concat(std::vector<Tensor<T>>{conv_transpose3d(d, up_w_[2], up_b_[2], 2, 0), s0}, 1));
        return conv3d(d, head_w_, head_b_, 1, 0);
    }

    ParamRegistry<T>& params() override { return reg_; }
    const ParamRegistry<T>& params() const override { return reg_; }
    int64_t num_modalities() const override { return cfg_.modalities; }
    int64_t num_classes() const override { return cfg_.num_classes; }
    std::string kind() const override { return "cond_unet"; }
    int64_t divisor() const override { return 8; }

    std::unique_ptr<Model<T>> clone_with_modalities(int64_t M) const override;

    const UnetConfig& config() const { return cfg_; }

  private:
    UnetConfig cfg_;
    Tensor<T> stem_w_, stem_b_, head_w_, head_b_;
    std::vector<CondResBlock<T>> enc_;
    std::vector<Tensor<T>> down_w_, down_b_, up_w_, up_b_;
    std::vector<DecResBlock<T>> dec_;
    ParamRegistry<T> reg_;
};

struct VitConfig {
    int64_t num_classes = 8;
    int64_t modalities = 2;
    Shape input_dims{32, 32, 32};
    int64_t patch = 8;
    int64_t dim = 64;
    int64_t depth = 4;
    int64_t heads = 4;
    int64_t mlp_ratio = 4;
};

// Transpose-conv / norm / activation stage used by the token-grid decoder.
template <class T>
struct DeconvStage {
    Tensor<T> w, b;
    InParams<T> norm;

    static DeconvStage make(int64_t cin_ch, int64_t cout_ch, Rng& rng) {
        DeconvStage s;
        s.w = detail::make_deconv_weight<T>(cin_ch, cout_ch, 2, rng);
        s.b = detail::make_bias<T>(cout_ch);
        s.norm = InParams<T>::make(cout_ch);
        return s;
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        return gelu(in_affine(conv_transpose3d(x, w, b, 2, 0), norm));
    }

    void register_into(ParamRegistry<T>& reg, const std::string& prefix) {
        reg.add(prefix + ".w", w);
        reg.add(prefix + ".b", b, false, false);
        reg.add_in(prefix + ".norm", norm);
    }
};

template <class T>
struct ConvStage {
    Tensor<T> w, b;
    InParams<T> norm;

    static ConvStage make(int64_t cin_ch, int64_t cout_ch, Rng& rng) {
        ConvStage s;
        s.w = detail::make_conv_weight<T>(cout_ch, cin_ch, 3, rng);
        s.b = detail::make_bias<T>(cout_ch);
        s.norm = InParams<T>::make(cout_ch);
        return s;
    }

    Tensor<T> forward(const Tensor<T>& x) const { return gelu(in_affine(conv3d(x, w, b, 1, 1), norm)); }

    void register_into(ParamRegistry<T>& reg, const std::string& prefix) {
        reg.add(prefix + ".w", w);
        reg.add(prefix + ".b", b, false, false);
        reg.add_in(prefix + ".norm", norm);
    }
};

// Encoder taps are reshaped to token grids at 1/P resolution; each decoder
// level doubles resolution, merging one tapped latent brought up to that
// resolution by its own deconvolution stack. The deepest tap (after the final
// CIN) seeds the decoder; when there are fewer taps than levels the remaining
// skips reuse z0.
template <class T>
class CVitUnetr final : public Model<T> {
  public:
    CVitUnetr(const VitConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
        if (cfg.patch < 2 || (cfg.patch & (cfg.patch - 1)))
            throw ShapeError("cvit_unetr: patch size must be a power of two >= 2");
        Rng rng(derive_seed(init_seed, 2, 0));
        enc_ = CVitEncoder<T>::make(cfg.input_dims, cfg.patch, cfg.dim, cfg.depth, cfg.heads, cfg.mlp_ratio,
                                    cfg.modalities, rng);
        levels_ = 0;
        for (int64_t p = cfg.patch; p > 1; p /= 2) ++levels_;
        bottleneck_ = ConvStage<T>::make(cfg.dim, cfg.dim, rng);
        int64_t prev = cfg.dim;
        for (int64_t l = 1; l <= levels_; ++l) {
            int64_t wl = level_width(l);
            up_.push_back(DeconvStage<T>::make(prev, wl, rng));
            std::vector<DeconvStage<T>> stack;
            int64_t c = cfg.dim;
            for (int64_t s = 0; s < l; ++s) {
                stack.push_back(DeconvStage<T>::make(c, wl, rng));
                c = wl;
            }
            skip_.push_back(std::move(stack));
            merge_.push_back(ConvStage<T>::make(2 * wl, wl, rng));
            prev = wl;
        }
        head_w_ = detail::make_conv_weight<T>(cfg.num_classes, prev, 1, rng);
        head_b_ = detail::make_bias<T>(cfg.num_classes);

        reg_.add("patch.E", enc_.patch.E);
        reg_.add("patch.E_pos", enc_.patch.E_pos);
        for (int64_t i = 0; i < cfg.depth; ++i) {
            auto& blk = enc_.blocks[static_cast<size_t>(i)];
            std::string p = "block" + std::to_string(i + 1);
            reg_.add_cin(p + ".norm1", blk.norm1);
            reg_.add(p + ".attn.Wq", blk.attn.Wq);
            reg_.add(p + ".attn.bq", blk.attn.bq, false, false);
            reg_.add(p + ".attn.Wk", blk.attn.Wk);
            reg_.add(p + ".attn.bk", blk.attn.bk, false, false);
            reg_.add(p + ".attn.Wv", blk.attn.Wv);
            reg_.add(p + ".attn.bv", blk.attn.bv, false, false);
            reg_.add(p + ".attn.Wo", blk.attn.Wo);
            reg_.add(p + ".attn.bo", blk.attn.bo, false, false);
            reg_.add_cin(p + ".norm2", blk.norm2);
            reg_.add(p + ".ffn.W1", blk.ffn.W1);
            reg_.add(p + ".ffn.b1", blk.ffn.b1, false, false);
            reg_.add(p + ".ffn.W2", blk.ffn.W2);
            reg_.add(p + ".ffn.b2", blk.ffn.b2, false, false);
        }
        reg_.add_cin("final_norm", enc_.final_norm);
        bottleneck_.register_into(reg_, "bottleneck");
        for (int64_t l = 1; l <= levels_; ++l) {
            std::string p = "level" + std::to_string(l);
            up_[static_cast<size_t>(l - 1)].register_into(reg_, p + ".up");
            auto& stack = skip_[static_cast<size_t>(l - 1)];
            for (size_t s = 0; s < stack.size(); ++s)
                stack[s].register_into(reg_, p + ".skip" + std::to_string(s));
            merge_[static_cast<size_t>(l - 1)].register_into(reg_, p + ".merge");
        }
        reg_.add("head.w", head_w_);
        reg_.add("head.b", head_b_, false, false);
    }

    Tensor<T> forward(const Tensor<T>& x, int64_t m) override {
        EncodeResult<T> er = encode(x, m, enc_);
        int64_t gd = cfg_.input_dims[0] / cfg_.patch;
        int64_t gh = cfg_.input_dims[1] / cfg_.patch;
        int64_t gw = cfg_.input_dims[2] / cfg_.patch;
        std::vector<Tensor<T>> streams; // z0 then taps, shallow to deep
        streams.push_back(er.z0);
        for (auto& t : er.taps) streams.push_back(t);
        int64_t deepest = static_cast<int64_t>(streams.size()) - 1;
        Tensor<T> d = bottleneck_.forward(tokens_to_grid(streams[static_cast<size_t>(deepest)], gd, gh, gw));
        for (int64_t l = 1; l <= levels_; ++l) {
            d = up_[static_cast<size_t>(l - 1)].forward(d);
            int64_t src = std::max<int64_t>(0, deepest - l);
            Tensor<T> s = tokens_to_grid(streams[static_cast<size_t>(src)], gd, gh, gw);
            for (auto& stage : skip_[static_cast<size_t>(l - 1)]) s = stage.forward(s);
            d = merge_[static_cast<size_t>(l - 1)].forward(concat(std::vector<Tensor<T>>{d, s}, 1));
        }
        return conv3d(d, head_w_, head_b_, 1, 0);
    }

    ParamRegistry<T>& params() override { return reg_; }
    const ParamRegistry<T>& params() const override { return reg_; }
    int64_t num_modalities() const override { return cfg_.modalities; }
    int64_t num_classes() const override { return cfg_.num_classes; }
    std::string kind() const override { return "cvit_unetr"; }
    Shape fixed_input() const override { return cfg_.input_dims; }
    int64_t divisor() const override { return cfg_.patch; }

    std::unique_ptr<Model<T>> clone_with_modalities(int64_t M) const override;

    const VitConfig& config() const { return cfg_; }
    const CVitEncoder<T>& encoder() const { return enc_; }

  private:
    int64_t level_width(int64_t l) const { return std::max<int64_t>(cfg_.dim >> l, std::min<int64_t>(cfg_.dim, 8)); }

    VitConfig cfg_;
    CVitEncoder<T> enc_;
    int64_t levels_ = 0;
    ConvStage<T> bottleneck_;
    std::vector<DeconvStage<T>> up_;
    std::vector<std::vector<DeconvStage<T>>> skip_;
    std::vector<ConvStage<T>> merge_;
    Tensor<T> head_w_, head_b_;
    ParamRegistry<T> reg_;
};

namespace detail {

// Copy weights entry-by-entry; conditional [M_src, C] banks map row
// min(m, M_src-1) onto each destination row.
template <class T>
void copy_params(const ParamRegistry<T>& src, ParamRegistry<T>& dst) {
    const auto& se = src.entries();
    const auto& de = dst.entries();
    if (se.size() != de.size()) throw ShapeError("clone: registry size mismatch");
    for (size_t i = 0; i < se.size(); ++i) {
        if (se[i].name != de[i].name) throw ShapeError("clone: parameter order mismatch at " + se[i].name);
        const T* s = se[i].tensor.data().data();
        Tensor<T> dt = de[i].tensor;
        T* d = dt.data().data();
        if (se[i].tensor.shape() == de[i].tensor.shape()) {
            std::copy(s, s + numel(se[i].tensor.shape()), d);
        } else if (se[i].conditional) {
            int64_t ms = se[i].tensor.shape()[0], md = de[i].tensor.shape()[0];
            int64_t c = se[i].tensor.shape()[1];
            for (int64_t m = 0; m < md; ++m)
                std::copy(s + std::min(m, ms - 1) * c, s + std::min(m, ms - 1) * c + c, d + m * c);
        } else {
            throw ShapeError("clone: shape mismatch for non-conditional " + se[i].name);
        }
    }
}

} // namespace detail

template <class T>
std::unique_ptr<Model<T>> CondUNet<T>::clone_with_modalities(int64_t M) const {
    UnetConfig cfg = cfg_;
    cfg.modalities = M;
    auto out = std::make_unique<CondUNet<T>>(cfg, 0);
    detail::copy_params(this->params(), out->params());
    return out;
}

template <class T>
std::unique_ptr<Model<T>> CVitUnetr<T>::clone_with_modalities(int64_t M) const {
    VitConfig cfg = cfg_;
    cfg.modalities = M;
    auto out = std::make_unique<CVitUnetr<T>>(cfg, 0);
    detail::copy_params(this->params(), out->params());
    return out;
}

// Single-modality copy whose CIN layers keep only bank 0; with banks tied the
// forward pass is unchanged.
template <class T>
std::unique_ptr<Model<T>> make_unconditional(const Model<T>& model) {
    return model.clone_with_modalities(1);
}

} // namespace condseg
