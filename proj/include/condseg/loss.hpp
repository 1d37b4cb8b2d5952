#pragma once

// Training loss (weighted soft Dice + focal) on logits, and the hard Dice
// evaluation metric on label maps.

#include "condseg/ops.hpp"

namespace condseg {

struct LossConfig {
    double lambda_dice = 1.0;
    double lambda_focal = 1.0;
    double gamma = 2.0;          // focal exponent; 0 reduces focal to cross-entropy
    double smooth = 1e-5;        // Dice smoothing in numerator and denominator
    bool include_background = false;
    std::vector<double> alpha;   // per-class focal weights; empty means all ones

    void validate(int64_t num_classes) const {
        if (lambda_dice < 0.0 || lambda_focal < 0.0 || gamma < 0.0 || smooth < 0.0)
            throw std::invalid_argument("loss config: weights, gamma and smooth must be non-negative");
        if (!alpha.empty() && static_cast<int64_t>(alpha.size()) != num_classes)
            throw ShapeError("loss config: alpha must have one weight per class");
        for (double a : alpha)
            if (a < 0.0) throw std::invalid_argument("loss config: alpha weights must be non-negative");
    }
};

namespace detail {

template <class T>
void check_labels(const Shape& logits_shape, const std::vector<uint8_t>& labels) {
    if (logits_shape.size() < 3)
        throw ShapeError("loss: logits must be [B, C, spatial...], got " + shape_str(logits_shape));
    int64_t vox = numel(logits_shape) / logits_shape[1];
    if (static_cast<int64_t>(labels.size()) != vox)
        throw ShapeError("loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(vox) +
                         " voxels");
    int64_t c = logits_shape[1];
    for (uint8_t l : labels)
        if (l >= c) throw std::out_of_range("loss: label " + std::to_string(l) + " outside [0, " +
                                            std::to_string(c) + ")");
}

// labels [B, spatial...] -> constant one-hot [B, C, spatial...]
template <class T>
Tensor<T> one_hot(const Shape& logits_shape, const std::vector<uint8_t>& labels) {
    int64_t b = logits_shape[0], c = logits_shape[1];
    int64_t spatial = numel(logits_shape) / (b * c);
    std::vector<T> v(static_cast<size_t>(numel(logits_shape)), T(0));
    for (int64_t i = 0; i < b; ++i)
        for (int64_t s = 0; s < spatial; ++s) {
            uint8_t l = labels[static_cast<size_t>(i * spatial + s)];
            v[static_cast<size_t>((i * c + l) * spatial + s)] = T(1);
        }
    return Tensor<T>::from(logits_shape, std::move(v));
}

// per-voxel alpha_{label}
template <class T>
Tensor<T> alpha_map(const Shape& logits_shape, const std::vector<uint8_t>& labels,
                    const std::vector<double>& alpha) {
    Shape shape{logits_shape[0]};
    for (size_t i = 2; i < logits_shape.size(); ++i) shape.push_back(logits_shape[i]);
    std::vector<T> v(labels.size());
    for (size_t i = 0; i < labels.size(); ++i) v[i] = static_cast<T>(alpha[labels[i]]);
    return Tensor<T>::from(shape, std::move(v));
}

} // namespace detail

// 1 - mean_c (2 sum(p*y) + s) / (sum(p) + sum(y) + s), sums over batch and
// space before the per-class ratio; background excluded from the mean unless
// configured otherwise
template <class T>
Tensor<T> dice_loss(const Tensor<T>& logits, const std::vector<uint8_t>& labels, const LossConfig& cfg) {
    detail::check_labels<T>(logits.shape(), labels);
    cfg.validate(logits.shape()[1]);
    int64_t c = logits.shape()[1];
    if (!cfg.include_background && c < 2)
        throw ShapeError("dice_loss: no foreground classes with background excluded");
    Tensor<T> y = detail::one_hot<T>(logits.shape(), labels);
    Tensor<T> p = softmax(logits, 1);
    std::vector<int> axes{0};
    for (size_t i = 2; i < logits.shape().size(); ++i) axes.push_back(static_cast<int>(i));
    Tensor<T> inter = sum(mul(p, y), axes);
    Tensor<T> denom = add(sum(p, axes), sum(y, axes));
    T s = static_cast<T>(cfg.smooth);
    Tensor<T> score = div(add(mul(inter, T(2)), s), add(denom, s)); // [C]
    Tensor<T> sel = cfg.include_background ? score : slice(score, {{1, c}});
    return sub(T(1), mean_all(sel));
}

// mean over voxels of -alpha_c (1 - p_t)^gamma log p_t
template <class T>
Tensor<T> focal_loss(const Tensor<T>& logits, const std::vector<uint8_t>& labels, const LossConfig& cfg) {
    detail::check_labels<T>(logits.shape(), labels);
    cfg.validate(logits.shape()[1]);
    Tensor<T> y = detail::one_hot<T>(logits.shape(), labels);
    Tensor<T> lpt = sum(mul(log_softmax(logits, 1), y), {1}); // [B, spatial...]
    Tensor<T> vox = neg(lpt);
    if (cfg.gamma != 0.0) vox = mul(pow(sub(T(1), exp(lpt)), static_cast<T>(cfg.gamma)), vox);
    if (!cfg.alpha.empty()) vox = mul(vox, detail::alpha_map<T>(logits.shape(), labels, cfg.alpha));
    return mean_all(vox);
}

template <class T>
struct LossParts {
    Tensor<T> dice, focal, total;
};

template <class T>
LossParts<T> combined_loss(const Tensor<T>& logits, const std::vector<uint8_t>& labels,
                           const LossConfig& cfg) {
    LossParts<T> parts;
    parts.dice = dice_loss(logits, labels, cfg);
    parts.focal = focal_loss(logits, labels, cfg);
    parts.total = add(mul(parts.dice, static_cast<T>(cfg.lambda_dice)),
                      mul(parts.focal, static_cast<T>(cfg.lambda_focal)));
    return parts;
}

struct DiceResult {
    std::vector<double> per_class;
    double mean_foreground = 0.0;
    double whole_foreground = 0.0;
};

// hard-label Dice; classes absent in both maps score 1.0
inline DiceResult dice_metric(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt,
                              int64_t num_classes) {
    if (pred.size() != gt.size())
        throw ShapeError("dice_metric: size mismatch " + std::to_string(pred.size()) + " vs " +
                         std::to_string(gt.size()));
    if (num_classes < 2) throw ShapeError("dice_metric: need at least two classes");
    std::vector<int64_t> np(static_cast<size_t>(num_classes), 0), ng(np), ni(np);
    int64_t fp = 0, fg = 0, fi = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        uint8_t a = pred[i], b = gt[i];
        if (a >= num_classes || b >= num_classes)
            throw std::out_of_range("dice_metric: label outside [0, " + std::to_string(num_classes) + ")");
        ++np[a];
        ++ng[b];
        if (a == b) ++ni[a];
        bool pa = a > 0, pb = b > 0;
        fp += pa;
        fg += pb;
        fi += pa && pb;
    }
    DiceResult r;
    r.per_class.resize(static_cast<size_t>(num_classes));
    for (int64_t c = 0; c < num_classes; ++c) {
        int64_t denom = np[static_cast<size_t>(c)] + ng[static_cast<size_t>(c)];
        r.per_class[static_cast<size_t>(c)] =
            denom == 0 ? 1.0 : 2.0 * static_cast<double>(ni[static_cast<size_t>(c)]) / static_cast<double>(denom);
    }
    double acc = 0.0;
    for (int64_t c = 1; c < num_classes; ++c) acc += r.per_class[static_cast<size_t>(c)];
    r.mean_foreground = acc / static_cast<double>(num_classes - 1);
    r.whole_foreground = (fp + fg) == 0 ? 1.0 : 2.0 * static_cast<double>(fi) / static_cast<double>(fp + fg);
    return r;
}

} // namespace condseg
