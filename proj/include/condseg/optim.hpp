#pragma once

#include <cmath>

#include "condseg/tensor.hpp"

namespace condseg {

// linear warm-up to peak, then cosine decay to zero at total_steps
inline double lr_schedule(int64_t step, int64_t total_steps, int64_t warmup_steps, double peak) {
    if (warmup_steps >= total_steps) throw std::invalid_argument("lr_schedule: warmup must precede total");
    if (step < 0) throw std::invalid_argument("lr_schedule: negative step");
    if (warmup_steps > 0 && step < warmup_steps)
        return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
    double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
    progress = std::min(progress, 1.0);
    return peak * 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
}

// scales all gradients so their global L2 norm is at most max_norm; returns the
// pre-clip norm
template <class T>
double clip_grad_norm(const std::vector<Tensor<T>>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        Tensor<T> h = p;
        for (T g : h.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        T scale = static_cast<T>(max_norm / norm);
        for (const auto& p : params) {
            Tensor<T> h = p;
            for (T& g : h.grad()) g *= scale;
        }
    }
    return norm;
}

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Adam with decoupled weight decay: the decay term p -= lr*wd*p is applied
// separately from the gradient update, never entering the moments
template <class T>
class AdamW {
  public:
    AdamW(std::vector<Tensor<T>> params, std::vector<bool> decay, AdamWConfig cfg)
        : params_(std::move(params)), decay_(std::move(decay)), cfg_(cfg) {
        if (decay_.size() != params_.size())
            throw std::invalid_argument("AdamW: decay flags must match parameter count");
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].data().size(), 0.0);
            v_[i].assign(params_[i].data().size(), 0.0);
        }
    }

    // consumes gradients currently on the parameters; refuses the whole step
    // if any gradient is non-finite
    bool step(double lr) {
        for (auto& p : params_)
            for (T g : p.grad())
                if (!std::isfinite(static_cast<double>(g))) return false;
        ++t_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& data = params_[i].data();
            auto& grad = params_[i].grad();
            auto& m = m_[i];
            auto& v = v_[i];
            for (size_t j = 0; j < data.size(); ++j) {
                double g = static_cast<double>(grad[j]);
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
                double update = lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
                double x = static_cast<double>(data[j]) - update;
                if (decay_[i] && cfg_.weight_decay > 0.0)
                    x -= lr * cfg_.weight_decay * static_cast<double>(data[j]);
                data[j] = static_cast<T>(x);
            }
        }
        return true;
    }

    int64_t step_count() const { return t_; }
    const std::vector<std::vector<double>>& first_moments() const { return m_; }
    const std::vector<std::vector<double>>& second_moments() const { return v_; }

    void restore(int64_t t, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v) {
        if (m.size() != params_.size() || v.size() != params_.size())
            throw std::invalid_argument("AdamW::restore: moment count mismatch");
        for (size_t i = 0; i < params_.size(); ++i)
            if (m[i].size() != params_[i].data().size() || v[i].size() != params_[i].data().size())
                throw std::invalid_argument("AdamW::restore: moment shape mismatch");
        t_ = t;
        m_ = std::move(m);
        v_ = std::move(v);
    }

  private:
    std::vector<Tensor<T>> params_;
    std::vector<bool> decay_;
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    int64_t t_ = 0;
};

} // namespace condseg
