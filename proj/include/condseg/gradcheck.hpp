#pragma once

// Central finite-difference gradient verification. The callable rebuilds the
// scalar loss from the leaves' current data, so leaf values can be perturbed
// in place between evaluations.

#include <functional>
#include <sstream>

#include "condseg/ops.hpp"

namespace condseg {

template <class T>
struct GradCheckReport {
    T max_rel_err = 0;
    size_t checked = 0;
    bool ok = true;
    std::string worst; // leaf index / element of the largest error
};

template <class T>
T gradcheck_rel_err(T analytic, T numeric) {
    T denom = std::max(T(1), std::max(std::abs(analytic), std::abs(numeric)));
    return std::abs(analytic - numeric) / denom;
}

template <class T>
GradCheckReport<T> gradcheck(const std::function<Tensor<T>()>& build, std::vector<Tensor<T>> leaves, T h,
                             T tol) {
    GradCheckReport<T> rep;
    Tensor<T> loss = build();
    if (loss.size() != 1) throw ShapeError("gradcheck: loss must be scalar");
    for (auto& l : leaves) l.zero_grad();
    backward(loss);
    std::vector<std::vector<T>> analytic;
    for (auto& l : leaves) analytic.push_back(l.grad());

    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& data = leaves[li].node()->data;
        for (size_t i = 0; i < data.size(); ++i) {
            T keep = data[i];
            data[i] = keep + h;
            T fp;
            {
                NoGradGuard ng;
                fp = build().item();
            }
            data[i] = keep - h;
            T fm;
            {
                NoGradGuard ng;
                fm = build().item();
            }
            data[i] = keep;
            T numeric = (fp - fm) / (2 * h);
            T rel = gradcheck_rel_err(analytic[li][i], numeric);
            ++rep.checked;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                std::ostringstream os;
                os << "leaf " << li << " elem " << i << " analytic " << analytic[li][i] << " numeric "
                   << numeric;
                rep.worst = os.str();
            }
        }
    }
    rep.ok = rep.max_rel_err < tol;
    return rep;
}

} // namespace condseg
