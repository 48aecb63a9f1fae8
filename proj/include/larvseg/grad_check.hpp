#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "larvseg/tensor.hpp"

namespace larvseg {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::size_t worst_input = 0;   // which tensor in `inputs`
    std::size_t worst_index = 0;   // flat element within it
    double analytic = 0.0;
    double numeric = 0.0;
};

// Central-difference check of a scalar-valued function against reverse-mode
// gradients. `fn` must rebuild its graph from the given inputs on every call
// (element values get perturbed in place between calls). Relative error uses
// max(1, |a|, |n|) in the denominator so tiny gradients compare absolutely.
inline GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                                  std::vector<Tensor> inputs, double h = 1e-5) {
    for (auto& t : inputs) t.set_requires_grad(true);
    Tensor out = fn(inputs);
    if (out.numel() != 1) throw ContractError("grad_check: fn must return a scalar");
    for (auto& t : inputs) t.zero_grad();
    backward(out);

    GradCheckResult res;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        Tensor& t = inputs[ti];
        const std::vector<double> analytic = t.grad();
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const double saved = t.values()[i];
            t.values()[i] = saved + h;
            const double up = fn(inputs).item();
            t.values()[i] = saved - h;
            const double down = fn(inputs).item();
            t.values()[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double denom = std::max({1.0, std::fabs(analytic[i]), std::fabs(numeric)});
            const double rel = std::fabs(analytic[i] - numeric) / denom;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_input = ti;
                res.worst_index = i;
                res.analytic = analytic[i];
                res.numeric = numeric;
            }
        }
    }
    return res;
}

}  // namespace larvseg
