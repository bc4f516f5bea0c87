#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tape.hpp"
#include "tensor.hpp"

namespace diffad {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
    std::vector<double> rel_errors;

    bool passes(double tol) const { return max_rel_error < tol; }
};

/// |analytic - numeric| / max(|analytic|, |numeric|, floor). The floor keeps
/// exactly-zero gradients from producing 0/0.
inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
    double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

/// Compares tape gradients of a scalar function of several tensors against
/// central differences. `fn` must build its graph from the given leaves.
/// When `max_per_param` is nonzero only that many evenly spaced elements of
/// each parameter are perturbed.
template <class T>
GradCheckReport grad_check_params(
    const std::function<BasicTensor<T>(BasicTape<T>*, const std::vector<BasicTensor<T>>&)>& fn,
    const std::vector<BasicTensor<T>>& params, double eps, std::size_t max_per_param = 0,
    double floor = 1e-8) {
    std::vector<BasicTensor<T>> leaves;
    leaves.reserve(params.size());
    for (const auto& p : params) leaves.push_back(p.as_leaf(true));

    BasicTape<T> tape;
    auto loss = fn(&tape, leaves);
    auto grads = tape.backward(loss);

    GradCheckReport report;
    for (std::size_t pi = 0; pi < leaves.size(); ++pi) {
        auto analytic = grads[leaves[pi]];
        const std::size_t n = leaves[pi].size();
        std::size_t step = 1;
        if (max_per_param != 0 && n > max_per_param) step = (n + max_per_param - 1) / max_per_param;
        for (std::size_t i = 0; i < n; i += step) {
            auto eval = [&](double delta) {
                std::vector<BasicTensor<T>> shifted;
                shifted.reserve(leaves.size());
                for (std::size_t pj = 0; pj < leaves.size(); ++pj) {
                    if (pj != pi) {
                        shifted.push_back(leaves[pj].detach());
                        continue;
                    }
                    auto v = leaves[pj].values();
                    v[i] = static_cast<T>(static_cast<double>(v[i]) + delta);
                    shifted.push_back(BasicTensor<T>(leaves[pj].shape(), std::move(v)));
                }
                return static_cast<double>(fn(nullptr, shifted).item());
            };
            const double numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            const double rel = relative_error(static_cast<double>(analytic[i]), numeric, floor);
            report.rel_errors.push_back(rel);
            ++report.checked;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_param = pi;
                report.worst_index = i;
            }
        }
    }
    return report;
}

/// Single-tensor convenience form of grad_check_params.
template <class T>
GradCheckReport grad_check(const std::function<BasicTensor<T>(BasicTape<T>*, const BasicTensor<T>&)>& fn,
                           const BasicTensor<T>& point, double eps, double floor = 1e-8) {
    return grad_check_params<T>(
        [&](BasicTape<T>* tape, const std::vector<BasicTensor<T>>& ps) { return fn(tape, ps[0]); }, {point}, eps, 0,
        floor);
}

}  // namespace diffad
