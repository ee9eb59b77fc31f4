#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "aulite/tensor.hpp"

namespace aulite::testing {

// Central finite differences against the analytic gradient. `fn` must build a
// fresh graph from `inputs` and return a scalar loss. Returns the max relative
// error over all components of all inputs that require grad.
inline double finite_diff_max_rel_error(
    const std::function<TensorD(const std::vector<TensorD>&)>& fn,
    std::vector<TensorD>& inputs, double step = 1e-5) {
    for (auto& t : inputs) t.zero_grad();
    TensorD loss = fn(inputs);
    backward(loss);

    double max_rel = 0.0;
    for (auto& t : inputs) {
        if (!t.requires_grad()) continue;
        const std::vector<double> analytic = t.grad();
        for (size_t i = 0; i < t.data().size(); ++i) {
            const double saved = t.data()[i];
            t.data()[i] = saved + step;
            const double up = fn(inputs).item();
            t.data()[i] = saved - step;
            const double down = fn(inputs).item();
            t.data()[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-8});
            max_rel = std::max(max_rel, std::abs(numeric - analytic[i]) / denom);
        }
    }
    return max_rel;
}

// Naive triple-loop matmul oracle, independent of the library kernel.
inline std::vector<double> naive_matmul(const std::vector<double>& a,
                                        const std::vector<double>& b, int m, int k, int n) {
    std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int kk = 0; kk < k; ++kk)
                s += a[static_cast<size_t>(i) * k + kk] * b[static_cast<size_t>(kk) * n + j];
            c[static_cast<size_t>(i) * n + j] = s;
        }
    return c;
}

}  // namespace aulite::testing
