#pragma once

// Shared oracles for the test suites. Everything here recomputes results by an
// independent route (finite differences, extended precision, brute force) and
// must not call back into the implementation paths it checks.

#include <cmath>
#include <functional>
#include <vector>

#include "viar/tensor.hpp"

namespace viar::testing {

// Central finite differences of f with respect to every entry of param.
// f must re-run the forward pass from current parameter values.
template <typename Real>
std::vector<Real> finite_diff_grad(Tensor<Real>& param, const std::function<Real()>& f,
                                   Real step = Real(1e-5)) {
    std::vector<Real> grad(param.size());
    Real* p = param.data();
    for (std::size_t i = 0; i < param.size(); ++i) {
        const Real saved = p[i];
        p[i] = saved + step;
        const Real fp = f();
        p[i] = saved - step;
        const Real fm = f();
        p[i] = saved;
        grad[i] = (fp - fm) / (Real(2) * step);
    }
    return grad;
}

// Max relative error with an absolute floor so near-zero entries compare on
// absolute terms.
template <typename Real>
Real max_rel_err(const std::vector<Real>& got, const std::vector<Real>& want,
                 Real floor = Real(1e-6)) {
    Real worst = 0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        const Real denom = std::max(std::abs(want[i]), floor);
        worst = std::max(worst, std::abs(got[i] - want[i]) / denom);
    }
    return worst;
}

template <typename Real>
Real max_abs_diff(const std::vector<Real>& a, const std::vector<Real>& b) {
    Real worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

inline bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

// Row-wise exp-normalize in long double, the high-precision softmax oracle.
inline std::vector<double> softmax_rows_ld(const std::vector<double>& scores, std::size_t rows,
                                           std::size_t cols) {
    std::vector<double> out(scores.size());
    for (std::size_t i = 0; i < rows; ++i) {
        long double mx = scores[i * cols];
        for (std::size_t j = 1; j < cols; ++j) mx = std::max<long double>(mx, scores[i * cols + j]);
        long double sum = 0;
        std::vector<long double> e(cols);
        for (std::size_t j = 0; j < cols; ++j) {
            e[j] = expl(static_cast<long double>(scores[i * cols + j]) - mx);
            sum += e[j];
        }
        for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = static_cast<double>(e[j] / sum);
    }
    return out;
}

} // namespace viar::testing
