#pragma once

// Shared test utilities: finite-difference gradient checking and small
// independent oracles used across the suites.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "flowsr/rng.hpp"
#include "flowsr/tape.hpp"
#include "flowsr/tensor.hpp"

namespace testutil {

using flowsr::TapeT;
using flowsr::TensorD;
using flowsr::VarT;

// Builds a fresh double-precision tape from `inputs`, evaluates the scalar
// `f`, and compares reverse-mode gradients against central finite
// differences (step 1e-5). Returns the worst violation of
//   |ad - fd| <= rel_tol * max(|ad|, |fd|) + abs_tol
// expressed as the ratio lhs/rhs, so values <= 1 pass.
struct GradCheckResult {
    double worst_ratio = 0.0;
    double worst_ad = 0.0;
    double worst_fd = 0.0;
    int worst_input = -1;
    std::size_t worst_elem = 0;
};

using ScalarFn =
    std::function<VarT<double>(TapeT<double>&, std::vector<VarT<double>>&)>;

inline GradCheckResult grad_check(std::vector<TensorD> inputs, const ScalarFn& f,
                                  double step = 1e-5, double rel_tol = 1e-4,
                                  double abs_tol = 1e-7) {
    auto eval = [&](const std::vector<TensorD>& ins) {
        TapeT<double> tape;
        std::vector<VarT<double>> vars;
        vars.reserve(ins.size());
        for (const auto& t : ins) vars.push_back(tape.constant(t));
        auto out = f(tape, vars);
        return out.value().data[0];
    };

    // reverse-mode gradients
    TapeT<double> tape;
    std::vector<VarT<double>> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t));
    auto out = f(tape, vars);
    tape.backward(out.id);

    GradCheckResult res;
    for (std::size_t vi = 0; vi < inputs.size(); ++vi) {
        const TensorD& ad_grad = vars[vi].value().numel() ? tape.grad(vars[vi].id) : TensorD();
        for (std::size_t e = 0; e < inputs[vi].numel(); ++e) {
            std::vector<TensorD> plus = inputs, minus = inputs;
            plus[vi].data[e] += step;
            minus[vi].data[e] -= step;
            double fd = (eval(plus) - eval(minus)) / (2.0 * step);
            double ad = ad_grad.data[e];
            double lhs = std::abs(ad - fd);
            double rhs = rel_tol * std::max(std::abs(ad), std::abs(fd)) + abs_tol;
            double ratio = lhs / rhs;
            if (ratio > res.worst_ratio) {
                res.worst_ratio = ratio;
                res.worst_ad = ad;
                res.worst_fd = fd;
                res.worst_input = static_cast<int>(vi);
                res.worst_elem = e;
            }
        }
    }
    return res;
}

inline TensorD random_tensor(std::vector<int> shape, std::uint64_t seed, double lo = -1.0,
                             double hi = 1.0) {
    TensorD t(std::move(shape));
    flowsr::Rng rng(seed);
    rng.fill_uniform(t, lo, hi);
    return t;
}

}  // namespace testutil
