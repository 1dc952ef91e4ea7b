#pragma once

// Central finite-difference gradient checking. The oracle side of every
// gradient test: independent of the tape's backward formulas by construction
// (it only calls forward passes).

#include "duet/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <vector>

namespace duet::testing {

struct FdReport {
    int checked = 0;
    int failed = 0;
    double worst_rel = 0.0;
    double worst_abs = 0.0;
};

// Compares analytic gradient entries against central differences
// (f(x+h) - f(x-h)) / 2h on the given flat indices of one tensor.
// An entry fails when |analytic - numeric| > atol + rtol * max(|a|, |n|);
// the absolute floor absorbs FD truncation noise on near-zero gradients.
inline FdReport check_gradient(std::function<double()> forward, Tensor& param,
                               const Tensor& analytic_grad,
                               const std::vector<size_t>& indices, double step = 1e-4,
                               double rtol = 1e-3, double atol = 1e-5,
                               bool verbose = false) {
    FdReport rep;
    for (size_t i : indices) {
        double saved = param.v[i];
        param.v[i] = saved + step;
        double up = forward();
        param.v[i] = saved - step;
        double down = forward();
        param.v[i] = saved;
        double numeric = (up - down) / (2.0 * step);
        double analytic = analytic_grad.v.empty() ? 0.0 : analytic_grad.v[i];
        double mag = std::max(std::fabs(numeric), std::fabs(analytic));
        double abs_err = std::fabs(numeric - analytic);
        rep.checked++;
        rep.worst_abs = std::max(rep.worst_abs, abs_err);
        if (mag > 0.0) rep.worst_rel = std::max(rep.worst_rel, abs_err / mag);
        if (abs_err > atol + rtol * mag) {
            rep.failed++;
            if (verbose) {
                std::printf(
                    "  fd mismatch at flat index %zu: analytic=%.8g numeric=%.8g abs=%.3g\n",
                    i, analytic, numeric, abs_err);
            }
        }
    }
    return rep;
}

}  // namespace duet::testing
