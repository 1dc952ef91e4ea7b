#include "duet/tensor.hpp"

#include <cassert>
#include <cmath>

namespace duet {

bool Tensor::all_finite() const {
    for (double x : v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

void matmul(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate) {
    const int m = a.rows(), k = a.cols(), n = b.cols();
    if (!accumulate) {
        c = Tensor(m, n);
    }
    for (int i = 0; i < m; ++i) {
        const double* ai = a.row_ptr(i);
        double* ci = c.row_ptr(i);
        for (int p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b.row_ptr(p);
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

void matmul_nt(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate) {
    const int m = a.rows(), k = a.cols(), n = b.rows();
    if (!accumulate) {
        c = Tensor(m, n);
    }
    for (int i = 0; i < m; ++i) {
        const double* ai = a.row_ptr(i);
        double* ci = c.row_ptr(i);
        for (int j = 0; j < n; ++j) {
            const double* bj = b.row_ptr(j);
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

void matmul_tn(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate) {
    const int m = a.rows(), k = a.cols(), n = b.cols();
    if (!accumulate) {
        c = Tensor(k, n);
    }
    for (int i = 0; i < m; ++i) {
        const double* ai = a.row_ptr(i);
        const double* bi = b.row_ptr(i);
        for (int p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            double* cp = c.row_ptr(p);
            for (int j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

}  // namespace duet
