#pragma once

#include <cstddef>
#include <vector>

namespace duet {

// Dense row-major tensor. Most of the model lives in 2-D (rows = time or
// positions, cols = channels); shape is kept generic for the conv stack.
// Values are double internally; file formats convert to f32 at the boundary.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        v.assign(numel(shape), 0.0);
    }
    Tensor(int r, int c) : Tensor(std::vector<int>{r, c}) {}

    static size_t numel(const std::vector<int>& s) {
        size_t n = 1;
        for (int d : s) n *= size_t(d);
        return n;
    }

    static Tensor zeros(int r, int c) { return Tensor(r, c); }
    static Tensor full(int r, int c, double x) {
        Tensor t(r, c);
        for (auto& e : t.v) e = x;
        return t;
    }
    static Tensor row(const std::vector<double>& x) {
        Tensor t(1, int(x.size()));
        t.v = x;
        return t;
    }

    size_t size() const { return v.size(); }
    int rows() const { return shape.empty() ? 0 : shape[0]; }
    int cols() const { return shape.size() < 2 ? (shape.empty() ? 0 : 1) : shape[1]; }

    double& at(int i, int j) { return v[size_t(i) * cols() + j]; }
    double at(int i, int j) const { return v[size_t(i) * cols() + j]; }
    double* row_ptr(int i) { return v.data() + size_t(i) * cols(); }
    const double* row_ptr(int i) const { return v.data() + size_t(i) * cols(); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    void fill(double x) {
        for (auto& e : v) e = x;
    }

    bool all_finite() const;
};

// c = a @ b, shapes (m,k) x (k,n) -> (m,n); accumulate adds into c.
void matmul(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate = false);
// c = a @ b^T, shapes (m,k) x (n,k) -> (m,n).
void matmul_nt(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate = false);
// c = a^T @ b, shapes (m,k) x (m,n) -> (k,n).
void matmul_tn(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate = false);

}  // namespace duet
