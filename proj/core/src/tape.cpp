#include "duet/tape.hpp"

#include "duet/common.hpp"

#include <cassert>
#include <cmath>
#include <limits>

namespace duet {

namespace {

constexpr double kNegInf = -1.0e30;

inline double log_add(double a, double b) {
    if (a <= kNegInf) return b;
    if (b <= kNegInf) return a;
    double hi = a > b ? a : b;
    return hi + std::log1p(std::exp(-std::fabs(a - b)));
}

}  // namespace

Tensor& Tape::grad_buf(int idx) {
    Node& n = nodes_[idx];
    if (n.grad.v.empty()) {
        n.grad = Tensor(n.val.shape);
    }
    return n.grad;
}

const Tensor& Tape::grad(Var v) const {
    static const Tensor empty;
    const Node& n = nodes_[v.idx];
    return n.grad.v.empty() ? empty : n.grad;
}

bool Tape::has_grad(Var v) const { return !nodes_[v.idx].grad.v.empty(); }

void Tape::reset() { nodes_.clear(); }

void Tape::backward(Var loss) {
    assert(loss.tape == this);
    assert(nodes_[loss.idx].val.size() == 1);
    grad_buf(loss.idx).v[0] = 1.0;
    for (int i = loss.idx; i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.back && !n.grad.v.empty()) n.back();
    }
}

Var Tape::input(Tensor value, bool needs_grad) {
    int idx = push(std::move(value), needs_grad);
    return Var{this, idx};
}

Var Tape::add(Var a, Var b) {
    assert(a.val().same_shape(b.val()));
    Tensor out = a.val();
    const Tensor& bv = b.val();
    for (size_t i = 0; i < out.size(); ++i) out.v[i] += bv.v[i];
    int idx = push(std::move(out), ng(a) || ng(b));
    nodes_[idx].back = [this, idx, a, b]() {
        const Tensor& g = nodes_[idx].grad;
        if (ng(a)) {
            Tensor& ga = grad_buf(a.idx);
            for (size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i];
        }
        if (ng(b)) {
            Tensor& gb = grad_buf(b.idx);
            for (size_t i = 0; i < g.size(); ++i) gb.v[i] += g.v[i];
        }
    };
    return Var{this, idx};
}

Var Tape::add_scaled(Var a, Var b, double c) {
    assert(a.val().same_shape(b.val()));
    Tensor out = a.val();
    const Tensor& bv = b.val();
    for (size_t i = 0; i < out.size(); ++i) out.v[i] += c * bv.v[i];
    int idx = push(std::move(out), ng(a) || ng(b));
    nodes_[idx].back = [this, idx, a, b, c]() {
        const Tensor& g = nodes_[idx].grad;
        if (ng(a)) {
            Tensor& ga = grad_buf(a.idx);
            for (size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i];
        }
        if (ng(b)) {
            Tensor& gb = grad_buf(b.idx);
            for (size_t i = 0; i < g.size(); ++i) gb.v[i] += c * g.v[i];
        }
    };
    return Var{this, idx};
}

Var Tape::add_rowvec(Var a, Var r) {
    const int m = a.val().rows(), n = a.val().cols();
    assert(r.val().rows() == 1 && r.val().cols() == n);
    Tensor out = a.val();
    const double* rv = r.val().v.data();
    for (int i = 0; i < m; ++i) {
        double* o = out.row_ptr(i);
        for (int j = 0; j < n; ++j) o[j] += rv[j];
    }
    int idx = push(std::move(out), ng(a) || ng(r));
    nodes_[idx].back = [this, idx, a, r, m, n]() {
        const Tensor& g = nodes_[idx].grad;
        if (ng(a)) {
            Tensor& ga = grad_buf(a.idx);
            for (size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i];
        }
        if (ng(r)) {
            Tensor& gr = grad_buf(r.idx);
            for (int i = 0; i < m; ++i) {
                const double* gi = g.row_ptr(i);
                for (int j = 0; j < n; ++j) gr.v[j] += gi[j];
            }
        }
    };
    return Var{this, idx};
}

Var Tape::add_const(Var a, const Tensor& c) {
    assert(a.val().same_shape(c));
    Tensor out = a.val();
    for (size_t i = 0; i < out.size(); ++i) out.v[i] += c.v[i];
    int idx = push(std::move(out), ng(a));
    nodes_[idx].back = [this, idx, a]() {
        const Tensor& g = nodes_[idx].grad;
        if (ng(a)) {
            Tensor& ga = grad_buf(a.idx);
            for (size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i];
        }
    };
    return Var{this, idx};
}

Var Tape::scale(Var a, double c) {
    Tensor out = a.val();
    for (auto& x : out.v) x *= c;
    int idx = push(std::move(out), ng(a));
    nodes_[idx].back = [this, idx, a, c]() {
        const Tensor& g = nodes_[idx].grad;
        if (ng(a)) {
            Tensor& ga = grad_buf(a.idx);
            for (size_t i = 0; i < g.size(); ++i) ga.v[i] += c * g.v[i];
        }
    };
    return Var{this, idx};
}

Var Tape::hadamard(Var a, Var b) {
    assert(a.val().same_shape(b.val()));
    Tensor out = a.val();
    const Tensor& bv = b.val();
    for (size_t i = 0; i < out.size(); ++i) out.v[i] *= bv.v[i];
    int idx = push(std::move(out), ng(a) || ng(b));
    nodes_[idx].back = [this, idx, a, b]() {
        const Tensor& g = nodes_[idx].grad;
        const Tensor& av = nodes_[a.idx].val;
        const Tensor& bv2 = nodes_[b.idx].val;
        if (ng(a)) {
            Tensor& ga = grad_buf(a.idx);
            for (size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i] * bv2.v[i];
        }
        if (ng(b)) {
            Tensor& gb = grad_buf(b.idx);
            for (size_t i = 0; i < g.size(); ++i) gb.v[i] += g.v[i] * av.v[i];
        }
    };
    return Var{this, idx};
}

Var Tape::relu(Var a) {
    Tensor out = a.val();
    for (auto& x : out.v) x = x > 0.0 ? x : 0.0;
    int idx = push(std::move(out), ng(a));
    nodes_[idx].back = [this, idx, a]() {
        if (!ng(a)) return;
        const Tensor& g = nodes_[idx].grad;
        const Tensor& av = nodes_[a.idx].val;
        Tensor& ga = grad_buf(a.idx);
        for (size_t i = 0; i < g.size(); ++i) {
            if (av.v[i] > 0.0) ga.v[i] += g.v[i];
        }
    };
    return Var{this, idx};
}

Var Tape::swish(Var a) {
    Tensor out = a.val();
    for (auto& x : out.v) x = x / (1.0 + std::exp(-x));
    int idx = push(std::move(out), ng(a));
    nodes_[idx].back = [this, idx, a]() {
        if (!ng(a)) return;
        const Tensor& g = nodes_[idx].grad;
        const Tensor& av = nodes_[a.idx].val;
        Tensor& ga = grad_buf(a.idx);
        for (size_t i = 0; i < g.size(); ++i) {
            double s = 1.0 / (1.0 + std::exp(-av.v[i]));
            ga.v[i] += g.v[i] * s * (1.0 + av.v[i] * (1.0 - s));
        }
    };
    return Var{this, idx};
}

Var Tape::sigmoid(Var a) {
    Tensor out = a.val();
    for (auto& x : out.v) x = 1.0 / (1.0 + std::exp(-x));
    int idx = push(std::move(out), ng(a));
    nodes_[idx].back = [this, idx, a]() {
        if (!ng(a)) return;
        const Tensor& g = nodes_[idx].grad;
        const Tensor& ov = nodes_[idx].val;
        Tensor& ga = grad_buf(a.idx);
        for (size_t i = 0; i < g.size(); ++i) {
            double s = ov.v[i];
            ga.v[i] += g.v[i] * s * (1.0 - s);
        }
    };
    return Var{this, idx};
}

Var Tape::glu(Var a) {
    const int m = a.val().rows(), n2 = a.val().cols();
    assert(n2 % 2 == 0);
    const int n = n2 / 2;
    Tensor out(m, n);
    const Tensor& av = a.val();
    for (int i = 0; i < m; ++i) {
        const double* xi = av.row_ptr(i);
        double* o = out.row_ptr(i);
        for (int j = 0; j < n; ++j) {
            double s = 1.0 / (1.0 + std::exp(-xi[n + j]));
            o[j] = xi[j] * s;
        }
    }
    int idx = push(std::move(out), ng(a));
    nodes_[idx].back = [this, idx, a, m, n]() {
        if (!ng(a)) return;
        const Tensor& g = nodes_[idx].grad;
        const Tensor& av2 = nodes_[a.idx].val;
        Tensor& ga = grad_buf(a.idx);
        for (int i = 0; i < m; ++i) {
            const double* gi = g.row_ptr(i);
            const double* xi = av2.row_ptr(i);
            double* gx = ga.row_ptr(i);
            for (int j = 0; j < n; ++j) {
                double s = 1.0 / (1.0 + std::exp(-xi[n + j]));
                gx[j] += gi[j] * s;
                gx[n + j] += gi[j] * xi[j] * s * (1.0 - s);
            }
        }
    };
    return Var{this, idx};
}

Var Tape::matmul(Var a, Var b) {
    assert(a.val().cols() == b.val().rows());
    Tensor out;
    duet::matmul(a.val(), b.val(), out);
    int idx = push(std::move(out), ng(a) || ng(b));
    nodes_[idx].back = [this, idx, a, b]() {
        const Tensor& g = nodes_[idx].grad;
        if (ng(a)) duet::matmul_nt(g, nodes_[b.idx].val, grad_buf(a.idx), true);
        if (ng(b)) duet::matmul_tn(nodes_[a.idx].val, g, grad_buf(b.idx), true);
    };
    return Var{this, idx};
}

Var Tape::matmul_nt(Var a, Var b) {
    assert(a.val().cols() == b.val().cols());
    Tensor out;
    duet::matmul_nt(a.val(), b.val(), out);
    int idx = push(std::move(out), ng(a) || ng(b));
    nodes_[idx].back = [this, idx, a, b]() {
        const Tensor& g = nodes_[idx].grad;
        if (ng(a)) duet::matmul(g, nodes_[b.idx].val, grad_buf(a.idx), true);
        if (ng(b)) duet::matmul_tn(g, nodes_[a.idx].val, grad_buf(b.idx), true);
    };
    return Var{this, idx};
}

Var Tape::layer_norm(Var x, Var gamma, Var beta, double eps) {
    const int m = x.val().rows(), n = x.val().cols();
    assert(gamma.val().cols() == n && beta.val().cols() == n);
    Tensor out(m, n);
    const Tensor& xv = x.val();
    const double* gv = gamma.val().v.data();
    const double* bv = beta.val().v.data();
    for (int i = 0; i < m; ++i) {
        const double* xi = xv.row_ptr(i);
        double* o = out.row_ptr(i);
        double mu = 0.0;
        for (int j = 0; j < n; ++j) mu += xi[j];
        mu /= double(n);
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            double d = xi[j] - mu;
            var += d * d;
        }
        var /= double(n);
        double inv_sigma = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < n; ++j) o[j] = gv[j] * (xi[j] - mu) * inv_sigma + bv[j];
    }
    int idx = push(std::move(out), ng(x) || ng(gamma) || ng(beta));
    nodes_[idx].back = [this, idx, x, gamma, beta, m, n, eps]() {
        const Tensor& g = nodes_[idx].grad;
        const Tensor& xv2 = nodes_[x.idx].val;
        const double* gv2 = nodes_[gamma.idx].val.v.data();
        for (int i = 0; i < m; ++i) {
            const double* xi = xv2.row_ptr(i);
            const double* gi = g.row_ptr(i);
            double mu = 0.0;
            for (int j = 0; j < n; ++j) mu += xi[j];
            mu /= double(n);
            double var = 0.0;
            for (int j = 0; j < n; ++j) {
                double d = xi[j] - mu;
                var += d * d;
            }
            var /= double(n);
            double inv_sigma = 1.0 / std::sqrt(var + eps);
            if (ng(beta)) {
                Tensor& gb = grad_buf(beta.idx);
                for (int j = 0; j < n; ++j) gb.v[j] += gi[j];
            }
            if (ng(gamma)) {
                Tensor& gg = grad_buf(gamma.idx);
                for (int j = 0; j < n; ++j) {
                    gg.v[j] += gi[j] * (xi[j] - mu) * inv_sigma;
                }
            }
            if (ng(x)) {
                double mean_h = 0.0, mean_hx = 0.0;
                for (int j = 0; j < n; ++j) {
                    double h = gv2[j] * gi[j];
                    double xh = (xi[j] - mu) * inv_sigma;
                    mean_h += h;
                    mean_hx += h * xh;
                }
                mean_h /= double(n);
                mean_hx /= double(n);
                Tensor& gx = grad_buf(x.idx);
                double* gxi = gx.row_ptr(i);
                for (int j = 0; j < n; ++j) {
                    double h = gv2[j] * gi[j];
                    double xh = (xi[j] - mu) * inv_sigma;
                    gxi[j] += (h - mean_h - xh * mean_hx) * inv_sigma;
                }
            }
        }
    };
    return Var{this, idx};
}

Var Tape::softmax_rows(Var x) {
    const int m = x.val().rows(), n = x.val().cols();
    Tensor out = x.val();
    for (int i = 0; i < m; ++i) {
        double* o = out.row_ptr(i);
        double hi = o[0];
        for (int j = 1; j < n; ++j) hi = std::max(hi, o[j]);
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            o[j] = std::exp(o[j] - hi);
            z += o[j];
        }
        double inv = 1.0 / z;
        for (int j = 0; j < n; ++j) o[j] *= inv;
    }
    int idx = push(std::move(out), ng(x));
    nodes_[idx].back = [this, idx, x, m, n]() {
        if (!ng(x)) return;
        const Tensor& g = nodes_[idx].grad;
        const Tensor& s = nodes_[idx].val;
        Tensor& gx = grad_buf(x.idx);
        for (int i = 0; i < m; ++i) {
            const double* gi = g.row_ptr(i);
            const double* si = s.row_ptr(i);
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += gi[j] * si[j];
            double* gxi = gx.row_ptr(i);
            for (int j = 0; j < n; ++j) gxi[j] += si[j] * (gi[j] - dot);
        }
    };
    return Var{this, idx};
}

Var Tape::log_softmax_rows(Var x) {
    const int m = x.val().rows(), n = x.val().cols();
    Tensor out = x.val();
    for (int i = 0; i < m; ++i) {
        double* o = out.row_ptr(i);
        double hi = o[0];
        for (int j = 1; j < n; ++j) hi = std::max(hi, o[j]);
        double z = 0.0;
        for (int j = 0; j < n; ++j) z += std::exp(o[j] - hi);
        double lse = hi + std::log(z);
        for (int j = 0; j < n; ++j) o[j] -= lse;
    }
    int idx = push(std::move(out), ng(x));
    nodes_[idx].back = [this, idx, x, m, n]() {
        if (!ng(x)) return;
        const Tensor& g = nodes_[idx].grad;
        const Tensor& y = nodes_[idx].val;
        Tensor& gx = grad_buf(x.idx);
        for (int i = 0; i < m; ++i) {
            const double* gi = g.row_ptr(i);
            const double* yi = y.row_ptr(i);
            double gsum = 0.0;
            for (int j = 0; j < n; ++j) gsum += gi[j];
            double* gxi = gx.row_ptr(i);
            for (int j = 0; j < n; ++j) gxi[j] += gi[j] - std::exp(yi[j]) * gsum;
        }
    };
    return Var{this, idx};
}

Var Tape::reshape(Var a, std::vector<int> shape) {
    assert(Tensor::numel(shape) == a.val().size());
    Tensor out;
    out.shape = std::move(shape);
    out.v = a.val().v;
    int idx = push(std::move(out), ng(a));
    nodes_[idx].back = [this, idx, a]() {
        if (!ng(a)) return;
        const Tensor& g = nodes_[idx].grad;
        Tensor& ga = grad_buf(a.idx);
        for (size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i];
    };
    return Var{this, idx};
}

Var Tape::concat_rows(Var a, Var b) {
    assert(a.val().cols() == b.val().cols());
    const int m1 = a.val().rows(), m2 = b.val().rows(), n = a.val().cols();
    Tensor out(m1 + m2, n);
    std::copy(a.val().v.begin(), a.val().v.end(), out.v.begin());
    std::copy(b.val().v.begin(), b.val().v.end(), out.v.begin() + size_t(m1) * n);
    int idx = push(std::move(out), ng(a) || ng(b));
    nodes_[idx].back = [this, idx, a, b, m1, m2, n]() {
        const Tensor& g = nodes_[idx].grad;
        if (ng(a)) {
            Tensor& ga = grad_buf(a.idx);
            for (size_t i = 0; i < size_t(m1) * n; ++i) ga.v[i] += g.v[i];
        }
        if (ng(b)) {
            Tensor& gb = grad_buf(b.idx);
            const size_t off = size_t(m1) * n;
            for (size_t i = 0; i < size_t(m2) * n; ++i) gb.v[i] += g.v[off + i];
        }
    };
    return Var{this, idx};
}

Var Tape::slice_rows(Var a, int r0, int r1) {
    const int n = a.val().cols();
    assert(0 <= r0 && r0 <= r1 && r1 <= a.val().rows());
    Tensor out(r1 - r0, n);
    std::copy(a.val().v.begin() + size_t(r0) * n, a.val().v.begin() + size_t(r1) * n,
              out.v.begin());
    int idx = push(std::move(out), ng(a));
    nodes_[idx].back = [this, idx, a, r0, r1, n]() {
        if (!ng(a)) return;
        const Tensor& g = nodes_[idx].grad;
        Tensor& ga = grad_buf(a.idx);
        const size_t off = size_t(r0) * n;
        for (size_t i = 0; i < size_t(r1 - r0) * n; ++i) ga.v[off + i] += g.v[i];
    };
    return Var{this, idx};
}

Var Tape::slice_cols(Var a, int c0, int c1) {
    const int m = a.val().rows(), n = a.val().cols();
    assert(0 <= c0 && c0 <= c1 && c1 <= n);
    Tensor out(m, c1 - c0);
    for (int i = 0; i < m; ++i) {
        const double* src = a.val().row_ptr(i);
        double* dst = out.row_ptr(i);
        for (int j = c0; j < c1; ++j) dst[j - c0] = src[j];
    }
    int idx = push(std::move(out), ng(a));
    nodes_[idx].back = [this, idx, a, c0, c1, m]() {
        if (!ng(a)) return;
        const Tensor& g = nodes_[idx].grad;
        Tensor& ga = grad_buf(a.idx);
        for (int i = 0; i < m; ++i) {
            const double* gi = g.row_ptr(i);
            double* gai = ga.row_ptr(i);
            for (int j = c0; j < c1; ++j) gai[j] += gi[j - c0];
        }
    };
    return Var{this, idx};
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
    assert(!parts.empty());
    const int m = parts[0].val().rows();
    int n = 0;
    bool needs = false;
    for (const Var& p : parts) {
        assert(p.val().rows() == m);
        n += p.val().cols();
        needs = needs || ng(p);
    }
    Tensor out(m, n);
    int off = 0;
    for (const Var& p : parts) {
        const int pn = p.val().cols();
        for (int i = 0; i < m; ++i) {
            const double* src = p.val().row_ptr(i);
            double* dst = out.row_ptr(i) + off;
            for (int j = 0; j < pn; ++j) dst[j] = src[j];
        }
        off += pn;
    }
    int idx = push(std::move(out), needs);
    std::vector<Var> ps = parts;
    nodes_[idx].back = [this, idx, ps, m]() {
        const Tensor& g = nodes_[idx].grad;
        int off2 = 0;
        for (const Var& p : ps) {
            const int pn = p.val().cols();
            if (ng(p)) {
                Tensor& gp = grad_buf(p.idx);
                for (int i = 0; i < m; ++i) {
                    const double* gi = g.row_ptr(i) + off2;
                    double* gpi = gp.row_ptr(i);
                    for (int j = 0; j < pn; ++j) gpi[j] += gi[j];
                }
            }
            off2 += pn;
        }
    };
    return Var{this, idx};
}

Var Tape::mul_rowmask(Var a, const std::vector<double>& row_scale) {
    const int m = a.val().rows(), n = a.val().cols();
    assert(int(row_scale.size()) == m);
    Tensor out = a.val();
    for (int i = 0; i < m; ++i) {
        double* o = out.row_ptr(i);
        for (int j = 0; j < n; ++j) o[j] *= row_scale[i];
    }
    int idx = push(std::move(out), ng(a));
    std::vector<double> rs = row_scale;
    nodes_[idx].back = [this, idx, a, rs, m, n]() {
        if (!ng(a)) return;
        const Tensor& g = nodes_[idx].grad;
        Tensor& ga = grad_buf(a.idx);
        for (int i = 0; i < m; ++i) {
            const double* gi = g.row_ptr(i);
            double* gai = ga.row_ptr(i);
            for (int j = 0; j < n; ++j) gai[j] += gi[j] * rs[i];
        }
    };
    return Var{this, idx};
}

Var Tape::replace_rows(Var a, Var replacement_row, const std::vector<uint8_t>& flags) {
    const int m = a.val().rows(), n = a.val().cols();
    assert(int(flags.size()) == m);
    assert(replacement_row.val().rows() == 1 && replacement_row.val().cols() == n);
    Tensor out = a.val();
    const double* rep = replacement_row.val().v.data();
    for (int i = 0; i < m; ++i) {
        if (!flags[i]) continue;
        double* o = out.row_ptr(i);
        for (int j = 0; j < n; ++j) o[j] = rep[j];
    }
    int idx = push(std::move(out), ng(a) || ng(replacement_row));
    std::vector<uint8_t> fl = flags;
    nodes_[idx].back = [this, idx, a, replacement_row, fl, m, n]() {
        const Tensor& g = nodes_[idx].grad;
        if (ng(a)) {
            Tensor& ga = grad_buf(a.idx);
            for (int i = 0; i < m; ++i) {
                if (fl[i]) continue;
                const double* gi = g.row_ptr(i);
                double* gai = ga.row_ptr(i);
                for (int j = 0; j < n; ++j) gai[j] += gi[j];
            }
        }
        if (ng(replacement_row)) {
            Tensor& gr = grad_buf(replacement_row.idx);
            for (int i = 0; i < m; ++i) {
                if (!fl[i]) continue;
                const double* gi = g.row_ptr(i);
                for (int j = 0; j < n; ++j) gr.v[j] += gi[j];
            }
        }
    };
    return Var{this, idx};
}

Var Tape::dropout(Var a, double p, Rng& rng) {
    if (p <= 0.0) return a;
    assert(p < 1.0);
    const double keep_scale = 1.0 / (1.0 - p);
    Tensor out = a.val();
    std::vector<double> mask(out.size());
    for (size_t i = 0; i < out.size(); ++i) {
        mask[i] = rng.uniform() < p ? 0.0 : keep_scale;
        out.v[i] *= mask[i];
    }
    int idx = push(std::move(out), ng(a));
    nodes_[idx].back = [this, idx, a, mask = std::move(mask)]() {
        if (!ng(a)) return;
        const Tensor& g = nodes_[idx].grad;
        Tensor& ga = grad_buf(a.idx);
        for (size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i] * mask[i];
    };
    return Var{this, idx};
}

Var Tape::gather_rows(Var table, const std::vector<int>& ids) {
    const int n = table.val().cols();
    Tensor out(int(ids.size()), n);
    for (size_t i = 0; i < ids.size(); ++i) {
        assert(ids[i] >= 0 && ids[i] < table.val().rows());
        const double* src = table.val().row_ptr(ids[i]);
        double* dst = out.row_ptr(int(i));
        for (int j = 0; j < n; ++j) dst[j] = src[j];
    }
    int idx = push(std::move(out), ng(table));
    std::vector<int> id = ids;
    nodes_[idx].back = [this, idx, table, id, n]() {
        if (!ng(table)) return;
        const Tensor& g = nodes_[idx].grad;
        Tensor& gt = grad_buf(table.idx);
        for (size_t i = 0; i < id.size(); ++i) {
            const double* gi = g.row_ptr(int(i));
            double* dst = gt.row_ptr(id[i]);
            for (int j = 0; j < n; ++j) dst[j] += gi[j];
        }
    };
    return Var{this, idx};
}

Var Tape::depthwise_conv1d(Var x, Var w, Var bias) {
    const int t_len = x.val().rows(), d = x.val().cols();
    const int k = w.val().rows();
    assert(w.val().cols() == d);
    assert(bias.val().rows() == 1 && bias.val().cols() == d);
    assert(k % 2 == 1);
    const int half = k / 2;
    Tensor out(t_len, d);
    const Tensor& xv = x.val();
    const Tensor& wv = w.val();
    const double* bv = bias.val().v.data();
    for (int t = 0; t < t_len; ++t) {
        double* o = out.row_ptr(t);
        for (int j = 0; j < d; ++j) o[j] = bv[j];
        for (int dk = 0; dk < k; ++dk) {
            int src = t + dk - half;
            if (src < 0 || src >= t_len) continue;
            const double* xr = xv.row_ptr(src);
            const double* wr = wv.row_ptr(dk);
            for (int j = 0; j < d; ++j) o[j] += wr[j] * xr[j];
        }
    }
    int idx = push(std::move(out), ng(x) || ng(w) || ng(bias));
    nodes_[idx].back = [this, idx, x, w, bias, t_len, d, k, half]() {
        const Tensor& g = nodes_[idx].grad;
        const Tensor& xv2 = nodes_[x.idx].val;
        const Tensor& wv2 = nodes_[w.idx].val;
        if (ng(bias)) {
            Tensor& gb = grad_buf(bias.idx);
            for (int t = 0; t < t_len; ++t) {
                const double* gi = g.row_ptr(t);
                for (int j = 0; j < d; ++j) gb.v[j] += gi[j];
            }
        }
        for (int t = 0; t < t_len; ++t) {
            const double* gi = g.row_ptr(t);
            for (int dk = 0; dk < k; ++dk) {
                int src = t + dk - half;
                if (src < 0 || src >= t_len) continue;
                if (ng(x)) {
                    Tensor& gx = grad_buf(x.idx);
                    double* gxr = gx.row_ptr(src);
                    const double* wr = wv2.row_ptr(dk);
                    for (int j = 0; j < d; ++j) gxr[j] += wr[j] * gi[j];
                }
                if (ng(w)) {
                    Tensor& gw = grad_buf(w.idx);
                    double* gwr = gw.row_ptr(dk);
                    const double* xr = xv2.row_ptr(src);
                    for (int j = 0; j < d; ++j) gwr[j] += xr[j] * gi[j];
                }
            }
        }
    };
    return Var{this, idx};
}

Var Tape::conv2d_s2(Var x, Var w, Var bias) {
    assert(x.val().shape.size() == 3);
    assert(w.val().shape.size() == 4);
    const int h = x.val().shape[0], wd = x.val().shape[1], cin = x.val().shape[2];
    const int cout = w.val().shape[0];
    assert(w.val().shape[1] == 3 && w.val().shape[2] == 3 && w.val().shape[3] == cin);
    assert(bias.val().rows() == 1 && bias.val().cols() == cout);
    const int ho = (h + 1) / 2, wo = (wd + 1) / 2;
    Tensor out(std::vector<int>{ho, wo, cout});
    const double* xv = x.val().v.data();
    const double* wv = w.val().v.data();
    const double* bv = bias.val().v.data();
    auto xat = [&](int i, int j, int c) { return xv[(size_t(i) * wd + j) * cin + c]; };
    auto wat = [&](int oc, int di, int dj, int c) {
        return wv[((size_t(oc) * 3 + di) * 3 + dj) * cin + c];
    };
    for (int i = 0; i < ho; ++i) {
        for (int j = 0; j < wo; ++j) {
            double* o = &out.v[(size_t(i) * wo + j) * cout];
            for (int oc = 0; oc < cout; ++oc) o[oc] = bv[oc];
            for (int di = 0; di < 3; ++di) {
                int ii = 2 * i + di - 1;
                if (ii < 0 || ii >= h) continue;
                for (int dj = 0; dj < 3; ++dj) {
                    int jj = 2 * j + dj - 1;
                    if (jj < 0 || jj >= wd) continue;
                    for (int oc = 0; oc < cout; ++oc) {
                        double acc = 0.0;
                        for (int c = 0; c < cin; ++c) acc += wat(oc, di, dj, c) * xat(ii, jj, c);
                        o[oc] += acc;
                    }
                }
            }
        }
    }
    int idx = push(std::move(out), ng(x) || ng(w) || ng(bias));
    nodes_[idx].back = [this, idx, x, w, bias, h, wd, cin, cout, ho, wo]() {
        const Tensor& g = nodes_[idx].grad;
        const double* xv2 = nodes_[x.idx].val.v.data();
        const double* wv2 = nodes_[w.idx].val.v.data();
        auto gat = [&](int i, int j, int oc) { return g.v[(size_t(i) * wo + j) * cout + oc]; };
        if (ng(bias)) {
            Tensor& gb = grad_buf(bias.idx);
            for (int i = 0; i < ho; ++i)
                for (int j = 0; j < wo; ++j)
                    for (int oc = 0; oc < cout; ++oc) gb.v[oc] += gat(i, j, oc);
        }
        Tensor* gx = ng(x) ? &grad_buf(x.idx) : nullptr;
        Tensor* gw = ng(w) ? &grad_buf(w.idx) : nullptr;
        if (!gx && !gw) return;
        for (int i = 0; i < ho; ++i) {
            for (int j = 0; j < wo; ++j) {
                for (int di = 0; di < 3; ++di) {
                    int ii = 2 * i + di - 1;
                    if (ii < 0 || ii >= h) continue;
                    for (int dj = 0; dj < 3; ++dj) {
                        int jj = 2 * j + dj - 1;
                        if (jj < 0 || jj >= wd) continue;
                        for (int oc = 0; oc < cout; ++oc) {
                            double go = gat(i, j, oc);
                            if (go == 0.0) continue;
                            for (int c = 0; c < cin; ++c) {
                                size_t wi = ((size_t(oc) * 3 + di) * 3 + dj) * cin + c;
                                size_t xi = (size_t(ii) * wd + jj) * cin + c;
                                if (gx) gx->v[xi] += wv2[wi] * go;
                                if (gw) gw->v[wi] += xv2[xi] * go;
                            }
                        }
                    }
                }
            }
        }
    };
    return Var{this, idx};
}

Var Tape::sum_all(Var a) {
    Tensor out(1, 1);
    for (double x : a.val().v) out.v[0] += x;
    int idx = push(std::move(out), ng(a));
    nodes_[idx].back = [this, idx, a]() {
        if (!ng(a)) return;
        double g = nodes_[idx].grad.v[0];
        Tensor& ga = grad_buf(a.idx);
        for (auto& x : ga.v) x += g;
    };
    return Var{this, idx};
}

Var Tape::cross_entropy_sum(Var logits, const std::vector<int>& targets) {
    const int m = logits.val().rows(), n = logits.val().cols();
    assert(int(targets.size()) == m);
    Tensor out(1, 1);
    const Tensor& lv = logits.val();
    for (int i = 0; i < m; ++i) {
        if (targets[i] < 0) continue;
        assert(targets[i] < n);
        const double* li = lv.row_ptr(i);
        double hi = li[0];
        for (int j = 1; j < n; ++j) hi = std::max(hi, li[j]);
        double z = 0.0;
        for (int j = 0; j < n; ++j) z += std::exp(li[j] - hi);
        out.v[0] += hi + std::log(z) - li[targets[i]];
    }
    int idx = push(std::move(out), ng(logits));
    std::vector<int> tg = targets;
    nodes_[idx].back = [this, idx, logits, tg, m, n]() {
        if (!ng(logits)) return;
        double g = nodes_[idx].grad.v[0];
        const Tensor& lv2 = nodes_[logits.idx].val;
        Tensor& gl = grad_buf(logits.idx);
        for (int i = 0; i < m; ++i) {
            if (tg[i] < 0) continue;
            const double* li = lv2.row_ptr(i);
            double* gi = gl.row_ptr(i);
            double hi = li[0];
            for (int j = 1; j < n; ++j) hi = std::max(hi, li[j]);
            double z = 0.0;
            for (int j = 0; j < n; ++j) z += std::exp(li[j] - hi);
            double inv = 1.0 / z;
            for (int j = 0; j < n; ++j) gi[j] += g * std::exp(li[j] - hi) * inv;
            gi[tg[i]] -= g;
        }
    };
    return Var{this, idx};
}

Var Tape::ctc_loss(Var logits, const std::vector<int>& labels, int blank) {
    const int t_len = logits.val().rows(), n_cls = logits.val().cols();
    const int l_len = int(labels.size());
    if (l_len == 0) throw InvalidInput("ctc_loss: empty label sequence");
    int min_frames = l_len;
    for (int i = 0; i + 1 < l_len; ++i) {
        if (labels[i] == labels[i + 1]) ++min_frames;
    }
    if (t_len < min_frames) {
        throw NoAlignment("ctc_loss: input length " + std::to_string(t_len) +
                          " < minimum alignment length " + std::to_string(min_frames));
    }
    for (int lab : labels) {
        if (lab < 0 || lab >= n_cls || lab == blank) {
            throw InvalidInput("ctc_loss: label out of range");
        }
    }

    const int s_len = 2 * l_len + 1;
    auto lab_at = [&](int s) { return (s % 2 == 0) ? blank : labels[s / 2]; };

    // log-softmax rows of the logits
    Tensor lp(t_len, n_cls);
    {
        const Tensor& lv = logits.val();
        for (int t = 0; t < t_len; ++t) {
            const double* li = lv.row_ptr(t);
            double* o = lp.row_ptr(t);
            double hi = li[0];
            for (int j = 1; j < n_cls; ++j) hi = std::max(hi, li[j]);
            double z = 0.0;
            for (int j = 0; j < n_cls; ++j) z += std::exp(li[j] - hi);
            double lse = hi + std::log(z);
            for (int j = 0; j < n_cls; ++j) o[j] = li[j] - lse;
        }
    }

    Tensor alpha = Tensor::full(t_len, s_len, kNegInf);
    alpha.at(0, 0) = lp.at(0, blank);
    if (s_len > 1) alpha.at(0, 1) = lp.at(0, lab_at(1));
    for (int t = 1; t < t_len; ++t) {
        for (int s = 0; s < s_len; ++s) {
            double a = alpha.at(t - 1, s);
            if (s >= 1) a = log_add(a, alpha.at(t - 1, s - 1));
            if (s >= 2 && lab_at(s) != blank && lab_at(s) != lab_at(s - 2)) {
                a = log_add(a, alpha.at(t - 1, s - 2));
            }
            if (a > kNegInf) a += lp.at(t, lab_at(s));
            alpha.at(t, s) = a;
        }
    }
    double log_p = alpha.at(t_len - 1, s_len - 1);
    if (s_len > 1) log_p = log_add(log_p, alpha.at(t_len - 1, s_len - 2));
    if (log_p <= kNegInf) throw NoAlignment("ctc_loss: no feasible alignment");

    Tensor out(1, 1);
    out.v[0] = -log_p;
    int idx = push(std::move(out), ng(logits));
    std::vector<int> labs = labels;
    Tensor alpha_keep = std::move(alpha);
    Tensor lp_keep = std::move(lp);
    nodes_[idx].back = [this, idx, logits, labs, blank, t_len, n_cls, s_len, log_p,
                        alpha2 = std::move(alpha_keep), lp2 = std::move(lp_keep)]() {
        if (!ng(logits)) return;
        auto lab_at2 = [&](int s) { return (s % 2 == 0) ? blank : labs[s / 2]; };
        // beta recursion (includes the emission at t, like alpha)
        Tensor beta = Tensor::full(t_len, s_len, kNegInf);
        beta.at(t_len - 1, s_len - 1) = lp2.at(t_len - 1, blank);
        if (s_len > 1) beta.at(t_len - 1, s_len - 2) = lp2.at(t_len - 1, lab_at2(s_len - 2));
        for (int t = t_len - 2; t >= 0; --t) {
            for (int s = 0; s < s_len; ++s) {
                double b = beta.at(t + 1, s);
                if (s + 1 < s_len) b = log_add(b, beta.at(t + 1, s + 1));
                if (s + 2 < s_len && lab_at2(s + 2) != blank && lab_at2(s + 2) != lab_at2(s)) {
                    b = log_add(b, beta.at(t + 1, s + 2));
                }
                if (b > kNegInf) b += lp2.at(t, lab_at2(s));
                beta.at(t, s) = b;
            }
        }
        // d(-logP)/dlogit[t][j] = softmax[t][j] - sum_{s: lab(s)=j} gamma(t,s)
        const double g = nodes_[idx].grad.v[0];
        Tensor& gl = grad_buf(logits.idx);
        std::vector<double> lab_post(n_cls);
        for (int t = 0; t < t_len; ++t) {
            std::fill(lab_post.begin(), lab_post.end(), 0.0);
            for (int s = 0; s < s_len; ++s) {
                double a = alpha2.at(t, s), b = beta.at(t, s);
                if (a <= kNegInf || b <= kNegInf) continue;
                double lg = a + b - lp2.at(t, lab_at2(s)) - log_p;
                lab_post[lab_at2(s)] += std::exp(lg);
            }
            double* gi = gl.row_ptr(t);
            const double* lpt = lp2.row_ptr(t);
            for (int j = 0; j < n_cls; ++j) {
                gi[j] += g * (std::exp(lpt[j]) - lab_post[j]);
            }
        }
    };
    return Var{this, idx};
}

}  // namespace duet
