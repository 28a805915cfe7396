#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "viar/errors.hpp"

namespace viar {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

template <std::floating_point Real>
class Tape;

// Dense tensor. Values are immutable once a tensor participates in a graph;
// the grad buffer is the only field mutated afterwards. Copying a Tensor is a
// cheap handle copy (shared storage).
template <std::floating_point Real>
class Tensor {
  public:
    struct Data {
        Shape shape;
        std::vector<Real> v;
        std::vector<Real> g; // empty until a gradient lands
        bool rg = false;
    };
    using DataPtr = std::shared_ptr<Data>;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return from_values(std::move(shape), {}, requires_grad, /*fill_zero=*/true);
    }

    static Tensor full(Shape shape, Real value, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (Real& x : t.d_->v) x = value;
        return t;
    }

    static Tensor from_values(Shape shape, std::vector<Real> values, bool requires_grad = false,
                              bool fill_zero = false) {
        auto d = std::make_shared<Data>();
        d->shape = std::move(shape);
        if (fill_zero) {
            d->v.assign(shape_size(d->shape), Real(0));
        } else {
            if (values.size() != shape_size(d->shape))
                throw DimensionError("Tensor: " + std::to_string(values.size()) + " values for shape " +
                                     shape_str(d->shape));
            d->v = std::move(values);
        }
        d->rg = requires_grad;
        Tensor t;
        t.d_ = std::move(d);
        return t;
    }

    static Tensor scalar(Real value, bool requires_grad = false) {
        return from_values({}, {value}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return d_->shape; }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t size() const { return d_->v.size(); }
    std::size_t extent(std::size_t axis) const { return d_->shape.at(axis); }

    // Rank-2 conveniences.
    std::size_t rows() const { return rank() == 2 ? d_->shape[0] : (require_rank2("rows"), 0); }
    std::size_t cols() const { return rank() == 2 ? d_->shape[1] : (require_rank2("cols"), 0); }
    Real at(std::size_t r, std::size_t c) const { return d_->v[r * cols() + c]; }

    const Real* data() const { return d_->v.data(); }
    Real* data() { return d_->v.data(); }
    const std::vector<Real>& values() const { return d_->v; }

    Real value() const {
        if (size() != 1) throw ContractError("Tensor::value: tensor is not scalar");
        return d_->v[0];
    }

    bool requires_grad() const { return d_ && d_->rg; }
    void set_requires_grad(bool rg) { d_->rg = rg; }

    bool has_grad() const { return d_ && !d_->g.empty(); }
    // Gradient view; zeros if nothing has been accumulated yet.
    const std::vector<Real>& grad() const {
        ensure_grad();
        return d_->g;
    }
    std::vector<Real>& grad_mut() {
        ensure_grad();
        return d_->g;
    }
    void zero_grad() {
        if (d_ && !d_->g.empty()) std::fill(d_->g.begin(), d_->g.end(), Real(0));
    }

    // Same values, no graph connection.
    Tensor detach() const {
        Tensor t;
        t.d_ = std::make_shared<Data>();
        t.d_->shape = d_->shape;
        t.d_->v = d_->v;
        t.d_->rg = false;
        return t;
    }

    bool all_finite() const {
        for (Real x : d_->v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    const DataPtr& ptr() const { return d_; }

  private:
    void ensure_grad() const {
        if (d_->g.empty()) d_->g.assign(d_->v.size(), Real(0));
    }
    void require_rank2(const char* what) const {
        throw ContractError(std::string("Tensor::") + what + ": rank-2 tensor required, got " +
                            shape_str(d_->shape));
    }

    DataPtr d_;
    friend class Tape<Real>;
};

// ---------------------------------------------------------------------------
// raw kernels (no graph involvement)

template <std::floating_point Real>
inline void matmul_raw(const Real* a, std::size_t m, std::size_t k, const Real* b, std::size_t n,
                       Real* out) {
    std::fill(out, out + m * n, Real(0));
    for (std::size_t i = 0; i < m; ++i) {
        const Real* arow = a + i * k;
        Real* orow = out + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const Real aip = arow[p];
            if (aip == Real(0)) continue;
            const Real* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
}

template <std::floating_point Real>
inline std::vector<Real> transpose_raw(const Real* a, std::size_t m, std::size_t n) {
    std::vector<Real> t(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
    return t;
}

template <std::floating_point Real>
inline Real l2_norm(std::span<const Real> v) {
    Real s = 0;
    for (Real x : v) s += x * x;
    return std::sqrt(s);
}

template <std::floating_point Real>
inline Real l2_diff(const Tensor<Real>& a, const Tensor<Real>& b) {
    Real s = 0;
    const Real* pa = a.data();
    const Real* pb = b.data();
    for (std::size_t i = 0; i < a.size(); ++i) {
        const Real d = pa[i] - pb[i];
        s += d * d;
    }
    return std::sqrt(s);
}

// Cosine over flattened values. Identical vectors (including all-zero) give 1;
// a zero vector against a nonzero one gives 0.
template <std::floating_point Real>
inline Real cosine_flat(const Tensor<Real>& a, const Tensor<Real>& b) {
    Real dot = 0, na = 0, nb = 0;
    const Real* pa = a.data();
    const Real* pb = b.data();
    bool equal = true;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += pa[i] * pb[i];
        na += pa[i] * pa[i];
        nb += pb[i] * pb[i];
        equal = equal && pa[i] == pb[i];
    }
    if (equal) return Real(1);
    if (na == Real(0) || nb == Real(0)) return Real(0);
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// ---------------------------------------------------------------------------
// Tape: op executor + reverse-mode record. One tape per execution context;
// rebuilt for every training step. Ops run through a tape even when recording
// is off (they then behave as plain math).

template <std::floating_point Real>
class Tape {
  public:
    using T = Tensor<Real>;
    using DataPtr = typename Tensor<Real>::DataPtr;
    using GradMap = std::unordered_map<const void*, std::vector<Real>>;

    bool recording() const { return recording_; }
    void set_recording(bool on) { recording_ = on; }

    std::size_t node_count() const { return nodes_.size(); }
    void clear() {
        nodes_.clear();
        holders_.clear();
    }

    // ---- graph construction ----

    T matmul(const T& a, const T& b) {
        check_rank2(a, "matmul lhs");
        check_rank2(b, "matmul rhs");
        if (a.cols() != b.rows())
            throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " vs " +
                                 shape_str(b.shape()));
        const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
        std::vector<Real> out(m * n);
        matmul_raw(a.data(), m, k, b.data(), n, out.data());
        T y = make_out({m, n}, std::move(out), a.requires_grad() || b.requires_grad());
        if (y.requires_grad()) {
            push_node(y, [a, b, m, k, n](const std::vector<Real>& go, Tape& t) {
                if (a.requires_grad()) {
                    std::vector<Real> bt = transpose_raw(b.data(), k, n);
                    std::vector<Real> ga(m * k);
                    matmul_raw(go.data(), m, n, bt.data(), k, ga.data());
                    t.add_grad(a, ga);
                }
                if (b.requires_grad()) {
                    std::vector<Real> at = transpose_raw(a.data(), m, k);
                    std::vector<Real> gb(k * n);
                    matmul_raw(at.data(), k, m, go.data(), n, gb.data());
                    t.add_grad(b, gb);
                }
            });
        }
        return y;
    }

    T add(const T& a, const T& b) {
        check_same_shape(a, b, "add");
        std::vector<Real> out(a.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
        T y = make_out(a.shape(), std::move(out), a.requires_grad() || b.requires_grad());
        if (y.requires_grad()) {
            push_node(y, [a, b](const std::vector<Real>& go, Tape& t) {
                if (a.requires_grad()) t.add_grad(a, go);
                if (b.requires_grad()) t.add_grad(b, go);
            });
        }
        return y;
    }

    T sub(const T& a, const T& b) {
        check_same_shape(a, b, "sub");
        std::vector<Real> out(a.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
        T y = make_out(a.shape(), std::move(out), a.requires_grad() || b.requires_grad());
        if (y.requires_grad()) {
            push_node(y, [a, b](const std::vector<Real>& go, Tape& t) {
                if (a.requires_grad()) t.add_grad(a, go);
                if (b.requires_grad()) {
                    std::vector<Real> neg(go.size());
                    for (std::size_t i = 0; i < go.size(); ++i) neg[i] = -go[i];
                    t.add_grad(b, neg);
                }
            });
        }
        return y;
    }

    T mul(const T& a, const T& b) {
        check_same_shape(a, b, "mul");
        std::vector<Real> out(a.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
        T y = make_out(a.shape(), std::move(out), a.requires_grad() || b.requires_grad());
        if (y.requires_grad()) {
            push_node(y, [a, b](const std::vector<Real>& go, Tape& t) {
                if (a.requires_grad()) {
                    std::vector<Real> ga(go.size());
                    for (std::size_t i = 0; i < go.size(); ++i) ga[i] = go[i] * b.data()[i];
                    t.add_grad(a, ga);
                }
                if (b.requires_grad()) {
                    std::vector<Real> gb(go.size());
                    for (std::size_t i = 0; i < go.size(); ++i) gb[i] = go[i] * a.data()[i];
                    t.add_grad(b, gb);
                }
            });
        }
        return y;
    }

    T scale(const T& a, Real c) {
        std::vector<Real> out(a.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
        T y = make_out(a.shape(), std::move(out), a.requires_grad());
        if (y.requires_grad()) {
            push_node(y, [a, c](const std::vector<Real>& go, Tape& t) {
                std::vector<Real> ga(go.size());
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] = go[i] * c;
                t.add_grad(a, ga);
            });
        }
        return y;
    }

    // x: R x C, row: length C, broadcast-added to every row.
    T add_row(const T& x, const T& row) {
        check_rank2(x, "add_row");
        if (row.size() != x.cols())
            throw DimensionError("add_row: row length " + std::to_string(row.size()) +
                                 " vs cols " + std::to_string(x.cols()));
        const std::size_t r = x.rows(), c = x.cols();
        std::vector<Real> out(x.size());
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x.data()[i * c + j] + row.data()[j];
        T y = make_out(x.shape(), std::move(out), x.requires_grad() || row.requires_grad());
        if (y.requires_grad()) {
            push_node(y, [x, row, r, c](const std::vector<Real>& go, Tape& t) {
                if (x.requires_grad()) t.add_grad(x, go);
                if (row.requires_grad()) {
                    std::vector<Real> gr(c, Real(0));
                    for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < c; ++j) gr[j] += go[i * c + j];
                    t.add_grad(row, gr);
                }
            });
        }
        return y;
    }

    T transpose(const T& a) {
        check_rank2(a, "transpose");
        const std::size_t m = a.rows(), n = a.cols();
        T y = make_out({n, m}, transpose_raw(a.data(), m, n), a.requires_grad());
        if (y.requires_grad()) {
            push_node(y, [a, m, n](const std::vector<Real>& go, Tape& t) {
                t.add_grad(a, transpose_raw(go.data(), n, m));
            });
        }
        return y;
    }

    // Rows of x selected by index (embedding lookup / nearest-neighbor upsample).
    T gather_rows(const T& x, const std::vector<std::size_t>& idx) {
        check_rank2(x, "gather_rows");
        const std::size_t n = x.rows(), c = x.cols();
        std::vector<Real> out(idx.size() * c);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] >= n)
                throw IndexError("gather_rows: index " + std::to_string(idx[i]) + " out of " +
                                 std::to_string(n));
            std::copy_n(x.data() + idx[i] * c, c, out.data() + i * c);
        }
        T y = make_out({idx.size(), c}, std::move(out), x.requires_grad());
        if (y.requires_grad()) {
            push_node(y, [x, idx, c](const std::vector<Real>& go, Tape& t) {
                std::vector<Real> gx(x.size(), Real(0));
                for (std::size_t i = 0; i < idx.size(); ++i)
                    for (std::size_t j = 0; j < c; ++j) gx[idx[i] * c + j] += go[i * c + j];
                t.add_grad(x, gx);
            });
        }
        return y;
    }

    T concat_rows(const std::vector<T>& parts) {
        if (parts.empty()) throw ContractError("concat_rows: no parts");
        const std::size_t c = parts[0].cols();
        std::size_t r = 0;
        bool rg = false;
        for (const T& p : parts) {
            check_rank2(p, "concat_rows");
            if (p.cols() != c) throw DimensionError("concat_rows: column mismatch");
            r += p.rows();
            rg = rg || p.requires_grad();
        }
        std::vector<Real> out;
        out.reserve(r * c);
        for (const T& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
        T y = make_out({r, c}, std::move(out), rg);
        if (y.requires_grad()) {
            push_node(y, [parts, c](const std::vector<Real>& go, Tape& t) {
                std::size_t off = 0;
                for (const T& p : parts) {
                    if (p.requires_grad()) {
                        std::vector<Real> gp(go.begin() + off, go.begin() + off + p.size());
                        t.add_grad(p, gp);
                    }
                    off += p.size();
                }
            });
        }
        return y;
    }

    T concat_cols(const std::vector<T>& parts) {
        if (parts.empty()) throw ContractError("concat_cols: no parts");
        const std::size_t r = parts[0].rows();
        std::size_t c = 0;
        bool rg = false;
        for (const T& p : parts) {
            check_rank2(p, "concat_cols");
            if (p.rows() != r) throw DimensionError("concat_cols: row mismatch");
            c += p.cols();
            rg = rg || p.requires_grad();
        }
        std::vector<Real> out(r * c);
        std::size_t off = 0;
        for (const T& p : parts) {
            const std::size_t pc = p.cols();
            for (std::size_t i = 0; i < r; ++i)
                std::copy_n(p.data() + i * pc, pc, out.data() + i * c + off);
            off += pc;
        }
        T y = make_out({r, c}, std::move(out), rg);
        if (y.requires_grad()) {
            push_node(y, [parts, r, c](const std::vector<Real>& go, Tape& t) {
                std::size_t off = 0;
                for (const T& p : parts) {
                    const std::size_t pc = p.cols();
                    if (p.requires_grad()) {
                        std::vector<Real> gp(r * pc);
                        for (std::size_t i = 0; i < r; ++i)
                            std::copy_n(go.data() + i * c + off, pc, gp.data() + i * pc);
                        t.add_grad(p, gp);
                    }
                    off += pc;
                }
            });
        }
        return y;
    }

    T slice_rows(const T& x, std::size_t r0, std::size_t r1) {
        check_rank2(x, "slice_rows");
        if (r0 > r1 || r1 > x.rows()) throw RangeError("slice_rows: bad range");
        const std::size_t c = x.cols();
        std::vector<Real> out(x.values().begin() + r0 * c, x.values().begin() + r1 * c);
        T y = make_out({r1 - r0, c}, std::move(out), x.requires_grad());
        if (y.requires_grad()) {
            push_node(y, [x, r0, c](const std::vector<Real>& go, Tape& t) {
                std::vector<Real> gx(x.size(), Real(0));
                std::copy(go.begin(), go.end(), gx.begin() + r0 * c);
                t.add_grad(x, gx);
            });
        }
        return y;
    }

    T slice_cols(const T& x, std::size_t c0, std::size_t c1) {
        check_rank2(x, "slice_cols");
        if (c0 > c1 || c1 > x.cols()) throw RangeError("slice_cols: bad range");
        const std::size_t r = x.rows(), c = x.cols(), w = c1 - c0;
        std::vector<Real> out(r * w);
        for (std::size_t i = 0; i < r; ++i)
            std::copy_n(x.data() + i * c + c0, w, out.data() + i * w);
        T y = make_out({r, w}, std::move(out), x.requires_grad());
        if (y.requires_grad()) {
            push_node(y, [x, c0, r, c, w](const std::vector<Real>& go, Tape& t) {
                std::vector<Real> gx(x.size(), Real(0));
                for (std::size_t i = 0; i < r; ++i)
                    std::copy_n(go.data() + i * w, w, gx.data() + i * c + c0);
                t.add_grad(x, gx);
            });
        }
        return y;
    }

    // Row-wise softmax with an optional additive 0/-inf mask. Masked entries
    // come out exactly zero. The mask never receives gradient.
    T masked_softmax(const T& scores, const T* mask = nullptr) {
        check_rank2(scores, "masked_softmax");
        const std::size_t r = scores.rows(), c = scores.cols();
        if (mask) {
            if (mask->rank() != 2 || mask->cols() != c || (mask->rows() != r && mask->rows() != 1))
                throw DimensionError("masked_softmax: mask " + shape_str(mask->shape()) +
                                     " not broadcastable to " + shape_str(scores.shape()));
        }
        std::vector<Real> out(r * c);
        for (std::size_t i = 0; i < r; ++i) {
            const Real* srow = scores.data() + i * c;
            const Real* mrow = mask ? mask->data() + (mask->rows() == 1 ? 0 : i * c) : nullptr;
            Real mx = -std::numeric_limits<Real>::infinity();
            for (std::size_t j = 0; j < c; ++j) {
                const Real s = srow[j] + (mrow ? mrow[j] : Real(0));
                if (s > mx) mx = s;
            }
            if (!(mx > -std::numeric_limits<Real>::infinity()))
                throw DataError("masked_softmax: fully masked row " + std::to_string(i));
            Real sum = 0;
            Real* orow = out.data() + i * c;
            for (std::size_t j = 0; j < c; ++j) {
                const Real s = srow[j] + (mrow ? mrow[j] : Real(0));
                orow[j] = std::exp(s - mx);
                sum += orow[j];
            }
            for (std::size_t j = 0; j < c; ++j) orow[j] /= sum;
        }
        T y = make_out(scores.shape(), std::move(out), scores.requires_grad());
        if (y.requires_grad()) {
            push_node(y, [scores, y, r, c](const std::vector<Real>& go, Tape& t) {
                std::vector<Real> gx(r * c);
                for (std::size_t i = 0; i < r; ++i) {
                    const Real* yrow = y.data() + i * c;
                    const Real* grow = go.data() + i * c;
                    Real dot = 0;
                    for (std::size_t j = 0; j < c; ++j) dot += grow[j] * yrow[j];
                    for (std::size_t j = 0; j < c; ++j) gx[i * c + j] = yrow[j] * (grow[j] - dot);
                }
                t.add_grad(scores, gx);
            });
        }
        return y;
    }

    static constexpr Real kLayerNormEps = Real(1e-5);

    // Normalization over the last axis of a rank-2 tensor, then affine.
    T layer_norm(const T& x, const T& gain, const T& bias) {
        check_rank2(x, "layer_norm");
        const std::size_t r = x.rows(), c = x.cols();
        if (gain.size() != c || bias.size() != c)
            throw DimensionError("layer_norm: gain/bias length " + std::to_string(gain.size()) + "," +
                                 std::to_string(bias.size()) + " vs last axis " + std::to_string(c));
        std::vector<Real> out(r * c);
        auto xhat = std::make_shared<std::vector<Real>>(r * c);
        auto inv_sigma = std::make_shared<std::vector<Real>>(r);
        for (std::size_t i = 0; i < r; ++i) {
            const Real* xrow = x.data() + i * c;
            Real mean = 0;
            for (std::size_t j = 0; j < c; ++j) mean += xrow[j];
            mean /= Real(c);
            Real var = 0;
            for (std::size_t j = 0; j < c; ++j) {
                const Real d = xrow[j] - mean;
                var += d * d;
            }
            var /= Real(c);
            const Real is = Real(1) / std::sqrt(var + kLayerNormEps);
            (*inv_sigma)[i] = is;
            for (std::size_t j = 0; j < c; ++j) {
                const Real xh = (xrow[j] - mean) * is;
                (*xhat)[i * c + j] = xh;
                out[i * c + j] = gain.data()[j] * xh + bias.data()[j];
            }
        }
        T y = make_out(x.shape(), std::move(out),
                       x.requires_grad() || gain.requires_grad() || bias.requires_grad());
        if (y.requires_grad()) {
            push_node(y, [x, gain, bias, xhat, inv_sigma, r, c](const std::vector<Real>& go, Tape& t) {
                if (x.requires_grad()) {
                    std::vector<Real> gx(r * c);
                    for (std::size_t i = 0; i < r; ++i) {
                        const Real* grow = go.data() + i * c;
                        const Real* xh = xhat->data() + i * c;
                        Real mean_gy = 0, mean_gyxh = 0;
                        for (std::size_t j = 0; j < c; ++j) {
                            const Real gy = grow[j] * gain.data()[j];
                            mean_gy += gy;
                            mean_gyxh += gy * xh[j];
                        }
                        mean_gy /= Real(c);
                        mean_gyxh /= Real(c);
                        for (std::size_t j = 0; j < c; ++j) {
                            const Real gy = grow[j] * gain.data()[j];
                            gx[i * c + j] = (gy - mean_gy - xh[j] * mean_gyxh) * (*inv_sigma)[i];
                        }
                    }
                    t.add_grad(x, gx);
                }
                if (gain.requires_grad()) {
                    std::vector<Real> gg(c, Real(0));
                    for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < c; ++j)
                            gg[j] += go[i * c + j] * (*xhat)[i * c + j];
                    t.add_grad(gain, gg);
                }
                if (bias.requires_grad()) {
                    std::vector<Real> gb(c, Real(0));
                    for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < c; ++j) gb[j] += go[i * c + j];
                    t.add_grad(bias, gb);
                }
            });
        }
        return y;
    }

    // 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    T gelu_tanh(const T& x) {
        constexpr Real kC = Real(0.7978845608028653558798921198687637); // sqrt(2/pi)
        constexpr Real kA = Real(0.044715);
        std::vector<Real> out(x.size());
        for (std::size_t i = 0; i < out.size(); ++i) {
            const Real v = x.data()[i];
            out[i] = Real(0.5) * v * (Real(1) + std::tanh(kC * (v + kA * v * v * v)));
        }
        T y = make_out(x.shape(), std::move(out), x.requires_grad());
        if (y.requires_grad()) {
            push_node(y, [x](const std::vector<Real>& go, Tape& t) {
                constexpr Real kC = Real(0.7978845608028653558798921198687637);
                constexpr Real kA = Real(0.044715);
                std::vector<Real> gx(go.size());
                for (std::size_t i = 0; i < go.size(); ++i) {
                    const Real v = x.data()[i];
                    const Real u = kC * (v + kA * v * v * v);
                    const Real th = std::tanh(u);
                    const Real du = kC * (Real(1) + Real(3) * kA * v * v);
                    gx[i] = go[i] * (Real(0.5) * (Real(1) + th) +
                                     Real(0.5) * v * (Real(1) - th * th) * du);
                }
                t.add_grad(x, gx);
            });
        }
        return y;
    }

    // Mean over rows of -log softmax(logits)[target].
    T cross_entropy_logits(const T& logits, const std::vector<int>& targets) {
        check_rank2(logits, "cross_entropy_logits");
        const std::size_t r = logits.rows(), v = logits.cols();
        if (targets.size() != r)
            throw DimensionError("cross_entropy_logits: " + std::to_string(targets.size()) +
                                 " targets for " + std::to_string(r) + " rows");
        for (int tgt : targets)
            if (tgt < 0 || static_cast<std::size_t>(tgt) >= v)
                throw IndexError("cross_entropy_logits: target " + std::to_string(tgt) +
                                 " outside [0," + std::to_string(v) + ")");
        auto lse = std::make_shared<std::vector<Real>>(r);
        Real total = 0;
        for (std::size_t i = 0; i < r; ++i) {
            const Real* row = logits.data() + i * v;
            Real mx = row[0];
            for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
            Real sum = 0;
            for (std::size_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
            (*lse)[i] = mx + std::log(sum);
            total += (*lse)[i] - row[targets[i]];
        }
        T y = make_out({}, {total / Real(r)}, logits.requires_grad());
        if (y.requires_grad()) {
            push_node(y, [logits, targets, lse, r, v](const std::vector<Real>& go, Tape& t) {
                const Real g = go[0] / Real(r);
                std::vector<Real> gl(r * v);
                for (std::size_t i = 0; i < r; ++i) {
                    const Real* row = logits.data() + i * v;
                    for (std::size_t j = 0; j < v; ++j) {
                        Real p = std::exp(row[j] - (*lse)[i]);
                        gl[i * v + j] = (p - (static_cast<std::size_t>(targets[i]) == j ? Real(1)
                                                                                        : Real(0))) *
                                        g;
                    }
                }
                t.add_grad(logits, gl);
            });
        }
        return y;
    }

    T sum(const T& x) {
        Real s = 0;
        for (std::size_t i = 0; i < x.size(); ++i) s += x.data()[i];
        T y = make_out({}, {s}, x.requires_grad());
        if (y.requires_grad()) {
            push_node(y, [x](const std::vector<Real>& go, Tape& t) {
                t.add_grad(x, std::vector<Real>(x.size(), go[0]));
            });
        }
        return y;
    }

    // Value copy that stays connected to the graph (identity backward).
    T clone(const T& x) {
        std::vector<Real> out(x.values());
        T y = make_out(x.shape(), std::move(out), x.requires_grad());
        if (y.requires_grad()) {
            push_node(y, [x](const std::vector<Real>& go, Tape& t) { t.add_grad(x, go); });
        }
        return y;
    }

    // ---- reverse pass ----

    // Populates grads of every reachable requires_grad tensor. May be called
    // repeatedly; gradients accumulate.
    void backward(const T& loss) {
        if (!loss.defined() || loss.size() != 1)
            throw ContractError("backward: loss must be a defined scalar tensor");
        if (!loss.requires_grad()) return; // severed graph: nothing reachable
        GradMap gm;
        gm[loss.ptr().get()] = {Real(1)};
        scratch_ = &gm;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            auto found = gm.find(it->out.get());
            if (found == gm.end()) continue;
            // copy: the node may accumulate into its own output slot's map
            std::vector<Real> go = found->second;
            it->back(go, *this);
        }
        scratch_ = nullptr;
        for (auto& [key, g] : gm) {
            auto held = holders_.find(key);
            if (held == holders_.end()) continue;
            Data* d = held->second.get();
            if (!d->rg) continue;
            if (d->g.empty()) d->g.assign(d->v.size(), Real(0));
            for (std::size_t i = 0; i < g.size(); ++i) d->g[i] += g[i];
        }
    }

  private:
    using Data = typename Tensor<Real>::Data;

    struct Node {
        DataPtr out;
        std::function<void(const std::vector<Real>&, Tape&)> back;
    };

    void add_grad(const T& t, const std::vector<Real>& g) {
        auto& slot = (*scratch_)[t.ptr().get()];
        if (slot.empty()) {
            slot = g;
        } else {
            for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
        }
        holders_.emplace(t.ptr().get(), t.ptr());
    }

    T make_out(Shape shape, std::vector<Real> values, bool rg_inputs) {
        return T::from_values(std::move(shape), std::move(values), recording_ && rg_inputs);
    }

    void push_node(const T& out, std::function<void(const std::vector<Real>&, Tape&)> back) {
        nodes_.push_back(Node{out.ptr(), std::move(back)});
        holders_.emplace(out.ptr().get(), out.ptr());
    }

    static void check_rank2(const T& t, const char* what) {
        if (t.rank() != 2)
            throw DimensionError(std::string(what) + ": rank-2 tensor required, got " +
                                 shape_str(t.shape()));
    }
    static void check_same_shape(const T& a, const T& b, const char* what) {
        if (a.shape() != b.shape())
            throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) +
                                 " vs " + shape_str(b.shape()));
    }

    std::vector<Node> nodes_;
    std::unordered_map<const void*, DataPtr> holders_;
    GradMap* scratch_ = nullptr;
    bool recording_ = true;
};

// Scoped recording switch (the no-grad phases of the training loop and the
// whole of inference run under one of these).
template <std::floating_point Real>
class RecordingGuard {
  public:
    RecordingGuard(Tape<Real>& tape, bool on) : tape_(tape), prev_(tape.recording()) {
        tape_.set_recording(on);
    }
    ~RecordingGuard() { tape_.set_recording(prev_); }
    RecordingGuard(const RecordingGuard&) = delete;
    RecordingGuard& operator=(const RecordingGuard&) = delete;

  private:
    Tape<Real>& tape_;
    bool prev_;
};

} // namespace viar
