#include "tlin/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace tlin {

namespace {

template <class T> std::vector<T>& data_of(TensorNode& n);
template <> std::vector<double>& data_of<double>(TensorNode& n) { return n.d64; }
template <> std::vector<float>& data_of<float>(TensorNode& n) { return n.d32; }

template <class T> std::vector<T>& grad_of(TensorNode& n);
template <> std::vector<double>& grad_of<double>(TensorNode& n) { return n.g64; }
template <> std::vector<float>& grad_of<float>(TensorNode& n) { return n.g32; }

template <class T> void ensure_grad(TensorNode& n) {
    auto& g = grad_of<T>(n);
    if (g.empty()) g.assign(static_cast<size_t>(n.numel()), T(0));
}

template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T> using EMap = Eigen::Map<EMat<T>>;
template <class T> using ECMap = Eigen::Map<const EMat<T>>;

// Scans the active buffer; a single NaN or Inf poisons everything downstream,
// so surface it at the op that produced it.
void throw_if_not_finite(const TensorNode& n, const char* op) {
    if (n.dtype == Dtype::f64) {
        for (double x : n.d64)
            if (!std::isfinite(x)) throw numeric_error(std::string(op) + ": non-finite value");
    } else {
        for (float x : n.d32)
            if (!std::isfinite(x)) throw numeric_error(std::string(op) + ": non-finite value");
    }
}

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dtype() != b.dtype())
        throw dim_error(std::string(op) + ": mixed dtypes " + dtype_name(a.dtype()) + "/" +
                        dtype_name(b.dtype()));
}

void check_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw dim_error(std::string(op) + ": expected a rank-2 tensor");
}

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t s : shape) {
        if (s < 0) throw dim_error("negative dimension");
        n *= s;
    }
    return n;
}

} // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int64_t> shape, Dtype dt) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->dtype = dt;
    const size_t count = static_cast<size_t>(shape_numel(n->shape));
    if (dt == Dtype::f64)
        n->d64.assign(count, 0.0);
    else
        n->d32.assign(count, 0.0f);
    return Tensor(std::move(n));
}

Tensor Tensor::full(std::vector<int64_t> shape, double value, Dtype dt) {
    Tensor t = zeros(std::move(shape), dt);
    if (dt == Dtype::f64)
        std::fill(t.raw()->d64.begin(), t.raw()->d64.end(), value);
    else
        std::fill(t.raw()->d32.begin(), t.raw()->d32.end(), static_cast<float>(value));
    return t;
}

Tensor Tensor::from(std::vector<int64_t> shape, const std::vector<double>& values, Dtype dt) {
    Tensor t = zeros(std::move(shape), dt);
    if (static_cast<int64_t>(values.size()) != t.numel())
        throw dim_error("from: value count does not match shape");
    if (dt == Dtype::f64) {
        t.raw()->d64.assign(values.begin(), values.end());
    } else {
        auto& d = t.raw()->d32;
        for (size_t i = 0; i < values.size(); ++i) d[i] = static_cast<float>(values[i]);
    }
    return t;
}

Tensor Tensor::randn(std::vector<int64_t> shape, std::mt19937_64& rng, double stddev, Dtype dt) {
    Tensor t = zeros(std::move(shape), dt);
    std::normal_distribution<double> dist(0.0, stddev);
    const int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) t.set(i, dist(rng));
    return t;
}

const std::vector<int64_t>& Tensor::shape() const {
    if (!n_) throw dim_error("use of an undefined tensor");
    return n_->shape;
}

int64_t Tensor::numel() const { return n_ ? n_->numel() : 0; }

int64_t Tensor::rows() const {
    check_rank2(*this, "rows");
    return n_->shape[0];
}

int64_t Tensor::cols() const {
    check_rank2(*this, "cols");
    return n_->shape[1];
}

Dtype Tensor::dtype() const {
    if (!n_) throw dim_error("use of an undefined tensor");
    return n_->dtype;
}

double Tensor::at(int64_t flat) const {
    if (flat < 0 || flat >= numel()) throw dim_error("at: index out of range");
    return n_->dtype == Dtype::f64 ? n_->d64[static_cast<size_t>(flat)]
                                   : static_cast<double>(n_->d32[static_cast<size_t>(flat)]);
}

void Tensor::set(int64_t flat, double v) {
    if (flat < 0 || flat >= numel()) throw dim_error("set: index out of range");
    if (n_->dtype == Dtype::f64)
        n_->d64[static_cast<size_t>(flat)] = v;
    else
        n_->d32[static_cast<size_t>(flat)] = static_cast<float>(v);
}

double Tensor::item() const {
    if (numel() != 1) throw dim_error("item: tensor is not scalar");
    return at(0);
}

void Tensor::set_requires_grad(bool b) {
    if (!n_) throw dim_error("use of an undefined tensor");
    n_->requires_grad = b;
}

bool Tensor::requires_grad() const { return n_ && n_->requires_grad; }

bool Tensor::has_grad() const { return n_ && n_->grad_allocated(); }

double Tensor::grad_at(int64_t flat) const {
    if (!has_grad()) throw dim_error("grad_at: no gradient allocated");
    if (flat < 0 || flat >= numel()) throw dim_error("grad_at: index out of range");
    return n_->dtype == Dtype::f64 ? n_->g64[static_cast<size_t>(flat)]
                                   : static_cast<double>(n_->g32[static_cast<size_t>(flat)]);
}

void Tensor::zero_grad() {
    if (!n_) return;
    std::fill(n_->g64.begin(), n_->g64.end(), 0.0);
    std::fill(n_->g32.begin(), n_->g32.end(), 0.0f);
}

Tensor Tensor::clone() const {
    if (!n_) return Tensor();
    auto m = std::make_shared<TensorNode>();
    m->shape = n_->shape;
    m->dtype = n_->dtype;
    m->d64 = n_->d64;
    m->d32 = n_->d32;
    return Tensor(std::move(m));
}

std::vector<double> Tensor::to_vector() const {
    std::vector<double> out(static_cast<size_t>(numel()));
    for (int64_t i = 0; i < numel(); ++i) out[static_cast<size_t>(i)] = at(i);
    return out;
}

int64_t argmax_row(const Tensor& t, int64_t row) {
    check_rank2(t, "argmax_row");
    if (row < 0 || row >= t.rows()) throw dim_error("argmax_row: row out of range");
    const int64_t c = t.cols();
    if (c == 0) throw dim_error("argmax_row: empty row");
    int64_t best = 0;
    double best_v = t.at(row * c);
    for (int64_t j = 1; j < c; ++j) {
        const double v = t.at(row * c + j);
        if (v > best_v) {
            best_v = v;
            best = j;
        }
    }
    return best;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw dim_error("max_abs_diff: shape mismatch");
    double m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.at(i) - b.at(i)));
    return m;
}

// ---------------------------------------------------------------------------
// Graph ops
// ---------------------------------------------------------------------------

Tensor Graph::make_output(std::vector<int64_t> shape, Dtype dt, bool requires_grad) {
    Tensor t = Tensor::zeros(std::move(shape), dt);
    t.raw()->requires_grad = requires_grad;
    return t;
}

bool Graph::want_grad(std::initializer_list<const Tensor*> inputs) const {
    if (!grad_enabled_) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

namespace {

// Accumulate gC * op into input grads for C = A * B and C = A * B^T.
template <class T>
void matmul_backward(const std::shared_ptr<TensorNode>& a, const std::shared_ptr<TensorNode>& b,
                     const std::shared_ptr<TensorNode>& c, bool b_transposed) {
    if (!c->grad_allocated()) return;
    const int64_t m = c->shape[0], n = c->shape[1];
    const int64_t k = a->shape[1];
    ECMap<T> gc(grad_of<T>(*c).data(), m, n);
    ECMap<T> av(data_of<T>(*a).data(), m, k);
    if (a->requires_grad) {
        ensure_grad<T>(*a);
        EMap<T> ga(grad_of<T>(*a).data(), m, k);
        if (b_transposed) {
            ECMap<T> bv(data_of<T>(*b).data(), n, k);
            ga.noalias() += gc * bv;
        } else {
            ECMap<T> bv(data_of<T>(*b).data(), k, n);
            ga.noalias() += gc * bv.transpose();
        }
    }
    if (b->requires_grad) {
        ensure_grad<T>(*b);
        if (b_transposed) {
            EMap<T> gb(grad_of<T>(*b).data(), n, k);
            gb.noalias() += gc.transpose() * av;
        } else {
            EMap<T> gb(grad_of<T>(*b).data(), k, n);
            gb.noalias() += av.transpose() * gc;
        }
    }
}

template <class T>
void matmul_forward(const TensorNode& a, const TensorNode& b, TensorNode& c, bool b_transposed) {
    const int64_t m = c.shape[0], n = c.shape[1];
    const int64_t k = a.shape[1];
    ECMap<T> av(data_of<T>(const_cast<TensorNode&>(a)).data(), m, k);
    EMap<T> cv(data_of<T>(c).data(), m, n);
    if (b_transposed) {
        ECMap<T> bv(data_of<T>(const_cast<TensorNode&>(b)).data(), n, k);
        cv.noalias() = av * bv.transpose();
    } else {
        ECMap<T> bv(data_of<T>(const_cast<TensorNode&>(b)).data(), k, n);
        cv.noalias() = av * bv;
    }
}

} // namespace

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
    check_rank2(a, "matmul");
    check_rank2(b, "matmul");
    check_same_dtype(a, b, "matmul");
    if (a.cols() != b.rows()) throw dim_error("matmul: inner dimensions disagree");
    const int64_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor c = make_output({m, n}, a.dtype(), want_grad({&a, &b}));
    if (a.dtype() == Dtype::f64)
        matmul_forward<double>(*a.raw(), *b.raw(), *c.raw(), false);
    else
        matmul_forward<float>(*a.raw(), *b.raw(), *c.raw(), false);
    ledger_.full_flops += static_cast<uint64_t>(m) * static_cast<uint64_t>(k) *
                          static_cast<uint64_t>(n);
    throw_if_not_finite(*c.raw(), "matmul");
    if (c.requires_grad()) {
        auto an = a.node(), bn = b.node(), cn = c.node();
        record([an, bn, cn]() {
            if (an->dtype == Dtype::f64)
                matmul_backward<double>(an, bn, cn, false);
            else
                matmul_backward<float>(an, bn, cn, false);
        });
    }
    return c;
}

Tensor Graph::matmul_nt(const Tensor& a, const Tensor& b) {
    check_rank2(a, "matmul_nt");
    check_rank2(b, "matmul_nt");
    check_same_dtype(a, b, "matmul_nt");
    if (a.cols() != b.cols()) throw dim_error("matmul_nt: inner dimensions disagree");
    const int64_t m = a.rows(), k = a.cols(), n = b.rows();
    Tensor c = make_output({m, n}, a.dtype(), want_grad({&a, &b}));
    if (a.dtype() == Dtype::f64)
        matmul_forward<double>(*a.raw(), *b.raw(), *c.raw(), true);
    else
        matmul_forward<float>(*a.raw(), *b.raw(), *c.raw(), true);
    ledger_.full_flops += static_cast<uint64_t>(m) * static_cast<uint64_t>(k) *
                          static_cast<uint64_t>(n);
    throw_if_not_finite(*c.raw(), "matmul_nt");
    if (c.requires_grad()) {
        auto an = a.node(), bn = b.node(), cn = c.node();
        record([an, bn, cn]() {
            if (an->dtype == Dtype::f64)
                matmul_backward<double>(an, bn, cn, true);
            else
                matmul_backward<float>(an, bn, cn, true);
        });
    }
    return c;
}

namespace {

template <class T>
void add_backward(const std::shared_ptr<TensorNode>& a, const std::shared_ptr<TensorNode>& b,
                  const std::shared_ptr<TensorNode>& c) {
    if (!c->grad_allocated()) return;
    const auto& gc = grad_of<T>(*c);
    if (a->requires_grad) {
        ensure_grad<T>(*a);
        auto& ga = grad_of<T>(*a);
        for (size_t i = 0; i < gc.size(); ++i) ga[i] += gc[i];
    }
    if (b->requires_grad) {
        ensure_grad<T>(*b);
        auto& gb = grad_of<T>(*b);
        for (size_t i = 0; i < gc.size(); ++i) gb[i] += gc[i];
    }
}

} // namespace

Tensor Graph::add(const Tensor& a, const Tensor& b) {
    check_same_dtype(a, b, "add");
    if (a.shape() != b.shape()) throw dim_error("add: shape mismatch");
    Tensor c = make_output(a.shape(), a.dtype(), want_grad({&a, &b}));
    const int64_t n = a.numel();
    if (a.dtype() == Dtype::f64) {
        const auto& av = a.raw()->d64;
        const auto& bv = b.raw()->d64;
        auto& cv = c.raw()->d64;
        for (int64_t i = 0; i < n; ++i) cv[i] = av[i] + bv[i];
    } else {
        const auto& av = a.raw()->d32;
        const auto& bv = b.raw()->d32;
        auto& cv = c.raw()->d32;
        for (int64_t i = 0; i < n; ++i) cv[i] = av[i] + bv[i];
    }
    throw_if_not_finite(*c.raw(), "add");
    if (c.requires_grad()) {
        auto an = a.node(), bn = b.node(), cn = c.node();
        record([an, bn, cn]() {
            if (an->dtype == Dtype::f64)
                add_backward<double>(an, bn, cn);
            else
                add_backward<float>(an, bn, cn);
        });
    }
    return c;
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
    check_same_dtype(a, b, "mul");
    if (a.shape() != b.shape()) throw dim_error("mul: shape mismatch");
    Tensor c = make_output(a.shape(), a.dtype(), want_grad({&a, &b}));
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) c.set(i, a.at(i) * b.at(i));
    throw_if_not_finite(*c.raw(), "mul");
    if (c.requires_grad()) {
        auto an = a.node(), bn = b.node(), cn = c.node();
        record([an, bn, cn]() {
            if (!cn->grad_allocated()) return;
            const int64_t m = cn->numel();
            auto read = [](const TensorNode& t, int64_t i) {
                return t.dtype == Dtype::f64 ? t.d64[i] : static_cast<double>(t.d32[i]);
            };
            auto acc = [](TensorNode& t, int64_t i, double v) {
                if (t.dtype == Dtype::f64) {
                    if (t.g64.empty()) t.g64.assign(t.numel(), 0.0);
                    t.g64[i] += v;
                } else {
                    if (t.g32.empty()) t.g32.assign(t.numel(), 0.0f);
                    t.g32[i] += static_cast<float>(v);
                }
            };
            auto gread = [](const TensorNode& t, int64_t i) {
                return t.dtype == Dtype::f64 ? t.g64[i] : static_cast<double>(t.g32[i]);
            };
            for (int64_t i = 0; i < m; ++i) {
                const double g = gread(*cn, i);
                if (an->requires_grad) acc(*an, i, g * read(*bn, i));
                if (bn->requires_grad) acc(*bn, i, g * read(*an, i));
            }
        });
    }
    return c;
}

Tensor Graph::scale(const Tensor& a, double s) {
    Tensor c = make_output(a.shape(), a.dtype(), want_grad({&a}));
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) c.set(i, a.at(i) * s);
    throw_if_not_finite(*c.raw(), "scale");
    if (c.requires_grad()) {
        auto an = a.node(), cn = c.node();
        record([an, cn, s]() {
            if (!cn->grad_allocated() || !an->requires_grad) return;
            const int64_t m = cn->numel();
            if (an->dtype == Dtype::f64) {
                ensure_grad<double>(*an);
                for (int64_t i = 0; i < m; ++i) an->g64[i] += cn->g64[i] * s;
            } else {
                ensure_grad<float>(*an);
                for (int64_t i = 0; i < m; ++i)
                    an->g32[i] += cn->g32[i] * static_cast<float>(s);
            }
        });
    }
    return c;
}

Tensor Graph::add_bias(const Tensor& a, const Tensor& bias) {
    check_rank2(a, "add_bias");
    check_same_dtype(a, bias, "add_bias");
    if (bias.rank() != 1 || bias.shape()[0] != a.cols())
        throw dim_error("add_bias: bias must match column count");
    Tensor c = make_output(a.shape(), a.dtype(), want_grad({&a, &bias}));
    const int64_t r = a.rows(), k = a.cols();
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < k; ++j) c.set(i * k + j, a.at(i * k + j) + bias.at(j));
    throw_if_not_finite(*c.raw(), "add_bias");
    if (c.requires_grad()) {
        auto an = a.node(), bn = bias.node(), cn = c.node();
        record([an, bn, cn, r, k]() {
            if (!cn->grad_allocated()) return;
            auto gread = [](const TensorNode& t, int64_t i) {
                return t.dtype == Dtype::f64 ? t.g64[i] : static_cast<double>(t.g32[i]);
            };
            if (an->requires_grad) {
                if (an->dtype == Dtype::f64) {
                    ensure_grad<double>(*an);
                    for (int64_t i = 0; i < r * k; ++i) an->g64[i] += gread(*cn, i);
                } else {
                    ensure_grad<float>(*an);
                    for (int64_t i = 0; i < r * k; ++i)
                        an->g32[i] += static_cast<float>(gread(*cn, i));
                }
            }
            if (bn->requires_grad) {
                for (int64_t j = 0; j < k; ++j) {
                    double s = 0;
                    for (int64_t i = 0; i < r; ++i) s += gread(*cn, i * k + j);
                    if (bn->dtype == Dtype::f64) {
                        ensure_grad<double>(*bn);
                        bn->g64[j] += s;
                    } else {
                        ensure_grad<float>(*bn);
                        bn->g32[j] += static_cast<float>(s);
                    }
                }
            }
        });
    }
    return c;
}

namespace {

// Row max is subtracted before exponentiation; masked entries contribute
// exp(-huge) == 0 exactly, matching an explicit additive mask.
template <class T>
void softmax_forward(const TensorNode& a, TensorNode& out,
                     const std::function<double(int64_t, int64_t)>* mask, const int64_t r,
                     const int64_t c) {
    const auto& av = data_of<T>(const_cast<TensorNode&>(a));
    auto& ov = data_of<T>(out);
    for (int64_t i = 0; i < r; ++i) {
        double row_max = -std::numeric_limits<double>::infinity();
        int64_t live = 0;
        for (int64_t j = 0; j < c; ++j) {
            double z = static_cast<double>(av[i * c + j]);
            if (mask) {
                const double m = (*mask)(i, j);
                if (m == 0.0) ++live;
                z += m;
            } else {
                ++live;
            }
            row_max = std::max(row_max, z);
        }
        if (live == 0) throw dim_error("softmax_rows: fully masked row");
        double denom = 0;
        for (int64_t j = 0; j < c; ++j) {
            double z = static_cast<double>(av[i * c + j]);
            if (mask) z += (*mask)(i, j);
            const double e = std::exp(z - row_max);
            ov[i * c + j] = static_cast<T>(e);
            denom += e;
        }
        for (int64_t j = 0; j < c; ++j)
            ov[i * c + j] = static_cast<T>(static_cast<double>(ov[i * c + j]) / denom);
    }
}

template <class T>
void softmax_backward(const std::shared_ptr<TensorNode>& a, const std::shared_ptr<TensorNode>& o,
                      int64_t r, int64_t c) {
    if (!o->grad_allocated() || !a->requires_grad) return;
    ensure_grad<T>(*a);
    const auto& p = data_of<T>(*o);
    const auto& gp = grad_of<T>(*o);
    auto& ga = grad_of<T>(*a);
    for (int64_t i = 0; i < r; ++i) {
        double dot = 0;
        for (int64_t j = 0; j < c; ++j)
            dot += static_cast<double>(gp[i * c + j]) * static_cast<double>(p[i * c + j]);
        for (int64_t j = 0; j < c; ++j)
            ga[i * c + j] += static_cast<T>(static_cast<double>(p[i * c + j]) *
                                            (static_cast<double>(gp[i * c + j]) - dot));
    }
}

} // namespace

Tensor Graph::softmax_rows(const Tensor& a) {
    return softmax_rows_masked(a, nullptr);
}

Tensor Graph::softmax_rows_masked(const Tensor& a,
                                  const std::function<double(int64_t, int64_t)>& mask) {
    check_rank2(a, "softmax_rows");
    const int64_t r = a.rows(), c = a.cols();
    if (c == 0) throw dim_error("softmax_rows: empty rows");
    Tensor out = make_output(a.shape(), a.dtype(), want_grad({&a}));
    const std::function<double(int64_t, int64_t)>* mp = mask ? &mask : nullptr;
    if (a.dtype() == Dtype::f64)
        softmax_forward<double>(*a.raw(), *out.raw(), mp, r, c);
    else
        softmax_forward<float>(*a.raw(), *out.raw(), mp, r, c);
    throw_if_not_finite(*out.raw(), "softmax_rows");
    if (out.requires_grad()) {
        auto an = a.node(), on = out.node();
        record([an, on, r, c]() {
            if (an->dtype == Dtype::f64)
                softmax_backward<double>(an, on, r, c);
            else
                softmax_backward<float>(an, on, r, c);
        });
    }
    return out;
}

namespace {

template <class T>
void layer_norm_forward(const TensorNode& x, const TensorNode& gain, const TensorNode& bias,
                        TensorNode& out, std::vector<double>& mean, std::vector<double>& inv_std,
                        double eps, int64_t r, int64_t c) {
    const auto& xv = data_of<T>(const_cast<TensorNode&>(x));
    const auto& gv = data_of<T>(const_cast<TensorNode&>(gain));
    const auto& bv = data_of<T>(const_cast<TensorNode&>(bias));
    auto& ov = data_of<T>(out);
    for (int64_t i = 0; i < r; ++i) {
        double mu = 0;
        for (int64_t j = 0; j < c; ++j) mu += static_cast<double>(xv[i * c + j]);
        mu /= static_cast<double>(c);
        double var = 0;
        for (int64_t j = 0; j < c; ++j) {
            const double d = static_cast<double>(xv[i * c + j]) - mu;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        mean[i] = mu;
        inv_std[i] = is;
        for (int64_t j = 0; j < c; ++j) {
            const double xhat = (static_cast<double>(xv[i * c + j]) - mu) * is;
            ov[i * c + j] = static_cast<T>(xhat * static_cast<double>(gv[j]) +
                                           static_cast<double>(bv[j]));
        }
    }
}

template <class T>
void layer_norm_backward(const std::shared_ptr<TensorNode>& x,
                         const std::shared_ptr<TensorNode>& gain,
                         const std::shared_ptr<TensorNode>& bias,
                         const std::shared_ptr<TensorNode>& out,
                         const std::shared_ptr<std::vector<double>>& mean,
                         const std::shared_ptr<std::vector<double>>& inv_std, int64_t r,
                         int64_t c) {
    if (!out->grad_allocated()) return;
    const auto& xv = data_of<T>(*x);
    const auto& gv = data_of<T>(*gain);
    auto gread = [&](int64_t i) {
        return out->dtype == Dtype::f64 ? out->g64[i] : static_cast<double>(out->g32[i]);
    };
    for (int64_t i = 0; i < r; ++i) {
        const double mu = (*mean)[i];
        const double is = (*inv_std)[i];
        // Precompute row sums used by the x gradient.
        double sum_gy_g = 0, sum_gy_g_xhat = 0;
        for (int64_t j = 0; j < c; ++j) {
            const double xhat = (static_cast<double>(xv[i * c + j]) - mu) * is;
            const double gyg = gread(i * c + j) * static_cast<double>(gv[j]);
            sum_gy_g += gyg;
            sum_gy_g_xhat += gyg * xhat;
        }
        for (int64_t j = 0; j < c; ++j) {
            const double xhat = (static_cast<double>(xv[i * c + j]) - mu) * is;
            const double gy = gread(i * c + j);
            if (gain->requires_grad) {
                if (gain->dtype == Dtype::f64) {
                    ensure_grad<double>(*gain);
                    gain->g64[j] += gy * xhat;
                } else {
                    ensure_grad<float>(*gain);
                    gain->g32[j] += static_cast<float>(gy * xhat);
                }
            }
            if (bias->requires_grad) {
                if (bias->dtype == Dtype::f64) {
                    ensure_grad<double>(*bias);
                    bias->g64[j] += gy;
                } else {
                    ensure_grad<float>(*bias);
                    bias->g32[j] += static_cast<float>(gy);
                }
            }
            if (x->requires_grad) {
                const double gyg = gy * static_cast<double>(gv[j]);
                const double gx =
                    is * (gyg - sum_gy_g / static_cast<double>(c) -
                          xhat * sum_gy_g_xhat / static_cast<double>(c));
                if (x->dtype == Dtype::f64) {
                    ensure_grad<double>(*x);
                    x->g64[i * c + j] += gx;
                } else {
                    ensure_grad<float>(*x);
                    x->g32[i * c + j] += static_cast<float>(gx);
                }
            }
        }
    }
}

} // namespace

Tensor Graph::layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    check_rank2(x, "layer_norm");
    check_same_dtype(x, gain, "layer_norm");
    check_same_dtype(x, bias, "layer_norm");
    const int64_t r = x.rows(), c = x.cols();
    if (c == 0) throw dim_error("layer_norm: zero feature dimension");
    if (gain.rank() != 1 || gain.shape()[0] != c || bias.rank() != 1 || bias.shape()[0] != c)
        throw dim_error("layer_norm: gain/bias must have length = columns");
    Tensor out = make_output(x.shape(), x.dtype(), want_grad({&x, &gain, &bias}));
    auto mean = std::make_shared<std::vector<double>>(static_cast<size_t>(r));
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(r));
    if (x.dtype() == Dtype::f64)
        layer_norm_forward<double>(*x.raw(), *gain.raw(), *bias.raw(), *out.raw(), *mean,
                                   *inv_std, eps, r, c);
    else
        layer_norm_forward<float>(*x.raw(), *gain.raw(), *bias.raw(), *out.raw(), *mean,
                                  *inv_std, eps, r, c);
    throw_if_not_finite(*out.raw(), "layer_norm");
    if (out.requires_grad()) {
        auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
        record([xn, gn, bn, on, mean, inv_std, r, c]() {
            if (xn->dtype == Dtype::f64)
                layer_norm_backward<double>(xn, gn, bn, on, mean, inv_std, r, c);
            else
                layer_norm_backward<float>(xn, gn, bn, on, mean, inv_std, r, c);
        });
    }
    return out;
}

Tensor Graph::gelu(const Tensor& x) {
    Tensor out = make_output(x.shape(), x.dtype(), want_grad({&x}));
    const int64_t n = x.numel();
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (int64_t i = 0; i < n; ++i) {
        const double v = x.at(i);
        out.set(i, 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
    }
    throw_if_not_finite(*out.raw(), "gelu");
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        record([xn, on, n]() {
            if (!on->grad_allocated() || !xn->requires_grad) return;
            constexpr double inv_sqrt2 = 0.7071067811865475244;
            constexpr double inv_sqrt2pi = 0.3989422804014326779;
            auto read = [&](int64_t i) {
                return xn->dtype == Dtype::f64 ? xn->d64[i] : static_cast<double>(xn->d32[i]);
            };
            auto gout = [&](int64_t i) {
                return on->dtype == Dtype::f64 ? on->g64[i] : static_cast<double>(on->g32[i]);
            };
            for (int64_t i = 0; i < n; ++i) {
                const double v = read(i);
                const double phi = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                const double g = gout(i) * (phi + v * pdf);
                if (xn->dtype == Dtype::f64) {
                    ensure_grad<double>(*xn);
                    xn->g64[i] += g;
                } else {
                    ensure_grad<float>(*xn);
                    xn->g32[i] += static_cast<float>(g);
                }
            }
        });
    }
    return out;
}

Tensor Graph::select_rows(const Tensor& x, std::vector<int64_t> idx) {
    check_rank2(x, "select_rows");
    const int64_t c = x.cols();
    for (int64_t i : idx)
        if (i < 0 || i >= x.rows()) throw dim_error("select_rows: index out of range");
    Tensor out = make_output({static_cast<int64_t>(idx.size()), c}, x.dtype(),
                             want_grad({&x}));
    for (size_t r = 0; r < idx.size(); ++r)
        for (int64_t j = 0; j < c; ++j)
            out.set(static_cast<int64_t>(r) * c + j, x.at(idx[r] * c + j));
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        auto ix = std::make_shared<std::vector<int64_t>>(std::move(idx));
        record([xn, on, ix, c]() {
            if (!on->grad_allocated() || !xn->requires_grad) return;
            for (size_t r = 0; r < ix->size(); ++r)
                for (int64_t j = 0; j < c; ++j) {
                    const int64_t src = static_cast<int64_t>(r) * c + j;
                    const double g = on->dtype == Dtype::f64
                                         ? on->g64[src]
                                         : static_cast<double>(on->g32[src]);
                    if (xn->dtype == Dtype::f64) {
                        ensure_grad<double>(*xn);
                        xn->g64[(*ix)[r] * c + j] += g;
                    } else {
                        ensure_grad<float>(*xn);
                        xn->g32[(*ix)[r] * c + j] += static_cast<float>(g);
                    }
                }
        });
    }
    return out;
}

Tensor Graph::slice_cols(const Tensor& x, int64_t c0, int64_t c1) {
    check_rank2(x, "slice_cols");
    if (c0 < 0 || c1 > x.cols() || c0 >= c1) throw dim_error("slice_cols: bad column range");
    const int64_t r = x.rows(), c = x.cols(), w = c1 - c0;
    Tensor out = make_output({r, w}, x.dtype(), want_grad({&x}));
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < w; ++j) out.set(i * w + j, x.at(i * c + c0 + j));
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        record([xn, on, r, c, c0, w]() {
            if (!on->grad_allocated() || !xn->requires_grad) return;
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < w; ++j) {
                    const double g = on->dtype == Dtype::f64
                                         ? on->g64[i * w + j]
                                         : static_cast<double>(on->g32[i * w + j]);
                    if (xn->dtype == Dtype::f64) {
                        ensure_grad<double>(*xn);
                        xn->g64[i * c + c0 + j] += g;
                    } else {
                        ensure_grad<float>(*xn);
                        xn->g32[i * c + c0 + j] += static_cast<float>(g);
                    }
                }
        });
    }
    return out;
}

Tensor Graph::concat_cols(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw dim_error("concat_cols: no inputs");
    const int64_t r = xs[0].rows();
    int64_t total = 0;
    bool rg = false;
    for (const Tensor& t : xs) {
        check_rank2(t, "concat_cols");
        check_same_dtype(xs[0], t, "concat_cols");
        if (t.rows() != r) throw dim_error("concat_cols: row counts disagree");
        total += t.cols();
        rg = rg || t.requires_grad();
    }
    Tensor out = make_output({r, total}, xs[0].dtype(), grad_enabled_ && rg);
    int64_t off = 0;
    for (const Tensor& t : xs) {
        const int64_t w = t.cols();
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < w; ++j) out.set(i * total + off + j, t.at(i * w + j));
        off += w;
    }
    if (out.requires_grad()) {
        auto on = out.node();
        std::vector<std::shared_ptr<TensorNode>> ins;
        ins.reserve(xs.size());
        for (const Tensor& t : xs) ins.push_back(t.node());
        record([on, ins, r, total]() {
            if (!on->grad_allocated()) return;
            int64_t off = 0;
            for (const auto& xn : ins) {
                const int64_t w = xn->shape[1];
                if (xn->requires_grad) {
                    for (int64_t i = 0; i < r; ++i)
                        for (int64_t j = 0; j < w; ++j) {
                            const double g =
                                on->dtype == Dtype::f64
                                    ? on->g64[i * total + off + j]
                                    : static_cast<double>(on->g32[i * total + off + j]);
                            if (xn->dtype == Dtype::f64) {
                                ensure_grad<double>(*xn);
                                xn->g64[i * w + j] += g;
                            } else {
                                ensure_grad<float>(*xn);
                                xn->g32[i * w + j] += static_cast<float>(g);
                            }
                        }
                }
                off += w;
            }
        });
    }
    return out;
}

Tensor Graph::concat_rows(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw dim_error("concat_rows: no inputs");
    const int64_t c = xs[0].cols();
    int64_t total = 0;
    bool rg = false;
    for (const Tensor& t : xs) {
        check_rank2(t, "concat_rows");
        check_same_dtype(xs[0], t, "concat_rows");
        if (t.cols() != c) throw dim_error("concat_rows: column counts disagree");
        total += t.rows();
        rg = rg || t.requires_grad();
    }
    Tensor out = make_output({total, c}, xs[0].dtype(), grad_enabled_ && rg);
    int64_t off = 0;
    for (const Tensor& t : xs) {
        const int64_t n = t.numel();
        for (int64_t i = 0; i < n; ++i) out.set(off + i, t.at(i));
        off += n;
    }
    if (out.requires_grad()) {
        auto on = out.node();
        std::vector<std::shared_ptr<TensorNode>> ins;
        ins.reserve(xs.size());
        for (const Tensor& t : xs) ins.push_back(t.node());
        record([on, ins]() {
            if (!on->grad_allocated()) return;
            int64_t off = 0;
            for (const auto& xn : ins) {
                const int64_t n = xn->numel();
                if (xn->requires_grad) {
                    for (int64_t i = 0; i < n; ++i) {
                        const double g = on->dtype == Dtype::f64
                                             ? on->g64[off + i]
                                             : static_cast<double>(on->g32[off + i]);
                        if (xn->dtype == Dtype::f64) {
                            ensure_grad<double>(*xn);
                            xn->g64[i] += g;
                        } else {
                            ensure_grad<float>(*xn);
                            xn->g32[i] += static_cast<float>(g);
                        }
                    }
                }
                off += n;
            }
        });
    }
    return out;
}

Tensor Graph::sum(const Tensor& x) {
    Tensor out = make_output({}, x.dtype(), want_grad({&x}));
    double s = 0;
    for (int64_t i = 0; i < x.numel(); ++i) s += x.at(i);
    out.set(0, s);
    throw_if_not_finite(*out.raw(), "sum");
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        record([xn, on]() {
            if (!on->grad_allocated() || !xn->requires_grad) return;
            const double g = on->dtype == Dtype::f64 ? on->g64[0]
                                                     : static_cast<double>(on->g32[0]);
            const int64_t n = xn->numel();
            if (xn->dtype == Dtype::f64) {
                ensure_grad<double>(*xn);
                for (int64_t i = 0; i < n; ++i) xn->g64[i] += g;
            } else {
                ensure_grad<float>(*xn);
                for (int64_t i = 0; i < n; ++i) xn->g32[i] += static_cast<float>(g);
            }
        });
    }
    return out;
}

Tensor Graph::cross_entropy_sum(const Tensor& logits, const std::vector<int64_t>& targets) {
    check_rank2(logits, "cross_entropy_sum");
    const int64_t r = logits.rows(), v = logits.cols();
    if (static_cast<int64_t>(targets.size()) != r)
        throw dim_error("cross_entropy_sum: one target per row required");
    for (int64_t t : targets)
        if (t < 0 || t >= v) throw dim_error("cross_entropy_sum: target id out of vocab");
    Tensor out = make_output({}, logits.dtype(), want_grad({&logits}));
    // Save the row softmax for the backward pass.
    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(r * v));
    double total = 0;
    for (int64_t i = 0; i < r; ++i) {
        double row_max = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < v; ++j) row_max = std::max(row_max, logits.at(i * v + j));
        double denom = 0;
        for (int64_t j = 0; j < v; ++j) {
            const double e = std::exp(logits.at(i * v + j) - row_max);
            (*probs)[static_cast<size_t>(i * v + j)] = e;
            denom += e;
        }
        for (int64_t j = 0; j < v; ++j) (*probs)[static_cast<size_t>(i * v + j)] /= denom;
        total += std::log(denom) + row_max - logits.at(i * v + targets[static_cast<size_t>(i)]);
    }
    out.set(0, total);
    throw_if_not_finite(*out.raw(), "cross_entropy_sum");
    if (out.requires_grad()) {
        auto ln = logits.node(), on = out.node();
        auto tg = std::make_shared<std::vector<int64_t>>(targets);
        record([ln, on, tg, probs, r, v]() {
            if (!on->grad_allocated() || !ln->requires_grad) return;
            const double g = on->dtype == Dtype::f64 ? on->g64[0]
                                                     : static_cast<double>(on->g32[0]);
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < v; ++j) {
                    double d = (*probs)[static_cast<size_t>(i * v + j)];
                    if (j == (*tg)[static_cast<size_t>(i)]) d -= 1.0;
                    if (ln->dtype == Dtype::f64) {
                        ensure_grad<double>(*ln);
                        ln->g64[i * v + j] += g * d;
                    } else {
                        ensure_grad<float>(*ln);
                        ln->g32[i * v + j] += static_cast<float>(g * d);
                    }
                }
        });
    }
    return out;
}

void Graph::backward(const Tensor& loss) {
    if (!loss.defined() || loss.rank() != 0)
        throw config_error("backward: loss must be a scalar tensor");
    if (!loss.requires_grad() || tape_.empty())
        throw config_error("backward: loss does not depend on recorded operations");
    TensorNode& n = *loss.raw();
    if (n.dtype == Dtype::f64) {
        ensure_grad<double>(n);
        n.g64[0] = 1.0;
    } else {
        ensure_grad<float>(n);
        n.g32[0] = 1.0f;
    }
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
    tape_.clear();
}

} // namespace tlin
