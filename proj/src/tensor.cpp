#include "color/tensor.hpp"

#include <algorithm>
#include <limits>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "color/error.hpp"

namespace color {

std::string shape_to_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace {

void check_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
    for (std::size_t d : shape)
        if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_to_string(shape));
}

}  // namespace

Tensor::Tensor(Shape shape, bool requires_grad) {
    check_shape(shape);
    impl_ = std::make_shared<Impl>();
    impl_->values = std::make_shared<std::vector<double>>(shape_numel(shape), 0.0);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
    check_shape(shape);
    if (shape_numel(shape) != values.size())
        throw ShapeError("shape " + shape_to_string(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
    impl_ = std::make_shared<Impl>();
    impl_->values = std::make_shared<std::vector<double>>(std::move(values));
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

const Tensor::Impl& Tensor::impl() const {
    if (!impl_) throw ContractError("use of an undefined tensor");
    return *impl_;
}

Tensor::Impl& Tensor::impl() {
    if (!impl_) throw ContractError("use of an undefined tensor");
    return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    const Shape& s = shape();
    if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_to_string(s));
    return s[axis];
}

std::size_t Tensor::numel() const { return impl().values->size(); }

std::span<const double> Tensor::data() const { return *impl().values; }

std::span<double> Tensor::mutable_data() { return *impl().values; }

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_to_string(shape()));
    return (*impl().values)[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
    if (rank() != 2) throw ShapeError("at(row, col) requires a matrix");
    return (*impl().values)[row * shape()[1] + col];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }

void Tensor::set_requires_grad(bool value) { impl().requires_grad = value; }

bool Tensor::has_grad() const { return !impl().grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw ContractError("tensor has no gradient");
    return impl().grad;
}

std::span<double> Tensor::mutable_grad() const {
    if (!impl_) throw ContractError("use of an undefined tensor");
    Impl& i = *impl_;
    if (i.grad.empty()) i.grad.assign(i.values->size(), 0.0);
    return i.grad;
}

void Tensor::clear_grad() { impl().grad.clear(); }

Tensor Tensor::alias() const {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = impl().shape;
    t.impl_->values = impl().values;
    t.impl_->requires_grad = impl().requires_grad;
    return t;
}

Tensor Tensor::clone() const { return Tensor(shape(), *impl().values, requires_grad()); }

bool Tensor::shares_storage(const Tensor& other) const {
    return impl_ && other.impl_ && impl_->values == other.impl_->values;
}

// ---------------------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* Tape::active() noexcept { return g_active_tape; }

void Tape::record(std::function<void()> backward_rule) { nodes_.push_back(std::move(backward_rule)); }

std::size_t Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw ContractError("backward() requires a scalar loss, got shape " + shape_to_string(loss.shape()));
    if (nodes_.empty()) throw ContractError("backward() on an empty tape");
    if (!loss.requires_grad()) throw ContractError("loss does not depend on any tensor that requires grad");
    Tensor seed = loss;
    seed.mutable_grad()[0] = 1.0;
    std::size_t visited = 0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        (*it)();
        ++visited;
    }
    nodes_.clear();
    return visited;
}

TapeGuard::TapeGuard(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeGuard::~TapeGuard() { g_active_tape = previous_; }

void round_to_single(Tensor& tensor) {
    for (double& v : tensor.mutable_data()) v = static_cast<double>(static_cast<float>(v));
}

bool is_single_representable(const Tensor& tensor) {
    for (double v : tensor.data())
        if (static_cast<double>(static_cast<float>(v)) != v && !std::isnan(v)) return false;
    return true;
}

// ---------------------------------------------------------------------------

namespace {

bool tracking(std::initializer_list<const Tensor*> inputs) {
    if (Tape::active() == nullptr) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

void record(std::function<void()> rule) { Tape::active()->record(std::move(rule)); }

void require_matrix(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + " expects a matrix, got " + shape_to_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
}

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m x k] += g[m x n] * b[k x n]^T
void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
    std::vector<double> bt(n * k);
    for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
    gemm_nn(g, bt.data(), c, m, n, k);
}

// c[k x n] += a[m x k]^T * g[m x n]
void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* grow = g + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            double* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw ShapeError("matmul: inner dimensions differ for " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()));
    const bool grad = tracking({&a, &b});
    Tensor out({m, n}, grad);
    gemm_nn(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n);
    if (grad) {
        record([a, b, out, m, k, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad().data();
            if (a.requires_grad()) gemm_nt(g, b.data().data(), a.mutable_grad().data(), m, n, k);
            if (b.requires_grad()) gemm_tn(a.data().data(), g, b.mutable_grad().data(), m, k, n);
        });
    }
    return out;
}

namespace {

template <typename Fwd, typename GradA, typename GradB>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, GradA ga, GradB gb) {
    require_same_shape(a, b, op);
    const bool grad = tracking({&a, &b});
    Tensor out(a.shape(), grad);
    auto av = a.data();
    auto bv = b.data();
    auto ov = out.mutable_data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(av[i], bv[i]);
    if (grad) {
        record([a, b, out, ga, gb]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto av = a.data();
            auto bv = b.data();
            if (a.requires_grad()) {
                auto da = a.mutable_grad();
                for (std::size_t i = 0; i < g.size(); ++i) da[i] += ga(g[i], av[i], bv[i]);
            }
            if (b.requires_grad()) {
                auto db = b.mutable_grad();
                for (std::size_t i = 0; i < g.size(); ++i) db[i] += gb(g[i], av[i], bv[i]);
            }
        });
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        a, b, "add", [](double x, double y) { return x + y; }, [](double g, double, double) { return g; },
        [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        a, b, "sub", [](double x, double y) { return x - y; }, [](double g, double, double) { return g; },
        [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        a, b, "mul", [](double x, double y) { return x * y; }, [](double g, double, double y) { return g * y; },
        [](double g, double x, double) { return g * x; });
}

Tensor scale(const Tensor& a, double factor) {
    const bool grad = tracking({&a});
    Tensor out(a.shape(), grad);
    auto av = a.data();
    auto ov = out.mutable_data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * factor;
    if (grad) {
        record([a, out, factor]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto da = a.mutable_grad();
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * factor;
        });
    }
    return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    require_matrix(x, "add_bias");
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (bias.numel() != n)
        throw ShapeError("add_bias: bias " + shape_to_string(bias.shape()) + " does not match " +
                         shape_to_string(x.shape()));
    const bool grad = tracking({&x, &bias});
    Tensor out(x.shape(), grad);
    auto xv = x.data();
    auto bv = bias.data();
    auto ov = out.mutable_data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ov[i * n + j] = xv[i * n + j] + bv[j];
    if (grad) {
        record([x, bias, out, m, n]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            if (x.requires_grad()) {
                auto dx = x.mutable_grad();
                for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
            }
            if (bias.requires_grad()) {
                auto db = bias.mutable_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) db[j] += g[i * n + j];
            }
        });
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    require_matrix(a, "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    const bool grad = tracking({&a});
    Tensor out({n, m}, grad);
    auto av = a.data();
    auto ov = out.mutable_data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ov[j * m + i] = av[i * n + j];
    if (grad) {
        record([a, out, m, n]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto da = a.mutable_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) da[i * n + j] += g[j * m + i];
        });
    }
    return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
    check_shape(shape);
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_to_string(a.shape()) + " as " + shape_to_string(shape));
    const bool grad = tracking({&a});
    Tensor out(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()), grad);
    if (grad) {
        record([a, out]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto da = a.mutable_grad();
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        });
    }
    return out;
}

namespace {
constexpr double kGeluC = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);
}  // namespace

double gelu_value(double x) {
    const double u = kSqrt2OverPi * (x + kGeluC * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_derivative(double x) {
    const double u = kSqrt2OverPi * (x + kGeluC * x * x * x);
    const double t = std::tanh(u);
    const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluC * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

Tensor gelu(const Tensor& x) {
    const bool grad = tracking({&x});
    Tensor out(x.shape(), grad);
    auto xv = x.data();
    auto ov = out.mutable_data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = gelu_value(xv[i]);
    if (grad) {
        record([x, out]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto xv = x.data();
            auto dx = x.mutable_grad();
            for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * gelu_derivative(xv[i]);
        });
    }
    return out;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    const Shape& s = x.shape();
    if (axis >= s.size())
        throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_to_string(s));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t len = s[axis];
    auto xv = x.data();
    for (double v : xv)
        if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");

    const bool grad = tracking({&x});
    Tensor out(s, grad);
    auto ov = out.mutable_data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = xv[base];
            for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
            double total = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                const double e = std::exp(xv[base + j * inner] - mx);
                ov[base + j * inner] = e;
                total += e;
            }
            for (std::size_t j = 0; j < len; ++j) ov[base + j * inner] /= total;
        }
    }
    if (grad) {
        record([x, out, outer, inner, len]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto y = out.data();
            auto dx = x.mutable_grad();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
                    for (std::size_t j = 0; j < len; ++j) {
                        const std::size_t idx = base + j * inner;
                        dx[idx] += y[idx] * (g[idx] - dot);
                    }
                }
            }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require_matrix(x, "layer_norm");
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (gamma.numel() != n || beta.numel() != n)
        throw ShapeError("layer_norm: affine parameters do not match " + shape_to_string(x.shape()));
    const bool grad = tracking({&x, &gamma, &beta});
    Tensor out(x.shape(), grad);
    auto xv = x.data();
    auto gv = gamma.data();
    auto bv = beta.data();
    auto ov = out.mutable_data();
    auto xhat = std::make_shared<std::vector<double>>(grad ? m * n : 0);
    auto rstd = std::make_shared<std::vector<double>>(grad ? m : 0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = xv.data() + i * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(n);
        const double r = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (row[j] - mu) * r;
            ov[i * n + j] = h * gv[j] + bv[j];
            if (grad) (*xhat)[i * n + j] = h;
        }
        if (grad) (*rstd)[i] = r;
    }
    if (grad) {
        record([x, gamma, beta, out, xhat, rstd, m, n]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto gv = gamma.data();
            const auto& h = *xhat;
            if (gamma.requires_grad()) {
                auto dg = gamma.mutable_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) dg[j] += g[i * n + j] * h[i * n + j];
            }
            if (beta.requires_grad()) {
                auto db = beta.mutable_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) db[j] += g[i * n + j];
            }
            if (x.requires_grad()) {
                auto dx = x.mutable_grad();
                const double inv_n = 1.0 / static_cast<double>(n);
                for (std::size_t i = 0; i < m; ++i) {
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double dh = g[i * n + j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h[i * n + j];
                    }
                    mean_dh *= inv_n;
                    mean_dh_h *= inv_n;
                    const double r = (*rstd)[i];
                    for (std::size_t j = 0; j < n; ++j) {
                        const double dh = g[i * n + j] * gv[j];
                        dx[i * n + j] += r * (dh - mean_dh - h[i * n + j] * mean_dh_h);
                    }
                }
            }
        });
    }
    return out;
}

Tensor sum(const Tensor& x) {
    const bool grad = tracking({&x});
    double total = 0.0;
    for (double v : x.data()) total += v;
    Tensor out = Tensor::scalar(total, grad);
    if (grad) {
        record([x, out]() mutable {
            if (!out.has_grad()) return;
            const double g = out.grad()[0];
            for (double& d : x.mutable_grad()) d += g;
        });
    }
    return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    require_matrix(a, "concat_rows");
    require_matrix(b, "concat_rows");
    if (a.dim(1) != b.dim(1))
        throw ShapeError("concat_rows: column mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
    const bool grad = tracking({&a, &b});
    const std::size_t na = a.numel();
    Tensor out({a.dim(0) + b.dim(0), a.dim(1)}, grad);
    auto ov = out.mutable_data();
    std::copy(a.data().begin(), a.data().end(), ov.begin());
    std::copy(b.data().begin(), b.data().end(), ov.begin() + static_cast<std::ptrdiff_t>(na));
    if (grad) {
        record([a, b, out, na]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            if (a.requires_grad()) {
                auto da = a.mutable_grad();
                for (std::size_t i = 0; i < na; ++i) da[i] += g[i];
            }
            if (b.requires_grad()) {
                auto db = b.mutable_grad();
                for (std::size_t i = 0; i < db.size(); ++i) db[i] += g[na + i];
            }
        });
    }
    return out;
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
    require_matrix(x, "gather_rows");
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (rows.empty()) throw ShapeError("gather_rows: empty index list");
    for (std::size_t r : rows)
        if (r >= m) throw ShapeError("gather_rows: row " + std::to_string(r) + " out of range " + shape_to_string(x.shape()));
    const bool grad = tracking({&x});
    Tensor out({rows.size(), n}, grad);
    auto xv = x.data();
    auto ov = out.mutable_data();
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(rows[i] * n), n,
                    ov.begin() + static_cast<std::ptrdiff_t>(i * n));
    if (grad) {
        auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
        record([x, out, idx, n]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto dx = x.mutable_grad();
            for (std::size_t i = 0; i < idx->size(); ++i)
                for (std::size_t j = 0; j < n; ++j) dx[(*idx)[i] * n + j] += g[i * n + j];
        });
    }
    return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, const std::vector<bool>* allowed,
                     std::vector<double>* probabilities) {
    require_matrix(logits, "cross_entropy");
    const std::size_t batch = logits.dim(0), classes = logits.dim(1);
    if (labels.size() != batch)
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(batch) + " rows");
    if (allowed && allowed->size() != classes) throw ShapeError("cross_entropy: class mask has wrong length");
    auto is_allowed = [&](std::size_t c) { return allowed == nullptr || (*allowed)[c]; };

    auto lv = logits.data();
    auto probs = std::make_shared<std::vector<double>>(batch * classes, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
        const int label = labels[i];
        if (label < 0 || static_cast<std::size_t>(label) >= classes || !is_allowed(static_cast<std::size_t>(label)))
            throw DataError("cross_entropy: label " + std::to_string(label) + " is not an allowed class");
        const double* row = lv.data() + i * classes;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < classes; ++c) {
            if (!is_allowed(c)) continue;
            if (!std::isfinite(row[c])) throw NumericError("cross_entropy: non-finite logit");
            mx = std::max(mx, row[c]);
        }
        double z = 0.0;
        for (std::size_t c = 0; c < classes; ++c) {
            if (!is_allowed(c)) continue;
            const double e = std::exp(row[c] - mx);
            (*probs)[i * classes + c] = e;
            z += e;
        }
        for (std::size_t c = 0; c < classes; ++c) (*probs)[i * classes + c] /= z;
        total += (std::log(z) + mx) - row[label];
    }
    if (probabilities) *probabilities = *probs;

    const bool grad = tracking({&logits});
    Tensor out = Tensor::scalar(total / static_cast<double>(batch), grad);
    if (grad) {
        auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
        record([logits, out, probs, lab, batch, classes]() mutable {
            if (!out.has_grad()) return;
            const double g = out.grad()[0] / static_cast<double>(batch);
            auto dl = logits.mutable_grad();
            for (std::size_t i = 0; i < batch; ++i) {
                for (std::size_t c = 0; c < classes; ++c) {
                    double d = (*probs)[i * classes + c];
                    if (static_cast<int>(c) == (*lab)[i]) d -= 1.0;
                    dl[i * classes + c] += g * d;
                }
            }
        });
    }
    return out;
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t tokens,
                            std::size_t heads, std::vector<double>* weights) {
    require_matrix(q, "attention");
    require_same_shape(q, k, "attention");
    require_same_shape(q, v, "attention");
    const std::size_t rows = q.dim(0), width = q.dim(1);
    if (tokens == 0 || rows % tokens != 0)
        throw ShapeError("attention: " + std::to_string(rows) + " rows is not a multiple of " +
                         std::to_string(tokens) + " tokens");
    if (heads == 0 || width % heads != 0)
        throw ShapeError("attention: width " + std::to_string(width) + " not divisible by " +
                         std::to_string(heads) + " heads");
    const std::size_t batch = rows / tokens, hd = width / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(hd));

    const bool grad = tracking({&q, &k, &v});
    auto probs = std::make_shared<std::vector<double>>(batch * heads * tokens * tokens);
    Tensor out({rows, width}, grad);
    auto qv = q.data();
    auto kv = k.data();
    auto vv = v.data();
    auto ov = out.mutable_data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            double* p = probs->data() + (b * heads + h) * tokens * tokens;
            for (std::size_t i = 0; i < tokens; ++i) {
                const double* qi = qv.data() + (b * tokens + i) * width + h * hd;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < tokens; ++j) {
                    const double* kj = kv.data() + (b * tokens + j) * width + h * hd;
                    double s = 0.0;
                    for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
                    s *= sc;
                    p[i * tokens + j] = s;
                    mx = std::max(mx, s);
                }
                if (!std::isfinite(mx)) throw NumericError("attention: non-finite score");
                double z = 0.0;
                for (std::size_t j = 0; j < tokens; ++j) {
                    const double e = std::exp(p[i * tokens + j] - mx);
                    p[i * tokens + j] = e;
                    z += e;
                }
                for (std::size_t j = 0; j < tokens; ++j) p[i * tokens + j] /= z;
                double* oi = ov.data() + (b * tokens + i) * width + h * hd;
                for (std::size_t j = 0; j < tokens; ++j) {
                    const double pij = p[i * tokens + j];
                    const double* vj = vv.data() + (b * tokens + j) * width + h * hd;
                    for (std::size_t c = 0; c < hd; ++c) oi[c] += pij * vj[c];
                }
            }
        }
    }
    if (weights) *weights = *probs;
    if (grad) {
        record([q, k, v, out, probs, batch, heads, tokens, width, hd, sc]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto qv = q.data();
            auto kv = k.data();
            auto vv = v.data();
            const bool need_q = q.requires_grad(), need_k = k.requires_grad(), need_v = v.requires_grad();
            double* dq = need_q ? q.mutable_grad().data() : nullptr;
            double* dk = need_k ? k.mutable_grad().data() : nullptr;
            double* dv = need_v ? v.mutable_grad().data() : nullptr;
            std::vector<double> ds(tokens * tokens);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < heads; ++h) {
                    const double* p = probs->data() + (b * heads + h) * tokens * tokens;
                    const std::size_t off = b * tokens * width + h * hd;
                    for (std::size_t i = 0; i < tokens; ++i) {
                        const double* gi = g.data() + off + i * width;
                        double dot = 0.0;
                        for (std::size_t j = 0; j < tokens; ++j) {
                            const double* vj = vv.data() + off + j * width;
                            double dp = 0.0;
                            for (std::size_t c = 0; c < hd; ++c) dp += gi[c] * vj[c];
                            ds[i * tokens + j] = dp;
                            dot += dp * p[i * tokens + j];
                        }
                        for (std::size_t j = 0; j < tokens; ++j)
                            ds[i * tokens + j] = p[i * tokens + j] * (ds[i * tokens + j] - dot) * sc;
                        if (dv) {
                            for (std::size_t j = 0; j < tokens; ++j) {
                                const double pij = p[i * tokens + j];
                                double* dvj = dv + off + j * width;
                                for (std::size_t c = 0; c < hd; ++c) dvj[c] += pij * gi[c];
                            }
                        }
                    }
                    for (std::size_t i = 0; i < tokens; ++i) {
                        for (std::size_t j = 0; j < tokens; ++j) {
                            const double s = ds[i * tokens + j];
                            if (dq) {
                                const double* kj = kv.data() + off + j * width;
                                double* dqi = dq + off + i * width;
                                for (std::size_t c = 0; c < hd; ++c) dqi[c] += s * kj[c];
                            }
                            if (dk) {
                                const double* qi = qv.data() + off + i * width;
                                double* dkj = dk + off + j * width;
                                for (std::size_t c = 0; c < hd; ++c) dkj[c] += s * qi[c];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace color
