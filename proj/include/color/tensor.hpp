#pragma once

// Dense row-major tensors with a tape-based reverse-mode autodiff.
//
// Values are held in double precision. Model parameters are kept on the
// single-precision grid (see round_to_single) so that checkpoints, which store
// IEEE-754 binary32, round-trip them exactly.
//
// Gradients are only recorded while a Tape is active on the current thread
// (TapeGuard). Outside a guard every op runs in inference mode.

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace color {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, bool requires_grad = false);
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const noexcept { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    // Direct write access; only for parameter initialisation and optimizer updates.
    std::span<double> mutable_data();
    double item() const;
    double at(std::size_t row, std::size_t col) const;

    bool requires_grad() const;
    void set_requires_grad(bool value);
    bool has_grad() const;
    std::span<const double> grad() const;
    // Allocates a zero gradient on first use.
    std::span<double> mutable_grad() const;
    void clear_grad();

    // New handle on the same storage with its own (empty) gradient slot.
    Tensor alias() const;
    // Deep copy of the values; the copy has no gradient.
    Tensor clone() const;
    bool shares_storage(const Tensor& other) const;

private:
    struct Impl {
        Shape shape;
        std::shared_ptr<std::vector<double>> values;
        bool requires_grad = false;
        std::vector<double> grad;
    };
    std::shared_ptr<Impl> impl_;

    const Impl& impl() const;
    Impl& impl();
};

// Ordered record of differentiable operations for one forward pass.
// Operations are appended in execution order, which is a topological order.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::function<void()> backward_rule);
    std::size_t size() const noexcept { return nodes_.size(); }

    // Seeds d(loss)/d(loss) = 1 and runs every recorded rule once, newest first.
    // Returns the number of operations visited and clears the tape.
    std::size_t backward(const Tensor& loss);

    static Tape* active() noexcept;

private:
    std::vector<std::function<void()>> nodes_;
    friend class TapeGuard;
};

// Activates a tape on the current thread for the lifetime of the guard.
class TapeGuard {
public:
    explicit TapeGuard(Tape& tape);
    ~TapeGuard();
    TapeGuard(const TapeGuard&) = delete;
    TapeGuard& operator=(const TapeGuard&) = delete;

private:
    Tape* previous_;
};

// Rounds every value to the nearest binary32 number (in place).
void round_to_single(Tensor& tensor);
bool is_single_representable(const Tensor& tensor);

// ---------------------------------------------------------------------------
// Differentiable operations.
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// x[m x n] + bias[n], bias broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor gelu(const Tensor& x);
Tensor softmax(const Tensor& x, std::size_t axis);
// Normalises each row of x[m x n] and applies gamma[n], beta[n].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

// Mean softmax cross-entropy over the rows of logits[batch x classes].
// Classes with allowed[c] == false behave as if their logit were -inf:
// probability exactly zero and zero gradient. `probabilities`, when given,
// receives the row-major class probabilities used in the loss.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels,
                     const std::vector<bool>* allowed = nullptr,
                     std::vector<double>* probabilities = nullptr);

// Scaled dot-product attention over `heads` heads for a stack of sequences.
// q, k, v are [(batch * tokens) x D]; each block of `tokens` rows is one sequence.
// When `weights` is non-null it receives the attention probabilities laid out
// as [batch][head][query][key].
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t tokens,
                            std::size_t heads, std::vector<double>* weights = nullptr);

double gelu_value(double x);
double gelu_derivative(double x);

}  // namespace color
