#pragma once

// Dense tensor engine with reverse-mode autodiff. Eager forward evaluation;
// each op records its parents and a backward closure. Graphs are built and
// backpropagated by a single owner; independent graphs may run in parallel.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mvd/common.hpp"

namespace mvd {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

enum class PadMode { Zero, Replicate };

template <typename T>
struct TensorNode;

// Shared-handle tensor. Immutable after forward creation except for the
// gradient accumulator.
template <typename T>
class Tensor {
  public:
    Tensor() = default;

    static Tensor leaf(Shape shape, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false);
    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, T value);
    static Tensor scalar(T value);
    static Tensor randn(Shape shape, Rng& rng, T stddev = T(1));
    static Tensor rand_uniform(Shape shape, Rng& rng, T lo = T(0), T hi = T(1));

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::int64_t numel() const;
    std::int64_t dim(int i) const;
    int ndim() const;

    T* data();
    const T* data() const;
    T item() const;

    bool requires_grad() const;
    // Gradient accumulator, allocated zero-filled on first access.
    T* grad_data();
    const std::vector<T>& grad() const;
    bool has_grad() const;
    void zero_grad();

    TensorNode<T>* node() const { return node_.get(); }
    std::shared_ptr<TensorNode<T>> handle() const { return node_; }

  private:
    std::shared_ptr<TensorNode<T>> node_;
    explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

    template <typename U>
    friend Tensor<U> make_op(Shape shape, std::vector<U> value, std::vector<Tensor<U>> parents,
                             std::function<void(TensorNode<U>&)> backward);
    template <typename U>
    friend class Tensor;
};

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until touched
    bool requires_grad = false;
    std::vector<Tensor<T>> parents;
    std::function<void(TensorNode<T>&)> backward;

    std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
    T* grad_accum() {
        if (grad.empty()) grad.assign(value.size(), T(0));
        return grad.data();
    }
};

// Thread-local switch; when false, ops do not record the graph.
bool grad_enabled();
void set_grad_enabled(bool on);

struct NoGradGuard {
    NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
    ~NoGradGuard() { set_grad_enabled(prev_); }

  private:
    bool prev_;
};

// Backpropagate from a scalar root. Accumulates into existing gradients;
// callers reset leaf grads explicitly between steps.
template <typename T>
void backward(const Tensor<T>& root);

// Abort with NumericalError if any element is NaN/Inf.
template <typename T>
void check_finite(const Tensor<T>& t, const std::string& what);

// ---- elementwise ----
template <typename T> Tensor<T> neg(const Tensor<T>& x);
template <typename T> Tensor<T> exp_(const Tensor<T>& x);
template <typename T> Tensor<T> log_(const Tensor<T>& x);
template <typename T> Tensor<T> sqrt_(const Tensor<T>& x);
template <typename T> Tensor<T> tanh_(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> gelu(const Tensor<T>& x);   // exact erf form
template <typename T> Tensor<T> silu(const Tensor<T>& x);
template <typename T> Tensor<T> square(const Tensor<T>& x);
template <typename T> Tensor<T> abs_(const Tensor<T>& x);
template <typename T> Tensor<T> clamp(const Tensor<T>& x, T lo, T hi);

template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T c);
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& x, T c);

// ---- binary with numpy-style broadcasting ----
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div_(const Tensor<T>& a, const Tensor<T>& b);

// ---- linear algebra ----
// 2D [M,K]@[K,N] or batched 3D [B,M,K]@[B,K,N]; optional transposes apply to
// the trailing two axes.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false);

// ---- convolution ----
// pad > 0 applies symmetric padding in the chosen mode without materializing
// the padded tensor; pad == 0 is a "valid" window.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride,
                 int pad = 0, PadMode mode = PadMode::Zero);
template <typename T>
Tensor<T> pad2d(const Tensor<T>& x, int top, int bottom, int left, int right, PadMode mode);
template <typename T>
Tensor<T> upsample_nearest2(const Tensor<T>& x);
// w layout [C_in, C_out, k, k]
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride);

// ---- normalization ----
// Stats over the last axis, accumulated in 64-bit regardless of T.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = 1e-6);
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, int groups, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = 1e-6);
template <typename T> Tensor<T> softmax_last(const Tensor<T>& x);
template <typename T> Tensor<T> l2_normalize_last(const Tensor<T>& x);

// ---- reductions ----
template <typename T> Tensor<T> sum_all(const Tensor<T>& x);
template <typename T> Tensor<T> mean_all(const Tensor<T>& x);
template <typename T> Tensor<T> sum_axis(const Tensor<T>& x, int axis, bool keepdim = false);

// ---- shape ----
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis);
template <typename T> Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t len);
template <typename T> Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<std::int64_t>& idx);
template <typename T> Tensor<T> detach(const Tensor<T>& x);

// [N,C,H,W] -> [N*(H/p)*(W/p), C*p*p] tokens in frame-major, row-major grid
// order; unpatchify is the exact inverse.
template <typename T> Tensor<T> patchify(const Tensor<T>& x, int p);
template <typename T>
Tensor<T> unpatchify(const Tensor<T>& tokens, int n, int c, int h, int w, int p);

// ---- gradient checking ----
struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_input;
    bool finite = true;
};

// Central finite differences of a scalar-valued function against analytic
// gradients; `inputs` are the leaves to perturb.
GradCheckReport grad_check(const std::function<Tensor<double>()>& fn,
                           const std::vector<Tensor<double>>& inputs, double step = 1e-5,
                           double denom_floor = 1e-6);

}  // namespace mvd
