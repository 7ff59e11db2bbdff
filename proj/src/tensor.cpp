#include "mvd/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cblas.h>
#include <cmath>
#include <cstring>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <unordered_set>

extern "C" void openblas_set_num_threads(int);

namespace mvd {

namespace {
thread_local bool g_grad_enabled = true;
std::atomic<int> g_threads{1};

// float transcendentals on a vectorizable polynomial path; double keeps libm
// so 64-bit gradient checks see exact derivatives
inline float fast_exp(float x) {
    x = std::max(-87.0f, std::min(88.0f, x));
    const float t = x * 1.44269504088896341f;
    const float fi = std::floor(t);
    const float f = (t - fi) * 0.69314718055994531f;
    // e^f on [0, ln2), degree-7 Taylor: relative error under 3e-8
    float p = 1.0f / 5040.0f;
    p = p * f + 1.0f / 720.0f;
    p = p * f + 1.0f / 120.0f;
    p = p * f + 1.0f / 24.0f;
    p = p * f + 1.0f / 6.0f;
    p = p * f + 0.5f;
    p = p * f + 1.0f;
    p = p * f + 1.0f;
    union {
        float v;
        std::int32_t i;
    } bits;
    bits.i = (static_cast<std::int32_t>(fi) + 127) << 23;
    return bits.v * p;
}

template <typename T>
inline T exp_t(T x) {
    if constexpr (std::is_same_v<T, float>)
        return fast_exp(x);
    else
        return std::exp(x);
}

template <typename T>
inline T tanh_t(T x) {
    if constexpr (std::is_same_v<T, float>) {
        const float e2 = fast_exp(2.0f * x);
        return (e2 - 1.0f) / (e2 + 1.0f);
    } else {
        return std::tanh(x);
    }
}
}  // namespace

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

void set_thread_count(int n) {
    g_threads.store(std::max(1, n));
    // the worker pool owns all parallelism; threaded BLAS would oversubscribe
    openblas_set_num_threads(1);
}
int thread_count() { return g_threads.load(); }

namespace {

// Persistent fork-join pool: thread startup is far too slow to pay per call.
// Nested calls from a worker run inline. Work items are claimed through an
// atomic counter; writes are disjoint, so results do not depend on the
// number of workers.
class WorkerPool {
  public:
    static WorkerPool& instance() {
        static WorkerPool pool;
        return pool;
    }

    void run(std::int64_t begin, std::int64_t end, int workers,
             const std::function<void(std::int64_t)>& body) {
        const std::int64_t n = end - begin;
        if (n <= 0) return;
        workers = static_cast<int>(std::min<std::int64_t>(std::max(1, workers), n));
        if (workers == 1 || in_worker_) {
            for (std::int64_t i = begin; i < end; ++i) body(i);
            return;
        }
        ensure_workers(workers - 1);
        {
            std::lock_guard<std::mutex> lock(mutex_);
            body_ = &body;
            next_.store(begin, std::memory_order_relaxed);
            end_ = end;
            ++generation_;
        }
        cv_.notify_all();
        while (true) {
            const std::int64_t i = next_.fetch_add(1, std::memory_order_relaxed);
            if (i >= end) break;
            body(i);
        }
        std::unique_lock<std::mutex> lock(mutex_);
        done_cv_.wait(lock, [&] { return active_ == 0; });
        body_ = nullptr;
    }

  private:
    WorkerPool() = default;
    ~WorkerPool() {
        {
            std::lock_guard<std::mutex> lock(mutex_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    void ensure_workers(int count) {
        std::lock_guard<std::mutex> lock(mutex_);
        while (static_cast<int>(threads_.size()) < count)
            threads_.emplace_back([this] { worker_loop(); });
    }

    void worker_loop() {
        in_worker_ = true;
        std::uint64_t seen = 0;
        while (true) {
            const std::function<void(std::int64_t)>* body;
            std::int64_t end;
            {
                std::unique_lock<std::mutex> lock(mutex_);
                cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
                if (stop_) return;
                seen = generation_;
                if (!body_) continue;
                body = body_;
                end = end_;
                ++active_;
            }
            while (true) {
                const std::int64_t i = next_.fetch_add(1, std::memory_order_relaxed);
                if (i >= end) break;
                (*body)(i);
            }
            {
                std::lock_guard<std::mutex> lock(mutex_);
                --active_;
            }
            done_cv_.notify_all();
        }
    }

    static thread_local bool in_worker_;
    std::vector<std::thread> threads_;
    std::mutex mutex_;
    std::condition_variable cv_, done_cv_;
    const std::function<void(std::int64_t)>* body_ = nullptr;
    std::atomic<std::int64_t> next_{0};
    std::int64_t end_ = 0;
    std::uint64_t generation_ = 0;
    int active_ = 0;
    bool stop_ = false;
};

thread_local bool WorkerPool::in_worker_ = false;

}  // namespace

void parallel_for(std::int64_t begin, std::int64_t end, int threads,
                  const std::function<void(std::int64_t)>& body) {
    WorkerPool::instance().run(begin, end, threads, body);
}

// Splits a flat elementwise range into per-worker chunks; chunk boundaries
// are fixed so results are identical for any worker count.
template <typename Body>
void parallel_chunks(std::int64_t n, Body body) {
    const int workers = thread_count();
    if (workers <= 1 || n < (1 << 16)) {
        body(std::int64_t(0), n);
        return;
    }
    const std::int64_t chunk = (n + 2 * workers - 1) / (2 * workers);
    const std::int64_t pieces = (n + chunk - 1) / chunk;
    parallel_for(0, pieces, workers, [&](std::int64_t p) {
        body(p * chunk, std::min(n, (p + 1) * chunk));
    });
}

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

// ---------------------------------------------------------------------------
// Tensor handle
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> value, std::vector<Tensor<T>> parents,
                  std::function<void(TensorNode<T>&)> backward) {
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& p : parents)
            if (p.requires_grad()) needs = true;
    }
    if (needs) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward = std::move(backward);
    }
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::leaf(Shape shape, bool requires_grad) {
    auto node = std::make_shared<TensorNode<T>>();
    node->value.assign(shape_numel(shape), T(0));
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
        throw std::invalid_argument("from_data: size mismatch for shape " + shape_str(shape));
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
    return leaf(std::move(shape), false);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T v) {
    auto t = leaf(std::move(shape), false);
    std::fill(t.node()->value.begin(), t.node()->value.end(), v);
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T v) {
    return full({1}, v);
}

template <typename T>
Tensor<T> Tensor<T>::randn(Shape shape, Rng& rng, T stddev) {
    auto t = leaf(std::move(shape), false);
    for (auto& v : t.node()->value) v = static_cast<T>(rng.normal()) * stddev;
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::rand_uniform(Shape shape, Rng& rng, T lo, T hi) {
    auto t = leaf(std::move(shape), false);
    for (auto& v : t.node()->value) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T> const Shape& Tensor<T>::shape() const { return node_->shape; }
template <typename T> std::int64_t Tensor<T>::numel() const { return node_->numel(); }
template <typename T> std::int64_t Tensor<T>::dim(int i) const { return node_->shape.at(i); }
template <typename T> int Tensor<T>::ndim() const { return static_cast<int>(node_->shape.size()); }
template <typename T> T* Tensor<T>::data() { return node_->value.data(); }
template <typename T> const T* Tensor<T>::data() const { return node_->value.data(); }

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) throw std::invalid_argument("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
}

template <typename T> bool Tensor<T>::requires_grad() const { return node_ && node_->requires_grad; }
template <typename T> T* Tensor<T>::grad_data() { return node_->grad_accum(); }
template <typename T> const std::vector<T>& Tensor<T>::grad() const { return node_->grad; }
template <typename T> bool Tensor<T>::has_grad() const { return node_ && !node_->grad.empty(); }

template <typename T>
void Tensor<T>::zero_grad() {
    node_->grad.assign(node_->value.size(), T(0));
}

// ---------------------------------------------------------------------------
// Backward engine
// ---------------------------------------------------------------------------

template <typename T>
void backward(const Tensor<T>& root) {
    if (!root.defined()) throw std::invalid_argument("backward: undefined tensor");
    if (root.numel() != 1)
        throw std::invalid_argument("backward: root must be scalar, got " + shape_str(root.shape()));
    if (!root.requires_grad())
        throw std::invalid_argument("backward: root is detached from any differentiable leaf");

    // iterative post-order over the requires_grad subgraph
    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> visited;
    struct Frame {
        TensorNode<T>* n;
        std::size_t next_child;
    };
    std::vector<Frame> stack;
    stack.push_back({root.node(), 0});
    visited.insert(root.node());
    while (!stack.empty()) {
        Frame& f = stack.back();
        bool descended = false;
        while (f.next_child < f.n->parents.size()) {
            TensorNode<T>* p = f.n->parents[f.next_child++].node();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
                descended = true;
                break;
            }
        }
        if (!descended && f.next_child >= f.n->parents.size()) {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    root.node()->grad_accum()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode<T>* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

template <typename T>
void check_finite(const Tensor<T>& t, const std::string& what) {
    const T* v = t.data();
    const std::int64_t n = t.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        if (!std::isfinite(static_cast<double>(v[i])))
            throw NumericalError("non-finite value in " + what + " at flat index " + std::to_string(i));
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

// Unary op with derivative computed from (x, y).
template <typename T, typename F, typename DF>
Tensor<T> unary_op(const Tensor<T>& x, F f, DF df) {
    std::vector<T> out(x.numel());
    const T* xv = x.data();
    parallel_chunks(x.numel(), [&](std::int64_t b, std::int64_t e) {
        for (std::int64_t i = b; i < e; ++i) out[i] = f(xv[i]);
    });
    Tensor<T> xh = x;
    return make_op<T>(
        x.shape(), std::move(out), {x}, [xh, df](TensorNode<T>& n) mutable {
            if (!xh.requires_grad()) return;
            T* g = xh.grad_data();
            const T* xv = xh.data();
            const T* yv = n.value.data();
            const T* go = n.grad.data();
            parallel_chunks(n.numel(), [&](std::int64_t b, std::int64_t e) {
                for (std::int64_t i = b; i < e; ++i) g[i] += go[i] * df(xv[i], yv[i]);
            });
        });
}

template <typename T> Tensor<T> neg(const Tensor<T>& x) {
    return unary_op(x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}
template <typename T> Tensor<T> exp_(const Tensor<T>& x) {
    return unary_op(x, [](T v) { return exp_t(v); }, [](T, T y) { return y; });
}
template <typename T> Tensor<T> log_(const Tensor<T>& x) {
    return unary_op(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}
template <typename T> Tensor<T> sqrt_(const Tensor<T>& x) {
    return unary_op(x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}
template <typename T> Tensor<T> tanh_(const Tensor<T>& x) {
    return unary_op(x, [](T v) { return tanh_t(v); }, [](T, T y) { return T(1) - y * y; });
}
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x) {
    return unary_op(
        x, [](T v) { return T(1) / (T(1) + exp_t(-v)); }, [](T, T y) { return y * (T(1) - y); });
}
template <typename T> Tensor<T> gelu(const Tensor<T>& x) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return unary_op(
        x, [](T v) { return T(0.5) * v * (T(1) + T(std::erf(double(v) * inv_sqrt2))); },
        [](T v, T) {
            const T cdf = T(0.5) * (T(1) + T(std::erf(double(v) * inv_sqrt2)));
            const T pdf = T(inv_sqrt2pi) * exp_t(T(-0.5) * v * v);
            return cdf + v * pdf;
        });
}
template <typename T> Tensor<T> silu(const Tensor<T>& x) {
    return unary_op(
        x, [](T v) { return v / (T(1) + exp_t(-v)); },
        [](T v, T) {
            const T s = T(1) / (T(1) + exp_t(-v));
            return s * (T(1) + v * (T(1) - s));
        });
}
template <typename T> Tensor<T> square(const Tensor<T>& x) {
    return unary_op(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}
template <typename T> Tensor<T> abs_(const Tensor<T>& x) {
    return unary_op(
        x, [](T v) { return std::abs(v); },
        [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}
template <typename T> Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
    return unary_op(
        x, [lo, hi](T v) { return std::min(hi, std::max(lo, v)); },
        [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T c) {
    return unary_op(x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& x, T c) {
    return unary_op(x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

// ---------------------------------------------------------------------------
// Binary ops with broadcasting
// ---------------------------------------------------------------------------

namespace {

struct BroadcastPlan {
    Shape out_shape;
    std::vector<std::int64_t> a_strides;  // 0 where broadcast
    std::vector<std::int64_t> b_strides;
    std::int64_t numel = 0;
    bool same_shape = false;
};

BroadcastPlan broadcast_shapes(const Shape& a, const Shape& b) {
    BroadcastPlan plan;
    const int nd = static_cast<int>(std::max(a.size(), b.size()));
    plan.out_shape.resize(nd);
    std::vector<std::int64_t> ad(nd, 1), bd(nd, 1);
    for (std::size_t i = 0; i < a.size(); ++i) ad[nd - a.size() + i] = a[i];
    for (std::size_t i = 0; i < b.size(); ++i) bd[nd - b.size() + i] = b[i];
    for (int i = 0; i < nd; ++i) {
        if (ad[i] != bd[i] && ad[i] != 1 && bd[i] != 1)
            throw std::invalid_argument("broadcast mismatch: " + shape_str(a) + " vs " + shape_str(b));
        plan.out_shape[i] = std::max(ad[i], bd[i]);
    }
    plan.a_strides.assign(nd, 0);
    plan.b_strides.assign(nd, 0);
    std::int64_t as = 1, bs = 1;
    for (int i = nd - 1; i >= 0; --i) {
        plan.a_strides[i] = (ad[i] == 1) ? 0 : as;
        plan.b_strides[i] = (bd[i] == 1) ? 0 : bs;
        as *= ad[i];
        bs *= bd[i];
    }
    plan.numel = shape_numel(plan.out_shape);
    plan.same_shape = (a == b);
    return plan;
}

// Walk all output indices, calling body(out_idx, a_off, b_off).
template <typename Body>
void broadcast_walk(const BroadcastPlan& plan, Body body) {
    const int nd = static_cast<int>(plan.out_shape.size());
    std::vector<std::int64_t> idx(nd, 0);
    std::int64_t a_off = 0, b_off = 0;
    for (std::int64_t o = 0; o < plan.numel; ++o) {
        body(o, a_off, b_off);
        for (int d = nd - 1; d >= 0; --d) {
            ++idx[d];
            a_off += plan.a_strides[d];
            b_off += plan.b_strides[d];
            if (idx[d] < plan.out_shape[d]) break;
            a_off -= plan.a_strides[d] * plan.out_shape[d];
            b_off -= plan.b_strides[d] * plan.out_shape[d];
            idx[d] = 0;
        }
    }
}

}  // namespace

// F computes out from (a,b); DFA/DFB give local derivatives from (a,b).
template <typename T, typename F, typename DFA, typename DFB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, F f, DFA dfa, DFB dfb) {
    BroadcastPlan plan = broadcast_shapes(a.shape(), b.shape());
    std::vector<T> out(plan.numel);
    const T* av = a.data();
    const T* bv = b.data();
    if (plan.same_shape) {
        parallel_chunks(plan.numel, [&](std::int64_t b, std::int64_t e) {
            for (std::int64_t i = b; i < e; ++i) out[i] = f(av[i], bv[i]);
        });
    } else {
        broadcast_walk(plan, [&](std::int64_t o, std::int64_t ao, std::int64_t bo) {
            out[o] = f(av[ao], bv[bo]);
        });
    }
    Tensor<T> ah = a, bh = b;
    return make_op<T>(plan.out_shape, std::move(out), {a, b},
                      [ah, bh, plan, dfa, dfb](TensorNode<T>& n) mutable {
                          const T* av = ah.data();
                          const T* bv = bh.data();
                          const T* go = n.grad.data();
                          const bool need_a = ah.requires_grad();
                          const bool need_b = bh.requires_grad();
                          T* ga = need_a ? ah.grad_data() : nullptr;
                          T* gb = need_b ? bh.grad_data() : nullptr;
                          if (plan.same_shape) {
                              parallel_chunks(plan.numel, [&](std::int64_t b, std::int64_t e) {
                                  for (std::int64_t i = b; i < e; ++i) {
                                      if (need_a) ga[i] += go[i] * dfa(av[i], bv[i]);
                                      if (need_b) gb[i] += go[i] * dfb(av[i], bv[i]);
                                  }
                              });
                          } else {
                              broadcast_walk(plan, [&](std::int64_t o, std::int64_t ao, std::int64_t bo) {
                                  if (need_a) ga[ao] += go[o] * dfa(av[ao], bv[bo]);
                                  if (need_b) gb[bo] += go[o] * dfb(av[ao], bv[bo]);
                              });
                          }
                      });
}

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
                     [](T, T) { return T(1); });
}
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
                     [](T, T) { return T(-1); });
}
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
                     [](T x, T) { return x; });
}
template <typename T> Tensor<T> div_(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
                     [](T x, T y) { return -x / (y * y); });
}

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

namespace {

inline void gemm_raw(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k, float alpha,
                     const float* a, std::int64_t lda, const float* b, std::int64_t ldb, float beta,
                     float* c, std::int64_t ldc) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
                static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}
inline void gemm_raw(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k, double alpha,
                     const double* a, std::int64_t lda, const double* b, std::int64_t ldb, double beta,
                     double* c, std::int64_t ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
                static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

// C[m,n] (+)= op_a(A) op_b(B) with physical row-major inputs.
template <typename T>
void gemm(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b,
          T beta, T* c) {
    const std::int64_t lda = ta ? m : k;
    const std::int64_t ldb = tb ? k : n;
    gemm_raw(ta, tb, m, n, k, T(1), a, lda, b, ldb, beta, c, n);
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a, bool trans_b) {
    const int nd = a.ndim();
    if (nd != b.ndim() || (nd != 2 && nd != 3))
        throw std::invalid_argument("matmul: expects matching 2D or 3D operands, got " +
                                    shape_str(a.shape()) + " @ " + shape_str(b.shape()));
    const std::int64_t batch = (nd == 3) ? a.dim(0) : 1;
    if (nd == 3 && b.dim(0) != batch) throw std::invalid_argument("matmul: batch mismatch");
    const int ra = nd - 2;
    const std::int64_t m = trans_a ? a.dim(ra + 1) : a.dim(ra);
    const std::int64_t k = trans_a ? a.dim(ra) : a.dim(ra + 1);
    const std::int64_t kb = trans_b ? b.dim(ra + 1) : b.dim(ra);
    const std::int64_t n = trans_b ? b.dim(ra) : b.dim(ra + 1);
    if (k != kb)
        throw std::invalid_argument("matmul: inner dimension mismatch " + shape_str(a.shape()) +
                                    " @ " + shape_str(b.shape()));

    Shape out_shape = (nd == 3) ? Shape{batch, m, n} : Shape{m, n};
    std::vector<T> out(batch * m * n);
    const std::int64_t a_sz = a.dim(ra) * a.dim(ra + 1);
    const std::int64_t b_sz = b.dim(ra) * b.dim(ra + 1);
    parallel_for(0, batch, batch > 1 ? thread_count() : 1, [&](std::int64_t i) {
        gemm<T>(trans_a, trans_b, m, n, k, a.data() + i * a_sz, b.data() + i * b_sz, T(0),
                out.data() + i * m * n);
    });

    Tensor<T> ah = a, bh = b;
    return make_op<T>(std::move(out_shape), std::move(out), {a, b},
                      [ah, bh, trans_a, trans_b, batch, m, n, k, a_sz, b_sz](TensorNode<T>& nd_) mutable {
                          const T* go = nd_.grad.data();
                          for (std::int64_t i = 0; i < batch; ++i) {
                              const T* gof = go + i * m * n;
                              const T* av = ah.data() + i * a_sz;
                              const T* bv = bh.data() + i * b_sz;
                              if (ah.requires_grad()) {
                                  T* ga = ah.grad_data() + i * a_sz;
                                  if (!trans_a)  // dA[m,k] = dC op_b(B)^T
                                      gemm<T>(false, !trans_b, m, k, n, gof, bv, T(1), ga);
                                  else  // dA_phys[k,m] = op_b(B) dC^T
                                      gemm<T>(trans_b, true, k, m, n, bv, gof, T(1), ga);
                              }
                              if (bh.requires_grad()) {
                                  T* gb = bh.grad_data() + i * b_sz;
                                  if (!trans_b)  // dB[k,n] = op_a(A)^T dC
                                      gemm<T>(!trans_a, false, k, n, m, av, gof, T(1), gb);
                                  else  // dB_phys[n,k] = dC^T op_a(A)
                                      gemm<T>(true, trans_a, n, k, m, gof, av, T(1), gb);
                              }
                          }
                      });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace {

// col[(c*k+kh)*k+kw, oh*ow_n + ow] = x_padded[c, oh*s+kh, ow*s+kw], single
// sample; padding is virtual (zero fill or edge replication)
template <typename T>
void im2col(const T* x, std::int64_t c_in, std::int64_t h, std::int64_t w, int k, int s,
            std::int64_t oh, std::int64_t ow, T* col, int pad = 0,
            PadMode mode = PadMode::Zero) {
    for (std::int64_t c = 0; c < c_in; ++c) {
        for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
                T* dst = col + ((c * k + kh) * k + kw) * oh * ow;
                const T* plane = x + c * h * w;
                // valid output-column span [j0, j1] where sc = j*s + kw - pad
                // stays inside the row
                std::int64_t j0 = 0;
                while (j0 < ow && j0 * s + kw - pad < 0) ++j0;
                std::int64_t j1 = std::min<std::int64_t>(ow - 1, (w - 1 - kw + pad) / s);
                for (std::int64_t i = 0; i < oh; ++i, dst += ow) {
                    std::int64_t sr = i * s + kh - pad;
                    if (sr < 0 || sr >= h) {
                        if (mode == PadMode::Zero) {
                            std::fill(dst, dst + ow, T(0));
                            continue;
                        }
                        sr = std::min<std::int64_t>(h - 1, std::max<std::int64_t>(0, sr));
                    }
                    const T* row = plane + sr * w;
                    for (std::int64_t j = 0; j < j0; ++j)
                        dst[j] = mode == PadMode::Zero ? T(0) : row[0];
                    if (j1 >= j0) {
                        const T* src = row + j0 * s + kw - pad;
                        if (s == 1) {
                            std::memcpy(dst + j0, src, sizeof(T) * (j1 - j0 + 1));
                        } else {
                            for (std::int64_t j = j0; j <= j1; ++j) dst[j] = src[(j - j0) * s];
                        }
                    }
                    for (std::int64_t j = j1 + 1; j < ow; ++j)
                        dst[j] = mode == PadMode::Zero ? T(0) : row[w - 1];
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, std::int64_t c_in, std::int64_t h, std::int64_t w, int k, int s,
                std::int64_t oh, std::int64_t ow, T* x, int pad = 0,
                PadMode mode = PadMode::Zero) {
    for (std::int64_t c = 0; c < c_in; ++c) {
        for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
                const T* src = col + ((c * k + kh) * k + kw) * oh * ow;
                T* plane = x + c * h * w;
                std::int64_t j0 = 0;
                while (j0 < ow && j0 * s + kw - pad < 0) ++j0;
                std::int64_t j1 = std::min<std::int64_t>(ow - 1, (w - 1 - kw + pad) / s);
                for (std::int64_t i = 0; i < oh; ++i, src += ow) {
                    std::int64_t sr = i * s + kh - pad;
                    if (sr < 0 || sr >= h) {
                        if (mode == PadMode::Zero) continue;
                        sr = std::min<std::int64_t>(h - 1, std::max<std::int64_t>(0, sr));
                    }
                    T* row = plane + sr * w;
                    if (mode == PadMode::Replicate) {
                        for (std::int64_t j = 0; j < j0; ++j) row[0] += src[j];
                        for (std::int64_t j = j1 + 1; j < ow; ++j) row[w - 1] += src[j];
                    }
                    if (j1 >= j0) {
                        T* dst = row + j0 * s + kw - pad;
                        if (s == 1) {
                            const std::int64_t count = j1 - j0 + 1;
                            for (std::int64_t j = 0; j < count; ++j) dst[j] += src[j0 + j];
                        } else {
                            for (std::int64_t j = j0; j <= j1; ++j)
                                dst[(j - j0) * s] += src[j];
                        }
                    }
                }
            }
        }
    }
}

// scratch buffers: convolution columns dominate allocations in training
template <typename T>
std::vector<T>& conv_scratch(int which) {
    thread_local std::vector<T> bufs[2];
    return bufs[which];
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride,
                 int pad, PadMode mode) {
    if (x.ndim() != 4 || w.ndim() != 4)
        throw std::invalid_argument("conv2d: x must be [N,C,H,W], w [O,C,k,k]");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::int64_t o = w.dim(0), k = w.dim(2);
    if (w.dim(1) != c || w.dim(3) != k) throw std::invalid_argument("conv2d: weight shape mismatch");
    if (h + 2 * pad < k || wd + 2 * pad < k)
        throw std::invalid_argument("conv2d: input smaller than kernel");
    if (bias.defined() && bias.numel() != o) throw std::invalid_argument("conv2d: bias size mismatch");
    const std::int64_t oh = (h + 2 * pad - k) / stride + 1;
    const std::int64_t ow = (wd + 2 * pad - k) / stride + 1;
    const std::int64_t ckk = c * k * k;

    std::vector<T> out(n * o * oh * ow);
    // samples are independent; scratch is thread-local, outputs disjoint
    parallel_for(0, n, n > 1 ? thread_count() : 1, [&](std::int64_t i) {
        auto& col = conv_scratch<T>(0);
        col.resize(ckk * oh * ow);
        im2col(x.data() + i * c * h * wd, c, h, wd, static_cast<int>(k), stride, oh, ow,
               col.data(), pad, mode);
        // y_i[o, oh*ow] = W[o, ckk] @ col
        gemm<T>(false, false, o, oh * ow, ckk, w.data(), col.data(), T(0),
                out.data() + i * o * oh * ow);
        if (bias.defined()) {
            T* y = out.data() + i * o * oh * ow;
            for (std::int64_t oc = 0; oc < o; ++oc) {
                const T b = bias.data()[oc];
                for (std::int64_t j = 0; j < oh * ow; ++j) y[oc * oh * ow + j] += b;
            }
        }
    });

    Tensor<T> xh = x, wh = w, bh = bias;
    std::vector<Tensor<T>> parents = {x, w};
    if (bias.defined()) parents.push_back(bias);
    return make_op<T>(
        {n, o, oh, ow}, std::move(out), std::move(parents),
        [xh, wh, bh, n, c, h, wd, o, k, stride, oh, ow, ckk, pad, mode](TensorNode<T>& nd_) mutable {
            const T* go = nd_.grad.data();
            const bool need_w = wh.requires_grad();
            const bool need_x = xh.requires_grad();
            const bool need_b = bh.defined() && bh.requires_grad();
            const int workers =
                n > 1 ? std::min<std::int64_t>(thread_count(), n) : 1;
            // per-worker weight/bias accumulators, reduced in fixed order so
            // the result does not depend on the thread count
            std::vector<std::vector<T>> dw_parts, db_parts;
            if (need_w) dw_parts.assign(n, std::vector<T>());
            if (need_b) db_parts.assign(n, std::vector<T>(o, T(0)));
            parallel_for(0, n, workers, [&](std::int64_t i) {
                auto& col = conv_scratch<T>(0);
                auto& dcol = conv_scratch<T>(1);
                const T* gy = go + i * o * oh * ow;
                if (need_w) {
                    col.resize(ckk * oh * ow);
                    im2col(xh.data() + i * c * h * wd, c, h, wd, static_cast<int>(k), stride, oh,
                           ow, col.data(), pad, mode);
                    dw_parts[i].assign(o * ckk, T(0));
                    gemm<T>(false, true, o, ckk, oh * ow, gy, col.data(), T(0),
                            dw_parts[i].data());
                }
                if (need_x) {
                    dcol.resize(ckk * oh * ow);
                    gemm<T>(true, false, ckk, oh * ow, o, wh.data(), gy, T(0), dcol.data());
                    col2im_add(dcol.data(), c, h, wd, static_cast<int>(k), stride, oh, ow,
                               xh.grad_data() + i * c * h * wd, pad, mode);
                }
                if (need_b) {
                    for (std::int64_t oc = 0; oc < o; ++oc) {
                        T s = T(0);
                        for (std::int64_t j = 0; j < oh * ow; ++j) s += gy[oc * oh * ow + j];
                        db_parts[i][oc] = s;
                    }
                }
            });
            if (need_w) {
                T* gw = wh.grad_data();
                for (std::int64_t i = 0; i < n; ++i)
                    for (std::int64_t j = 0; j < o * ckk; ++j) gw[j] += dw_parts[i][j];
            }
            if (need_b) {
                T* gb = bh.grad_data();
                for (std::int64_t i = 0; i < n; ++i)
                    for (std::int64_t oc = 0; oc < o; ++oc) gb[oc] += db_parts[i][oc];
            }
        });
}

template <typename T>
Tensor<T> pad2d(const Tensor<T>& x, int top, int bottom, int left, int right, PadMode mode) {
    if (x.ndim() != 4) throw std::invalid_argument("pad2d: x must be [N,C,H,W]");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t oh = h + top + bottom, ow = w + left + right;
    std::vector<T> out(n * c * oh * ow);
    auto clampi = [](std::int64_t v, std::int64_t lo, std::int64_t hi) {
        return std::min(hi, std::max(lo, v));
    };
    for (std::int64_t nc = 0; nc < n * c; ++nc) {
        const T* src = x.data() + nc * h * w;
        T* dst = out.data() + nc * oh * ow;
        for (std::int64_t i = 0; i < oh; ++i) {
            const std::int64_t si = i - top;
            for (std::int64_t j = 0; j < ow; ++j) {
                const std::int64_t sj = j - left;
                if (si >= 0 && si < h && sj >= 0 && sj < w) {
                    dst[i * ow + j] = src[si * w + sj];
                } else if (mode == PadMode::Zero) {
                    dst[i * ow + j] = T(0);
                } else {
                    dst[i * ow + j] = src[clampi(si, 0, h - 1) * w + clampi(sj, 0, w - 1)];
                }
            }
        }
    }
    Tensor<T> xh = x;
    return make_op<T>({n, c, oh, ow}, std::move(out), {x},
                      [xh, n, c, h, w, top, left, oh, ow, mode](TensorNode<T>& nd_) mutable {
                          if (!xh.requires_grad()) return;
                          const T* go = nd_.grad.data();
                          T* gx = xh.grad_data();
                          auto clampi = [](std::int64_t v, std::int64_t lo, std::int64_t hi) {
                              return std::min(hi, std::max(lo, v));
                          };
                          for (std::int64_t nc = 0; nc < n * c; ++nc) {
                              const T* g = go + nc * oh * ow;
                              T* dst = gx + nc * h * w;
                              for (std::int64_t i = 0; i < oh; ++i) {
                                  const std::int64_t si = i - top;
                                  for (std::int64_t j = 0; j < ow; ++j) {
                                      const std::int64_t sj = j - left;
                                      if (si >= 0 && si < h && sj >= 0 && sj < w) {
                                          dst[si * w + sj] += g[i * ow + j];
                                      } else if (mode == PadMode::Replicate) {
                                          dst[clampi(si, 0, h - 1) * w + clampi(sj, 0, w - 1)] +=
                                              g[i * ow + j];
                                      }
                                  }
                              }
                          }
                      });
}

template <typename T>
Tensor<T> upsample_nearest2(const Tensor<T>& x) {
    if (x.ndim() != 4) throw std::invalid_argument("upsample_nearest2: x must be [N,C,H,W]");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    std::vector<T> out(n * c * 4 * h * w);
    for (std::int64_t nc = 0; nc < n * c; ++nc) {
        const T* src = x.data() + nc * h * w;
        T* dst = out.data() + nc * 4 * h * w;
        for (std::int64_t i = 0; i < h; ++i)
            for (std::int64_t j = 0; j < w; ++j) {
                const T v = src[i * w + j];
                T* d = dst + (2 * i) * 2 * w + 2 * j;
                d[0] = v;
                d[1] = v;
                d[2 * w] = v;
                d[2 * w + 1] = v;
            }
    }
    Tensor<T> xh = x;
    return make_op<T>({n, c, 2 * h, 2 * w}, std::move(out), {x},
                      [xh, n, c, h, w](TensorNode<T>& nd_) mutable {
                          if (!xh.requires_grad()) return;
                          const T* go = nd_.grad.data();
                          T* gx = xh.grad_data();
                          for (std::int64_t nc = 0; nc < n * c; ++nc) {
                              const T* g = go + nc * 4 * h * w;
                              T* dst = gx + nc * h * w;
                              for (std::int64_t i = 0; i < h; ++i)
                                  for (std::int64_t j = 0; j < w; ++j) {
                                      const T* s = g + (2 * i) * 2 * w + 2 * j;
                                      dst[i * w + j] += s[0] + s[1] + s[2 * w] + s[2 * w + 1];
                                  }
                          }
                      });
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride) {
    if (x.ndim() != 4 || w.ndim() != 4)
        throw std::invalid_argument("conv_transpose2d: x must be [N,C,H,W], w [C,O,k,k]");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::int64_t o = w.dim(1), k = w.dim(2);
    if (w.dim(0) != c || w.dim(3) != k)
        throw std::invalid_argument("conv_transpose2d: weight shape mismatch");
    const std::int64_t oh = (h - 1) * stride + k;
    const std::int64_t ow = (wd - 1) * stride + k;
    const std::int64_t okk = o * k * k;

    std::vector<T> out(n * o * oh * ow, T(0));
    std::vector<T> cols(okk * h * wd);
    for (std::int64_t i = 0; i < n; ++i) {
        // cols[okk, h*w] = W^T[okk, c] @ x_i[c, h*w]
        gemm<T>(true, false, okk, h * wd, c, w.data(), x.data() + i * c * h * wd, T(0), cols.data());
        T* y = out.data() + i * o * oh * ow;
        col2im_add(cols.data(), o, oh, ow, static_cast<int>(k), stride, h, wd, y);
        if (bias.defined()) {
            for (std::int64_t oc = 0; oc < o; ++oc) {
                const T b = bias.data()[oc];
                for (std::int64_t j = 0; j < oh * ow; ++j) y[oc * oh * ow + j] += b;
            }
        }
    }

    Tensor<T> xh = x, wh = w, bh = bias;
    std::vector<Tensor<T>> parents = {x, w};
    if (bias.defined()) parents.push_back(bias);
    return make_op<T>(
        {n, o, oh, ow}, std::move(out), std::move(parents),
        [xh, wh, bh, n, c, h, wd, o, k, stride, oh, ow, okk](TensorNode<T>& nd_) mutable {
            const T* go = nd_.grad.data();
            std::vector<T> dcols(okk * h * wd);
            for (std::int64_t i = 0; i < n; ++i) {
                const T* gy = go + i * o * oh * ow;
                // dcols = im2col(gy) under the same scatter mapping
                im2col(gy, o, oh, ow, static_cast<int>(k), stride, h, wd, dcols.data());
                if (xh.requires_grad())  // dx[c,hw] += W[c,okk] @ dcols
                    gemm<T>(false, false, c, h * wd, okk, wh.data(), dcols.data(), T(1),
                            xh.grad_data() + i * c * h * wd);
                if (wh.requires_grad())  // dW[c,okk] += x_i[c,hw] @ dcols^T
                    gemm<T>(false, true, c, okk, h * wd, xh.data() + i * c * h * wd, dcols.data(),
                            T(1), wh.grad_data());
                if (bh.defined() && bh.requires_grad()) {
                    T* gb = bh.grad_data();
                    for (std::int64_t oc = 0; oc < o; ++oc) {
                        T s = T(0);
                        for (std::int64_t j = 0; j < oh * ow; ++j) s += gy[oc * oh * ow + j];
                        gb[oc] += s;
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
    const std::int64_t d = x.dim(x.ndim() - 1);
    const std::int64_t rows = x.numel() / d;
    if (gamma.defined() && gamma.numel() != d) throw std::invalid_argument("layer_norm: gamma size");
    if (beta.defined() && beta.numel() != d) throw std::invalid_argument("layer_norm: beta size");

    std::vector<T> out(x.numel());
    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    const T* xv = x.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* row = xv + r * d;
        double m = 0.0;
        for (std::int64_t i = 0; i < d; ++i) m += double(row[i]);
        m /= double(d);
        double var = 0.0;
        for (std::int64_t i = 0; i < d; ++i) {
            const double dv = double(row[i]) - m;
            var += dv * dv;
        }
        var /= double(d);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::int64_t i = 0; i < d; ++i) {
            const T xh = T((double(row[i]) - m) * is);
            (*xhat)[r * d + i] = xh;
            T y = xh;
            if (gamma.defined()) y = y * gamma.data()[i];
            if (beta.defined()) y = y + beta.data()[i];
            out[r * d + i] = y;
        }
    }

    Tensor<T> xh_t = x, gh = gamma, bh = beta;
    std::vector<Tensor<T>> parents = {x};
    if (gamma.defined()) parents.push_back(gamma);
    if (beta.defined()) parents.push_back(beta);
    return make_op<T>(x.shape(), std::move(out), std::move(parents),
                      [xh_t, gh, bh, xhat, inv_std, rows, d](TensorNode<T>& nd_) mutable {
                          const T* go = nd_.grad.data();
                          for (std::int64_t r = 0; r < rows; ++r) {
                              const T* g = go + r * d;
                              const T* xhr = xhat->data() + r * d;
                              if (gh.defined() && gh.requires_grad()) {
                                  T* gg = gh.grad_data();
                                  for (std::int64_t i = 0; i < d; ++i) gg[i] += g[i] * xhr[i];
                              }
                              if (bh.defined() && bh.requires_grad()) {
                                  T* gb = bh.grad_data();
                                  for (std::int64_t i = 0; i < d; ++i) gb[i] += g[i];
                              }
                              if (xh_t.requires_grad()) {
                                  double s1 = 0.0, s2 = 0.0;
                                  for (std::int64_t i = 0; i < d; ++i) {
                                      const double dxh =
                                          double(g[i]) * (gh.defined() ? double(gh.data()[i]) : 1.0);
                                      s1 += dxh;
                                      s2 += dxh * double(xhr[i]);
                                  }
                                  s1 /= double(d);
                                  s2 /= double(d);
                                  T* gx = xh_t.grad_data() + r * d;
                                  const double is = (*inv_std)[r];
                                  for (std::int64_t i = 0; i < d; ++i) {
                                      const double dxh =
                                          double(g[i]) * (gh.defined() ? double(gh.data()[i]) : 1.0);
                                      gx[i] += T(is * (dxh - s1 - double(xhr[i]) * s2));
                                  }
                              }
                          }
                      });
}

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, int groups, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps) {
    if (x.ndim() != 4) throw std::invalid_argument("group_norm: x must be [N,C,H,W]");
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (c % groups != 0) throw std::invalid_argument("group_norm: channels not divisible by groups");
    const std::int64_t cg = c / groups;
    const std::int64_t gsz = cg * hw;

    std::vector<T> out(x.numel());
    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    auto inv_std = std::make_shared<std::vector<double>>(n * groups);
    const T* xv = x.data();
    parallel_for(0, n, n > 1 ? thread_count() : 1, [&](std::int64_t i) {
        for (int g = 0; g < groups; ++g) {
            const T* base = xv + i * c * hw + g * gsz;
            double m = 0.0;
            for (std::int64_t j = 0; j < gsz; ++j) m += double(base[j]);
            m /= double(gsz);
            double var = 0.0;
            for (std::int64_t j = 0; j < gsz; ++j) {
                const double dv = double(base[j]) - m;
                var += dv * dv;
            }
            var /= double(gsz);
            const double is = 1.0 / std::sqrt(var + eps);
            (*inv_std)[i * groups + g] = is;
            const std::int64_t off = i * c * hw + g * gsz;
            const T mt = T(m), ist = T(is);
            for (std::int64_t cc = 0; cc < cg; ++cc) {
                const std::int64_t ch = g * cg + cc;
                const T ga = gamma.defined() ? gamma.data()[ch] : T(1);
                const T be = beta.defined() ? beta.data()[ch] : T(0);
                const T* src = base + cc * hw;
                T* xh_row = xhat->data() + off + cc * hw;
                T* out_row = out.data() + off + cc * hw;
                for (std::int64_t j = 0; j < hw; ++j) {
                    const T xh = (src[j] - mt) * ist;
                    xh_row[j] = xh;
                    out_row[j] = xh * ga + be;
                }
            }
        }
    });

    Tensor<T> xh_t = x, gh = gamma, bh = beta;
    std::vector<Tensor<T>> parents = {x};
    if (gamma.defined()) parents.push_back(gamma);
    if (beta.defined()) parents.push_back(beta);
    return make_op<T>(
        x.shape(), std::move(out), std::move(parents),
        [xh_t, gh, bh, xhat, inv_std, n, c, hw, groups, cg, gsz](TensorNode<T>& nd_) mutable {
            const T* go = nd_.grad.data();
            for (std::int64_t i = 0; i < n; ++i) {
                for (int g = 0; g < groups; ++g) {
                    const std::int64_t off = i * c * hw + g * gsz;
                    const T* gr = go + off;
                    const T* xhr = xhat->data() + off;
                    if (gh.defined() && gh.requires_grad()) {
                        T* gg = gh.grad_data();
                        for (std::int64_t cc = 0; cc < cg; ++cc) {
                            T s = T(0);
                            for (std::int64_t j = 0; j < hw; ++j)
                                s += gr[cc * hw + j] * xhr[cc * hw + j];
                            gg[g * cg + cc] += s;
                        }
                    }
                    if (bh.defined() && bh.requires_grad()) {
                        T* gb = bh.grad_data();
                        for (std::int64_t cc = 0; cc < cg; ++cc) {
                            T s = T(0);
                            for (std::int64_t j = 0; j < hw; ++j) s += gr[cc * hw + j];
                            gb[g * cg + cc] += s;
                        }
                    }
                    if (xh_t.requires_grad()) {
                        double s1 = 0.0, s2 = 0.0;
                        for (std::int64_t cc = 0; cc < cg; ++cc) {
                            const double ga =
                                gh.defined() ? double(gh.data()[g * cg + cc]) : 1.0;
                            double a = 0, b = 0;
                            for (std::int64_t j = 0; j < hw; ++j) {
                                a += double(gr[cc * hw + j]);
                                b += double(gr[cc * hw + j]) * double(xhr[cc * hw + j]);
                            }
                            s1 += ga * a;
                            s2 += ga * b;
                        }
                        s1 /= double(gsz);
                        s2 /= double(gsz);
                        T* gx = xh_t.grad_data() + off;
                        const double is = (*inv_std)[i * groups + g];
                        for (std::int64_t cc = 0; cc < cg; ++cc) {
                            const T ga = gh.defined() ? gh.data()[g * cg + cc] : T(1);
                            const T s1t = T(s1), s2t = T(s2), ist = T(is);
                            for (std::int64_t j = 0; j < hw; ++j) {
                                const T dxh = gr[cc * hw + j] * ga;
                                gx[cc * hw + j] +=
                                    ist * (dxh - s1t - xhr[cc * hw + j] * s2t);
                            }
                        }
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> softmax_last(const Tensor<T>& x) {
    const std::int64_t d = x.dim(x.ndim() - 1);
    const std::int64_t rows = x.numel() / d;
    std::vector<T> out(x.numel());
    const T* xv = x.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* row = xv + r * d;
        T mx = row[0];
        for (std::int64_t i = 1; i < d; ++i) mx = std::max(mx, row[i]);
        double sum = 0.0;
        for (std::int64_t i = 0; i < d; ++i) {
            const T e = exp_t(row[i] - mx);
            out[r * d + i] = e;
            sum += double(e);
        }
        const T inv = T(1.0 / sum);
        for (std::int64_t i = 0; i < d; ++i) out[r * d + i] *= inv;
    }
    Tensor<T> xh = x;
    return make_op<T>(x.shape(), std::move(out), {x}, [xh, rows, d](TensorNode<T>& nd_) mutable {
        if (!xh.requires_grad()) return;
        const T* go = nd_.grad.data();
        const T* y = nd_.value.data();
        T* gx = xh.grad_data();
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* gr = go + r * d;
            const T* yr = y + r * d;
            double dot = 0.0;
            for (std::int64_t i = 0; i < d; ++i) dot += double(gr[i]) * double(yr[i]);
            for (std::int64_t i = 0; i < d; ++i)
                gx[r * d + i] += T((double(gr[i]) - dot) * double(yr[i]));
        }
    });
}

template <typename T>
Tensor<T> l2_normalize_last(const Tensor<T>& x) {
    const std::int64_t d = x.dim(x.ndim() - 1);
    const std::int64_t rows = x.numel() / d;
    std::vector<T> out(x.numel());
    auto inv_norm = std::make_shared<std::vector<double>>(rows);
    const T* xv = x.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::int64_t i = 0; i < d; ++i) s += double(xv[r * d + i]) * double(xv[r * d + i]);
        if (s == 0.0) throw NumericalError("l2_normalize_last: zero-norm row");
        const double inv = 1.0 / std::sqrt(s);
        (*inv_norm)[r] = inv;
        for (std::int64_t i = 0; i < d; ++i) out[r * d + i] = T(double(xv[r * d + i]) * inv);
    }
    Tensor<T> xh = x;
    return make_op<T>(x.shape(), std::move(out), {x},
                      [xh, inv_norm, rows, d](TensorNode<T>& nd_) mutable {
                          if (!xh.requires_grad()) return;
                          const T* go = nd_.grad.data();
                          const T* y = nd_.value.data();
                          T* gx = xh.grad_data();
                          for (std::int64_t r = 0; r < rows; ++r) {
                              const T* gr = go + r * d;
                              const T* yr = y + r * d;
                              double dot = 0.0;
                              for (std::int64_t i = 0; i < d; ++i)
                                  dot += double(gr[i]) * double(yr[i]);
                              const double inv = (*inv_norm)[r];
                              for (std::int64_t i = 0; i < d; ++i)
                                  gx[r * d + i] += T((double(gr[i]) - dot * double(yr[i])) * inv);
                          }
                      });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    double s = 0.0;
    const T* xv = x.data();
    for (std::int64_t i = 0; i < x.numel(); ++i) s += double(xv[i]);
    Tensor<T> xh = x;
    return make_op<T>({1}, {T(s)}, {x}, [xh](TensorNode<T>& nd_) mutable {
        if (!xh.requires_grad()) return;
        const T g = nd_.grad[0];
        T* gx = xh.grad_data();
        for (std::int64_t i = 0; i < xh.numel(); ++i) gx[i] += g;
    });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    return mul_scalar(sum_all(x), T(1.0 / double(x.numel())));
}

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, int axis, bool keepdim) {
    if (axis < 0) axis += x.ndim();
    if (axis < 0 || axis >= x.ndim()) throw std::invalid_argument("sum_axis: bad axis");
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    const std::int64_t nred = x.dim(axis);
    for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);

    Shape out_shape;
    for (int i = 0; i < x.ndim(); ++i) {
        if (i == axis) {
            if (keepdim) out_shape.push_back(1);
        } else {
            out_shape.push_back(x.dim(i));
        }
    }
    if (out_shape.empty()) out_shape.push_back(1);

    std::vector<T> out(outer * inner, T(0));
    const T* xv = x.data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t k = 0; k < nred; ++k) {
            const T* src = xv + (o * nred + k) * inner;
            T* dst = out.data() + o * inner;
            for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    Tensor<T> xh = x;
    return make_op<T>(std::move(out_shape), std::move(out), {x},
                      [xh, outer, nred, inner](TensorNode<T>& nd_) mutable {
                          if (!xh.requires_grad()) return;
                          const T* go = nd_.grad.data();
                          T* gx = xh.grad_data();
                          for (std::int64_t o = 0; o < outer; ++o)
                              for (std::int64_t k = 0; k < nred; ++k) {
                                  T* dst = gx + (o * nred + k) * inner;
                                  const T* src = go + o * inner;
                                  for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
                              }
                      });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw std::invalid_argument("reshape: numel mismatch " + shape_str(x.shape()) + " -> " +
                                    shape_str(shape));
    Tensor<T> xh = x;
    std::vector<T> out(x.data(), x.data() + x.numel());
    return make_op<T>(std::move(shape), std::move(out), {x}, [xh](TensorNode<T>& nd_) mutable {
        if (!xh.requires_grad()) return;
        const T* go = nd_.grad.data();
        T* gx = xh.grad_data();
        for (std::int64_t i = 0; i < xh.numel(); ++i) gx[i] += go[i];
    });
}

namespace {
std::vector<std::int64_t> row_major_strides(const Shape& s) {
    std::vector<std::int64_t> st(s.size());
    std::int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}
}  // namespace

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
    const int nd = x.ndim();
    if (static_cast<int>(perm.size()) != nd) throw std::invalid_argument("permute: rank mismatch");
    Shape out_shape(nd);
    for (int i = 0; i < nd; ++i) out_shape[i] = x.dim(perm[i]);
    const auto in_strides = row_major_strides(x.shape());
    // stride in the input for each output axis
    std::vector<std::int64_t> strides(nd);
    for (int i = 0; i < nd; ++i) strides[i] = in_strides[perm[i]];

    std::vector<T> out(x.numel());
    const T* xv = x.data();
    std::vector<std::int64_t> idx(nd, 0);
    std::int64_t src = 0;
    for (std::int64_t o = 0; o < x.numel(); ++o) {
        out[o] = xv[src];
        for (int d = nd - 1; d >= 0; --d) {
            ++idx[d];
            src += strides[d];
            if (idx[d] < out_shape[d]) break;
            src -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor<T> xh = x;
    return make_op<T>(std::move(out_shape), std::move(out), {x},
                      [xh, strides](TensorNode<T>& nd_) mutable {
                          if (!xh.requires_grad()) return;
                          const int nd = static_cast<int>(nd_.shape.size());
                          const T* go = nd_.grad.data();
                          T* gx = xh.grad_data();
                          std::vector<std::int64_t> idx(nd, 0);
                          std::int64_t src = 0;
                          for (std::int64_t o = 0; o < nd_.numel(); ++o) {
                              gx[src] += go[o];
                              for (int d = nd - 1; d >= 0; --d) {
                                  ++idx[d];
                                  src += strides[d];
                                  if (idx[d] < nd_.shape[d]) break;
                                  src -= strides[d] * nd_.shape[d];
                                  idx[d] = 0;
                              }
                          }
                      });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
    if (xs.empty()) throw std::invalid_argument("concat: empty input list");
    const int nd = xs[0].ndim();
    if (axis < 0) axis += nd;
    Shape out_shape = xs[0].shape();
    std::int64_t total = 0;
    for (const auto& x : xs) {
        if (x.ndim() != nd) throw std::invalid_argument("concat: rank mismatch");
        for (int i = 0; i < nd; ++i)
            if (i != axis && x.dim(i) != out_shape[i])
                throw std::invalid_argument("concat: shape mismatch");
        total += x.dim(axis);
    }
    out_shape[axis] = total;

    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= out_shape[i];
    for (int i = axis + 1; i < nd; ++i) inner *= out_shape[i];

    std::vector<T> out(shape_numel(out_shape));
    std::int64_t off = 0;
    for (const auto& x : xs) {
        const std::int64_t na = x.dim(axis);
        const T* xv = x.data();
        for (std::int64_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + (o * total + off) * inner, xv + o * na * inner,
                        sizeof(T) * na * inner);
        off += na;
    }
    std::vector<Tensor<T>> handles = xs;
    return make_op<T>(std::move(out_shape), std::move(out), xs,
                      [handles, outer, inner, total, axis](TensorNode<T>& nd_) mutable {
                          const T* go = nd_.grad.data();
                          std::int64_t off = 0;
                          for (auto& x : handles) {
                              const std::int64_t na = x.dim(axis);
                              if (x.requires_grad()) {
                                  T* gx = x.grad_data();
                                  for (std::int64_t o = 0; o < outer; ++o) {
                                      const T* src = go + (o * total + off) * inner;
                                      T* dst = gx + o * na * inner;
                                      for (std::int64_t i = 0; i < na * inner; ++i) dst[i] += src[i];
                                  }
                              }
                              off += na;
                          }
                      });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t len) {
    const int nd = x.ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd || start < 0 || start + len > x.dim(axis))
        throw std::invalid_argument("slice: out of range");
    Shape out_shape = x.shape();
    out_shape[axis] = len;
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < nd; ++i) inner *= x.dim(i);
    const std::int64_t na = x.dim(axis);

    std::vector<T> out(outer * len * inner);
    const T* xv = x.data();
    for (std::int64_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * len * inner, xv + (o * na + start) * inner,
                    sizeof(T) * len * inner);
    Tensor<T> xh = x;
    return make_op<T>(std::move(out_shape), std::move(out), {x},
                      [xh, outer, inner, na, start, len](TensorNode<T>& nd_) mutable {
                          if (!xh.requires_grad()) return;
                          const T* go = nd_.grad.data();
                          T* gx = xh.grad_data();
                          for (std::int64_t o = 0; o < outer; ++o) {
                              const T* src = go + o * len * inner;
                              T* dst = gx + (o * na + start) * inner;
                              for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                          }
                      });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<std::int64_t>& idx) {
    if (table.ndim() != 2) throw std::invalid_argument("gather_rows: table must be 2D");
    const std::int64_t d = table.dim(1);
    std::vector<T> out(idx.size() * d);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= table.dim(0))
            throw std::invalid_argument("gather_rows: index out of range");
        std::memcpy(out.data() + i * d, table.data() + idx[i] * d, sizeof(T) * d);
    }
    Tensor<T> th = table;
    auto indices = std::make_shared<std::vector<std::int64_t>>(idx);
    return make_op<T>({static_cast<std::int64_t>(idx.size()), d}, std::move(out), {table},
                      [th, indices, d](TensorNode<T>& nd_) mutable {
                          if (!th.requires_grad()) return;
                          const T* go = nd_.grad.data();
                          T* gt = th.grad_data();
                          for (std::size_t i = 0; i < indices->size(); ++i) {
                              T* dst = gt + (*indices)[i] * d;
                              const T* src = go + i * d;
                              for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
                          }
                      });
}

template <typename T>
Tensor<T> detach(const Tensor<T>& x) {
    return Tensor<T>::from_data(x.shape(), std::vector<T>(x.data(), x.data() + x.numel()), false);
}

// ---------------------------------------------------------------------------
// Patchify
// ---------------------------------------------------------------------------

namespace {
// out token (n*hp+r)*wp+cl, feature (c*p+a)*p+b <- x[n,c,r*p+a,cl*p+b]
template <typename T>
void patch_walk(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w, int p, const T* x,
                T* tok, bool to_tokens) {
    const std::int64_t hp = h / p, wp = w / p;
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t r = 0; r < hp; ++r)
                for (int a = 0; a < p; ++a)
                    for (std::int64_t cl = 0; cl < wp; ++cl)
                        for (int b = 0; b < p; ++b) {
                            const std::int64_t xi =
                                ((i * c + ch) * h + r * p + a) * w + cl * p + b;
                            const std::int64_t ti =
                                ((i * hp + r) * wp + cl) * (c * p * p) + (ch * p + a) * p + b;
                            if (to_tokens)
                                tok[ti] = x[xi];
                            else
                                tok[xi] += x[ti];  // accumulate for backward reuse
                        }
}
}  // namespace

template <typename T>
Tensor<T> patchify(const Tensor<T>& x, int p) {
    if (x.ndim() != 4) throw std::invalid_argument("patchify: x must be [N,C,H,W]");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % p != 0 || w % p != 0)
        throw std::invalid_argument("patchify: spatial extents not divisible by patch size");
    std::vector<T> out(x.numel());
    patch_walk(n, c, h, w, p, x.data(), out.data(), true);
    Tensor<T> xh = x;
    return make_op<T>({n * (h / p) * (w / p), c * p * p}, std::move(out), {x},
                      [xh, n, c, h, w, p](TensorNode<T>& nd_) mutable {
                          if (!xh.requires_grad()) return;
                          patch_walk(n, c, h, w, p, nd_.grad.data(), xh.grad_data(), false);
                      });
}

template <typename T>
Tensor<T> unpatchify(const Tensor<T>& tokens, int n, int c, int h, int w, int p) {
    if (tokens.ndim() != 2 || tokens.numel() != std::int64_t(n) * c * h * w)
        throw std::invalid_argument("unpatchify: token shape mismatch");
    std::vector<T> out(tokens.numel(), T(0));
    patch_walk<T>(n, c, h, w, p, tokens.data(), out.data(), false);
    Tensor<T> th = tokens;
    return make_op<T>({n, c, h, w}, std::move(out), {tokens},
                      [th, n, c, h, w, p](TensorNode<T>& nd_) mutable {
                          if (!th.requires_grad()) return;
                          std::vector<T> tmp(th.numel());
                          patch_walk<T>(n, c, h, w, p, nd_.grad.data(), tmp.data(), true);
                          T* gt = th.grad_data();
                          for (std::int64_t i = 0; i < th.numel(); ++i) gt[i] += tmp[i];
                      });
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor<double>()>& fn,
                           const std::vector<Tensor<double>>& inputs, double step,
                           double denom_floor) {
    GradCheckReport report;
    for (auto& in : inputs) const_cast<Tensor<double>&>(in).zero_grad();
    Tensor<double> out = fn();
    if (out.numel() != 1) throw std::invalid_argument("grad_check: function must be scalar-valued");
    if (!std::isfinite(out.item())) {
        report.finite = false;
        return report;
    }
    backward(out);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (auto& in : inputs) {
        auto& t = const_cast<Tensor<double>&>(in);
        t.grad_data();  // ensure allocated even if untouched
        analytic.push_back(t.grad());
    }

    NoGradGuard ng;
    for (std::size_t ii = 0; ii < inputs.size(); ++ii) {
        auto& t = const_cast<Tensor<double>&>(inputs[ii]);
        double* v = t.data();
        for (std::int64_t j = 0; j < t.numel(); ++j) {
            const double orig = v[j];
            v[j] = orig + step;
            const double fp = fn().item();
            v[j] = orig - step;
            const double fm = fn().item();
            v[j] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                report.finite = false;
                continue;
            }
            const double numeric = (fp - fm) / (2.0 * step);
            const double a = analytic[ii][j];
            const double rel =
                std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), denom_floor});
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_input = "input " + std::to_string(ii) + "[" + std::to_string(j) + "]";
            }
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Explicit instantiation
// ---------------------------------------------------------------------------

#define MVD_INSTANTIATE(T)                                                                        \
    template class Tensor<T>;                                                                     \
    template Tensor<T> make_op<T>(Shape, std::vector<T>, std::vector<Tensor<T>>,                  \
                                  std::function<void(TensorNode<T>&)>);                           \
    template void backward<T>(const Tensor<T>&);                                                  \
    template void check_finite<T>(const Tensor<T>&, const std::string&);                          \
    template Tensor<T> neg<T>(const Tensor<T>&);                                                  \
    template Tensor<T> exp_<T>(const Tensor<T>&);                                                 \
    template Tensor<T> log_<T>(const Tensor<T>&);                                                 \
    template Tensor<T> sqrt_<T>(const Tensor<T>&);                                                \
    template Tensor<T> tanh_<T>(const Tensor<T>&);                                                \
    template Tensor<T> sigmoid<T>(const Tensor<T>&);                                              \
    template Tensor<T> gelu<T>(const Tensor<T>&);                                                 \
    template Tensor<T> silu<T>(const Tensor<T>&);                                                 \
    template Tensor<T> square<T>(const Tensor<T>&);                                               \
    template Tensor<T> abs_<T>(const Tensor<T>&);                                                 \
    template Tensor<T> clamp<T>(const Tensor<T>&, T, T);                                          \
    template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                        \
    template Tensor<T> mul_scalar<T>(const Tensor<T>&, T);                                        \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                \
    template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                \
    template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                \
    template Tensor<T> div_<T>(const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&, bool, bool);                 \
    template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int,  \
                                 PadMode);                                                    \
    template Tensor<T> pad2d<T>(const Tensor<T>&, int, int, int, int, PadMode);                   \
    template Tensor<T> upsample_nearest2<T>(const Tensor<T>&);                                    \
    template Tensor<T> conv_transpose2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                           int);                                                  \
    template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                     double);                                                     \
    template Tensor<T> group_norm<T>(const Tensor<T>&, int, const Tensor<T>&, const Tensor<T>&,   \
                                     double);                                                     \
    template Tensor<T> softmax_last<T>(const Tensor<T>&);                                         \
    template Tensor<T> l2_normalize_last<T>(const Tensor<T>&);                                    \
    template Tensor<T> sum_all<T>(const Tensor<T>&);                                              \
    template Tensor<T> mean_all<T>(const Tensor<T>&);                                             \
    template Tensor<T> sum_axis<T>(const Tensor<T>&, int, bool);                                  \
    template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                       \
    template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<int>&);                     \
    template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, int);                             \
    template Tensor<T> slice<T>(const Tensor<T>&, int, std::int64_t, std::int64_t);               \
    template Tensor<T> gather_rows<T>(const Tensor<T>&, const std::vector<std::int64_t>&);        \
    template Tensor<T> detach<T>(const Tensor<T>&);                                               \
    template Tensor<T> patchify<T>(const Tensor<T>&, int);                                        \
    template Tensor<T> unpatchify<T>(const Tensor<T>&, int, int, int, int, int);

MVD_INSTANTIATE(float)
MVD_INSTANTIATE(double)

#undef MVD_INSTANTIATE

}  // namespace mvd
