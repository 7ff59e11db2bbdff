#pragma once

// Layer building blocks on top of the tensor engine: named parameter
// registry (the checkpoint unit), linear/conv layers, Adam.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mvd/tensor.hpp"

namespace mvd {

template <typename T>
class ParamStore {
  public:
    Tensor<T> add(const std::string& name, Tensor<T> t) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
        index_[name] = params_.size();
        params_.emplace_back(name, t);
        return t;
    }

    const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return params_; }

    Tensor<T> find(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::invalid_argument("unknown parameter: " + name);
        return params_[it->second].second;
    }

    std::vector<Tensor<T>> tensors() const {
        std::vector<Tensor<T>> out;
        out.reserve(params_.size());
        for (auto& [n, t] : params_) out.push_back(t);
        return out;
    }

    std::int64_t parameter_count() const {
        std::int64_t n = 0;
        for (auto& [name, t] : params_) n += t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [n, t] : params_) t.zero_grad();
    }

    void set_requires_grad(bool on) {
        for (auto& [n, t] : params_) t.node()->requires_grad = on;
    }

  private:
    std::vector<std::pair<std::string, Tensor<T>>> params_;
    std::map<std::string, std::size_t> index_;
};

template <typename T>
Tensor<T> kaiming_uniform(Shape shape, std::int64_t fan_in, Rng& rng) {
    const T bound = T(std::sqrt(1.0 / double(fan_in)));
    auto t = Tensor<T>::rand_uniform(std::move(shape), rng, -bound, bound);
    t.node()->requires_grad = true;
    return t;
}

template <typename T>
class Linear {
  public:
    Linear() = default;
    Linear(ParamStore<T>& ps, const std::string& name, std::int64_t in, std::int64_t out, Rng& rng,
           bool zero_init = false) {
        if (zero_init) {
            w = Tensor<T>::leaf({out, in}, true);
            b = Tensor<T>::leaf({out}, true);
        } else {
            w = kaiming_uniform<T>({out, in}, in, rng);
            b = kaiming_uniform<T>({out}, in, rng);
        }
        ps.add(name + ".w", w);
        ps.add(name + ".b", b);
    }

    // x [..., in] -> [..., out]
    Tensor<T> forward(const Tensor<T>& x) const {
        Shape out_shape = x.shape();
        const std::int64_t in = out_shape.back();
        out_shape.back() = w.dim(0);
        auto x2 = reshape(x, {x.numel() / in, in});
        auto y = add(matmul(x2, w, false, true), b);
        return reshape(y, std::move(out_shape));
    }

    Tensor<T> w, b;
};

template <typename T>
class Conv2dLayer {
  public:
    Conv2dLayer() = default;
    Conv2dLayer(ParamStore<T>& ps, const std::string& name, std::int64_t in, std::int64_t out,
                int kernel, int stride_, PadMode mode_, Rng& rng)
        : stride(stride_), k(kernel), mode(mode_) {
        const std::int64_t fan_in = in * kernel * kernel;
        w = kaiming_uniform<T>({out, in, kernel, kernel}, fan_in, rng);
        b = kaiming_uniform<T>({out}, fan_in, rng);
        ps.add(name + ".w", w);
        ps.add(name + ".b", b);
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        return conv2d(x, w, b, stride, (k - 1) / 2, mode);
    }

    Tensor<T> w, b;
    int stride = 1;
    int k = 3;
    PadMode mode = PadMode::Zero;
};

// Affine parameters for a normalization layer over `dim` features.
template <typename T>
struct NormAffine {
    NormAffine() = default;
    NormAffine(ParamStore<T>& ps, const std::string& name, std::int64_t dim) {
        gamma = Tensor<T>::full({dim}, T(1));
        gamma.node()->requires_grad = true;
        beta = Tensor<T>::leaf({dim}, true);
        ps.add(name + ".gamma", gamma);
        ps.add(name + ".beta", beta);
    }
    Tensor<T> gamma, beta;
};

template <typename T>
class Adam {
  public:
    Adam() = default;
    Adam(std::vector<Tensor<T>> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
        for (auto& p : params_) {
            m_.emplace_back(p.numel(), T(0));
            v_.emplace_back(p.numel(), T(0));
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    double grad_norm() const {
        double s = 0;
        for (auto& p : params_) {
            if (!p.has_grad()) continue;
            for (auto g : p.grad()) s += double(g) * double(g);
        }
        return std::sqrt(s);
    }

    // Returns the pre-clip global norm.
    double clip_grad_norm(double max_norm) {
        const double n = grad_norm();
        if (n > max_norm && n > 0) {
            const T scale = T(max_norm / n);
            for (auto& p : params_) {
                if (!p.has_grad()) continue;
                T* g = p.grad_data();
                for (std::int64_t i = 0; i < p.numel(); ++i) g[i] *= scale;
            }
        }
        return n;
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, double(t_));
        const double bc2 = 1.0 - std::pow(b2_, double(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            if (!p.has_grad()) continue;
            const T* g = p.grad().data();
            T* m = m_[i].data();
            T* v = v_[i].data();
            T* w = p.data();
            for (std::int64_t j = 0; j < p.numel(); ++j) {
                m[j] = T(b1_) * m[j] + T(1.0 - b1_) * g[j];
                v[j] = T(b2_) * v[j] + T(1.0 - b2_) * g[j] * g[j];
                const double mh = double(m[j]) / bc1;
                const double vh = double(v[j]) / bc2;
                w[j] -= T(lr_ * mh / (std::sqrt(vh) + eps_));
            }
        }
    }

    std::int64_t step_count() const { return t_; }
    void set_step_count(std::int64_t t) { t_ = t; }
    std::vector<std::vector<T>>& moment1() { return m_; }
    std::vector<std::vector<T>>& moment2() { return v_; }
    void set_lr(double lr) { lr_ = lr; }

  private:
    std::vector<Tensor<T>> params_;
    double lr_ = 1e-4, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
    std::int64_t t_ = 0;
    std::vector<std::vector<T>> m_, v_;
};

// Sinusoidal features of a scalar position: [sin(p*w_0), cos(p*w_0), ...],
// geometric frequencies between 1 and 1/max_period.
template <typename T>
std::vector<T> sincos_features(double pos, int dim, double max_period = 10000.0);

extern template std::vector<float> sincos_features<float>(double, int, double);
extern template std::vector<double> sincos_features<double>(double, int, double);

}  // namespace mvd
