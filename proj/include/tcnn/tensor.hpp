#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
// Every differentiable primitive records a backprop closure on the result
// node; backward() topologically sorts the graph and replays it once.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tcnn/blas.hpp"

namespace tcnn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

struct DimError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

inline void check(bool ok, const std::string& msg) {
    if (!ok) throw DimError(msg);
}

// Fast float exp for softmax rows (Cephes-style polynomial, ~1 ulp worse than
// libm but vectorizable). Double path keeps std::exp for gradcheck accuracy.
inline float exp_fast(float x) {
    x = std::min(88.0f, std::max(-88.0f, x));
    float z = x * 1.44269504088896341f;
    float n = std::floor(z + 0.5f);
    float r = x - n * 0.693359375f;
    r -= n * -2.12194440e-4f;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    p = p * r * r + r + 1.0f;
    union {
        float f;
        std::int32_t i;
    } u;
    u.i = (static_cast<std::int32_t>(n) + 127) << 23;
    return p * u.f;
}
inline double exp_fast(double x) { return std::exp(x); }

// Grad-mode switch: inside a NoGradGuard no graph edges are recorded.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
};

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // sized lazily, only when requires_grad
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backprop;

    std::size_t numel() const { return value.size(); }

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
    void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <typename T>
class Tensor {
  public:
    using NodeT = Node<T>;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<NodeT> n) : node_(std::move(n)) {}

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
        check(shape_numel(shape) == data.size(),
              "tensor data length " + std::to_string(data.size()) +
                  " does not match shape " + shape_str(shape));
        node_ = std::make_shared<NodeT>();
        node_->shape = std::move(shape);
        node_->value = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape s, bool requires_grad = false) {
        return full(std::move(s), T(0), requires_grad);
    }
    static Tensor ones(Shape s, bool requires_grad = false) {
        return full(std::move(s), T(1), requires_grad);
    }
    static Tensor full(Shape s, T v, bool requires_grad = false) {
        std::size_t n = shape_numel(s);
        return Tensor(std::move(s), std::vector<T>(n, v), requires_grad);
    }
    static Tensor scalar(T v, bool requires_grad = false) {
        return Tensor(Shape{}, std::vector<T>{v}, requires_grad);
    }
    static Tensor randn(Shape s, std::mt19937_64& rng, T stddev = T(1),
                        bool requires_grad = false) {
        std::normal_distribution<double> d(0.0, 1.0);
        std::size_t n = shape_numel(s);
        std::vector<T> v(n);
        for (auto& x : v) x = static_cast<T>(d(rng)) * stddev;
        return Tensor(std::move(s), std::move(v), requires_grad);
    }
    static Tensor uniform(Shape s, std::mt19937_64& rng, T lo, T hi,
                          bool requires_grad = false) {
        std::uniform_real_distribution<double> d(lo, hi);
        std::size_t n = shape_numel(s);
        std::vector<T> v(n);
        for (auto& x : v) x = static_cast<T>(d(rng));
        return Tensor(std::move(s), std::move(v), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->numel(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }
    std::size_t rank() const { return node_->shape.size(); }
    std::vector<T>& data() { return node_->value; }
    const std::vector<T>& data() const { return node_->value; }
    std::vector<T>& grad() { return node_->grad; }
    const std::vector<T>& grad() const { return node_->grad; }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }
    void zero_grad() {
        node_->ensure_grad();
        node_->zero_grad();
    }
    T item() const {
        check(numel() == 1, "item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }
    std::shared_ptr<NodeT> node() const { return node_; }

    // Same values, no graph history.
    Tensor detach() const {
        return Tensor(node_->shape, node_->value, false);
    }

  private:
    std::shared_ptr<NodeT> node_;
};

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(Node<T>&)> backprop) {
    Tensor<T> out(std::move(shape), std::move(value));
    bool need = false;
    if (grad_mode()) {
        for (const auto& p : parents)
            if (p->requires_grad) need = true;
    }
    if (need) {
        out.node()->requires_grad = true;
        out.node()->parents = std::move(parents);
        out.node()->backprop = std::move(backprop);
    }
    return out;
}

inline std::size_t axis_index(int axis, std::size_t rank) {
    int a = axis < 0 ? axis + static_cast<int>(rank) : axis;
    check(a >= 0 && a < static_cast<int>(rank),
          "axis " + std::to_string(axis) + " invalid for rank " +
              std::to_string(rank));
    return static_cast<std::size_t>(a);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

// rhs may have a shape equal to a trailing suffix of lhs's shape; it is then
// broadcast over the leading dimensions (covers bias adds and per-head maps).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    check(sb.size() <= sa.size() &&
              std::equal(sb.begin(), sb.end(), sa.end() - sb.size()),
          "add: shape " + shape_str(sb) + " is not a suffix of " +
              shape_str(sa));
    std::size_t nb = b.numel();
    std::size_t reps = a.numel() / std::max<std::size_t>(nb, 1);
    std::vector<T> v(a.numel());
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t i = 0; i < nb; ++i) v[r * nb + i] = pa[r * nb + i] + pb[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result<T>(
        sa, std::move(v), {an, bn}, [an, bn, reps, nb](Node<T>& n) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < n.grad.size(); ++i)
                    an->grad[i] += n.grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t r = 0; r < reps; ++r)
                    for (std::size_t i = 0; i < nb; ++i)
                        bn->grad[i] += n.grad[r * nb + i];
            }
        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check(a.shape() == b.shape(), "mul: shapes differ " +
                                      shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
    std::vector<T> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result<T>(
        a.shape(), std::move(v), {an, bn}, [an, bn](Node<T>& n) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < n.grad.size(); ++i)
                    an->grad[i] += n.grad[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < n.grad.size(); ++i)
                    bn->grad[i] += n.grad[i] * an->value[i];
            }
        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    std::vector<T> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * c;
    auto an = a.node();
    return detail::make_result<T>(a.shape(), std::move(v), {an},
                                  [an, c](Node<T>& n) {
                                      if (!an->requires_grad) return;
                                      an->ensure_grad();
                                      for (std::size_t i = 0; i < n.grad.size(); ++i)
                                          an->grad[i] += n.grad[i] * c;
                                  });
}

template <typename T>
Tensor<T> add_const(const Tensor<T>& a, T c) {
    std::vector<T> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + c;
    auto an = a.node();
    return detail::make_result<T>(a.shape(), std::move(v), {an},
                                  [an](Node<T>& n) {
                                      if (!an->requires_grad) return;
                                      an->ensure_grad();
                                      for (std::size_t i = 0; i < n.grad.size(); ++i)
                                          an->grad[i] += n.grad[i];
                                  });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
    return scale(a, T(-1));
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return add(a, scale(b, T(-1)));
}

// a * s where s is a rank-0 tensor (both sides get gradients).
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, const Tensor<T>& s) {
    check(s.numel() == 1, "mul_scalar: scalar operand has shape " +
                              shape_str(s.shape()));
    T sv = s.data()[0];
    std::vector<T> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * sv;
    auto an = a.node();
    auto sn = s.node();
    return detail::make_result<T>(
        a.shape(), std::move(v), {an, sn}, [an, sn, sv](Node<T>& n) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < n.grad.size(); ++i)
                    an->grad[i] += n.grad[i] * sv;
            }
            if (sn->requires_grad) {
                sn->ensure_grad();
                T acc = 0;
                for (std::size_t i = 0; i < n.grad.size(); ++i)
                    acc += n.grad[i] * an->value[i];
                sn->grad[0] += acc;
            }
        });
}

// Scalar element of a tensor, as a rank-0 tensor with gradient routing.
template <typename T>
Tensor<T> pick(const Tensor<T>& a, std::size_t flat_index) {
    check(flat_index < a.numel(), "pick: index out of range");
    auto an = a.node();
    return detail::make_result<T>(
        Shape{}, std::vector<T>{a.data()[flat_index]}, {an},
        [an, flat_index](Node<T>& n) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            an->grad[flat_index] += n.grad[0];
        });
}

// ---------------------------------------------------------------------------
// Activations

enum class Activation { Sigmoid, SoftplusBeta, Relu };

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    std::vector<T> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) {
        T x = a.data()[i];
        v[i] = x >= 0 ? T(1) / (T(1) + std::exp(-x))
                      : std::exp(x) / (T(1) + std::exp(x));
    }
    auto an = a.node();
    auto vn = std::make_shared<std::vector<T>>(v);
    return detail::make_result<T>(a.shape(), std::move(v), {an},
                                  [an, vn](Node<T>& n) {
                                      if (!an->requires_grad) return;
                                      an->ensure_grad();
                                      for (std::size_t i = 0; i < n.grad.size(); ++i) {
                                          T y = (*vn)[i];
                                          an->grad[i] += n.grad[i] * y * (T(1) - y);
                                      }
                                  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i)
        v[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
    auto an = a.node();
    return detail::make_result<T>(a.shape(), std::move(v), {an},
                                  [an](Node<T>& n) {
                                      if (!an->requires_grad) return;
                                      an->ensure_grad();
                                      for (std::size_t i = 0; i < n.grad.size(); ++i)
                                          if (an->value[i] > T(0))
                                              an->grad[i] += n.grad[i];
                                  });
}

// softplus_beta(x) = (1/beta) * log(1 + exp(beta x)), computed stably.
template <typename T>
Tensor<T> softplus_beta(const Tensor<T>& a, T beta) {
    check(beta > T(0), "softplus_beta: beta must be positive");
    std::vector<T> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) {
        T z = beta * a.data()[i];
        v[i] = (z > T(30) ? z : std::log1p(std::exp(z))) / beta;
        if (z <= T(-30)) v[i] = std::exp(z) / beta;
    }
    auto an = a.node();
    return detail::make_result<T>(
        a.shape(), std::move(v), {an}, [an, beta](Node<T>& n) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                T z = beta * an->value[i];
                T s = z >= 0 ? T(1) / (T(1) + std::exp(-z))
                             : std::exp(z) / (T(1) + std::exp(z));
                an->grad[i] += n.grad[i] * s;
            }
        });
}

template <typename T>
Tensor<T> activation(const Tensor<T>& a, Activation kind, T beta = T(5)) {
    switch (kind) {
        case Activation::Sigmoid: return sigmoid(a);
        case Activation::SoftplusBeta: return softplus_beta(a, beta);
        case Activation::Relu: return relu(a);
    }
    throw std::logic_error("unknown activation");
}

// ---------------------------------------------------------------------------
// Matrix products

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                 bool trans_b = false) {
    check(a.rank() == 2 && b.rank() == 2,
          "matmul: expected rank-2 operands, got " + shape_str(a.shape()) +
              " and " + shape_str(b.shape()));
    std::size_t m = trans_a ? a.dim(1) : a.dim(0);
    std::size_t ka = trans_a ? a.dim(0) : a.dim(1);
    std::size_t kb = trans_b ? b.dim(1) : b.dim(0);
    std::size_t nn = trans_b ? b.dim(0) : b.dim(1);
    check(ka == kb, "matmul: inner extents disagree: " +
                        shape_str(a.shape()) + (trans_a ? "^T" : "") + " x " +
                        shape_str(b.shape()) + (trans_b ? "^T" : ""));
    std::vector<T> v(m * nn, T(0));
    gemm(trans_a, trans_b, m, nn, ka, T(1), a.data().data(), a.dim(1),
         b.data().data(), b.dim(1), T(0), v.data(), nn);
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result<T>(
        Shape{m, nn}, std::move(v), {an, bn},
        [an, bn, m, nn, ka, trans_a, trans_b](Node<T>& n) {
            const T* g = n.grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                // dA (or dA^T) from dC and B
                if (!trans_a)
                    gemm(false, !trans_b, m, ka, nn, T(1), g, nn,
                         bn->value.data(), bn->shape[1], T(1),
                         an->grad.data(), an->shape[1]);
                else
                    gemm(trans_b, true, ka, m, nn, T(1), bn->value.data(),
                         bn->shape[1], g, nn, T(1), an->grad.data(),
                         an->shape[1]);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                if (!trans_b)
                    gemm(!trans_a, false, ka, nn, m, T(1), an->value.data(),
                         an->shape[1], g, nn, T(1), bn->grad.data(),
                         bn->shape[1]);
                else
                    gemm(true, trans_a, nn, ka, m, T(1), g, nn,
                         an->value.data(), an->shape[1], T(1),
                         bn->grad.data(), bn->shape[1]);
            }
        });
}

// Batched matmul over matching leading dimension: [G,M,K] x [G,K,N].
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
              bool trans_b = false) {
    check(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0),
          "bmm: expected matching rank-3 operands, got " +
              shape_str(a.shape()) + " and " + shape_str(b.shape()));
    std::size_t g = a.dim(0);
    std::size_t m = trans_a ? a.dim(2) : a.dim(1);
    std::size_t ka = trans_a ? a.dim(1) : a.dim(2);
    std::size_t kb = trans_b ? b.dim(2) : b.dim(1);
    std::size_t nn = trans_b ? b.dim(1) : b.dim(2);
    check(ka == kb, "bmm: inner extents disagree: " + shape_str(a.shape()) +
                        " x " + shape_str(b.shape()));
    std::size_t sa = a.dim(1) * a.dim(2), sb = b.dim(1) * b.dim(2);
    std::vector<T> v(g * m * nn, T(0));
    for (std::size_t i = 0; i < g; ++i)
        gemm(trans_a, trans_b, m, nn, ka, T(1), a.data().data() + i * sa,
             a.dim(2), b.data().data() + i * sb, b.dim(2), T(0),
             v.data() + i * m * nn, nn);
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result<T>(
        Shape{g, m, nn}, std::move(v), {an, bn},
        [an, bn, g, m, nn, ka, sa, sb, trans_a, trans_b](Node<T>& n) {
            for (std::size_t i = 0; i < g; ++i) {
                const T* gi = n.grad.data() + i * m * nn;
                const T* ai = an->value.data() + i * sa;
                const T* bi = bn->value.data() + i * sb;
                if (an->requires_grad) {
                    an->ensure_grad();
                    if (!trans_a)
                        gemm(false, !trans_b, m, ka, nn, T(1), gi, nn, bi,
                             bn->shape[2], T(1), an->grad.data() + i * sa,
                             an->shape[2]);
                    else
                        gemm(trans_b, true, ka, m, nn, T(1), bi, bn->shape[2],
                             gi, nn, T(1), an->grad.data() + i * sa,
                             an->shape[2]);
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    if (!trans_b)
                        gemm(!trans_a, false, ka, nn, m, T(1), ai,
                             an->shape[2], gi, nn, T(1),
                             bn->grad.data() + i * sb, bn->shape[2]);
                    else
                        gemm(true, trans_a, nn, ka, m, T(1), gi, nn, ai,
                             an->shape[2], T(1), bn->grad.data() + i * sb,
                             bn->shape[2]);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape s) {
    check(shape_numel(s) == a.numel(), "reshape: " + shape_str(a.shape()) +
                                           " to " + shape_str(s) +
                                           " changes element count");
    auto an = a.node();
    return detail::make_result<T>(std::move(s), a.data(), {an},
                                  [an](Node<T>& n) {
                                      if (!an->requires_grad) return;
                                      an->ensure_grad();
                                      for (std::size_t i = 0; i < n.grad.size(); ++i)
                                          an->grad[i] += n.grad[i];
                                  });
}

// [B,C,H,W] -> [B, H*W, C] (image to pixel sequence).
template <typename T>
Tensor<T> im2seq(const Tensor<T>& a) {
    check(a.rank() == 4, "im2seq: expected rank-4, got " +
                             shape_str(a.shape()));
    std::size_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
    std::size_t L = H * W;
    std::vector<T> v(a.numel());
    const T* p = a.data().data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t l = 0; l < L; ++l)
                v[(b * L + l) * C + c] = p[(b * C + c) * L + l];
    auto an = a.node();
    return detail::make_result<T>(
        Shape{B, L, C}, std::move(v), {an}, [an, B, C, L](Node<T>& n) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t l = 0; l < L; ++l)
                        an->grad[(b * C + c) * L + l] +=
                            n.grad[(b * L + l) * C + c];
        });
}

// [B, H*W, C] -> [B,C,H,W].
template <typename T>
Tensor<T> seq2im(const Tensor<T>& a, std::size_t H, std::size_t W) {
    check(a.rank() == 3 && a.dim(1) == H * W,
          "seq2im: shape " + shape_str(a.shape()) + " does not match " +
              std::to_string(H) + "x" + std::to_string(W));
    std::size_t B = a.dim(0), C = a.dim(2), L = H * W;
    std::vector<T> v(a.numel());
    const T* p = a.data().data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t l = 0; l < L; ++l)
                v[(b * C + c) * L + l] = p[(b * L + l) * C + c];
    auto an = a.node();
    return detail::make_result<T>(
        Shape{B, C, H, W}, std::move(v), {an}, [an, B, C, L](Node<T>& n) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t l = 0; l < L; ++l)
                        an->grad[(b * L + l) * C + c] +=
                            n.grad[(b * C + c) * L + l];
        });
}

// Zero-pad the two trailing (spatial) dims of a [B,C,H,W] tensor.
template <typename T>
Tensor<T> pad2d(const Tensor<T>& a, std::size_t p) {
    check(a.rank() == 4, "pad2d: expected rank-4, got " +
                             shape_str(a.shape()));
    std::size_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
    std::size_t Hp = H + 2 * p, Wp = W + 2 * p;
    std::vector<T> v(B * C * Hp * Wp, T(0));
    const T* src = a.data().data();
    for (std::size_t bc = 0; bc < B * C; ++bc)
        for (std::size_t y = 0; y < H; ++y)
            std::memcpy(&v[(bc * Hp + y + p) * Wp + p], &src[(bc * H + y) * W],
                        W * sizeof(T));
    auto an = a.node();
    return detail::make_result<T>(
        Shape{B, C, Hp, Wp}, std::move(v), {an},
        [an, B, C, H, W, Hp, Wp, p](Node<T>& n) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t bc = 0; bc < B * C; ++bc)
                for (std::size_t y = 0; y < H; ++y)
                    for (std::size_t x = 0; x < W; ++x)
                        an->grad[(bc * H + y) * W + x] +=
                            n.grad[(bc * Hp + y + p) * Wp + x + p];
        });
}

// Remove a p-wide border from the two trailing dims (inverse of pad2d).
template <typename T>
Tensor<T> crop2d(const Tensor<T>& a, std::size_t p) {
    check(a.rank() == 4 && a.dim(2) > 2 * p && a.dim(3) > 2 * p,
          "crop2d: cannot crop " + std::to_string(p) + " from " +
              shape_str(a.shape()));
    std::size_t B = a.dim(0), C = a.dim(1), Hp = a.dim(2), Wp = a.dim(3);
    std::size_t H = Hp - 2 * p, W = Wp - 2 * p;
    std::vector<T> v(B * C * H * W);
    const T* src = a.data().data();
    for (std::size_t bc = 0; bc < B * C; ++bc)
        for (std::size_t y = 0; y < H; ++y)
            std::memcpy(&v[(bc * H + y) * W], &src[(bc * Hp + y + p) * Wp + p],
                        W * sizeof(T));
    auto an = a.node();
    return detail::make_result<T>(
        Shape{B, C, H, W}, std::move(v), {an},
        [an, B, C, H, W, Hp, Wp, p](Node<T>& n) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t bc = 0; bc < B * C; ++bc)
                for (std::size_t y = 0; y < H; ++y)
                    for (std::size_t x = 0; x < W; ++x)
                        an->grad[(bc * Hp + y + p) * Wp + x + p] +=
                            n.grad[(bc * H + y) * W + x];
        });
}

// ---------------------------------------------------------------------------
// Softmax

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis = -1) {
    std::size_t ax = detail::axis_index(axis, a.rank());
    std::size_t extent = a.dim(ax);
    std::size_t inner = 1, outer = 1;
    for (std::size_t i = ax + 1; i < a.rank(); ++i) inner *= a.dim(i);
    for (std::size_t i = 0; i < ax; ++i) outer *= a.dim(i);
    std::vector<T> v(a.numel());
    const T* p = a.data().data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            std::size_t base = o * extent * inner + in;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t e = 0; e < extent; ++e)
                mx = std::max(mx, p[base + e * inner]);
            check(std::isfinite(mx), "softmax: non-finite input");
            T sum = 0;
            for (std::size_t e = 0; e < extent; ++e) {
                T ev = exp_fast(p[base + e * inner] - mx);
                v[base + e * inner] = ev;
                sum += ev;
            }
            T inv = T(1) / sum;
            for (std::size_t e = 0; e < extent; ++e) v[base + e * inner] *= inv;
        }
    auto an = a.node();
    auto yn = std::make_shared<std::vector<T>>(v);
    return detail::make_result<T>(
        a.shape(), std::move(v), {an},
        [an, yn, outer, inner, extent](Node<T>& n) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            const std::vector<T>& y = *yn;
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    std::size_t base = o * extent * inner + in;
                    T dot = 0;
                    for (std::size_t e = 0; e < extent; ++e)
                        dot += n.grad[base + e * inner] * y[base + e * inner];
                    for (std::size_t e = 0; e < extent; ++e)
                        an->grad[base + e * inner] +=
                            y[base + e * inner] *
                            (n.grad[base + e * inner] - dot);
                }
        });
}

// ---------------------------------------------------------------------------
// Reductions

enum class Reduce { Sum, Mean, Max };

template <typename T>
Tensor<T> reduce_all(const Tensor<T>& a, Reduce kind) {
    T r;
    std::size_t arg = 0;
    if (kind == Reduce::Max) {
        r = a.data()[0];
        for (std::size_t i = 1; i < a.numel(); ++i)
            if (a.data()[i] > r) { r = a.data()[i]; arg = i; }
    } else {
        r = std::accumulate(a.data().begin(), a.data().end(), T(0));
        if (kind == Reduce::Mean) r /= static_cast<T>(a.numel());
    }
    auto an = a.node();
    std::size_t numel = a.numel();
    return detail::make_result<T>(
        Shape{}, std::vector<T>{r}, {an}, [an, kind, arg, numel](Node<T>& n) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            T g = n.grad[0];
            switch (kind) {
                case Reduce::Sum:
                    for (auto& x : an->grad) x += g;
                    break;
                case Reduce::Mean:
                    for (auto& x : an->grad) x += g / static_cast<T>(numel);
                    break;
                case Reduce::Max: an->grad[arg] += g; break;
            }
        });
}

template <typename T>
Tensor<T> reduce(const Tensor<T>& a, Reduce kind, std::optional<int> axis = {}) {
    if (!axis) return reduce_all(a, kind);
    std::size_t ax = detail::axis_index(*axis, a.rank());
    std::size_t extent = a.dim(ax);
    std::size_t inner = 1, outer = 1;
    for (std::size_t i = ax + 1; i < a.rank(); ++i) inner *= a.dim(i);
    for (std::size_t i = 0; i < ax; ++i) outer *= a.dim(i);
    Shape out_shape;
    for (std::size_t i = 0; i < a.rank(); ++i)
        if (i != ax) out_shape.push_back(a.dim(i));
    std::vector<T> v(outer * inner);
    std::vector<std::size_t> argmax(kind == Reduce::Max ? outer * inner : 0);
    const T* p = a.data().data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            std::size_t base = o * extent * inner + in;
            if (kind == Reduce::Max) {
                T mx = p[base];
                std::size_t am = 0;
                for (std::size_t e = 1; e < extent; ++e)
                    if (p[base + e * inner] > mx) { mx = p[base + e * inner]; am = e; }
                v[o * inner + in] = mx;
                argmax[o * inner + in] = am;
            } else {
                T s = 0;
                for (std::size_t e = 0; e < extent; ++e) s += p[base + e * inner];
                v[o * inner + in] = kind == Reduce::Mean
                                        ? s / static_cast<T>(extent)
                                        : s;
            }
        }
    auto an = a.node();
    auto am = std::make_shared<std::vector<std::size_t>>(std::move(argmax));
    return detail::make_result<T>(
        std::move(out_shape), std::move(v), {an},
        [an, am, kind, outer, inner, extent](Node<T>& n) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    std::size_t base = o * extent * inner + in;
                    T g = n.grad[o * inner + in];
                    switch (kind) {
                        case Reduce::Sum:
                            for (std::size_t e = 0; e < extent; ++e)
                                an->grad[base + e * inner] += g;
                            break;
                        case Reduce::Mean:
                            for (std::size_t e = 0; e < extent; ++e)
                                an->grad[base + e * inner] +=
                                    g / static_cast<T>(extent);
                            break;
                        case Reduce::Max:
                            an->grad[base + (*am)[o * inner + in] * inner] += g;
                            break;
                    }
                }
        });
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation, zero padding, via im2col + GEMM.

namespace detail {

// First output column whose input index ox*stride + off is >= 0.
inline std::size_t col_lo(std::ptrdiff_t off, std::size_t stride) {
    if (off >= 0) return 0;
    return static_cast<std::size_t>((-off + static_cast<std::ptrdiff_t>(stride) - 1) /
                                    static_cast<std::ptrdiff_t>(stride));
}

// One past the last output column whose input index stays < extent.
inline std::size_t col_hi(std::ptrdiff_t off, std::size_t stride,
                          std::size_t extent, std::size_t n) {
    std::ptrdiff_t last = static_cast<std::ptrdiff_t>(extent) - 1 - off;
    if (last < 0) return 0;
    return std::min(n, static_cast<std::size_t>(last) / stride + 1);
}

template <typename T>
void im2col(const T* img, std::size_t C, std::size_t H, std::size_t W,
            std::size_t k, std::size_t stride, std::size_t pad, std::size_t Ho,
            std::size_t Wo, T* col) {
    // col is [C*k*k, Ho*Wo]
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                T* row = col + ((c * k + ky) * k + kx) * Ho * Wo;
                std::ptrdiff_t offx = static_cast<std::ptrdiff_t>(kx) -
                                      static_cast<std::ptrdiff_t>(pad);
                std::size_t lo = col_lo(offx, stride);
                std::size_t hi = col_hi(offx, stride, W, Wo);
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                    std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                        static_cast<std::ptrdiff_t>(pad);
                    T* dst = row + oy * Wo;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H) ||
                        lo >= hi) {
                        std::fill(dst, dst + Wo, T(0));
                        continue;
                    }
                    const T* src =
                        img + (c * H + static_cast<std::size_t>(iy)) * W + offx;
                    std::fill(dst, dst + lo, T(0));
                    if (stride == 1)
                        std::copy(src + lo, src + hi, dst + lo);
                    else
                        for (std::size_t ox = lo; ox < hi; ++ox)
                            dst[ox] = src[ox * stride];
                    std::fill(dst + hi, dst + Wo, T(0));
                }
            }
}

template <typename T>
void col2im(const T* col, std::size_t C, std::size_t H, std::size_t W,
            std::size_t k, std::size_t stride, std::size_t pad, std::size_t Ho,
            std::size_t Wo, T* img) {
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                const T* row = col + ((c * k + ky) * k + kx) * Ho * Wo;
                std::ptrdiff_t offx = static_cast<std::ptrdiff_t>(kx) -
                                      static_cast<std::ptrdiff_t>(pad);
                std::size_t lo = col_lo(offx, stride);
                std::size_t hi = col_hi(offx, stride, W, Wo);
                if (lo >= hi) continue;
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                    std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                        static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                    const T* src = row + oy * Wo;
                    T* dst =
                        img + (c * H + static_cast<std::size_t>(iy)) * W + offx;
                    if (stride == 1)
                        for (std::size_t ox = lo; ox < hi; ++ox)
                            dst[ox] += src[ox];
                    else
                        for (std::size_t ox = lo; ox < hi; ++ox)
                            dst[ox * stride] += src[ox];
                }
            }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& filter,
                 std::size_t stride, std::size_t padding) {
    check(input.rank() == 4, "conv2d: input must be BxCxHxW, got " +
                                 shape_str(input.shape()));
    check(filter.rank() == 4 && filter.dim(2) == filter.dim(3),
          "conv2d: filter must be CoutxCinxkxk, got " +
              shape_str(filter.shape()));
    check(input.dim(1) == filter.dim(1),
          "conv2d: channel mismatch: input " + shape_str(input.shape()) +
              " vs filter " + shape_str(filter.shape()));
    check(stride >= 1, "conv2d: stride must be positive");
    std::size_t B = input.dim(0), C = input.dim(1), H = input.dim(2),
                W = input.dim(3);
    std::size_t Cout = filter.dim(0), k = filter.dim(2);
    check(k <= H + 2 * padding && k <= W + 2 * padding,
          "conv2d: kernel " + std::to_string(k) + " larger than padded input " +
              shape_str(input.shape()) + " (pad " + std::to_string(padding) +
              ")");
    std::size_t Ho = (H + 2 * padding - k) / stride + 1;
    std::size_t Wo = (W + 2 * padding - k) / stride + 1;
    std::size_t K = C * k * k;
    std::vector<T> v(B * Cout * Ho * Wo);
    std::vector<T> col(K * Ho * Wo);
    for (std::size_t b = 0; b < B; ++b) {
        detail::im2col(input.data().data() + b * C * H * W, C, H, W, k, stride,
                       padding, Ho, Wo, col.data());
        gemm(false, false, Cout, Ho * Wo, K, T(1), filter.data().data(), K,
             col.data(), Ho * Wo, T(0), v.data() + b * Cout * Ho * Wo, Ho * Wo);
    }
    auto in = input.node();
    auto fn = filter.node();
    return detail::make_result<T>(
        Shape{B, Cout, Ho, Wo}, std::move(v), {in, fn},
        [in, fn, B, C, H, W, Cout, k, K, Ho, Wo, stride,
         padding](Node<T>& n) {
            std::vector<T> col(K * Ho * Wo);
            std::vector<T> dcol;
            if (in->requires_grad) {
                in->ensure_grad();
                dcol.resize(K * Ho * Wo);
            }
            if (fn->requires_grad) fn->ensure_grad();
            for (std::size_t b = 0; b < B; ++b) {
                const T* g = n.grad.data() + b * Cout * Ho * Wo;
                if (fn->requires_grad) {
                    detail::im2col(in->value.data() + b * C * H * W, C, H, W,
                                   k, stride, padding, Ho, Wo, col.data());
                    gemm(false, true, Cout, K, Ho * Wo, T(1), g, Ho * Wo,
                         col.data(), Ho * Wo, T(1), fn->grad.data(), K);
                }
                if (in->requires_grad) {
                    gemm(true, false, K, Ho * Wo, Cout, T(1),
                         fn->value.data(), K, g, Ho * Wo, T(0), dcol.data(),
                         Ho * Wo);
                    detail::col2im(dcol.data(), C, H, W, k, stride, padding,
                                   Ho, Wo, in->grad.data() + b * C * H * W);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Average pooling

template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& a, std::size_t window,
                    std::size_t stride) {
    check(a.rank() == 4, "avgpool2d: expected rank-4, got " +
                             shape_str(a.shape()));
    std::size_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
    check(window >= 1 && window <= H && window <= W,
          "avgpool2d: window " + std::to_string(window) + " invalid for " +
              shape_str(a.shape()));
    std::size_t Ho = (H - window) / stride + 1;
    std::size_t Wo = (W - window) / stride + 1;
    std::vector<T> v(B * C * Ho * Wo, T(0));
    const T* p = a.data().data();
    T inv = T(1) / static_cast<T>(window * window);
    for (std::size_t bc = 0; bc < B * C; ++bc)
        for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                T s = 0;
                for (std::size_t wy = 0; wy < window; ++wy)
                    for (std::size_t wx = 0; wx < window; ++wx)
                        s += p[(bc * H + oy * stride + wy) * W + ox * stride + wx];
                v[(bc * Ho + oy) * Wo + ox] = s * inv;
            }
    auto an = a.node();
    return detail::make_result<T>(
        Shape{B, C, Ho, Wo}, std::move(v), {an},
        [an, B, C, H, W, Ho, Wo, window, stride, inv](Node<T>& n) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t bc = 0; bc < B * C; ++bc)
                for (std::size_t oy = 0; oy < Ho; ++oy)
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                        T g = n.grad[(bc * Ho + oy) * Wo + ox] * inv;
                        for (std::size_t wy = 0; wy < window; ++wy)
                            for (std::size_t wx = 0; wx < window; ++wx)
                                an->grad[(bc * H + oy * stride + wy) * W +
                                         ox * stride + wx] += g;
                    }
        });
}

// ---------------------------------------------------------------------------
// Cross-entropy (mean over batch of -log softmax at the label).

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits,
                        const std::vector<int>& labels) {
    check(logits.rank() == 2, "cross_entropy: logits must be BxC, got " +
                                  shape_str(logits.shape()));
    std::size_t B = logits.dim(0), C = logits.dim(1);
    check(labels.size() == B, "cross_entropy: batch size mismatch");
    for (int y : labels)
        if (y < 0 || y >= static_cast<int>(C))
            throw std::out_of_range("cross_entropy: label " +
                                    std::to_string(y) + " outside [0," +
                                    std::to_string(C) + ")");
    const T* p = logits.data().data();
    auto probs = std::make_shared<std::vector<T>>(B * C);
    T loss = 0;
    for (std::size_t b = 0; b < B; ++b) {
        T mx = *std::max_element(p + b * C, p + (b + 1) * C);
        T sum = 0;
        for (std::size_t c = 0; c < C; ++c) {
            T ev = std::exp(p[b * C + c] - mx);
            (*probs)[b * C + c] = ev;
            sum += ev;
        }
        for (std::size_t c = 0; c < C; ++c) (*probs)[b * C + c] /= sum;
        loss += std::log(sum) + mx - p[b * C + labels[b]];
    }
    loss /= static_cast<T>(B);
    auto ln = logits.node();
    auto lab = std::make_shared<std::vector<int>>(labels);
    return detail::make_result<T>(
        Shape{}, std::vector<T>{loss}, {ln}, [ln, probs, lab, B, C](Node<T>& n) {
            if (!ln->requires_grad) return;
            ln->ensure_grad();
            T g = n.grad[0] / static_cast<T>(B);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t c = 0; c < C; ++c)
                    ln->grad[b * C + c] +=
                        g * ((*probs)[b * C + c] -
                             (static_cast<int>(c) == (*lab)[b] ? T(1) : T(0)));
        });
}

// ---------------------------------------------------------------------------
// Backward pass

// Topologically ordered list of nodes reachable from a root; every node
// appears after all producers of its inputs when traversed front-to-back,
// so backward replay walks it back-to-front and visits each node once.
template <typename T>
struct GradTape {
    std::vector<std::shared_ptr<Node<T>>> order;
};

template <typename T>
GradTape<T> build_tape(const Tensor<T>& root) {
    GradTape<T> tape;
    std::unordered_set<Node<T>*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<std::shared_ptr<Node<T>>, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx == 0 && seen.count(node.get())) {
            stack.pop_back();
            continue;
        }
        if (idx < node->parents.size()) {
            auto child = node->parents[idx++];
            if (!seen.count(child.get())) stack.emplace_back(child, 0);
        } else {
            if (!seen.count(node.get())) {
                seen.insert(node.get());
                tape.order.push_back(node);
            }
            stack.pop_back();
        }
    }
    return tape;
}

template <typename T>
void backward(const Tensor<T>& loss) {
    check(loss.numel() == 1,
          "backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;
    GradTape<T> tape = build_tape(loss);
    // Interior grads are fresh per call; leaf grads accumulate across calls.
    for (auto& n : tape.order)
        if (n->backprop) {
            n->ensure_grad();
            n->zero_grad();
        }
    loss.node()->ensure_grad();
    loss.node()->grad[0] = T(1);
    for (auto it = tape.order.rbegin(); it != tape.order.rend(); ++it)
        if ((*it)->backprop) (*it)->backprop(**it);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

struct GradcheckReport {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    bool pass = false;
};

// f must rebuild its graph from the given leaves on every call and return a
// scalar. Central differences on every element of every leaf.
template <typename T>
GradcheckReport gradcheck(
    const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& f,
    std::vector<Tensor<T>> leaves, T eps, double tol) {
    for (auto& l : leaves) {
        l.set_requires_grad(true);
        l.zero_grad();
    }
    Tensor<T> loss = f(leaves);
    check(loss.numel() == 1, "gradcheck: f must be scalar-valued");
    backward(loss);
    GradcheckReport rep;
    for (auto& l : leaves) {
        for (std::size_t i = 0; i < l.numel(); ++i) {
            T orig = l.data()[i];
            l.data()[i] = orig + eps;
            double fp;
            {
                NoGradGuard ng;
                fp = static_cast<double>(f(leaves).item());
            }
            l.data()[i] = orig - eps;
            double fm;
            {
                NoGradGuard ng;
                fm = static_cast<double>(f(leaves).item());
            }
            l.data()[i] = orig;
            double fd = (fp - fm) / (2.0 * static_cast<double>(eps));
            double an = static_cast<double>(l.grad()[i]);
            double abs_err = std::abs(fd - an);
            double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
            rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
            rep.max_rel_err = std::max(rep.max_rel_err, abs_err / denom);
        }
    }
    rep.pass = rep.max_rel_err <= tol;
    return rep;
}

}  // namespace tcnn
