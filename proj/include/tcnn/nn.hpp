#pragma once

// Convolution, batch normalization, padding, pooling, stochastic depth and
// the linear classifier head: the building blocks of the convolutional
// backbone that hosts the attention surgery.

#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include "tcnn/tensor.hpp"

namespace tcnn {

template <typename T>
struct ConvLayer {
    Tensor<T> filter;  // [Cout, Cin, k, k]
    Tensor<T> bias;    // [Cout], optional (undefined when absent)
    std::size_t stride = 1;
    std::size_t padding = 0;

    std::size_t out_channels() const { return filter.dim(0); }
    std::size_t in_channels() const { return filter.dim(1); }
    std::size_t kernel() const { return filter.dim(2); }

    static ConvLayer he_init(std::size_t c_out, std::size_t c_in,
                             std::size_t k, std::size_t stride,
                             std::size_t padding, std::mt19937_64& rng,
                             bool with_bias = false) {
        T fan_in = static_cast<T>(c_in * k * k);
        T std_dev = std::sqrt(T(2) / fan_in);
        ConvLayer layer;
        layer.filter =
            Tensor<T>::randn({c_out, c_in, k, k}, rng, std_dev, true);
        if (with_bias) layer.bias = Tensor<T>::zeros({c_out}, true);
        layer.stride = stride;
        layer.padding = padding;
        return layer;
    }
};

template <typename T>
Tensor<T> conv_forward(const ConvLayer<T>& layer, const Tensor<T>& x) {
    check(x.rank() == 4 && x.dim(1) == layer.in_channels(),
          "conv_forward: input " + shape_str(x.shape()) +
              " does not match filter " + shape_str(layer.filter.shape()));
    Tensor<T> y = conv2d(x, layer.filter, layer.stride, layer.padding);
    if (layer.bias.defined()) {
        // per-channel bias: broadcast [Cout] over [B,Cout,Ho,Wo] by
        // expanding it to a [Cout,Ho,Wo] suffix tensor
        std::size_t Ho = y.dim(2), Wo = y.dim(3);
        Tensor<T> ones = Tensor<T>::ones({1, Ho * Wo});
        Tensor<T> bm = matmul(reshape(layer.bias, {layer.out_channels(), 1}),
                              ones);
        y = add(y, reshape(bm, {layer.out_channels(), Ho, Wo}));
    }
    return y;
}

template <typename T>
struct BatchNorm {
    Tensor<T> gamma;  // [C]
    Tensor<T> beta;   // [C]
    std::vector<T> running_mean;
    std::vector<T> running_var;
    T momentum = T(0.1);
    T epsilon = T(1e-5);

    static BatchNorm make(std::size_t channels) {
        BatchNorm bn;
        bn.gamma = Tensor<T>::ones({channels}, true);
        bn.beta = Tensor<T>::zeros({channels}, true);
        bn.running_mean.assign(channels, T(0));
        bn.running_var.assign(channels, T(1));
        return bn;
    }
    std::size_t channels() const { return gamma.numel(); }
};

// Batch norm over [B,C,H,W]; per-channel statistics across B,H,W.
template <typename T>
Tensor<T> batchnorm_forward(BatchNorm<T>& bn, const Tensor<T>& x,
                            bool training) {
    check(x.rank() == 4 && x.dim(1) == bn.channels(),
          "batchnorm_forward: input " + shape_str(x.shape()) +
              " does not match " + std::to_string(bn.channels()) +
              " channels");
    std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    std::size_t plane = H * W;
    std::size_t n = B * plane;
    const T* p = x.data().data();

    std::vector<T> mean(C), var(C);
    if (training) {
        for (std::size_t c = 0; c < C; ++c) {
            T s = 0;
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t i = 0; i < plane; ++i)
                    s += p[(b * C + c) * plane + i];
            mean[c] = s / static_cast<T>(n);
            T v = 0;
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t i = 0; i < plane; ++i) {
                    T d = p[(b * C + c) * plane + i] - mean[c];
                    v += d * d;
                }
            var[c] = v / static_cast<T>(n);
            bn.running_mean[c] = (T(1) - bn.momentum) * bn.running_mean[c] +
                                 bn.momentum * mean[c];
            bn.running_var[c] =
                (T(1) - bn.momentum) * bn.running_var[c] + bn.momentum * var[c];
        }
    } else {
        mean = bn.running_mean;
        var = bn.running_var;
    }

    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    auto invstd = std::make_shared<std::vector<T>>(C);
    std::vector<T> out(x.numel());
    const T* g = bn.gamma.data().data();
    const T* be = bn.beta.data().data();
    for (std::size_t c = 0; c < C; ++c) {
        (*invstd)[c] = T(1) / std::sqrt(var[c] + bn.epsilon);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < plane; ++i) {
                std::size_t idx = (b * C + c) * plane + i;
                (*xhat)[idx] = (p[idx] - mean[c]) * (*invstd)[c];
                out[idx] = g[c] * (*xhat)[idx] + be[c];
            }
    }

    auto xn = x.node();
    auto gn = bn.gamma.node();
    auto bnn = bn.beta.node();
    return detail::make_result<T>(
        x.shape(), std::move(out), {xn, gn, bnn},
        [xn, gn, bnn, xhat, invstd, B, C, plane, n, training](Node<T>& nd) {
            std::size_t batch_plane = B * plane;
            for (std::size_t c = 0; c < C; ++c) {
                T dgamma = 0, dbeta = 0;
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t i = 0; i < plane; ++i) {
                        std::size_t idx = (b * C + c) * plane + i;
                        dgamma += nd.grad[idx] * (*xhat)[idx];
                        dbeta += nd.grad[idx];
                    }
                if (gn->requires_grad) {
                    gn->ensure_grad();
                    gn->grad[c] += dgamma;
                }
                if (bnn->requires_grad) {
                    bnn->ensure_grad();
                    bnn->grad[c] += dbeta;
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    T gc = gn->value[c] * (*invstd)[c];
                    if (training) {
                        T mean_dy = dbeta / static_cast<T>(batch_plane);
                        T mean_dyx = dgamma / static_cast<T>(batch_plane);
                        for (std::size_t b = 0; b < B; ++b)
                            for (std::size_t i = 0; i < plane; ++i) {
                                std::size_t idx = (b * C + c) * plane + i;
                                xn->grad[idx] +=
                                    gc * (nd.grad[idx] - mean_dy -
                                          (*xhat)[idx] * mean_dyx);
                            }
                    } else {
                        for (std::size_t b = 0; b < B; ++b)
                            for (std::size_t i = 0; i < plane; ++i) {
                                std::size_t idx = (b * C + c) * plane + i;
                                xn->grad[idx] += gc * nd.grad[idx];
                            }
                    }
                }
            }
            (void)n;
        });
}

// Explicit zero-padding layer.
template <typename T>
struct Pad2D {
    std::size_t amount = 0;
};

template <typename T>
Tensor<T> pad_forward(const Pad2D<T>& pad, const Tensor<T>& x) {
    return pad2d(x, pad.amount);
}

// Residual-branch dropping; identity in eval mode.
struct StochasticDepth {
    double drop_prob = 0.0;
};

template <typename T>
Tensor<T> stochastic_depth_apply(const StochasticDepth& sd,
                                 const Tensor<T>& branch, bool training,
                                 std::mt19937_64& rng) {
    if (sd.drop_prob < 0.0 || sd.drop_prob >= 1.0)
        throw std::invalid_argument("stochastic depth: d_r must be in [0,1)");
    if (!training || sd.drop_prob == 0.0) return branch;
    // Per-sample mask over the batch dimension, scaled to keep expectation.
    check(branch.rank() >= 1, "stochastic depth: need batched input");
    std::size_t B = branch.dim(0);
    std::size_t rest = branch.numel() / B;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    T keep_scale = static_cast<T>(1.0 / (1.0 - sd.drop_prob));
    std::vector<T> mask(branch.numel());
    for (std::size_t b = 0; b < B; ++b) {
        T m = u(rng) < sd.drop_prob ? T(0) : keep_scale;
        std::fill(mask.begin() + b * rest, mask.begin() + (b + 1) * rest, m);
    }
    return mul(branch, Tensor<T>(branch.shape(), std::move(mask)));
}

template <typename T>
struct Linear {
    Tensor<T> weight;  // [in, out]
    Tensor<T> bias;    // [out]

    static Linear he_init(std::size_t in, std::size_t out,
                          std::mt19937_64& rng) {
        Linear l;
        l.weight = Tensor<T>::randn({in, out}, rng,
                                    std::sqrt(T(2) / static_cast<T>(in)), true);
        l.bias = Tensor<T>::zeros({out}, true);
        return l;
    }
};

template <typename T>
Tensor<T> linear_forward(const Linear<T>& l, const Tensor<T>& x) {
    check(x.rank() == 2 && x.dim(1) == l.weight.dim(0),
          "linear_forward: input " + shape_str(x.shape()) +
              " does not match weight " + shape_str(l.weight.shape()));
    return add(matmul(x, l.weight), l.bias);
}

}  // namespace tcnn
