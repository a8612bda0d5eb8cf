#pragma once

// Conv -> GPSA reparametrization and last-stage surgery. A k x k convolution
// (k odd) maps to a GPSA layer with k^2 heads: head h gets its center of
// attention at the offset of filter pixel h, W_val is the identity, W_out^h
// is the filter slice at pixel h, and W_qry = W_key = 0. Strict init
// saturates alpha and lambda so the layer reproduces the convolution; paper
// init (alpha = 1, lambda = 1) sits on the verge of locality.

#include <array>
#include <cmath>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tcnn/model.hpp"

namespace tcnn {

struct InitMode {
    enum class Kind { Paper, Strict };
    Kind kind = Kind::Paper;
    double alpha_init = 1.0;
    double lambda_init = 1.0;

    static InitMode paper() { return InitMode{Kind::Paper, 1.0, 1.0}; }
    // alpha = lambda = 30: off-center softmax mass and content leakage are
    // both ~1e-13, keeping whole-model deviation below 1e-9 in f64.
    static InitMode strict(double alpha = 30.0, double lambda = 30.0) {
        return InitMode{Kind::Strict, alpha, lambda};
    }
};

// The k^2 integer offsets of a k x k kernel, row-major over (row, col), so
// head h corresponds to filter pixel h.
template <typename T = double>
std::vector<std::array<T, 2>> head_centers(std::size_t k) {
    if (k % 2 == 0)
        throw std::invalid_argument(
            "head_centers: even kernel size " + std::to_string(k) +
            " is unsupported (centers must form a symmetric grid)");
    std::ptrdiff_t r = static_cast<std::ptrdiff_t>(k - 1) / 2;
    std::vector<std::array<T, 2>> centers;
    centers.reserve(k * k);
    for (std::ptrdiff_t dy = -r; dy <= r; ++dy)
        for (std::ptrdiff_t dx = -r; dx <= r; ++dx)
            centers.push_back({static_cast<T>(dy), static_cast<T>(dx)});
    return centers;
}

template <typename T>
GpsaLayer<T> conv_to_gpsa(const ConvLayer<T>& conv, const InitMode& mode) {
    std::size_t k = conv.kernel();
    if (k % 2 == 0)
        throw std::invalid_argument("conv_to_gpsa: even kernel " +
                                    std::to_string(k) + " is unsupported");
    std::size_t d_in = conv.in_channels();
    std::size_t d_out = conv.out_channels();
    if (d_out < d_in)
        std::cerr << "conv_to_gpsa: warning: D_out " << d_out << " < D_in "
                  << d_in << "; W^h rank is bottlenecked by D_v\n";
    GpsaLayer<T> g;
    g.n_heads = k * k;
    g.d_in = d_in;
    g.d_out = d_out;
    g.d_head = head_dims(d_in, g.n_heads);
    auto centers = head_centers<T>(k);
    T alpha_raw = alpha_raw_for(static_cast<T>(mode.alpha_init), g.beta);
    const auto& f = conv.filter.data();  // [d_out, d_in, k, k]
    for (std::size_t h = 0; h < g.n_heads; ++h) {
        g.w_qry.push_back(Tensor<T>::zeros({d_in, g.d_head[h]}, true));
        g.w_key.push_back(Tensor<T>::zeros({d_in, g.d_head[h]}, true));
        std::vector<T> wo(d_in * d_out);
        std::size_t ky = h / k, kx = h % k;
        for (std::size_t i = 0; i < d_in; ++i)
            for (std::size_t o = 0; o < d_out; ++o)
                wo[i * d_out + o] = f[((o * d_in + i) * k + ky) * k + kx];
        g.w_out.emplace_back(Shape{d_in, d_out}, std::move(wo));
        g.w_out.back().set_requires_grad(true);
        g.alpha_raw.push_back(Tensor<T>::scalar(alpha_raw, true));
        g.center.push_back(Tensor<T>(
            {2}, {centers[h][0], centers[h][1]}, true));
        g.gate.push_back(
            Tensor<T>::scalar(static_cast<T>(mode.lambda_init), true));
    }
    std::vector<T> id(d_in * d_in, T(0));
    for (std::size_t i = 0; i < d_in; ++i) id[i * d_in + i] = T(1);
    g.w_val = Tensor<T>(Shape{d_in, d_in}, std::move(id), true);
    if (conv.bias.defined()) {
        g.bias = clone_tensor(conv.bias);
        g.bias.set_requires_grad(true);
    }
    return g;
}

struct SurgeryReport {
    std::vector<std::string> layers_replaced;
    std::size_t params_before = 0;
    std::size_t params_after = 0;
    std::size_t n_probes = 0;
    double max_abs_deviation = 0.0;
    double max_rel_deviation = 0.0;
    double tolerance = 0.0;
    bool pass = false;

    std::size_t params_added() const { return params_after - params_before; }

    std::string text() const {
        std::ostringstream os;
        os << "surgery report\n";
        os << "  layers replaced: " << layers_replaced.size() << "\n";
        for (const auto& l : layers_replaced) os << "    " << l << "\n";
        os << "  params before: " << params_before << "\n";
        os << "  params after:  " << params_after << " (+" << params_added()
           << ", "
           << (params_before
                   ? 100.0 * static_cast<double>(params_added()) /
                         static_cast<double>(params_before)
                   : 0.0)
           << "%)\n";
        os << "  probes: " << n_probes << "\n";
        os << "  max abs deviation: " << max_abs_deviation << "\n";
        os << "  max rel deviation: " << max_rel_deviation << "\n";
        if (tolerance > 0)
            os << "  tolerance " << tolerance << ": "
               << (pass ? "PASS" : "FAIL") << "\n";
        return os.str();
    }

    void write_kv(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw std::runtime_error("cannot open " + path);
        f << "layers_replaced=" << layers_replaced.size() << "\n";
        for (std::size_t i = 0; i < layers_replaced.size(); ++i)
            f << "layer_" << i << "=" << layers_replaced[i] << "\n";
        f << "params_before=" << params_before << "\n";
        f << "params_after=" << params_after << "\n";
        f << "params_added=" << params_added() << "\n";
        f << "n_probes=" << n_probes << "\n";
        f << "max_abs_deviation=" << max_abs_deviation << "\n";
        f << "max_rel_deviation=" << max_rel_deviation << "\n";
        f << "tolerance=" << tolerance << "\n";
        f << "pass=" << (pass ? 1 : 0) << "\n";
    }
};

// Runs seeded random probes through both models in eval mode and records the
// worst output deviation.
template <typename T>
SurgeryReport verify_equivalence(Model<T>& a, Model<T>& b,
                                 std::size_t n_probes, double tol,
                                 std::size_t resolution = 0,
                                 std::uint64_t seed = 1234) {
    check(a.config.input_channels == b.config.input_channels &&
              a.config.n_classes == b.config.n_classes,
          "verify_equivalence: model signatures differ");
    if (resolution == 0) resolution = a.config.input_resolution;
    bool train_a = a.training, train_b = b.training;
    a.training = b.training = false;
    std::mt19937_64 rng(seed);
    SurgeryReport rep;
    rep.n_probes = n_probes;
    rep.tolerance = tol;
    NoGradGuard ng;
    for (std::size_t p = 0; p < n_probes; ++p) {
        Tensor<T> x = Tensor<T>::randn(
            {1, a.config.input_channels, resolution, resolution}, rng);
        Tensor<T> ya = forward_classify(a, x);
        Tensor<T> yb = forward_classify(b, x);
        for (std::size_t i = 0; i < ya.numel(); ++i) {
            double da = static_cast<double>(ya.data()[i]);
            double db = static_cast<double>(yb.data()[i]);
            double abs_err = std::abs(da - db);
            rep.max_abs_deviation = std::max(rep.max_abs_deviation, abs_err);
            rep.max_rel_deviation = std::max(
                rep.max_rel_deviation,
                abs_err / std::max(1e-12, std::max(std::abs(da), std::abs(db))));
        }
    }
    rep.pass = rep.max_abs_deviation <= tol;
    a.training = train_a;
    b.training = train_b;
    return rep;
}

namespace detail {

template <typename T>
bool is_3x3_conv(const ConvOrGpsa<T>& slot) {
    const auto* c = std::get_if<ConvLayer<T>>(&slot);
    return c && c->kernel() == 3;
}

template <typename T>
void transform_slot(ConvOrGpsa<T>& slot, const InitMode& mode,
                    const std::string& name, SurgeryReport& rep) {
    const ConvLayer<T>& conv = std::get<ConvLayer<T>>(slot);
    check(conv.padding == (conv.kernel() - 1) / 2,
          "transform: conv " + name + " must use same-padding");
    GpsaBlock<T> g;
    g.layer = conv_to_gpsa(conv, mode);
    g.pad = conv.padding;
    slot = std::move(g);
    rep.layers_replaced.push_back(name);
}

}  // namespace detail

// Replaces every 3x3 convolution in the final stage with a pad -> GPSA ->
// crop block. Downsampling blocks already keep their 3x3 at stride 1
// followed by a 2x2/2 average pool, so the pool (and the shortcut) are
// untouched and every downstream shape is preserved.
template <typename T>
std::pair<Model<T>, SurgeryReport> transform_last_stage(
    const Model<T>& model, const InitMode& mode, std::size_t probe_count = 8,
    double probe_tol = 0.0) {
    check(!model.config.transformed,
          "transform_last_stage: model is already transformed");
    Model<T> out = clone_model(model);
    SurgeryReport rep;
    rep.params_before = count_params(model);
    Stage<T>& last = out.stages.back();
    std::size_t s = out.stages.size() - 1;
    for (std::size_t i = 0; i < last.blocks.size(); ++i) {
        Block<T>& b = last.blocks[i];
        std::string bn =
            "stage" + std::to_string(s) + ".block" + std::to_string(i);
        if (detail::is_3x3_conv(b.conv1))
            detail::transform_slot(b.conv1, mode, bn + ".conv1", rep);
        if (detail::is_3x3_conv(b.conv2))
            detail::transform_slot(b.conv2, mode, bn + ".conv2", rep);
    }
    out.config.transformed = !rep.layers_replaced.empty();
    rep.params_after = count_params(out);
    rep.pass = true;  // until a probe says otherwise
    if (probe_count > 0) {
        Model<T>& original = const_cast<Model<T>&>(model);
        SurgeryReport probe = verify_equivalence(original, out, probe_count,
                                                 probe_tol > 0 ? probe_tol : 1e-3);
        rep.n_probes = probe.n_probes;
        rep.max_abs_deviation = probe.max_abs_deviation;
        rep.max_rel_deviation = probe.max_rel_deviation;
        rep.tolerance = probe_tol;
        rep.pass = probe_tol > 0 ? rep.max_abs_deviation <= probe_tol : true;
    }
    return {std::move(out), std::move(rep)};
}

}  // namespace tcnn
