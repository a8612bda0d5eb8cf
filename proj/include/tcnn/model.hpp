#pragma once

// Configurable mini-ResNet: stem -> stages of residual blocks -> global
// average pool -> linear classifier. Every 3x3 slot can hold either a
// convolution or a pad->GPSA->crop block, which is what the last-stage
// surgery swaps in.
//
// Downsampling blocks keep the 3x3 convolution at stride 1 and follow it
// with a 2x2/2 average pool (the shortcut pools before its 1x1 projection),
// so the downsampling path is identical before and after surgery and strict
// initialization reproduces the CNN exactly.

#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "tcnn/gpsa.hpp"
#include "tcnn/nn.hpp"
#include "tcnn/tensor.hpp"

namespace tcnn {

enum class BlockKind { Basic, Bottleneck };

struct StageSpec {
    std::size_t blocks = 2;
    std::size_t channels = 16;
    std::size_t stride = 1;  // of the first block; 2 means pooled downsampling
    BlockKind kind = BlockKind::Basic;
};

struct ModelConfig {
    std::vector<StageSpec> stages;
    std::size_t input_channels = 3;
    std::size_t n_classes = 10;
    std::size_t stem_channels = 16;
    std::size_t stem_stride = 2;
    std::size_t stem_pool = 2;  // avgpool window/stride after stem; 1 = none
    std::size_t input_resolution = 32;
    std::uint64_t seed = 0;
    bool transformed = false;
    double gpsa_beta = 5.0;
    bool gpsa_content_scale = true;
};

// Desk-scale reference configs.
inline ModelConfig tiny_config(std::uint64_t seed = 0) {
    ModelConfig c;
    c.stages = {StageSpec{2, 16, 1, BlockKind::Basic},
                StageSpec{2, 32, 2, BlockKind::Basic}};
    c.stem_channels = 16;
    c.stem_stride = 2;
    c.stem_pool = 2;
    c.seed = seed;
    return c;
}

// Budget config for timing studies: the stem downsamples straight to a 4x4
// grid so every attention layer after surgery runs on a padded 6x6 grid.
inline ModelConfig desk_config(std::uint64_t seed = 0) {
    ModelConfig c;
    c.stages = {StageSpec{1, 16, 1, BlockKind::Basic},
                StageSpec{1, 32, 1, BlockKind::Basic}};
    c.stem_channels = 16;
    c.stem_stride = 2;
    c.stem_pool = 4;
    c.seed = seed;
    return c;
}

inline ModelConfig small_config(std::uint64_t seed = 0) {
    ModelConfig c;
    c.stages = {StageSpec{2, 16, 1, BlockKind::Basic},
                StageSpec{2, 32, 2, BlockKind::Basic},
                StageSpec{2, 64, 2, BlockKind::Basic}};
    c.stem_channels = 16;
    c.stem_stride = 2;
    c.stem_pool = 2;
    c.seed = seed;
    return c;
}

// pad(p) -> GPSA on the padded grid -> crop(p): realizes the "explicit
// padding layers" of the surgery while keeping the positional softmax free of
// border renormalization at the pixels that survive the crop.
template <typename T>
struct GpsaBlock {
    GpsaLayer<T> layer;
    std::size_t pad = 1;
};

template <typename T>
Tensor<T> gpsa_block_forward(const GpsaBlock<T>& block, const Tensor<T>& x) {
    std::size_t H = x.dim(2), W = x.dim(3);
    std::size_t Hp = H + 2 * block.pad, Wp = W + 2 * block.pad;
    Tensor<T> seq = im2seq(pad2d(x, block.pad));
    Tensor<T> out = seq2im(gpsa_forward(seq, block.layer, Hp, Wp), Hp, Wp);
    return block.pad > 0 ? crop2d(out, block.pad) : out;
}

template <typename T>
using ConvOrGpsa = std::variant<ConvLayer<T>, GpsaBlock<T>>;

template <typename T>
struct ForwardCtx {
    bool training = false;
    std::mt19937_64* rng = nullptr;
    // Called for every GPSA slot with its dotted name and padded-grid input.
    std::function<void(const std::string&, const GpsaLayer<T>&,
                       const Tensor<T>&, std::size_t, std::size_t)>
        gpsa_hook;
};

template <typename T>
Tensor<T> slot_forward(const ConvOrGpsa<T>& slot, const Tensor<T>& x,
                       const ForwardCtx<T>& ctx, const std::string& name) {
    if (std::holds_alternative<ConvLayer<T>>(slot))
        return conv_forward(std::get<ConvLayer<T>>(slot), x);
    const GpsaBlock<T>& g = std::get<GpsaBlock<T>>(slot);
    if (ctx.gpsa_hook) {
        std::size_t Hp = x.dim(2) + 2 * g.pad, Wp = x.dim(3) + 2 * g.pad;
        ctx.gpsa_hook(name, g.layer, im2seq(pad2d(x, g.pad)), Hp, Wp);
    }
    return gpsa_block_forward(g, x);
}

// Residual block. Basic: 3x3 -> 3x3. Bottleneck: 1x1 -> 3x3 -> 1x1 (the
// middle 3x3 is the surgery target). Downsampling: avgpool 2x2/2 after the
// (first) 3x3; shortcut avgpools then projects 1x1 when shape changes.
template <typename T>
struct Block {
    BlockKind kind = BlockKind::Basic;
    bool downsample = false;

    ConvOrGpsa<T> conv1;  // basic: 3x3; bottleneck: 1x1 reduce
    BatchNorm<T> bn1;
    ConvOrGpsa<T> conv2;  // basic: 3x3; bottleneck: 3x3 (surgery target)
    BatchNorm<T> bn2;
    std::optional<ConvLayer<T>> conv3;  // bottleneck only: 1x1 expand
    std::optional<BatchNorm<T>> bn3;

    std::optional<ConvLayer<T>> proj;  // 1x1 shortcut projection
    std::optional<BatchNorm<T>> proj_bn;

    StochasticDepth sd;
};

template <typename T>
struct Stage {
    std::vector<Block<T>> blocks;
};

template <typename T>
struct Model {
    ModelConfig config;
    ConvLayer<T> stem;
    BatchNorm<T> stem_bn;
    std::vector<Stage<T>> stages;
    Linear<T> classifier;
    bool training = false;
};

namespace detail {

template <typename T>
Block<T> make_basic_block(std::size_t in_ch, std::size_t out_ch,
                          bool downsample, double d_r, std::mt19937_64& rng) {
    Block<T> b;
    b.kind = BlockKind::Basic;
    b.downsample = downsample;
    b.conv1 = ConvLayer<T>::he_init(out_ch, in_ch, 3, 1, 1, rng);
    b.bn1 = BatchNorm<T>::make(out_ch);
    b.conv2 = ConvLayer<T>::he_init(out_ch, out_ch, 3, 1, 1, rng);
    b.bn2 = BatchNorm<T>::make(out_ch);
    if (downsample || in_ch != out_ch) {
        b.proj = ConvLayer<T>::he_init(out_ch, in_ch, 1, 1, 0, rng);
        b.proj_bn = BatchNorm<T>::make(out_ch);
    }
    b.sd.drop_prob = d_r;
    return b;
}

template <typename T>
Block<T> make_bottleneck_block(std::size_t in_ch, std::size_t out_ch,
                               bool downsample, double d_r,
                               std::mt19937_64& rng) {
    std::size_t mid = std::max<std::size_t>(out_ch / 4, 1);
    Block<T> b;
    b.kind = BlockKind::Bottleneck;
    b.downsample = downsample;
    b.conv1 = ConvLayer<T>::he_init(mid, in_ch, 1, 1, 0, rng);
    b.bn1 = BatchNorm<T>::make(mid);
    b.conv2 = ConvLayer<T>::he_init(mid, mid, 3, 1, 1, rng);
    b.bn2 = BatchNorm<T>::make(mid);
    b.conv3 = ConvLayer<T>::he_init(out_ch, mid, 1, 1, 0, rng);
    b.bn3 = BatchNorm<T>::make(out_ch);
    if (downsample || in_ch != out_ch) {
        b.proj = ConvLayer<T>::he_init(out_ch, in_ch, 1, 1, 0, rng);
        b.proj_bn = BatchNorm<T>::make(out_ch);
    }
    b.sd.drop_prob = d_r;
    return b;
}

}  // namespace detail

template <typename T>
Model<T> build_cnn(const ModelConfig& config, double d_r = 0.0) {
    check(!config.stages.empty(), "build_cnn: need at least one stage");
    for (const auto& s : config.stages) {
        check(s.channels > 0 && s.blocks > 0,
              "build_cnn: stage channels/blocks must be positive");
        check(s.stride == 1 || s.stride == 2,
              "build_cnn: stage stride must be 1 or 2");
    }
    std::mt19937_64 rng(config.seed);
    Model<T> m;
    m.config = config;
    m.stem = ConvLayer<T>::he_init(config.stem_channels, config.input_channels,
                                   3, config.stem_stride, 1, rng);
    m.stem_bn = BatchNorm<T>::make(config.stem_channels);
    std::size_t ch = config.stem_channels;
    for (const auto& spec : config.stages) {
        Stage<T> stage;
        for (std::size_t i = 0; i < spec.blocks; ++i) {
            bool down = i == 0 && spec.stride == 2;
            Block<T> b =
                spec.kind == BlockKind::Basic
                    ? detail::make_basic_block<T>(ch, spec.channels, down, d_r,
                                                  rng)
                    : detail::make_bottleneck_block<T>(ch, spec.channels, down,
                                                       d_r, rng);
            ch = spec.channels;
            stage.blocks.push_back(std::move(b));
        }
        m.stages.push_back(std::move(stage));
    }
    m.classifier = Linear<T>::he_init(ch, config.n_classes, rng);
    return m;
}

template <typename T>
Tensor<T> block_forward(Block<T>& b, const Tensor<T>& x,
                        const ForwardCtx<T>& ctx, const std::string& name) {
    Tensor<T> sc = x;
    if (b.downsample) sc = avgpool2d(sc, 2, 2);
    if (b.proj) {
        sc = conv_forward(*b.proj, sc);
        sc = batchnorm_forward(*b.proj_bn, sc, ctx.training);
    }
    Tensor<T> h = slot_forward(b.conv1, x, ctx, name + ".conv1");
    if (b.kind == BlockKind::Basic && b.downsample) h = avgpool2d(h, 2, 2);
    h = relu(batchnorm_forward(b.bn1, h, ctx.training));
    h = slot_forward(b.conv2, h, ctx, name + ".conv2");
    if (b.kind == BlockKind::Bottleneck && b.downsample) h = avgpool2d(h, 2, 2);
    h = batchnorm_forward(b.bn2, h, ctx.training);
    if (b.kind == BlockKind::Bottleneck) {
        h = relu(h);
        h = conv_forward(*b.conv3, h);
        h = batchnorm_forward(*b.bn3, h, ctx.training);
    }
    if (ctx.training && b.sd.drop_prob > 0.0) {
        check(ctx.rng != nullptr, "block_forward: training needs an rng");
        h = stochastic_depth_apply(b.sd, h, true, *ctx.rng);
    }
    return relu(add(h, sc));
}

template <typename T>
Tensor<T> forward_features(Model<T>& m, const Tensor<T>& x,
                           const ForwardCtx<T>& ctx) {
    check(x.rank() == 4 && x.dim(1) == m.config.input_channels,
          "forward: input " + shape_str(x.shape()) + " does not match stem");
    Tensor<T> h = conv_forward(m.stem, x);
    h = relu(batchnorm_forward(m.stem_bn, h, ctx.training));
    if (m.config.stem_pool > 1)
        h = avgpool2d(h, m.config.stem_pool, m.config.stem_pool);
    for (std::size_t s = 0; s < m.stages.size(); ++s)
        for (std::size_t i = 0; i < m.stages[s].blocks.size(); ++i)
            h = block_forward(m.stages[s].blocks[i], h, ctx,
                              "stage" + std::to_string(s) + ".block" +
                                  std::to_string(i));
    return h;
}

template <typename T>
Tensor<T> forward_classify(Model<T>& m, const Tensor<T>& x,
                           std::mt19937_64* rng = nullptr) {
    ForwardCtx<T> ctx;
    ctx.training = m.training;
    ctx.rng = rng;
    Tensor<T> h = forward_features(m, x, ctx);
    std::size_t B = h.dim(0), C = h.dim(1);
    Tensor<T> pooled =
        reduce(reshape(h, {B, C, h.dim(2) * h.dim(3)}), Reduce::Mean, 2);
    return linear_forward(m.classifier, pooled);
}

// ---------------------------------------------------------------------------
// Parameter and buffer registries (dotted names, stable order).

template <typename T>
struct ParamInfo {
    std::string name;
    Tensor<T> tensor;
    bool gate = false;   // lambda gating parameter
    bool decay = false;  // participates in weight decay
};

namespace detail {

template <typename T>
void collect_conv(const std::string& name, const ConvLayer<T>& c,
                  std::vector<ParamInfo<T>>& out) {
    out.push_back({name + ".filter", c.filter, false, true});
    if (c.bias.defined()) out.push_back({name + ".bias", c.bias, false, false});
}

template <typename T>
void collect_bn(const std::string& name, const BatchNorm<T>& bn,
                std::vector<ParamInfo<T>>& out) {
    out.push_back({name + ".gamma", bn.gamma, false, false});
    out.push_back({name + ".beta", bn.beta, false, false});
}

template <typename T>
void collect_gpsa(const std::string& name, const GpsaLayer<T>& g,
                  std::vector<ParamInfo<T>>& out) {
    for (std::size_t h = 0; h < g.n_heads; ++h) {
        std::string hn = name + ".h" + std::to_string(h);
        out.push_back({hn + ".w_qry", g.w_qry[h], false, true});
        out.push_back({hn + ".w_key", g.w_key[h], false, true});
        out.push_back({hn + ".w_out", g.w_out[h], false, true});
        out.push_back({hn + ".alpha_raw", g.alpha_raw[h], false, false});
        out.push_back({hn + ".center", g.center[h], false, false});
        out.push_back({hn + ".lambda", g.gate[h], true, false});
    }
    out.push_back({name + ".w_val", g.w_val, false, true});
    if (g.bias.defined()) out.push_back({name + ".bias", g.bias, false, false});
}

template <typename T>
void collect_slot(const std::string& name, const ConvOrGpsa<T>& slot,
                  std::vector<ParamInfo<T>>& out) {
    if (std::holds_alternative<ConvLayer<T>>(slot))
        collect_conv(name, std::get<ConvLayer<T>>(slot), out);
    else
        collect_gpsa(name + ".gpsa", std::get<GpsaBlock<T>>(slot).layer, out);
}

}  // namespace detail

template <typename T>
std::vector<ParamInfo<T>> collect_params(const Model<T>& m) {
    std::vector<ParamInfo<T>> out;
    detail::collect_conv("stem", m.stem, out);
    detail::collect_bn("stem_bn", m.stem_bn, out);
    for (std::size_t s = 0; s < m.stages.size(); ++s)
        for (std::size_t i = 0; i < m.stages[s].blocks.size(); ++i) {
            const Block<T>& b = m.stages[s].blocks[i];
            std::string bn = "stage" + std::to_string(s) + ".block" +
                             std::to_string(i);
            detail::collect_slot(bn + ".conv1", b.conv1, out);
            detail::collect_bn(bn + ".bn1", b.bn1, out);
            detail::collect_slot(bn + ".conv2", b.conv2, out);
            detail::collect_bn(bn + ".bn2", b.bn2, out);
            if (b.conv3) detail::collect_conv(bn + ".conv3", *b.conv3, out);
            if (b.bn3) detail::collect_bn(bn + ".bn3", *b.bn3, out);
            if (b.proj) detail::collect_conv(bn + ".proj", *b.proj, out);
            if (b.proj_bn) detail::collect_bn(bn + ".proj_bn", *b.proj_bn, out);
        }
    out.push_back({"classifier.weight", m.classifier.weight, false, true});
    out.push_back({"classifier.bias", m.classifier.bias, false, false});
    return out;
}

// Non-trainable state that still belongs in checkpoints.
template <typename T>
struct BufferInfo {
    std::string name;
    std::vector<T>* data;
};

template <typename T>
std::vector<BufferInfo<T>> collect_buffers(Model<T>& m) {
    std::vector<BufferInfo<T>> out;
    auto add_bn = [&out](const std::string& name, BatchNorm<T>& bn) {
        out.push_back({name + ".running_mean", &bn.running_mean});
        out.push_back({name + ".running_var", &bn.running_var});
    };
    add_bn("stem_bn", m.stem_bn);
    for (std::size_t s = 0; s < m.stages.size(); ++s)
        for (std::size_t i = 0; i < m.stages[s].blocks.size(); ++i) {
            Block<T>& b = m.stages[s].blocks[i];
            std::string bn = "stage" + std::to_string(s) + ".block" +
                             std::to_string(i);
            add_bn(bn + ".bn1", b.bn1);
            add_bn(bn + ".bn2", b.bn2);
            if (b.bn3) add_bn(bn + ".bn3", *b.bn3);
            if (b.proj_bn) add_bn(bn + ".proj_bn", *b.proj_bn);
        }
    return out;
}

template <typename T>
std::size_t count_params(const Model<T>& m) {
    std::size_t n = 0;
    for (const auto& p : collect_params(m)) n += p.tensor.numel();
    return n;
}

// Deep copy: fresh tensor nodes, same values, requires_grad preserved.
template <typename T>
Tensor<T> clone_tensor(const Tensor<T>& t) {
    if (!t.defined()) return {};
    return Tensor<T>(t.shape(), t.data(), t.requires_grad());
}

template <typename T>
ConvLayer<T> clone_conv(const ConvLayer<T>& c) {
    ConvLayer<T> out;
    out.filter = clone_tensor(c.filter);
    out.bias = clone_tensor(c.bias);
    out.stride = c.stride;
    out.padding = c.padding;
    return out;
}

template <typename T>
BatchNorm<T> clone_bn(const BatchNorm<T>& bn) {
    BatchNorm<T> out = bn;
    out.gamma = clone_tensor(bn.gamma);
    out.beta = clone_tensor(bn.beta);
    return out;
}

template <typename T>
GpsaLayer<T> clone_gpsa(const GpsaLayer<T>& g) {
    GpsaLayer<T> out;
    out.n_heads = g.n_heads;
    out.d_in = g.d_in;
    out.d_out = g.d_out;
    out.d_head = g.d_head;
    out.beta = g.beta;
    out.content_scale = g.content_scale;
    for (std::size_t h = 0; h < g.n_heads; ++h) {
        out.w_qry.push_back(clone_tensor(g.w_qry[h]));
        out.w_key.push_back(clone_tensor(g.w_key[h]));
        out.w_out.push_back(clone_tensor(g.w_out[h]));
        out.alpha_raw.push_back(clone_tensor(g.alpha_raw[h]));
        out.center.push_back(clone_tensor(g.center[h]));
        out.gate.push_back(clone_tensor(g.gate[h]));
    }
    out.w_val = clone_tensor(g.w_val);
    out.bias = clone_tensor(g.bias);
    return out;
}

template <typename T>
ConvOrGpsa<T> clone_slot(const ConvOrGpsa<T>& slot) {
    if (std::holds_alternative<ConvLayer<T>>(slot))
        return clone_conv(std::get<ConvLayer<T>>(slot));
    GpsaBlock<T> out;
    out.layer = clone_gpsa(std::get<GpsaBlock<T>>(slot).layer);
    out.pad = std::get<GpsaBlock<T>>(slot).pad;
    return out;
}

template <typename T>
Model<T> clone_model(const Model<T>& m) {
    Model<T> out;
    out.config = m.config;
    out.training = m.training;
    out.stem = clone_conv(m.stem);
    out.stem_bn = clone_bn(m.stem_bn);
    for (const auto& stage : m.stages) {
        Stage<T> s;
        for (const auto& b : stage.blocks) {
            Block<T> nb;
            nb.kind = b.kind;
            nb.downsample = b.downsample;
            nb.conv1 = clone_slot(b.conv1);
            nb.bn1 = clone_bn(b.bn1);
            nb.conv2 = clone_slot(b.conv2);
            nb.bn2 = clone_bn(b.bn2);
            if (b.conv3) nb.conv3 = clone_conv(*b.conv3);
            if (b.bn3) nb.bn3 = clone_bn(*b.bn3);
            if (b.proj) nb.proj = clone_conv(*b.proj);
            if (b.proj_bn) nb.proj_bn = clone_bn(*b.proj_bn);
            nb.sd = b.sd;
            s.blocks.push_back(std::move(nb));
        }
        out.stages.push_back(std::move(s));
    }
    out.classifier.weight = clone_tensor(m.classifier.weight);
    out.classifier.bias = clone_tensor(m.classifier.bias);
    return out;
}

// GPSA layers of a model, in forward order, with dotted slot names.
template <typename T>
std::vector<std::pair<std::string, GpsaLayer<T>*>> gpsa_layers(Model<T>& m) {
    std::vector<std::pair<std::string, GpsaLayer<T>*>> out;
    for (std::size_t s = 0; s < m.stages.size(); ++s)
        for (std::size_t i = 0; i < m.stages[s].blocks.size(); ++i) {
            Block<T>& b = m.stages[s].blocks[i];
            std::string bn = "stage" + std::to_string(s) + ".block" +
                             std::to_string(i);
            if (auto* g = std::get_if<GpsaBlock<T>>(&b.conv1))
                out.emplace_back(bn + ".conv1", &g->layer);
            if (auto* g = std::get_if<GpsaBlock<T>>(&b.conv2))
                out.emplace_back(bn + ".conv2", &g->layer);
        }
    return out;
}

template <typename T>
Tensor<T> cross_entropy_loss(Model<T>& m, const Tensor<T>& x,
                             const std::vector<int>& labels,
                             std::mt19937_64* rng = nullptr) {
    return cross_entropy(forward_classify(m, x, rng), labels);
}

}  // namespace tcnn
