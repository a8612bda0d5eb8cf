#include <cmath>
#include <random>

#include "doctest.h"
#include "tcnn/gpsa.hpp"
#include "tcnn/reparam.hpp"

using namespace tcnn;

TEST_CASE("alpha rectification") {
    CHECK(alpha_of(0.0, 5.0) == doctest::Approx(std::log(2.0) / 5.0).epsilon(1e-12));
    CHECK(alpha_of(-100.0, 5.0) > 0.0);
    // inversion used by the initializer: alpha = 1
    double raw = alpha_raw_for(1.0, 5.0);
    CHECK(raw == doctest::Approx(std::log(std::exp(5.0) - 1.0) / 5.0).epsilon(1e-12));
    CHECK(raw == doctest::Approx(0.99866).epsilon(1e-4));
    CHECK(alpha_of(raw, 5.0) == doctest::Approx(1.0).epsilon(1e-12));
    // stable branch for large alpha
    CHECK(alpha_of(alpha_raw_for(20.0, 5.0), 5.0) == doctest::Approx(20.0).epsilon(1e-9));
    // monotone increasing
    CHECK(alpha_of(1.0, 5.0) > alpha_of(0.5, 5.0));
}

// positional_logits hand values: alpha=2, Delta=(1,1)
TEST_CASE("positional logits hand values") {
    // 3x3 grid, query at center (1,1): delta = pos(j) - pos(i)
    auto pl = positional_logits<double>(3, 3, {2.0}, {{1.0, 1.0}});
    REQUIRE(pl.per_head.size() == 1);
    const auto& m = pl.per_head[0];  // [9, 9]
    std::size_t q = 1 * 3 + 1;
    auto logit = [&](int dr, int dc) {
        std::size_t j = (1 + dr) * 3 + (1 + dc);
        return m.data()[q * 9 + j];
    };
    CHECK(logit(1, 1) == doctest::Approx(4.0));     // delta = Delta
    CHECK(logit(0, 0) == doctest::Approx(0.0));     // zero offset
    CHECK(logit(-1, -1) == doctest::Approx(-12.0));

    // argmax over delta at Delta for any alpha > 0
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> au(0.05, 5.0);
    std::uniform_int_distribution<int> du(-2, 2);
    for (int t = 0; t < 50; ++t) {
        double alpha = au(rng);
        double d1 = du(rng), d2 = du(rng);
        auto p = positional_logits<double>(7, 7, {alpha}, {{d1, d2}});
        std::size_t qq = 3 * 7 + 3;  // center query, offsets -3..3 all present
        const auto& row = p.per_head[0];
        double best = -1e30;
        std::size_t best_j = 0;
        for (std::size_t j = 0; j < 49; ++j)
            if (row.data()[qq * 49 + j] > best) {
                best = row.data()[qq * 49 + j];
                best_j = j;
            }
        CHECK(best_j == static_cast<std::size_t>((3 + d1) * 7 + (3 + d2)));
    }

    // translation covariance: logit depends only on delta
    auto p2 = positional_logits<double>(4, 4, {1.3}, {{1.0, -1.0}});
    const auto& mm = p2.per_head[0];
    // queries (1,1) and (2,2), same delta (1,0)
    double a = mm.data()[(1 * 4 + 1) * 16 + (2 * 4 + 1)];
    double b = mm.data()[(2 * 4 + 2) * 16 + (3 * 4 + 2)];
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
}

namespace {

template <typename T>
GpsaLayer<T> random_layer(std::size_t d_in, std::size_t d_out,
                          std::size_t n_heads, std::mt19937_64& rng,
                          double qk_scale = 0.3) {
    GpsaLayer<T> l;
    l.n_heads = n_heads;
    l.d_in = d_in;
    l.d_out = d_out;
    l.d_head = head_dims(d_in, n_heads);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    for (std::size_t h = 0; h < n_heads; ++h) {
        l.w_qry.push_back(
            Tensor<T>::randn({d_in, l.d_head[h]}, rng, T(qk_scale), true));
        l.w_key.push_back(
            Tensor<T>::randn({d_in, l.d_head[h]}, rng, T(qk_scale), true));
        l.w_out.push_back(Tensor<T>::randn({d_in, d_out}, rng, T(0.5), true));
        l.alpha_raw.push_back(Tensor<T>::scalar(T(u(rng)), true));
        l.center.push_back(
            Tensor<T>({2}, {T(u(rng)), T(u(rng))}, true));
        l.gate.push_back(Tensor<T>::scalar(T(u(rng)), true));
    }
    l.w_val = Tensor<T>::randn({d_in, d_in}, rng, T(0.5), true);
    l.bias = Tensor<T>::randn({d_out}, rng, T(0.5), true);
    return l;
}

}  // namespace

TEST_CASE("gated attention combinations") {
    std::mt19937_64 rng(5);
    std::size_t H = 3, W = 3, L = 9, d = 4;
    GpsaLayer<double> l = random_layer<double>(d, d, 2, rng);
    // zero content weights -> content softmax uniform
    for (auto& w : l.w_qry) w = Tensor<double>::zeros(w.shape());
    for (auto& w : l.w_key) w = Tensor<double>::zeros(w.shape());
    Tensor<double> x = Tensor<double>::randn({L, d}, rng, 1.0);

    // lambda = +20 -> positional softmax within 1e-8
    l.gate[0] = Tensor<double>::scalar(20.0);
    // lambda = 1 -> 0.2689/L + 0.7311*positional
    l.gate[1] = Tensor<double>::scalar(1.0);
    PositionalLogits<double> pl = positional_logits(l, H, W);
    auto maps = gated_attention(x, l, pl);
    auto pos0 = softmax(pl.per_head[0], -1);
    auto pos1 = softmax(pl.per_head[1], -1);
    double sig1 = 1.0 / (1.0 + std::exp(-1.0));
    for (std::size_t i = 0; i < L * L; ++i) {
        CHECK(maps[0].data()[i] ==
              doctest::Approx(pos0.data()[i]).epsilon(1e-8).scale(1));
        double expect = (1.0 - sig1) / L + sig1 * pos1.data()[i];
        CHECK(maps[1].data()[i] == doctest::Approx(expect).epsilon(1e-9));
    }

    // rows sum to 1 for arbitrary parameters
    GpsaLayer<double> r = random_layer<double>(d, d, 3, rng);
    auto rmaps = gated_attention(x, r, positional_logits(r, H, W));
    for (auto& m : rmaps)
        for (std::size_t i = 0; i < L; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < L; ++j) s += m.data()[i * L + j];
            CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        }
}

TEST_CASE("gpsa_forward against the conv oracle and edge cases") {
    std::mt19937_64 rng(8);
    std::size_t d = 4, H = 5, W = 5;

    // strict conv-init layer equals conv_forward (with pad-then-crop)
    ConvLayer<double> conv = ConvLayer<double>::he_init(d, d, 3, 1, 1, rng, true);
    GpsaLayer<double> gl = conv_to_gpsa(conv, InitMode::strict());
    Tensor<double> img = Tensor<double>::randn({2, d, H, W}, rng, 1.0);
    Tensor<double> want = conv_forward(conv, img);
    Tensor<double> seq = im2seq(pad2d(img, 1));
    Tensor<double> got =
        crop2d(seq2im(gpsa_forward(seq, gl, H + 2, W + 2), H + 2, W + 2), 1);
    REQUIRE(got.shape() == want.shape());
    for (std::size_t i = 0; i < want.numel(); ++i)
        CHECK(got.data()[i] ==
              doctest::Approx(want.data()[i]).epsilon(1e-9).scale(1));

    // all W_out = 0 -> bias only
    GpsaLayer<double> zl = random_layer<double>(d, d, 2, rng);
    for (auto& w : zl.w_out) w = Tensor<double>::zeros(w.shape());
    Tensor<double> x = Tensor<double>::randn({1, H * W, d}, rng, 1.0);
    auto z = gpsa_forward(x, zl, H, W);
    for (std::size_t i = 0; i < H * W; ++i)
        for (std::size_t c = 0; c < d; ++c)
            CHECK(z.data()[i * d + c] == doctest::Approx(zl.bias.data()[c]));

    // identity-selecting single head: strict alpha, Delta=0, W_val=W_out=I
    GpsaLayer<double> il = random_layer<double>(d, d, 1, rng);
    il.w_qry[0] = Tensor<double>::zeros(il.w_qry[0].shape());
    il.w_key[0] = Tensor<double>::zeros(il.w_key[0].shape());
    il.alpha_raw[0] = Tensor<double>::scalar(alpha_raw_for(20.0, 5.0));
    il.center[0] = Tensor<double>::zeros({2});
    il.gate[0] = Tensor<double>::scalar(20.0);
    il.w_val = Tensor<double>::zeros({d, d});
    il.w_out[0] = Tensor<double>::zeros({d, d});
    for (std::size_t i = 0; i < d; ++i) {
        il.w_val.data()[i * d + i] = 1;
        il.w_out[0].data()[i * d + i] = 1;
    }
    il.bias = Tensor<double>::zeros({d});
    auto y = gpsa_forward(x, il, H, W);
    for (std::size_t i = 0; i < x.numel(); ++i)
        CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-8));
}

TEST_CASE("spans and gates") {
    std::mt19937_64 rng(2);
    GpsaLayer<double> l = random_layer<double>(4, 4, 3, rng);
    l.alpha_raw[0] = Tensor<double>::scalar(alpha_raw_for(1.0, 5.0));
    l.alpha_raw[1] = Tensor<double>::scalar(alpha_raw_for(20.0, 5.0));
    auto spans = attention_span(l);
    CHECK(spans[0] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(spans[1] == doctest::Approx(0.05).epsilon(1e-9));

    l.gate[0] = Tensor<double>::scalar(0.0);
    l.gate[1] = Tensor<double>::scalar(1.0);
    l.gate[2] = Tensor<double>::scalar(-20.0);
    auto gates = gating_values(l);
    CHECK(gates[0] == doctest::Approx(0.5));
    CHECK(gates[1] == doctest::Approx(0.7311).epsilon(1e-4));
    CHECK(gates[2] == doctest::Approx(0.0).scale(1).epsilon(1e-8));
}

TEST_CASE("attention_map_at") {
    std::mt19937_64 rng(7);
    std::size_t d = 4, H = 5, W = 5;
    ConvLayer<double> conv = ConvLayer<double>::he_init(d, d, 3, 1, 1, rng);
    GpsaLayer<double> gl = conv_to_gpsa(conv, InitMode::strict());
    Tensor<double> x = Tensor<double>::randn({H * W, d}, rng, 1.0);

    CHECK_THROWS_AS(attention_map_at(gl, x, H, W, 5, 0), std::out_of_range);

    auto centers = head_centers<double>(3);
    auto maps = attention_map_at(gl, x, H, W, 2, 2);
    REQUIRE(maps.size() == 9);
    for (std::size_t h = 0; h < 9; ++h) {
        // one-hot at query + Delta^h, off-peak mass <= 1e-8
        std::size_t peak = (2 + static_cast<std::size_t>(centers[h][0] + 2)) * W
                         + (2 + static_cast<std::size_t>(centers[h][1] + 2)) - 2 * W - 2;
        peak = (2 + static_cast<long>(centers[h][0])) * W +
               (2 + static_cast<long>(centers[h][1]));
        double off = 0, total = 0;
        for (std::size_t j = 0; j < H * W; ++j) {
            total += maps[h][j];
            if (j != peak) off += maps[h][j];
        }
        CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
        CHECK(off <= 1e-8);
        CHECK(maps[h][peak] == doctest::Approx(1.0).epsilon(1e-6));
    }

    // uniform map when the gate saturates to content with zero Q/K
    GpsaLayer<double> ul = random_layer<double>(d, d, 1, rng);
    ul.w_qry[0] = Tensor<double>::zeros(ul.w_qry[0].shape());
    ul.w_key[0] = Tensor<double>::zeros(ul.w_key[0].shape());
    ul.gate[0] = Tensor<double>::scalar(-20.0);
    auto um = attention_map_at(ul, x, H, W, 2, 2);
    for (double v : um[0])
        CHECK(v == doctest::Approx(1.0 / (H * W)).epsilon(1e-7));
}

TEST_CASE("gpsa gradcheck covers every parameter class (f64)") {
    std::mt19937_64 rng(11);
    std::size_t d = 4, H = 3, W = 3;
    GpsaLayer<double> l = random_layer<double>(d, d, 2, rng, 0.4);
    Tensor<double> x = Tensor<double>::randn({2, H * W, d}, rng, 1.0, true);
    std::vector<Tensor<double>> leaves{x, l.w_val, l.bias};
    for (std::size_t h = 0; h < l.n_heads; ++h) {
        leaves.push_back(l.w_qry[h]);
        leaves.push_back(l.w_key[h]);
        leaves.push_back(l.w_out[h]);
        leaves.push_back(l.alpha_raw[h]);
        leaves.push_back(l.center[h]);
        leaves.push_back(l.gate[h]);
    }
    std::mt19937_64 wrng(99);
    Tensor<double> w = Tensor<double>::randn({2, H * W, d}, wrng, 1.0);
    auto f = [&](const std::vector<Tensor<double>>&) {
        return reduce(mul(gpsa_forward(x, l, H, W), w), Reduce::Sum);
    };
    auto rep = gradcheck<double>(f, leaves, 1e-6, 1e-5);
    INFO("rel err " << rep.max_rel_err);
    CHECK(rep.pass);
}

TEST_CASE("permutation equivariance in pure-content mode") {
    // lambda saturated to content, zero positional influence: permuting the
    // pixels permutes the outputs identically.
    std::mt19937_64 rng(21);
    std::size_t d = 4, H = 3, W = 3, L = 9;
    GpsaLayer<double> l = random_layer<double>(d, d, 2, rng, 0.5);
    for (auto& g : l.gate) g = Tensor<double>::scalar(-30.0);

    Tensor<double> x = Tensor<double>::randn({1, L, d}, rng, 1.0);
    auto y = gpsa_forward(x, l, H, W);

    std::vector<std::size_t> perm(L);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor<double> xp = Tensor<double>::zeros({1, L, d});
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t c = 0; c < d; ++c)
            xp.data()[i * d + c] = x.data()[perm[i] * d + c];
    auto yp = gpsa_forward(xp, l, H, W);
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t c = 0; c < d; ++c)
            CHECK(yp.data()[i * d + c] ==
                  doctest::Approx(y.data()[perm[i] * d + c]).epsilon(1e-9));
}

TEST_CASE("attention rows sum to one over random draws") {
    // 10^4 random parameter draws across layer shapes
    std::mt19937_64 rng(123);
    std::size_t checked = 0;
    for (int trial = 0; trial < 200; ++trial) {
        std::size_t d = 2 + (trial % 3);
        std::size_t heads = 1 + (trial % 4);
        std::size_t H = 3, W = 3, L = 9;
        GpsaLayer<double> l = random_layer<double>(d, d, heads, rng, 1.0);
        Tensor<double> x = Tensor<double>::randn({L, d}, rng, 1.5);
        auto maps = gated_attention(x, l, positional_logits(l, H, W));
        for (auto& m : maps)
            for (std::size_t i = 0; i < L; ++i) {
                double s = 0;
                for (std::size_t j = 0; j < L; ++j) {
                    double v = m.data()[i * L + j];
                    CHECK(v >= 0.0);
                    s += v;
                }
                CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
                ++checked;
            }
    }
    CHECK(checked >= 4000);
}

TEST_CASE("encoding cache is keyed by resolution") {
    std::mt19937_64 rng(1);
    GpsaLayer<double> l = random_layer<double>(4, 4, 1, rng);
    Tensor<double> x4 = Tensor<double>::randn({1, 16, 4}, rng, 1.0);
    Tensor<double> x5 = Tensor<double>::randn({1, 25, 4}, rng, 1.0);
    // both resolutions usable back to back on one layer
    auto a = gpsa_forward(x4, l, 4, 4);
    auto b = gpsa_forward(x5, l, 5, 5);
    auto a2 = gpsa_forward(x4, l, 4, 4);
    for (std::size_t i = 0; i < a.numel(); ++i)
        CHECK(a.data()[i] == a2.data()[i]);
    CHECK(b.dim(1) == 25);
}
