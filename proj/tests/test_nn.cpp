#include <cmath>
#include <random>

#include "doctest.h"
#include "tcnn/nn.hpp"

using namespace tcnn;

TEST_CASE("conv_forward hand examples") {
    std::mt19937_64 rng(0);
    // delta filter, no bias -> identity
    ConvLayer<double> id;
    id.filter = Tensor<double>::zeros({2, 2, 3, 3});
    for (int c = 0; c < 2; ++c) id.filter.data()[((c * 2 + c) * 3 + 1) * 3 + 1] = 1;
    id.stride = 1;
    id.padding = 1;
    Tensor<double> x = Tensor<double>::randn({1, 2, 4, 4}, rng, 1.0);
    auto y = conv_forward(id, x);
    for (std::size_t i = 0; i < x.numel(); ++i)
        CHECK(y.data()[i] == doctest::Approx(x.data()[i]));

    // all-ones 3x3 filter, pad 1, ones input: center 9, corners 4
    ConvLayer<double> ones;
    ones.filter = Tensor<double>::ones({1, 1, 3, 3});
    ones.stride = 1;
    ones.padding = 1;
    auto z = conv_forward(ones, Tensor<double>::ones({1, 1, 3, 3}));
    CHECK(z.data()[4] == doctest::Approx(9.0));  // center
    CHECK(z.data()[0] == doctest::Approx(4.0));  // corner
    CHECK(z.data()[2] == doctest::Approx(4.0));
    CHECK(z.data()[6] == doctest::Approx(4.0));
    CHECK(z.data()[8] == doctest::Approx(4.0));

    // zero filter + bias c -> constant maps
    ConvLayer<double> biased;
    biased.filter = Tensor<double>::zeros({2, 1, 3, 3});
    biased.bias = Tensor<double>({2}, {1.5, -2.5});
    biased.stride = 1;
    biased.padding = 1;
    auto c = conv_forward(biased, Tensor<double>::randn({1, 1, 3, 3}, rng, 1.0));
    for (int i = 0; i < 9; ++i) {
        CHECK(c.data()[i] == doctest::Approx(1.5));
        CHECK(c.data()[9 + i] == doctest::Approx(-2.5));
    }
}

TEST_CASE("conv_forward channel mismatch") {
    std::mt19937_64 rng(0);
    ConvLayer<double> l = ConvLayer<double>::he_init(4, 3, 3, 1, 1, rng);
    CHECK_THROWS_AS(conv_forward(l, Tensor<double>::ones({1, 2, 4, 4})),
                    DimError);
}

TEST_CASE("conv padding equals explicit pad2d") {
    std::mt19937_64 rng(9);
    ConvLayer<double> l = ConvLayer<double>::he_init(3, 2, 3, 1, 1, rng, true);
    Tensor<double> x = Tensor<double>::randn({2, 2, 5, 5}, rng, 1.0);
    auto direct = conv_forward(l, x);
    ConvLayer<double> nopad = l;
    nopad.padding = 0;
    auto padded = conv_forward(nopad, pad2d(x, 1));
    REQUIRE(direct.shape() == padded.shape());
    for (std::size_t i = 0; i < direct.numel(); ++i)
        CHECK(direct.data()[i] == padded.data()[i]);  // bit-exact
}

TEST_CASE("batchnorm") {
    // eval identity with unit running stats
    BatchNorm<double> bn = BatchNorm<double>::make(3);
    std::mt19937_64 rng(4);
    Tensor<double> x = Tensor<double>::randn({2, 3, 4, 4}, rng, 1.0);
    auto y = batchnorm_forward(bn, x, false);
    for (std::size_t i = 0; i < x.numel(); ++i)
        CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-4));

    // constant input in training -> beta (0)
    auto c = batchnorm_forward(bn, Tensor<double>::full({2, 3, 2, 2}, 7.0), true);
    for (double v : c.data()) CHECK(v == doctest::Approx(0.0).epsilon(1e-6));

    // batch {0, 2} -> {-1, +1}
    BatchNorm<double> bn1 = BatchNorm<double>::make(1);
    bn1.epsilon = 1e-12;
    Tensor<double> pair({2, 1, 1, 1}, {0.0, 2.0});
    auto n = batchnorm_forward(bn1, pair, true);
    CHECK(n.data()[0] == doctest::Approx(-1.0).epsilon(1e-5));
    CHECK(n.data()[1] == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("batchnorm backward matches finite differences") {
    std::mt19937_64 rng(13);
    // Weight the outputs so the loss is not invariant to the normalization
    // (sum of squares of batchnorm output is nearly constant in x).
    Tensor<double> w = Tensor<double>::randn({3, 2, 2, 2}, rng, 1.0);
    for (bool training : {true, false}) {
        auto f = [training, &w](const std::vector<Tensor<double>>& l) {
            BatchNorm<double> bn = BatchNorm<double>::make(2);
            bn.gamma = l[1];
            bn.beta = l[2];
            auto y = batchnorm_forward(bn, l[0], training);
            return add(reduce(mul(y, w), Reduce::Sum),
                       reduce(mul(mul(y, y), mul(y, w)), Reduce::Sum));
        };
        auto rep = gradcheck<double>(
            f,
            {Tensor<double>::randn({3, 2, 2, 2}, rng, 1.0),
             Tensor<double>::randn({2}, rng, 0.5), Tensor<double>::randn({2}, rng, 0.5)},
            1e-6, 1e-5);
        INFO("training=" << training << " rel err " << rep.max_rel_err);
        CHECK(rep.pass);
    }
}

TEST_CASE("avgpool2d") {
    Tensor<double> c = Tensor<double>::full({1, 2, 4, 4}, 3.3);
    auto y = avgpool2d(c, 2, 2);
    for (double v : y.data()) CHECK(v == doctest::Approx(3.3));

    Tensor<double> q({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(avgpool2d(q, 2, 2).item() == doctest::Approx(2.5));

    std::mt19937_64 rng(2);
    Tensor<double> x = Tensor<double>::randn({1, 2, 3, 3}, rng, 1.0);
    auto idp = avgpool2d(x, 1, 1);
    for (std::size_t i = 0; i < x.numel(); ++i)
        CHECK(idp.data()[i] == x.data()[i]);
}

TEST_CASE("pad then crop is the identity") {
    std::mt19937_64 rng(6);
    Tensor<double> x = Tensor<double>::randn({2, 3, 5, 6}, rng, 1.0);
    for (std::size_t p : {1, 2, 3}) {
        auto y = crop2d(pad2d(x, p), p);
        REQUIRE(y.shape() == x.shape());
        for (std::size_t i = 0; i < x.numel(); ++i)
            CHECK(y.data()[i] == x.data()[i]);
    }
}

TEST_CASE("stochastic depth") {
    std::mt19937_64 rng(1);
    Tensor<double> branch = Tensor<double>::full({1, 1, 1, 1}, 2.0);

    StochasticDepth none{0.0};
    auto y0 = stochastic_depth_apply(none, branch, true, rng);
    CHECK(y0.item() == 2.0);
    auto y1 = stochastic_depth_apply(none, branch, false, rng);
    CHECK(y1.item() == 2.0);

    StochasticDepth half{0.5};
    auto ye = stochastic_depth_apply(half, branch, false, rng);
    CHECK(ye.item() == 2.0);  // eval is bit-exact identity

    double sum = 0.0;
    const int trials = 10000;
    for (int t = 0; t < trials; ++t)
        sum += stochastic_depth_apply(half, branch, true, rng).item();
    CHECK(sum / trials == doctest::Approx(2.0).epsilon(0.05));

    StochasticDepth bad{1.0};
    CHECK_THROWS_AS(stochastic_depth_apply(bad, branch, true, rng),
                    std::invalid_argument);
}
