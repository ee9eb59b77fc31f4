#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "aulite/tensor.hpp"
#include "test_helpers.hpp"

using namespace aulite;
using aulite::testing::finite_diff_max_rel_error;
using aulite::testing::naive_matmul;

TEST_CASE("matmul identity and zero") {
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor x = Tensor::from_data({2, 2}, {3.5f, -1, 2, 7});
    Tensor y = matmul(eye, x);
    for (size_t i = 0; i < 4; ++i) CHECK(y.data()[i] == x.data()[i]);

    Tensor zero = Tensor::zeros({2, 2});
    Tensor z = matmul(eye, zero);
    for (float v : z.data()) CHECK(v == 0.0f);
}

TEST_CASE("matmul 2x2 known product") {
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
    Tensor c = matmul(a, b);
    CHECK(c.data() == std::vector<float>{19, 22, 43, 50});
}

TEST_CASE("matmul agrees with triple-loop oracle on random shapes") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        int m = 1 + static_cast<int>(rng.uniform_int(16));
        int k = 1 + static_cast<int>(rng.uniform_int(16));
        int n = 1 + static_cast<int>(rng.uniform_int(16));
        TensorD a = TensorD::zeros({m, k});
        TensorD b = TensorD::zeros({k, n});
        for (auto& v : a.data()) v = rng.uniform() * 4.0 - 2.0;
        for (auto& v : b.data()) v = rng.uniform() * 4.0 - 2.0;
        TensorD c = matmul(a, b);
        auto expect = naive_matmul(a.data(), b.data(), m, k, n);
        for (size_t i = 0; i < expect.size(); ++i)
            CHECK(std::abs(c.data()[i] - expect[i]) < 1e-6);
    }
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 3});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
    }
}

TEST_CASE("softmax basics") {
    Tensor a = softmax(Tensor::from_data({2}, {0, 0}), 0);
    CHECK(a.data()[0] == doctest::Approx(0.5));
    CHECK(a.data()[1] == doctest::Approx(0.5));

    Tensor b = softmax(Tensor::from_data({3}, {2.5f, 2.5f, 2.5f}), 0);
    for (float v : b.data()) CHECK(v == doctest::Approx(1.0 / 3.0));

    // closed form: e^0 / (e^0 + 3)
    Tensor c = softmax(Tensor::from_data({2}, {0.0f, std::log(3.0f)}), 0);
    CHECK(c.data()[0] == doctest::Approx(0.25).epsilon(1e-6));
    CHECK(c.data()[1] == doctest::Approx(0.75).epsilon(1e-6));
}

TEST_CASE("softmax slices sum to one and shift invariance") {
    Rng rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor x = Tensor::zeros({4, 6});
        for (auto& v : x.data()) v = static_cast<float>(rng.uniform() * 20.0 - 10.0);
        for (int axis = 0; axis < 2; ++axis) {
            Tensor y = softmax(x, axis);
            int outer = axis == 0 ? 6 : 4;
            int len = axis == 0 ? 4 : 6;
            for (int o = 0; o < outer; ++o) {
                float total = 0;
                for (int s = 0; s < len; ++s)
                    total += axis == 0 ? y.data()[static_cast<size_t>(s) * 6 + o]
                                       : y.data()[static_cast<size_t>(o) * 6 + s];
                CHECK(std::abs(total - 1.0f) < 1e-6);
            }
        }
        // shift invariance along axis 1
        Tensor shifted = Tensor::zeros({4, 6});
        for (size_t i = 0; i < x.data().size(); ++i) shifted.data()[i] = x.data()[i] + 3.25f;
        Tensor y0 = softmax(x, 1);
        Tensor y1 = softmax(shifted, 1);
        for (size_t i = 0; i < y0.data().size(); ++i)
            CHECK(std::abs(y0.data()[i] - y1.data()[i]) < 1e-6);
    }
}

TEST_CASE("layer_norm examples") {
    Tensor gain = Tensor::full({4}, 1.0f);
    Tensor bias = Tensor::zeros({4});
    Tensor constant = Tensor::full({1, 4}, 2.5f);
    Tensor y = layer_norm(constant, gain, bias, 1e-5f);
    for (float v : y.data()) CHECK(std::abs(v) < 1e-4);

    Tensor two = Tensor::from_data({1, 2}, {1, -1});
    Tensor g2 = Tensor::full({2}, 1.0f);
    Tensor b2 = Tensor::zeros({2});
    Tensor z = layer_norm(two, g2, b2, 1e-12f);
    CHECK(z.data()[0] == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(z.data()[1] == doctest::Approx(-1.0).epsilon(1e-5));

    // zero gain broadcasts bias
    Tensor g0 = Tensor::zeros({2});
    Tensor b3 = Tensor::from_data({2}, {4.0f, -2.0f});
    Tensor w = layer_norm(two, g0, b3, 1e-5f);
    CHECK(w.data()[0] == 4.0f);
    CHECK(w.data()[1] == -2.0f);
}

TEST_CASE("gelu reference points") {
    Tensor x = Tensor::from_data({3}, {0.0f, 1.0f, 8.0f});
    Tensor y = gelu(x);
    CHECK(y.data()[0] == 0.0f);
    // scalar evaluation of 0.5*x*(1+tanh(sqrt(2/pi)*(x+0.044715 x^3)))
    CHECK(y.data()[1] == doctest::Approx(0.841192).epsilon(1e-4));
    CHECK(y.data()[2] == doctest::Approx(8.0).epsilon(1e-5));
}

TEST_CASE("cross_entropy closed forms") {
    // uniform logits over V=4 -> ln 4
    Tensor logits = Tensor::zeros({3, 4});
    Tensor loss = cross_entropy(logits, {1, 2, 0}, {true, true, true});
    CHECK(loss.item() == doctest::Approx(std::log(4.0)).epsilon(1e-6));

    // strongly peaked toward target -> loss ~ 0
    Tensor peaked = Tensor::zeros({1, 4});
    peaked.data()[2] = 50.0f;
    Tensor l2 = cross_entropy(peaked, {2}, {true});
    CHECK(l2.item() < 1e-6);

    // mask hides half the positions: equals mean over visible subset
    Tensor mixed = Tensor::zeros({2, 4});
    mixed.data()[0] = 3.0f;  // row 0 favors token 0
    Tensor full_loss = cross_entropy(mixed, {0, 1}, {true, false});
    Tensor only_row0 = slice_rows(mixed, 0, 1);
    Tensor expect = cross_entropy(only_row0, {0}, {true});
    CHECK(full_loss.item() == doctest::Approx(expect.item()).epsilon(1e-6));

    CHECK_THROWS_AS(cross_entropy(logits, {0, 0, 0}, {false, false, false}), ValueError);
}

TEST_CASE("backward linear and quadratic") {
    Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
    backward(sum(x));
    for (float g : x.grad()) CHECK(g == 1.0f);

    x.zero_grad();
    backward(sum(mul(x, x)));
    CHECK(x.grad()[0] == doctest::Approx(2.0f));
    CHECK(x.grad()[1] == doctest::Approx(4.0f));
    CHECK(x.grad()[2] == doctest::Approx(6.0f));

    CHECK_THROWS_AS(backward(add(x, x)), ShapeError);
}

TEST_CASE("gradients match finite differences per op") {
    // every differentiable op, random inputs in [-2,2], 5 seeds, 64-bit
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        auto rand_tensor = [&rng](std::vector<int> shape) {
            TensorD t = TensorD::zeros(std::move(shape), true);
            for (auto& v : t.data()) v = rng.uniform() * 4.0 - 2.0;
            return t;
        };

        {
            std::vector<TensorD> in = {rand_tensor({3, 4}), rand_tensor({4, 2})};
            auto fn = [](const std::vector<TensorD>& v) {
                return sum(mul(matmul(v[0], v[1]), matmul(v[0], v[1])));
            };
            CHECK(finite_diff_max_rel_error(fn, in) < 1e-4);
        }
        {
            std::vector<TensorD> in = {rand_tensor({4, 5})};
            auto fn = [](const std::vector<TensorD>& v) {
                TensorD s = softmax(v[0], 1);
                return sum(mul(s, v[0]));
            };
            CHECK(finite_diff_max_rel_error(fn, in) < 1e-4);
        }
        {
            std::vector<TensorD> in = {rand_tensor({3, 6}), rand_tensor({6}),
                                       rand_tensor({6})};
            auto fn = [](const std::vector<TensorD>& v) {
                TensorD y = layer_norm(v[0], v[1], v[2], 1e-5);
                return sum(mul(y, y));
            };
            CHECK(finite_diff_max_rel_error(fn, in) < 1e-4);
        }
        {
            std::vector<TensorD> in = {rand_tensor({2, 7})};
            auto fn = [](const std::vector<TensorD>& v) { return sum(gelu(v[0])); };
            CHECK(finite_diff_max_rel_error(fn, in) < 1e-4);
        }
        {
            std::vector<TensorD> in = {rand_tensor({4, 6})};
            auto fn = [](const std::vector<TensorD>& v) {
                return cross_entropy(v[0], {1, 5, 0, 3}, {true, false, true, true});
            };
            CHECK(finite_diff_max_rel_error(fn, in) < 1e-4);
        }
        {
            std::vector<TensorD> in = {rand_tensor({5, 4}), rand_tensor({4})};
            auto fn = [](const std::vector<TensorD>& v) {
                TensorD y = add_bias(v[0], v[1]);
                return sum(mul(y, y));
            };
            CHECK(finite_diff_max_rel_error(fn, in) < 1e-4);
        }
        {
            std::vector<TensorD> in = {rand_tensor({4, 6})};
            auto fn = [](const std::vector<TensorD>& v) {
                TensorD t = transpose(v[0]);
                TensorD s = slice_cols(slice_rows(t, 1, 5), 0, 3);
                return sum(mul(s, s));
            };
            CHECK(finite_diff_max_rel_error(fn, in) < 1e-4);
        }
        {
            std::vector<TensorD> in = {rand_tensor({2, 3}), rand_tensor({2, 3}),
                                       rand_tensor({2, 2})};
            auto fn = [](const std::vector<TensorD>& v) {
                TensorD rows = concat_rows(std::vector<TensorD>{v[0], v[1]});
                TensorD cols = concat_cols(std::vector<TensorD>{v[0], v[2]});
                return add(sum(mul(rows, rows)), sum(mul(cols, cols)));
            };
            CHECK(finite_diff_max_rel_error(fn, in) < 1e-4);
        }
        {
            std::vector<TensorD> in = {rand_tensor({6, 3})};
            auto fn = [](const std::vector<TensorD>& v) {
                TensorD e = embedding_lookup(v[0], {2, 0, 2, 5});
                return sum(mul(e, e));
            };
            CHECK(finite_diff_max_rel_error(fn, in) < 1e-4);
        }
        {
            // composite graph mixing most ops
            std::vector<TensorD> in = {rand_tensor({3, 4}), rand_tensor({4, 4}),
                                       rand_tensor({4}), rand_tensor({4})};
            auto fn = [](const std::vector<TensorD>& v) {
                TensorD h = gelu(matmul(v[0], v[1]));
                TensorD ln = layer_norm(h, v[2], v[3], 1e-5);
                TensorD sm = softmax(ln, 1);
                return cross_entropy(scale(matmul(sm, transpose(v[1])), 2.0), {0, 1, 2},
                                     {true, true, true});
            };
            CHECK(finite_diff_max_rel_error(fn, in) < 1e-4);
        }
    }
}

TEST_CASE("forward ops keep finite values on finite inputs") {
    Rng rng(23);
    Tensor x = Tensor::zeros({8, 8});
    for (auto& v : x.data()) v = static_cast<float>(rng.uniform() * 200.0 - 100.0);
    CHECK(all_finite(softmax(x, 1)));
    CHECK(all_finite(gelu(x)));
    CHECK(all_finite(matmul(x, x)));
    Tensor g = Tensor::full({8}, 1.0f);
    Tensor b = Tensor::zeros({8});
    CHECK(all_finite(layer_norm(x, g, b, 1e-5f)));
}

TEST_CASE("no-grad mode records nothing") {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    {
        NoGradGuard guard;
        Tensor y = sum(mul(x, x));
        CHECK_FALSE(y.requires_grad());
    }
    Tensor y = sum(mul(x, x));
    CHECK(y.requires_grad());
}

TEST_CASE("grad accumulation across backward calls") {
    Tensor x = Tensor::from_data({2}, {1, 1}, true);
    backward(sum(mul(x, x)));
    backward(sum(mul(x, x)));
    CHECK(x.grad()[0] == doctest::Approx(4.0f));  // 2x accumulated twice
}
