#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "sumnet/gradcheck.hpp"
#include "sumnet/ops.hpp"
#include "sumnet/rng.hpp"
#include "sumnet/tape.hpp"

using namespace sumnet;

TEST_CASE("backward of sum gives all-ones gradient") {
    Rng rng(7);
    Tensor x = rng.uniform_tensor({2, 3, 4, 5}, -2.0, 2.0);
    x.set_requires_grad(true);
    Tape tape;
    Tensor loss = sum(x, &tape);
    tape.backward(loss);
    REQUIRE(x.grad().size() == static_cast<std::size_t>(x.numel()));
    for (double g : x.grad()) REQUIRE(g == 1.0);
}

TEST_CASE("backward of sum(x*x) is 2x") {
    Tensor x = Tensor::from_data({1, 1, 1, 2}, {1.0, -2.0});
    x.set_requires_grad(true);
    Tape tape;
    Tensor loss = sum(mul(x, x, &tape), &tape);
    tape.backward(loss);
    REQUIRE(x.grad()[0] == 2.0);
    REQUIRE(x.grad()[1] == -4.0);
}

TEST_CASE("gradients of a multiply-used tensor accumulate") {
    Tensor x = Tensor::from_data({1, 1, 1, 2}, {3.0, 5.0});
    x.set_requires_grad(true);
    Tape tape;
    // loss = sum(x + x) -> dx should be 2 everywhere
    Tensor loss = sum(add(x, x, &tape), &tape);
    tape.backward(loss);
    for (double g : x.grad()) REQUIRE(g == 2.0);
}

TEST_CASE("backward rejects non-scalar loss and detached graphs") {
    Tensor x = Tensor::from_data({1, 1, 1, 2}, {1.0, 2.0});
    x.set_requires_grad(true);
    Tape tape;
    Tensor y = relu(x, &tape);
    REQUIRE_THROWS_AS(tape.backward(y), validation_error);

    Tensor detached = Tensor::scalar(1.0);
    REQUIRE_THROWS_AS(tape.backward(detached), validation_error);

    Tape empty;
    REQUIRE_THROWS_AS(empty.backward(Tensor::scalar(0.0)), validation_error);
}

TEST_CASE("relu gradient is the indicator of positivity") {
    Tensor x = Tensor::from_data({1, 1, 1, 2}, {-1.0, 3.0});
    x.set_requires_grad(true);
    Tape tape;
    Tensor loss = sum(relu(x, &tape), &tape);
    tape.backward(loss);
    REQUIRE(x.grad()[0] == 0.0);
    REQUIRE(x.grad()[1] == 1.0);
}

TEST_CASE("grad_check of sum is exactly zero on dyadic inputs") {
    // Values on a 0.25 grid with eps = 0.5 keep every float operation exact,
    // so the central difference reproduces the gradient bit for bit.
    Rng rng(17);
    Tensor x = Tensor::zeros({1, 2, 3, 3});
    for (double& v : x.mutable_data()) v = rng.uniform_int(-8, 8) * 0.25;
    const double err =
        grad_check([](const Tensor& t, Tape& tape) { return sum(t, &tape); }, x, 0.5);
    REQUIRE(err == 0.0);
}

TEST_CASE("grad_check: sum(sigmoid(x)) under 1e-6") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        Tensor x = rng.uniform_tensor({1, 1, 4, 4}, -3.0, 3.0);
        const double err = grad_check(
            [](const Tensor& t, Tape& tape) { return sum(sigmoid(t, &tape), &tape); }, x, 1e-5);
        REQUIRE(err < 1e-6);
    }
}

TEST_CASE("grad_check: maxpool/unpool chain under 1e-6 with distinct entries") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        // Distinct window entries keep the argmax stable under the probe.
        Rng rng(100 + seed);
        std::vector<double> vals(64);
        std::vector<int> perm(64);
        for (int i = 0; i < 64; ++i) perm[i] = i;
        rng.shuffle(perm);
        for (int i = 0; i < 64; ++i) vals[i] = perm[i] * 0.1;
        Tensor x = Tensor::from_data({1, 1, 8, 8}, std::move(vals));
        auto f = [](const Tensor& t, Tape& tape) {
            auto [pooled, idx] = maxpool2x2(t, &tape);
            Tensor up = maxunpool2x2(pooled, idx, &tape);
            return sum(mul(up, up, &tape), &tape);
        };
        REQUIRE(grad_check(f, x, 1e-5) < 1e-6);
    }
}

TEST_CASE("maxunpool backward routes gradient only to indexed positions") {
    Rng rng(23);
    Tensor x = rng.uniform_tensor({1, 2, 2, 2}, 0.5, 1.5);
    x.set_requires_grad(true);
    auto [pooled, idx] = maxpool2x2(x);
    (void)pooled;

    Tensor small = rng.uniform_tensor({1, 2, 1, 1}, 0.5, 1.5);
    small.set_requires_grad(true);
    Tape tape;
    Tensor up = maxunpool2x2(small, idx, &tape);
    Tensor loss = sum(mul(up, up, &tape), &tape);
    tape.backward(loss);

    // All of the unpooled mass comes back to the pooled cell...
    for (std::size_t i = 0; i < small.grad().size(); ++i)
        REQUIRE_THAT(small.grad()[i], Catch::Matchers::WithinAbs(2.0 * small.data()[i], 1e-12));

    // ...and a finite-difference probe agrees.
    auto f = [&idx](const Tensor& t, Tape& tp) {
        Tensor up = maxunpool2x2(t, idx, &tp);
        return sum(mul(up, up, &tp), &tp);
    };
    REQUIRE(grad_check(f, small, 1e-5) < 1e-6);
}

TEST_CASE("concat backward splits gradients between operands") {
    Tensor a = Tensor::full({1, 2, 2, 2}, 1.0);
    Tensor b = Tensor::full({1, 1, 2, 2}, 2.0);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    Tape tape;
    Tensor cat = concat_channels(a, b, &tape);
    // Sum only the b half: zeros flow into a, ones into b.
    Tensor bh = slice_channels(cat, 2, 3, &tape);
    Tensor loss = sum(bh, &tape);
    tape.backward(loss);
    for (double g : a.grad()) REQUIRE(g == 0.0);
    for (double g : b.grad()) REQUIRE(g == 1.0);
}

TEST_CASE("grad_check: conv2d against finite differences") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(200 + seed);
        Tensor x = rng.uniform_tensor({1, 2, 4, 4}, -1.0, 1.0);
        Tensor k = rng.uniform_tensor({3, 2, 3, 3}, -1.0, 1.0);
        Tensor b = rng.uniform_tensor({1, 3, 1, 1}, -0.5, 0.5);

        auto f_input = [&](const Tensor& t, Tape& tape) {
            Tensor y = conv2d(t, k, b, 1, &tape);
            return sum(mul(y, y, &tape), &tape);
        };
        REQUIRE(grad_check(f_input, x, 1e-5) < 1e-6);

        auto f_kernel = [&](const Tensor& t, Tape& tape) {
            Tensor y = conv2d(x, t, b, 1, &tape);
            return sum(mul(y, y, &tape), &tape);
        };
        REQUIRE(grad_check(f_kernel, k, 1e-5) < 1e-6);

        auto f_bias = [&](const Tensor& t, Tape& tape) {
            Tensor y = conv2d(x, k, t, 1, &tape);
            return sum(mul(y, y, &tape), &tape);
        };
        REQUIRE(grad_check(f_bias, b, 1e-5) < 1e-6);
    }
}

TEST_CASE("grad_check: concat and slice under 1e-6") {
    Rng rng(301);
    Tensor a = rng.uniform_tensor({1, 2, 2, 3}, -1.0, 1.0);
    Tensor b = rng.uniform_tensor({1, 1, 2, 3}, -1.0, 1.0);
    auto f = [&b](const Tensor& t, Tape& tape) {
        Tensor cat = concat_channels(t, b, &tape);
        return sum(mul(cat, cat, &tape), &tape);
    };
    REQUIRE(grad_check(f, a, 1e-5) < 1e-6);
}
