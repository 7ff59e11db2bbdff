#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mvd/tensor.hpp"

using namespace mvd;
using Td = Tensor<double>;

namespace {

Td randn_leaf(Shape shape, Rng& rng, bool requires_grad = true) {
    auto t = Td::randn(std::move(shape), rng);
    return Td::from_data(t.shape(), std::vector<double>(t.data(), t.data() + t.numel()),
                         requires_grad);
}

}  // namespace

TEST_CASE("x*x gradient at 3 is 6") {
    auto x = Td::from_data({1}, {3.0}, true);
    auto y = mul(x, x);
    backward(y);
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("sum gradient is all ones") {
    Rng rng(1);
    auto x = randn_leaf({4, 5}, rng);
    auto y = sum_all(x);
    backward(y);
    for (auto g : x.grad()) CHECK(g == doctest::Approx(1.0));
}

TEST_CASE("repeated backward accumulates until grads are zeroed") {
    auto x = Td::from_data({1}, {2.0}, true);
    auto run = [&] {
        auto y = mul(x, x);
        backward(y);
    };
    run();
    run();
    CHECK(x.grad()[0] == doctest::Approx(8.0));
    x.zero_grad();
    run();
    CHECK(x.grad()[0] == doctest::Approx(4.0));
}

TEST_CASE("backward rejects non-scalar roots and detached graphs") {
    Rng rng(2);
    auto x = randn_leaf({3}, rng);
    CHECK_THROWS_AS(backward(add(x, x)), std::invalid_argument);
    auto frozen = randn_leaf({3}, rng, false);
    CHECK_THROWS_AS(backward(sum_all(frozen)), std::invalid_argument);
}

TEST_CASE("quadratic form grad check is exact to FD roundoff") {
    Rng rng(3);
    auto x = randn_leaf({6}, rng);
    auto a = randn_leaf({6, 6}, rng, false);
    auto report = grad_check(
        [&] {
            auto xr = reshape(x, {1, 6});
            return reshape(matmul(matmul(xr, a), xr, false, true), {1});
        },
        {x});
    CHECK(report.finite);
    CHECK(report.max_rel_error < 1e-8);
}

TEST_CASE("layer norm grads vs central differences") {
    Rng rng(4);
    for (int trial = 0; trial < 5; ++trial) {
        auto x = randn_leaf({3, 7}, rng);
        auto g = randn_leaf({7}, rng);
        auto b = randn_leaf({7}, rng);
        auto w = Td::randn({3, 7}, rng);
        auto report = grad_check([&] { return mean_all(mul(layer_norm(x, g, b), w)); }, {x, g, b});
        CHECK(report.finite);
        CHECK(report.max_rel_error < 1e-4);
    }
}

TEST_CASE("elementwise and reduction ops pass grad check on random shapes") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        Shape shape{rng.uniform_int(1, 4), rng.uniform_int(1, 5)};
        auto x = randn_leaf(shape, rng);
        auto w = Td::randn(shape, rng);
        auto probe = [&](Td t) { return mean_all(mul(t, w)); };
        auto pick = trial % 8;
        auto report = grad_check(
            [&]() -> Td {
                switch (pick) {
                    case 0: return probe(gelu(x));
                    case 1: return probe(silu(x));
                    case 2: return probe(tanh_(x));
                    case 3: return probe(sigmoid(x));
                    case 4: return probe(exp_(x));
                    case 5: return probe(square(x));
                    case 6: return probe(add_scalar(mul_scalar(x, 1.7), -0.3));
                    default:
                        return mean_all(mul(sum_axis(x, 0, true),
                                            Td::full({1, x.dim(1)}, 0.7)));
                }
            },
            {x});
        CHECK(report.finite);
        CHECK(report.max_rel_error < 1e-4);
    }
}

TEST_CASE("broadcast binary ops and their reduction gradients") {
    Rng rng(6);
    auto a = randn_leaf({2, 3, 4}, rng);
    auto b = randn_leaf({3, 1}, rng);
    auto y = add(a, b);
    CHECK(y.shape() == Shape{2, 3, 4});
    auto report = grad_check(
        [&] { return mean_all(mul(div_(a, add_scalar(square(b), 1.0)), add(a, b))); }, {a, b});
    CHECK(report.max_rel_error < 1e-4);

    // value spot check
    auto c = Td::from_data({2}, {10.0, 20.0}, false);
    auto d = Td::from_data({3, 2}, {1, 2, 3, 4, 5, 6}, false);
    auto s = add(c, d);
    CHECK(s.data()[0] == 11.0);
    CHECK(s.data()[5] == 26.0);
}

TEST_CASE("matmul with transposes matches manual computation and grad check") {
    Rng rng(7);
    for (int ta = 0; ta < 2; ++ta)
        for (int tb = 0; tb < 2; ++tb) {
            auto a = randn_leaf(ta ? Shape{4, 3} : Shape{3, 4}, rng);
            auto b = randn_leaf(tb ? Shape{5, 4} : Shape{4, 5}, rng);
            auto w = Td::randn({3, 5}, rng);
            auto report =
                grad_check([&] { return mean_all(mul(matmul(a, b, ta, tb), w)); }, {a, b});
            CHECK(report.max_rel_error < 1e-4);
        }
    // batched
    auto a = randn_leaf({2, 3, 4}, rng);
    auto b = randn_leaf({2, 4, 5}, rng);
    auto w = Td::randn({2, 3, 5}, rng);
    auto report = grad_check([&] { return mean_all(mul(matmul(a, b), w)); }, {a, b});
    CHECK(report.max_rel_error < 1e-4);

    auto m1 = Td::from_data({2, 2}, {1, 2, 3, 4}, false);
    auto m2 = Td::from_data({2, 2}, {5, 6, 7, 8}, false);
    auto prod = matmul(m1, m2);
    CHECK(prod.data()[0] == 19.0);
    CHECK(prod.data()[3] == 50.0);
}

TEST_CASE("conv2d stride 1 and 2 with both paddings pass grad check") {
    Rng rng(8);
    for (int trial = 0; trial < 8; ++trial) {
        const int stride = (trial % 2) + 1;
        const PadMode mode = (trial / 2) % 2 ? PadMode::Replicate : PadMode::Zero;
        const int h = rng.uniform_int(4, 6);
        auto x = randn_leaf({2, 2, h, h}, rng);
        auto w = randn_leaf({3, 2, 3, 3}, rng);
        auto bias = randn_leaf({3}, rng);
        auto report = grad_check(
            [&] {
                auto padded = pad2d(x, 1, 1, 1, 1, mode);
                return mean_all(square(conv2d(padded, w, bias, stride)));
            },
            {x, w, bias});
        CHECK(report.finite);
        CHECK(report.max_rel_error < 1e-4);
    }
}

TEST_CASE("conv2d known value") {
    auto x = Td::full({1, 1, 3, 3}, 1.0);
    auto w = Td::full({1, 1, 3, 3}, 1.0);
    auto y = conv2d(x, w, Td(), 1);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.item() == doctest::Approx(9.0));
}

TEST_CASE("conv_transpose2d inverts shapes and passes grad check") {
    Rng rng(9);
    auto x = randn_leaf({2, 3, 4, 4}, rng);
    auto w = randn_leaf({3, 2, 2, 2}, rng);
    auto bias = randn_leaf({2}, rng);
    auto y = conv_transpose2d(x, w, bias, 2);
    CHECK(y.shape() == Shape{2, 2, 8, 8});
    auto report =
        grad_check([&] { return mean_all(square(conv_transpose2d(x, w, bias, 2))); }, {x, w, bias});
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("upsample_nearest2 duplicates pixels and passes grad check") {
    Rng rng(10);
    auto x = randn_leaf({1, 2, 3, 3}, rng);
    auto y = upsample_nearest2(x);
    CHECK(y.shape() == Shape{1, 2, 6, 6});
    CHECK(y.data()[0] == x.data()[0]);
    CHECK(y.data()[1] == x.data()[0]);
    auto w = Td::randn({1, 2, 6, 6}, rng);
    auto report = grad_check([&] { return mean_all(mul(upsample_nearest2(x), w)); }, {x});
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("group norm normalizes per group and passes grad check") {
    Rng rng(11);
    auto x = randn_leaf({2, 4, 3, 3}, rng);
    auto g = randn_leaf({4}, rng);
    auto b = randn_leaf({4}, rng);
    auto w = Td::randn({2, 4, 3, 3}, rng);
    auto report = grad_check([&] { return mean_all(mul(group_norm(x, 2, g, b), w)); }, {x, g, b});
    CHECK(report.max_rel_error < 1e-4);

    auto y = group_norm(x, 1, Td(), Td());
    double mean = 0;
    for (int i = 0; i < 36; ++i) mean += y.data()[i];
    CHECK(mean / 36 == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("QK-normalized attention block passes grad check") {
    Rng rng(12);
    const int s = 5, dh = 4;
    auto q = randn_leaf({s, dh}, rng);
    auto k = randn_leaf({s, dh}, rng);
    auto v = randn_leaf({s, dh}, rng);
    auto w = Td::randn({s, dh}, rng);
    auto report = grad_check(
        [&] {
            auto qn = l2_normalize_last(q);
            auto kn = l2_normalize_last(k);
            auto att = softmax_last(mul_scalar(matmul(qn, kn, false, true), 10.0));
            return mean_all(mul(matmul(att, v), w));
        },
        {q, k, v});
    CHECK(report.finite);
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("l2 normalize produces exactly unit rows") {
    Rng rng(13);
    auto x = Td::randn({7, 9}, rng);
    auto y = l2_normalize_last(x);
    for (int r = 0; r < 7; ++r) {
        double s = 0;
        for (int i = 0; i < 9; ++i) s += y.data()[r * 9 + i] * y.data()[r * 9 + i];
        CHECK(std::abs(std::sqrt(s) - 1.0) < 1e-6);
    }
    auto z = Td::zeros({2, 3});
    CHECK_THROWS_AS(l2_normalize_last(z), NumericalError);
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
    Rng rng(14);
    auto x = Td::randn({4, 6}, rng);
    auto y = softmax_last(x);
    for (int r = 0; r < 4; ++r) {
        double s = 0;
        for (int i = 0; i < 6; ++i) s += y.data()[r * 6 + i];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    auto shifted = softmax_last(add_scalar(x, 100.0));
    for (int i = 0; i < 24; ++i) CHECK(shifted.data()[i] == doctest::Approx(y.data()[i]));
}

TEST_CASE("concat and slice round trip with gradients") {
    Rng rng(15);
    auto a = randn_leaf({2, 3, 2}, rng);
    auto b = randn_leaf({2, 1, 2}, rng);
    auto cat = concat<double>({a, b}, 1);
    CHECK(cat.shape() == Shape{2, 4, 2});
    auto back = slice(cat, 1, 0, 3);
    for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(back.data()[i] == a.data()[i]);
    auto w = Td::randn({2, 4, 2}, rng);
    auto report = grad_check([&] { return mean_all(mul(concat<double>({a, b}, 1), w)); }, {a, b});
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("permute and reshape invert each other with gradients") {
    Rng rng(16);
    auto x = randn_leaf({2, 3, 4}, rng);
    auto p = permute(x, {2, 0, 1});
    CHECK(p.shape() == Shape{4, 2, 3});
    auto back = permute(p, {1, 2, 0});
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(back.data()[i] == x.data()[i]);
    auto w = Td::randn({4, 2, 3}, rng);
    auto report = grad_check([&] { return mean_all(mul(permute(x, {2, 0, 1}), w)); }, {x});
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("patchify token layout and exact inverse") {
    Rng rng(17);
    auto x = randn_leaf({2, 3, 4, 4}, rng);
    auto tok = patchify(x, 2);
    CHECK(tok.shape() == Shape{2 * 2 * 2, 3 * 2 * 2});
    auto back = unpatchify(tok, 2, 3, 4, 4, 2);
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(back.data()[i] == x.data()[i]);
    auto w = Td::randn({8, 12}, rng);
    auto report = grad_check([&] { return mean_all(mul(patchify(x, 2), w)); }, {x});
    CHECK(report.max_rel_error < 1e-4);
    CHECK_THROWS_AS(patchify(x, 3), std::invalid_argument);
}

TEST_CASE("gather_rows selects and scatters gradients") {
    Rng rng(18);
    auto table = randn_leaf({5, 3}, rng);
    std::vector<std::int64_t> idx{1, 1, 4};
    auto out = gather_rows(table, idx);
    CHECK(out.dim(0) == 3);
    CHECK(out.data()[0] == table.data()[3]);
    auto w = Td::randn({3, 3}, rng);
    auto report = grad_check([&] { return mean_all(mul(gather_rows(table, idx), w)); }, {table});
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("detach stops gradient flow") {
    auto x = Td::from_data({1}, {3.0}, true);
    auto y = mul(detach(x), x);
    backward(y);
    CHECK(x.grad()[0] == doctest::Approx(3.0));
}

TEST_CASE("check_finite detects NaN and Inf") {
    auto x = Td::from_data({3}, {1.0, std::nan(""), 2.0}, false);
    CHECK_THROWS_AS(check_finite(x, "probe"), NumericalError);
    auto y = Td::from_data({1}, {std::numeric_limits<double>::infinity()}, false);
    CHECK_THROWS_AS(check_finite(y, "probe"), NumericalError);
    auto ok = Td::from_data({2}, {0.0, -1.0}, false);
    CHECK_NOTHROW(check_finite(ok, "probe"));
}

TEST_CASE("no-grad mode skips graph recording") {
    auto x = Td::from_data({1}, {2.0}, true);
    NoGradGuard ng;
    auto y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("forward is deterministic and parallel batched evaluation matches serial") {
    Rng rng(19);
    const int items = 8;
    std::vector<Td> inputs;
    for (int i = 0; i < items; ++i) inputs.push_back(Td::randn({4, 4, 6, 6}, rng));
    auto w = Td::randn({8, 4, 3, 3}, rng);
    auto eval = [&](const Td& in) {
        NoGradGuard ng;
        auto y = conv2d(pad2d(in, 1, 1, 1, 1, PadMode::Zero), w, Td(), 1);
        return mean_all(gelu(y)).item();
    };
    std::vector<double> serial(items), parallel(items);
    for (int i = 0; i < items; ++i) serial[i] = eval(inputs[i]);
    parallel_for(0, items, 2, [&](std::int64_t i) { parallel[i] = eval(inputs[i]); });
    for (int i = 0; i < items; ++i) {
        CHECK(std::abs(parallel[i] - serial[i]) <= 1e-6 * std::max(1.0, std::abs(serial[i])));
        CHECK(eval(inputs[i]) == serial[i]);
    }
}

TEST_CASE("grad_check reports worst input location") {
    Rng rng(20);
    auto x = randn_leaf({3}, rng);
    auto report = grad_check([&] { return sum_all(square(x)); }, {x});
    CHECK(report.max_rel_error < 1e-8);
    CHECK_FALSE(report.worst_input.empty());
}
