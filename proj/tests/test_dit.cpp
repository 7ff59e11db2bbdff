#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "mvd/dit.hpp"

using namespace mvd;

namespace {

DitConfig tiny_config(int d = 2, IndexMode mode = IndexMode::Full) {
    DitConfig c;
    c.width = 16;
    c.depth = 2;
    c.heads = 2;
    c.patch_size = 2;
    c.latent_dim = d;
    c.downscale = 8;
    c.mlp_ratio = 2;
    c.index_mode = mode;
    c.fixed_table_size = 16;
    return c;
}

template <typename T>
Tensor<T> random_assembled(const DitConfig& cfg, int frames, int h, int w, Rng& rng) {
    return Tensor<T>::randn({frames, cfg.channels(), h, w}, rng);
}

// fresh models start as the identity (zero AdaLN gates, zero head); tests that
// compare outputs need non-degenerate weights
template <typename T>
void randomize_params(MvDit<T>& model, Rng& rng) {
    for (auto& [name, t] : model.params().entries()) {
        Tensor<T> tt = t;
        for (std::int64_t i = 0; i < tt.numel(); ++i)
            tt.data()[i] += T(0.25) * T(rng.normal());
    }
}

}  // namespace

TEST_CASE("channel arithmetic: 4d+2") {
    CHECK(tiny_config(16).channels() == 66);  // paper d
    CHECK(tiny_config(4).channels() == 18);   // desk d
}

TEST_CASE("assemble_channels produces the documented layout") {
    const int d = 3, n = 2, h = 2, w = 2;
    auto block = [&](double v, int ch) { return Tensor<double>::full({n, ch, h, w}, v); };
    auto s = assemble_channels(block(1, d), block(2, d), block(3, 1), block(4, d), block(5, d),
                               block(6, 1));
    CHECK(s.shape() == Shape{n, 4 * d + 2, h, w});
    // channel order: noisy image, known image, image mask, noisy ray, known ray, ray mask
    const double expect[4 * 3 + 2] = {1, 1, 1, 2, 2, 2, 3, 4, 4, 4, 5, 5, 5, 6};
    for (int c = 0; c < 4 * d + 2; ++c)
        CHECK(s.data()[c * h * w] == expect[c]);
    CHECK_THROWS_AS(assemble_channels(block(1, d), block(2, d + 1), block(3, 1), block(4, d),
                                      block(5, d), block(6, 1)),
                    std::invalid_argument);
}

TEST_CASE("inference keys are uniformly spaced, training keys stratified and distinct") {
    const auto keys = inference_keys(16);
    for (int i = 0; i < 16; ++i) CHECK(keys[i] == doctest::Approx(i / 16.0));

    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        auto tk = training_keys(8, rng);
        std::set<double> unique(tk.begin(), tk.end());
        CHECK(unique.size() == 8);
        for (double k : tk) {
            CHECK(k >= 0.0);
            CHECK(k < 1.0);
        }
        // stratified: sorted keys land one per bin of width 1/8
        std::vector<double> sorted(tk.begin(), tk.end());
        std::sort(sorted.begin(), sorted.end());
        for (int i = 0; i < 8; ++i) {
            CHECK(sorted[i] >= i / 8.0);
            CHECK(sorted[i] < (i + 1) / 8.0);
        }
    }
}

TEST_CASE("forward output shapes and head split") {
    Rng rng(2);
    auto cfg = tiny_config();
    MvDit<double> model(cfg, rng);
    const int n = 3, h = 4, w = 4;
    auto s = random_assembled<double>(cfg, n, h, w, rng);
    auto out = model.forward(s, 1, n, inference_keys(n), {0.5});
    CHECK(out.image_velocity.shape() == Shape{n, cfg.latent_dim, h, w});
    CHECK(out.ray_velocity.shape() == Shape{n, cfg.latent_dim, h, w});
}

TEST_CASE("two tokens at the same grid position differ only via the index embedding") {
    Rng rng(3);
    auto cfg = tiny_config(2, IndexMode::None);
    MvDit<double> model(cfg, rng);
    randomize_params(model, rng);
    // identical frame content: with no index embedding the outputs per frame
    // must be identical
    auto frame = Tensor<double>::randn({1, cfg.channels(), 4, 4}, rng);
    auto s = concat<double>({frame, frame}, 0);
    auto out = model.forward(s, 1, 2, {0.0, 0.5}, {0.3});
    const std::int64_t per = out.image_velocity.numel() / 2;
    for (std::int64_t i = 0; i < per; ++i)
        CHECK(out.image_velocity.data()[i] ==
              doctest::Approx(out.image_velocity.data()[per + i]).epsilon(1e-9));

    // with the full index embedding they must differ
    auto cfg2 = tiny_config(2, IndexMode::Full);
    MvDit<double> model2(cfg2, rng);
    randomize_params(model2, rng);
    auto out2 = model2.forward(s, 1, 2, {0.0, 0.5}, {0.3});
    double diff = 0;
    for (std::int64_t i = 0; i < per; ++i)
        diff += std::abs(out2.image_velocity.data()[i] - out2.image_velocity.data()[per + i]);
    CHECK(diff > 1e-6);
}

TEST_CASE("frame permutation equivariance") {
    Rng rng(4);
    auto cfg = tiny_config();
    MvDit<double> model(cfg, rng);
    randomize_params(model, rng);
    const int n = 4, h = 4, w = 4;
    auto s = random_assembled<double>(cfg, n, h, w, rng);
    const auto keys = inference_keys(n);
    auto out = model.forward(s, 1, n, keys, {0.7});

    // permute frames together with their keys
    const std::vector<int> perm = {2, 0, 3, 1};
    std::vector<Tensor<double>> parts;
    std::vector<double> pkeys;
    for (int i : perm) {
        parts.push_back(slice(s, 0, i, 1));
        pkeys.push_back(keys[i]);
    }
    auto out_p = model.forward(concat<double>(parts, 0), 1, n, pkeys, {0.7});
    const std::int64_t per = out.image_velocity.numel() / n;
    for (int i = 0; i < n; ++i)
        for (std::int64_t k = 0; k < per; ++k) {
            const double a = out.image_velocity.data()[perm[i] * per + k];
            const double b = out_p.image_velocity.data()[i * per + k];
            CHECK(std::abs(a - b) < 1e-5);
        }
}

TEST_CASE("duplicate index keys within a sequence are rejected") {
    Rng rng(5);
    auto cfg = tiny_config();
    MvDit<double> model(cfg, rng);
    auto s = random_assembled<double>(cfg, 2, 4, 4, rng);
    CHECK_THROWS_AS(model.forward(s, 1, 2, {0.25, 0.25}, {0.5}), std::invalid_argument);
}

TEST_CASE("keys and queries are unit normalized before attention") {
    Rng rng(6);
    auto cfg = tiny_config();
    MvDit<double> model(cfg, rng);
    typename MvDit<double>::DebugProbe probe;
    model.probe = &probe;
    auto s = random_assembled<double>(cfg, 2, 4, 4, rng);
    model.forward(s, 1, 2, inference_keys(2), {0.5});
    CHECK(std::abs(probe.min_qk_norm - 1.0) < 1e-6);
    CHECK(std::abs(probe.max_qk_norm - 1.0) < 1e-6);
}

TEST_CASE("variable sequence length without weight changes") {
    Rng rng(7);
    auto cfg = tiny_config();
    MvDit<double> model(cfg, rng);
    for (int n : {1, 2, 5, 16, 64}) {
        auto s = random_assembled<double>(cfg, n, 4, 4, rng);
        auto out = model.forward(s, 1, n, inference_keys(n), {0.5});
        CHECK(out.image_velocity.dim(0) == n);
    }
}

TEST_CASE("fixed index table accepts indices beyond the trained range") {
    Rng rng(8);
    auto cfg = tiny_config(2, IndexMode::Fixed);
    cfg.fixed_table_size = 16;
    MvDit<double> model(cfg, rng);
    auto s = random_assembled<double>(cfg, 12, 4, 4, rng);
    std::vector<double> keys(12);
    for (int i = 0; i < 12; ++i) keys[i] = i;
    CHECK_NOTHROW(model.forward(s, 1, 12, keys, {0.5}));
    std::vector<double> bad = keys;
    bad[0] = 99;
    CHECK_THROWS_AS(model.forward(s, 1, 12, bad, {0.5}), std::invalid_argument);
}

TEST_CASE("two-layer toy config passes grad check") {
    Rng rng(9);
    auto cfg = tiny_config();
    MvDit<double> model(cfg, rng);
    randomize_params(model, rng);
    const int n = 2, h = 2, w = 2;
    cfg.patch_size = 2;
    auto s = Tensor<double>::randn({n, cfg.channels(), h, w}, rng);
    s.node()->requires_grad = true;
    std::vector<Tensor<double>> inputs = {s, model.params().find("block0.qkv.w"),
                                          model.params().find("block1.mod.w"),
                                          model.params().find("head.w"),
                                          model.params().find("block0.attn_scale")};
    auto report = grad_check(
        [&] {
            auto out = model.forward(s, 1, n, inference_keys(n), {0.4});
            return add(mean_all(square(out.image_velocity)),
                       mean_all(square(out.ray_velocity)));
        },
        inputs);
    CHECK(report.finite);
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("non-finite activations abort with a diagnostic") {
    Rng rng(10);
    auto cfg = tiny_config();
    MvDit<double> model(cfg, rng);
    auto w = model.params().find("head.w");
    w.data()[0] = std::numeric_limits<double>::infinity();
    auto s = random_assembled<double>(cfg, 2, 4, 4, rng);
    CHECK_THROWS_AS(model.forward(s, 1, 2, inference_keys(2), {0.5}), NumericalError);
}

TEST_CASE("dit config json round trip") {
    auto cfg = tiny_config(4, IndexMode::Fixed);
    auto back = DitConfig::from_json(cfg.to_json());
    CHECK(back.to_json() == cfg.to_json());
    CHECK(back.index_mode == IndexMode::Fixed);
}

TEST_CASE("checkpoint fill restores forward behaviour") {
    Rng rng(11);
    auto cfg = tiny_config();
    MvDit<float> model(cfg, rng);
    randomize_params(model, rng);
    Checkpoint ck;
    ck.put_params(model.params(), "dit.");
    Rng rng2(99);
    MvDit<float> other(cfg, rng2);
    fill_dit(other, ck, "dit.");
    NoGradGuard ng;
    auto s = random_assembled<float>(cfg, 2, 4, 4, rng);
    auto a = model.forward(s, 1, 2, inference_keys(2), {0.5});
    auto b = other.forward(s, 1, 2, inference_keys(2), {0.5});
    for (std::int64_t i = 0; i < a.image_velocity.numel(); ++i)
        CHECK(a.image_velocity.data()[i] == b.image_velocity.data()[i]);
}
