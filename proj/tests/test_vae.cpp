#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mvd/scenes.hpp"
#include "mvd/vae.hpp"

using namespace mvd;

namespace {

VaeConfig tiny_config(VaeKind kind, int in_ch, std::vector<int> blocks, int d) {
    VaeConfig c;
    c.kind = kind;
    c.in_channels = in_ch;
    c.latent_dim = d;
    c.block_channels = std::move(blocks);
    c.padding_mode = kind == VaeKind::Raymap ? PadMode::Replicate : PadMode::Zero;
    c.use_group_norm = kind == VaeKind::Image;
    return c;
}

}  // namespace

TEST_CASE("shape contracts hold for f in {2,4,8}") {
    Rng rng(1);
    for (int levels = 2; levels <= 4; ++levels) {
        std::vector<int> blocks;
        for (int i = 0; i < levels; ++i) blocks.push_back(4 << std::min(i, 2));
        auto cfg = tiny_config(VaeKind::Image, 3, blocks, 3);
        const int f = 1 << (levels - 1);
        CHECK(cfg.downscale_factor() == f);
        Vae<double> vae(cfg, rng);
        const int res = 8 * f / 2;  // any divisible resolution
        auto x = Tensor<double>::randn({2, 3, res, res}, rng);
        auto [mean, logvar] = vae.encode(x);
        CHECK(mean.shape() == Shape{2, 3, res / f, res / f});
        CHECK(logvar.shape() == mean.shape());
        auto recon = vae.decode_raw(mean);
        CHECK(recon.shape() == x.shape());
    }
}

TEST_CASE("32x32 with f=8 and d=16 yields a 4x4x16 latent") {
    Rng rng(2);
    auto cfg = tiny_config(VaeKind::Image, 3, {4, 4, 8, 8}, 16);
    Vae<double> vae(cfg, rng);
    auto x = Tensor<double>::randn({1, 3, 32, 32}, rng);
    auto z = vae.encode(x).first;
    CHECK(z.shape() == Shape{1, 16, 4, 4});
    CHECK_THROWS_AS(vae.encode(Tensor<double>::randn({1, 3, 20, 20}, rng)),
                    std::invalid_argument);
}

TEST_CASE("paper and desk configurations carry the published constants") {
    const auto ip = VaeConfig::image_paper();
    CHECK(ip.latent_dim == 16);
    CHECK(ip.block_channels == std::vector<int>{128, 256, 512, 512});
    CHECK(ip.downscale_factor() == 8);
    const auto rp = VaeConfig::raymap_paper();
    CHECK(rp.latent_dim == 16);
    CHECK(rp.block_channels == std::vector<int>{32, 64, 128, 128});
    CHECK(rp.in_channels == 6);
    // the raymap VAE avoids corner artifacts: replicate padding, no group norm
    CHECK(rp.padding_mode == PadMode::Replicate);
    CHECK_FALSE(rp.use_group_norm);
    const auto id_ = VaeConfig::image_desk();
    CHECK(id_.block_channels == std::vector<int>{32, 64, 128, 128});
    CHECK(id_.latent_dim == 4);
    const auto rd = VaeConfig::raymap_desk();
    CHECK(rd.block_channels == std::vector<int>{16, 32, 64, 64});

    auto round = VaeConfig::from_json(rp.to_json());
    CHECK(round.to_json() == rp.to_json());
}

TEST_CASE("decoded images are clamped and decoded raymaps have unit directions") {
    Rng rng(3);
    auto icfg = tiny_config(VaeKind::Image, 3, {4, 8}, 2);
    Vae<double> ivae(icfg, rng);
    auto img = ivae.decode(Tensor<double>::randn({2, 2, 4, 4}, rng, 5.0));
    for (std::int64_t i = 0; i < img.numel(); ++i) {
        CHECK(img.data()[i] >= 0.0);
        CHECK(img.data()[i] <= 1.0);
    }

    auto rcfg = tiny_config(VaeKind::Raymap, 6, {4, 8}, 2);
    Vae<double> rvae(rcfg, rng);
    auto rm = rvae.decode(Tensor<double>::randn({2, 2, 4, 4}, rng));
    const std::int64_t hw = rm.dim(2) * rm.dim(3);
    for (std::int64_t f = 0; f < rm.dim(0); ++f)
        for (std::int64_t p = 0; p < hw; ++p) {
            double norm = 0;
            for (int c = 3; c < 6; ++c) {
                const double v = rm.data()[(f * 6 + c) * hw + p];
                norm += v * v;
            }
            CHECK(std::abs(std::sqrt(norm) - 1.0) < 1e-6);
        }
}

TEST_CASE("KL of a posterior equal to the prior is zero") {
    auto mean = Tensor<double>::zeros({2, 3});
    auto logvar = Tensor<double>::zeros({2, 3});
    CHECK(kl_divergence(mean, logvar).item() == doctest::Approx(0.0).epsilon(1e-12));

    Rng rng(4);
    auto m2 = Tensor<double>::randn({2, 3}, rng);
    CHECK(kl_divergence(m2, logvar).item() > 0.0);
}

TEST_CASE("downscale_mask is area-average pooling") {
    auto ones = Tensor<float>::full({4, 4}, 1.f);
    auto d1 = downscale_mask(ones, 2);
    for (int i = 0; i < 4; ++i) CHECK(d1.data()[i] == 1.f);

    // checkerboard, f=2 -> all 0.5
    std::vector<float> checker(16);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) checker[r * 4 + c] = float((r + c) % 2);
    auto d2 = downscale_mask(Tensor<float>::from_data({4, 4}, std::move(checker)), 2);
    for (int i = 0; i < 4; ++i) CHECK(d2.data()[i] == 0.5f);

    // left half known
    std::vector<float> half(16, 0.f);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 2; ++c) half[r * 4 + c] = 1.f;
    auto d3 = downscale_mask(Tensor<float>::from_data({4, 4}, std::move(half)), 2);
    CHECK(d3.data()[0] == 1.f);
    CHECK(d3.data()[1] == 0.f);
    CHECK(d3.data()[2] == 1.f);
    CHECK(d3.data()[3] == 0.f);

    CHECK_THROWS_AS(downscale_mask(ones, 3), std::invalid_argument);
}

TEST_CASE("encoder and decoder pass grad check on the tiny config") {
    Rng rng(5);
    auto cfg = tiny_config(VaeKind::Image, 3, {4, 8}, 2);
    Vae<double> vae(cfg, rng);
    auto x = Tensor<double>::randn({1, 3, 8, 8}, rng);
    x.node()->requires_grad = true;

    std::vector<Tensor<double>> inputs = {x};
    // also perturb a couple of parameters to cover the weight path
    inputs.push_back(vae.params().find("enc.stem.w"));
    inputs.push_back(vae.params().find("dec.head.b"));
    auto report = grad_check(
        [&] {
            auto z = vae.encode(x).first;
            return mean_all(square(vae.decode_raw(z)));
        },
        inputs);
    CHECK(report.finite);
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("raymap-style replicate/no-norm config passes grad check") {
    Rng rng(6);
    auto cfg = tiny_config(VaeKind::Raymap, 6, {4, 8}, 2);
    Vae<double> vae(cfg, rng);
    auto x = Tensor<double>::randn({1, 6, 8, 8}, rng);
    x.node()->requires_grad = true;
    auto report = grad_check(
        [&] {
            auto [mean, logvar] = vae.encode(x);
            return add(mean_all(square(vae.decode_raw(mean))), kl_divergence(mean, logvar));
        },
        {x, vae.params().find("enc.mid.conv1.w")});
    CHECK(report.finite);
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("training with beta=0 reduces the loss within one epoch") {
    // ~1k frames from renders, tiny vae, single epoch coverage
    auto scene = generate_scene(3);
    Rng rng(7);
    std::vector<Tensor<float>> frames;
    for (int i = 0; i < 64; ++i) {
        Camera cam = look_at_camera(
            Vec3(2 * std::cos(i * 0.1), 0.8, 2 * std::sin(i * 0.1)), Vec3(0, 0, 0), 16, 16, 8, 8);
        auto rb = render_view(scene, cam, 16, 16);
        std::vector<float> chw(3 * 16 * 16);
        for (int p = 0; p < 256; ++p)
            for (int c = 0; c < 3; ++c) chw[c * 256 + p] = rb.image[p * 3 + c];
        for (int rep = 0; rep < 16; ++rep)  // replicate to ~1k frames
            frames.push_back(Tensor<float>::from_data({3, 16, 16}, std::vector<float>(chw)));
    }
    VaeTrainConfig tc;
    tc.steps = static_cast<int>(frames.size() / 8);  // one epoch
    tc.batch = 8;
    tc.beta_kl = 0.0;
    tc.lr = 3e-4;
    tc.seed = 9;
    auto result = train_vae(frames, tiny_config(VaeKind::Image, 3, {8, 16}, 2), tc);
    CHECK_FALSE(result.diverged);
    CHECK(result.first_epoch_loss < result.init_loss);
}

TEST_CASE("divergence aborts with the last-good checkpoint") {
    Rng rng(8);
    std::vector<Tensor<float>> frames;
    for (int i = 0; i < 8; ++i) frames.push_back(Tensor<float>::rand_uniform({3, 8, 8}, rng));
    VaeTrainConfig tc;
    tc.steps = 400;
    tc.batch = 4;
    tc.lr = 1e12;  // guaranteed blow-up
    tc.seed = 1;
    auto result = train_vae(frames, tiny_config(VaeKind::Image, 3, {4, 8}, 2), tc);
    CHECK(result.diverged);
    // the returned checkpoint is still loadable and finite
    auto vae = load_vae<float>(result.checkpoint);
    for (auto& [name, t] : vae->params().entries())
        for (std::int64_t i = 0; i < t.numel(); ++i) CHECK(std::isfinite(t.data()[i]));
}

TEST_CASE("checkpoint round trip preserves encode output and latent scale") {
    Rng rng(9);
    auto cfg = tiny_config(VaeKind::Image, 3, {4, 8}, 2);
    Vae<float> vae(cfg, rng);
    vae.latent_scale = 2.5f;
    auto ck = vae_checkpoint(vae);
    auto loaded = load_vae<float>(ck);
    CHECK(loaded->latent_scale == doctest::Approx(2.5f));
    NoGradGuard ng;
    auto x = Tensor<float>::randn({1, 3, 8, 8}, rng);
    auto a = vae.encode_scaled(x);
    auto b = loaded->encode_scaled(x);
    for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
}
