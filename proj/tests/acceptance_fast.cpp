// Acceptance suite, fast half: geometry round-trip, gradient correctness,
// flow-matching identities, CFG degeneracy, tiling equivalence, the rotation
// metric oracle and the normal losses. One pass/fail line per criterion.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdio>

#include "mvd/flow.hpp"
#include "mvd/metrics.hpp"
#include "mvd/normalreg.hpp"
#include "mvd/pipeline.hpp"
#include "mvd/solver.hpp"

using namespace mvd;

namespace {

void report(const char* name, bool pass, const std::string& detail) {
    std::printf("[ACCEPT] %-38s %s  (%s)\n", name, pass ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
}

Camera random_camera(Rng& rng, int w = 32, int h = 32) {
    const double fx = rng.uniform(0.8, 2.5) * w;
    const double fy = rng.uniform(0.8, 2.5) * h;
    const double cx = rng.uniform(0.3, 0.7) * w;
    const double cy = rng.uniform(0.3, 0.7) * h;
    const Vec3 pos(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
    Vec3 target(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
    if ((target - pos).norm() < 0.5) target += Vec3(0, 0, 3);
    return look_at_camera(pos, target, fx, fy, cx, cy);
}

Tensor<double> randn_leaf(Shape shape, Rng& rng) {
    auto t = Tensor<double>::randn(std::move(shape), rng);
    t.node()->requires_grad = true;
    return t;
}

struct TinyWorld {
    std::unique_ptr<Vae<double>> image_vae, raymap_vae;
    std::unique_ptr<MvDit<double>> model;
    SequenceCodec<double> codec;

    explicit TinyWorld(std::uint64_t seed) {
        Rng rng(seed);
        VaeConfig ic;
        ic.in_channels = 3;
        ic.latent_dim = 2;
        ic.block_channels = {4, 8};
        VaeConfig rc = ic;
        rc.kind = VaeKind::Raymap;
        rc.in_channels = 6;
        rc.padding_mode = PadMode::Replicate;
        rc.use_group_norm = false;
        image_vae = std::make_unique<Vae<double>>(ic, rng);
        raymap_vae = std::make_unique<Vae<double>>(rc, rng);
        image_vae->params().set_requires_grad(false);
        raymap_vae->params().set_requires_grad(false);
        DitConfig dc;
        dc.width = 16;
        dc.depth = 1;
        dc.heads = 2;
        dc.patch_size = 2;
        dc.latent_dim = 2;
        dc.downscale = 2;
        dc.mlp_ratio = 2;
        model = std::make_unique<MvDit<double>>(dc, rng);
        for (auto& [name, t] : model->params().entries()) {
            Tensor<double> tt = t;
            for (std::int64_t i = 0; i < tt.numel(); ++i) tt.data()[i] += 0.25 * rng.normal();
        }
        codec.image_vae = image_vae.get();
        codec.raymap_vae = raymap_vae.get();
    }
};

MultiViewSequence arc_sequence(int n, int res, std::uint64_t seed) {
    Rng rng(seed);
    MultiViewSequence seq;
    seq.height = seq.width = res;
    const std::size_t hw = std::size_t(res) * res;
    std::vector<Camera> cams;
    for (int i = 0; i < n; ++i) {
        const double a = 2.0 * M_PI * i / std::max(1, n);
        cams.push_back(look_at_camera(Vec3(2 * std::cos(a), 1.0, 2 * std::sin(a)), Vec3(0, 0, 0),
                                      res, res, res / 2.0, res / 2.0));
    }
    auto normalized = normalize_sequence(cams, 0).cameras;
    for (int i = 0; i < n; ++i) {
        SequenceFrame f;
        f.image.resize(hw * 3);
        for (auto& v : f.image) v = float(rng.uniform());
        f.raymap = camera_to_raymap(normalized[i], res, res);
        f.image_mask.assign(hw, i % 2 == 0 ? 1.f : 0.f);
        f.ray_mask.assign(hw, 1.f);
        seq.frames.push_back(std::move(f));
    }
    return seq;
}

}  // namespace

TEST_CASE("criterion 1: geometry round-trip at 0.01 deg / 1e-6 over 1000 cameras") {
    Rng rng(1001);
    double worst_rot = 0, worst_center = 0;
    int failed = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const Camera cam = random_camera(rng);
        const auto rm = camera_to_raymap(cam, 32, 32);
        const auto rep = solve_pinhole(rm);
        const double rot = rotation_geodesic_deg(rep.camera.rotation, cam.rotation);
        const double ctr = (rep.camera.center - cam.center).norm();
        worst_rot = std::max(worst_rot, rot);
        worst_center = std::max(worst_center, ctr);
        if (!rep.converged || rot >= 0.01 || ctr >= 1e-6) ++failed;
    }

    // runtime: 16 frames at 32x32 on one core
    std::vector<Raymap> rms;
    for (int i = 0; i < 16; ++i) rms.push_back(camera_to_raymap(random_camera(rng), 32, 32));
    const auto result = solve_sequence(rms);

    const bool pass = failed == 0 && result.wall_seconds < 5.0;
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "worst rotation %.2e deg, worst center %.2e, 16-frame solve %.2f s", worst_rot,
                  worst_center, result.wall_seconds);
    report("1. geometry round-trip", pass, buf);
    CHECK(failed == 0);
    CHECK(result.wall_seconds < 5.0);
}

TEST_CASE("criterion 2: gradient correctness below 1e-4 across ops and blocks") {
    double worst = 0;
    std::string worst_name = "none";
    int checks = 0;
    auto run_check = [&](const char* name, const std::function<Tensor<double>()>& fn,
                         const std::vector<Tensor<double>>& inputs) {
        auto rep = grad_check(fn, inputs);
        REQUIRE(rep.finite);
        if (rep.max_rel_error > worst) {
            worst = rep.max_rel_error;
            worst_name = name;
        }
        ++checks;
        CHECK(rep.max_rel_error < 1e-4);
    };

    Rng rng(2002);
    // primitive ops across >= 20 random shapes/seeds each
    for (int trial = 0; trial < 20; ++trial) {
        Shape shape{rng.uniform_int(2, 3), rng.uniform_int(2, 5), rng.uniform_int(2, 5)};
        auto x = randn_leaf(shape, rng);
        auto y = randn_leaf(shape, rng);
        const int rows = static_cast<int>(rng.uniform_int(2, 4));
        auto m = randn_leaf({rows, rng.uniform_int(2, 4)}, rng);
        auto m2 = randn_leaf({m.dim(1), rng.uniform_int(2, 4)}, rng);
        run_check("elementwise", [&] {
            return mean_all(mul(silu(gelu(x)), add(sigmoid(y), square(tanh_(x)))));
        }, {x, y});
        run_check("matmul", [&] { return mean_all(square(matmul(m, m2))); }, {m, m2});
        run_check("reductions+softmax", [&] {
            return mean_all(mul(softmax_last(m), l2_normalize_last(m)));
        }, {m});
        run_check("norms", [&] {
            auto g = layer_norm(x, Tensor<double>(), Tensor<double>());
            return mean_all(square(g));
        }, {x});

        const int hsz = 2 * static_cast<int>(rng.uniform_int(2, 3));  // patchify needs even
        auto img = randn_leaf({1, 2, hsz, hsz}, rng);
        auto w = randn_leaf({3, 2, 3, 3}, rng);
        const int stride = 1 + (trial % 2);
        const PadMode mode = trial % 4 < 2 ? PadMode::Zero : PadMode::Replicate;
        run_check("conv", [&] { return mean_all(square(conv2d(img, w, Tensor<double>(), stride, 1, mode))); },
                  {img, w});
        auto wt = randn_leaf({2, 3, 2, 2}, rng);
        run_check("conv_transpose+upsample", [&] {
            return mean_all(square(conv_transpose2d(upsample_nearest2(img), wt, Tensor<double>(), 2)));
        }, {img, wt});
        auto gimg = randn_leaf({2, 4, 3, 3}, rng);
        run_check("group_norm", [&] {
            return mean_all(square(group_norm(gimg, 2, Tensor<double>(), Tensor<double>())));
        }, {gimg});
        run_check("patchify+slice+concat", [&] {
            auto tok = patchify(img, 2);
            auto split = concat<double>({slice(tok, 1, 0, 4), slice(tok, 1, 4, 4)}, 1);
            return mean_all(square(split));
        }, {img});
    }

    // VAE blocks (tiny config), >= 20 seeds
    for (int trial = 0; trial < 20; ++trial) {
        Rng vrng(3000 + trial);
        VaeConfig vc;
        vc.in_channels = 3;
        vc.latent_dim = 2;
        vc.block_channels = {4, 8};
        vc.use_group_norm = trial % 2 == 0;
        vc.padding_mode = trial % 3 == 0 ? PadMode::Replicate : PadMode::Zero;
        Vae<double> vae(vc, vrng);
        auto x = randn_leaf({1, 3, 8, 8}, vrng);
        run_check("vae block", [&] {
            auto [mean, logvar] = vae.encode(x);
            return add(mean_all(square(vae.decode_raw(mean))), kl_divergence(mean, logvar));
        }, {x, vae.params().find("enc.stem.w"), vae.params().find("dec.head.w")});
    }

    // DiT blocks, >= 20 seeds
    for (int trial = 0; trial < 20; ++trial) {
        Rng drng(4000 + trial);
        DitConfig dc;
        dc.width = 16;
        dc.depth = 2;
        dc.heads = 2;
        dc.patch_size = 2;
        dc.latent_dim = 2;
        dc.mlp_ratio = 2;
        dc.index_mode =
            trial % 3 == 0 ? IndexMode::None : (trial % 3 == 1 ? IndexMode::Fixed : IndexMode::Full);
        MvDit<double> model(dc, drng);
        for (auto& [name, t] : model.params().entries()) {
            Tensor<double> tt = t;
            for (std::int64_t i = 0; i < tt.numel(); ++i) tt.data()[i] += 0.2 * drng.normal();
        }
        auto s = randn_leaf({2, dc.channels(), 4, 4}, drng);
        std::vector<double> keys = dc.index_mode == IndexMode::Fixed
                                       ? std::vector<double>{0.0, 1.0}
                                       : inference_keys(2);
        run_check("dit block", [&] {
            auto out = model.forward(s, 1, 2, keys, {0.37});
            return add(mean_all(square(out.image_velocity)), mean_all(square(out.ray_velocity)));
        }, {s, model.params().find("block0.qkv.w"), model.params().find("block1.mlp_in.w")});
    }

    // align/TV losses, >= 20 seeds
    for (int trial = 0; trial < 20; ++trial) {
        Rng nrng(5000 + trial);
        const int res = 5;
        NormalBuffer<double> a, b;
        a.height = b.height = res;
        a.width = b.width = res;
        a.validity.assign(res * res, 1.f);
        b.validity = a.validity;
        a.normals = randn_leaf({res, res, 3}, nrng);
        b.normals = randn_leaf({res, res, 3}, nrng);
        run_check("align+tv", [&] {
            return add(align_loss(a, b), add(tv_loss(a), tv_loss(b)));
        }, {a.normals, b.normals});
    }

    // training_loss with respect to model weights, >= 20 seeds
    for (int trial = 0; trial < 20; ++trial) {
        TinyWorld world(6000 + trial);
        auto seq = arc_sequence(2, 8, 7000 + trial);
        Rng mask_rng(trial);
        auto plan = sample_masks(mask_rng, 2);
        apply_mask_plan(seq, plan);
        run_check("training_loss", [&] {
            Rng r(42 + trial);
            return training_loss(*world.model, world.codec, {seq}, {plan}, r);
        }, {world.model->params().find("block0.proj.w"), world.model->params().find("head.w")});
    }

    char buf[160];
    std::snprintf(buf, sizeof(buf), "%d checks, worst rel err %.2e in %s", checks, worst,
                  worst_name.c_str());
    report("2. gradient correctness", worst < 1e-4, buf);
}

TEST_CASE("criterion 3: flow-matching identities") {
    Rng rng(3003);
    bool pass = true;

    // endpoint exactness
    auto z = Tensor<double>::randn({3, 4}, rng);
    auto eps = Tensor<double>::randn({3, 4}, rng);
    for (int i = 0; i < 12; ++i) {
        pass = pass && add_noise(z, 0.0, eps).data()[i] == z.data()[i];
        pass = pass && add_noise(z, 1.0, eps).data()[i] == eps.data()[i];
    }

    // oracle one-step Euler recovery to 1e-9
    auto zi = Tensor<double>::randn({2, 2, 4, 4}, rng);
    auto ei = Tensor<double>::randn({2, 2, 4, 4}, rng);
    auto v = sub(ei, zi);
    LatentVelocityFn<double> oracle = [&](const Tensor<double>&, const Tensor<double>&, double,
                                          bool) { return std::make_pair(v, v); };
    auto ones = Tensor<double>::full({2, 1, 4, 4}, 1.0);
    auto [ri, rr] = integrate_velocity_field(oracle, ei, ei, 1, ones, ones);
    double max_err = 0;
    for (std::int64_t i = 0; i < zi.numel(); ++i)
        max_err = std::max(max_err, std::abs(ri.data()[i] - zi.data()[i]));
    pass = pass && max_err < 1e-9;

    // logit-normal samples
    int below = 0;
    bool in_range = true;
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) {
        const double t = sample_timestep(rng);
        in_range = in_range && t > 0.0 && t < 1.0;
        if (t < 0.5) ++below;
    }
    const double median_dev = std::abs(below / double(draws) - 0.5);
    pass = pass && in_range && median_dev < 0.01;

    char buf[160];
    std::snprintf(buf, sizeof(buf), "euler err %.1e, median dev %.4f", max_err, median_dev);
    report("3. flow-matching identities", pass, buf);
    CHECK(pass);
}

TEST_CASE("criterion 4: CFG degeneracy and bit-exact compositing") {
    TinyWorld world(4004);
    auto seq = arc_sequence(4, 8, 4014);
    const double w = 2.5;
    SampleOptions opts;
    opts.steps = 4;
    opts.cfg = {w, w};
    Rng rng_a(99);
    auto spatial = sample(*world.model, world.codec, seq, opts, rng_a);

    // scalar-CFG reference
    Rng rng_b(99);
    const int n = 4, res = 8;
    auto cond = world.codec.encode_conditioning(seq, false, false);
    auto uncond = world.codec.zero_conditioning(n, res, res);
    auto zi = Tensor<double>::randn({n, 2, 4, 4}, rng_b);
    auto zr = Tensor<double>::randn({n, 2, 4, 4}, rng_b);
    const auto keys = inference_keys(n);
    NoGradGuard ng;
    for (int k = 0; k < opts.steps; ++k) {
        const double t = 1.0 - double(k) / opts.steps;
        auto oc = world.model->forward(world.codec.assemble(cond, zi, zr), 1, n, keys, {t});
        auto ou = world.model->forward(world.codec.assemble(uncond, zi, zr), 1, n, keys, {t});
        zi = add(zi, mul_scalar(add(ou.image_velocity,
                                    mul_scalar(sub(oc.image_velocity, ou.image_velocity), w)),
                                -1.0 / opts.steps));
        zr = add(zr, mul_scalar(add(ou.ray_velocity,
                                    mul_scalar(sub(oc.ray_velocity, ou.ray_velocity), w)),
                                -1.0 / opts.steps));
    }
    auto ref_images = world.codec.decode_images(zi);
    double max_diff = 0;
    for (int i = 0; i < n; ++i)
        for (std::size_t p = 0; p < seq.frames[i].image_mask.size(); ++p) {
            if (seq.frames[i].image_mask[p] != 0.f) continue;
            for (int c = 0; c < 3; ++c)
                max_diff = std::max(
                    max_diff, std::abs(double(spatial.frames[i].image[p * 3 + c]) -
                                       ref_images[i][p * 3 + c]));
        }

    bool composited = true;
    for (int i = 0; i < n; ++i)
        for (std::size_t p = 0; p < seq.frames[i].image_mask.size(); ++p)
            if (seq.frames[i].image_mask[p] != 0.f)
                for (int c = 0; c < 3; ++c)
                    composited = composited &&
                                 spatial.frames[i].image[p * 3 + c] ==
                                     seq.frames[i].image[p * 3 + c];

    const bool pass = max_diff < 1e-6 && composited;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "max scalar-CFG diff %.2e, compositing %s", max_diff,
                  composited ? "bit-exact" : "violated");
    report("4. CFG degeneracy + compositing", pass, buf);
    CHECK(pass);
}

TEST_CASE("criterion 5: tiling equivalence at window=N, passes=1") {
    TinyWorld world(5005);
    auto seq = arc_sequence(5, 8, 5015);
    SampleOptions sopts;
    sopts.steps = 4;
    Rng r1(55);
    auto plain = sample(*world.model, world.codec, seq, sopts, r1);
    TiledOptions topts;
    topts.window = 5;
    topts.passes = 1;
    topts.steps = 4;
    Rng r2(55);
    auto tiled = tiled_denoise(*world.model, world.codec, seq, topts, r2);
    double max_diff = 0;
    for (std::size_t i = 0; i < plain.frames.size(); ++i) {
        for (std::size_t p = 0; p < plain.frames[i].image.size(); ++p)
            max_diff = std::max(max_diff, std::abs(double(plain.frames[i].image[p]) -
                                                   tiled.frames[i].image[p]));
        for (std::size_t p = 0; p < plain.frames[i].raymap.size(); ++p)
            max_diff = std::max(
                max_diff, (plain.frames[i].raymap.directions[p] -
                           tiled.frames[i].raymap.directions[p]).cwiseAbs().maxCoeff());
    }
    const bool pass = max_diff < 1e-6;
    char buf[96];
    std::snprintf(buf, sizeof(buf), "max per-element diff %.2e", max_diff);
    report("5. tiling equivalence", pass, buf);
    CHECK(pass);
}

TEST_CASE("criterion 6: rotation metric oracle") {
    const auto t0 = std::chrono::steady_clock::now();
    auto scene = generate_scene(606, 3, true);
    Rng rng(6006);
    double worst = 0;
    int done = 0;
    for (int trial = 0; trial < 200 && done < 100; ++trial) {
        const double a0 = rng.uniform(0, 2 * M_PI);
        const double a1 = a0 + rng.uniform(0.1, 0.6);
        Camera a = look_at_camera(
            Vec3(2.2 * std::cos(a0), rng.uniform(0.5, 1.2), 2.2 * std::sin(a0)), Vec3(0, 0, 0),
            40, 40, 16, 16);
        Camera b = look_at_camera(
            Vec3(2.2 * std::cos(a1), rng.uniform(0.5, 1.2), 2.2 * std::sin(a1)), Vec3(0, 0, 0),
            40, 40, 16, 16);
        std::vector<Match> matches;
        try {
            matches = gt_correspondences(scene, a, b, 32, 32, 300, rng);
        } catch (const DataError&) {
            continue;
        }
        const Mat3 est = relative_rotation_from_matches(matches, a, b);
        worst = std::max(worst,
                         rotation_geodesic_deg(est, b.rotation.transpose() * a.rotation));
        ++done;
    }

    // ground-truth-rendered 10-second video, 20 pairs at 5 degrees
    auto video_scene = generate_scene(607, 3, true);
    Rng crng(6007);
    auto cap = make_capture(video_scene, 21, 32, 32, crng, 2.0);  // t = 0..10 s
    std::vector<VideoFrame> video;
    for (const auto& f : cap.frames) video.push_back({f.camera, f.time});
    Rng mrng(6008);
    Matcher matcher = [&](int a, int b) {
        Rng r = mrng.fork(a * 1000 + b);
        return gt_correspondences(video_scene, cap.frames[a].camera, cap.frames[b].camera, 32, 32,
                                  400, r);
    };
    Rng prng(6009);
    auto rra = relative_rotation_accuracy(video, 20, 5.0, matcher, prng);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const bool pass = done >= 100 && worst < 0.5 && rra.accuracy == 1.0 && secs < 120.0;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%d pairs, worst err %.3f deg, RRA@5=%.2f, %.1f s", done,
                  worst, rra.accuracy, secs);
    report("6. rotation metric oracle", pass, buf);
    CHECK(pass);
}

TEST_CASE("criterion 10: normal losses") {
    // analytic slanted plane below 1e-3
    const int res = 32;
    Camera cam;
    cam.fx = cam.fy = 2 * res;
    cam.cx = cam.cy = res / 2.0;
    const Vec3 n_plane = Vec3(0.1, 0, 1).normalized();
    std::vector<double> depth(std::size_t(res) * res);
    for (int r = 0; r < res; ++r)
        for (int c = 0; c < res; ++c) {
            const Vec3 d = cam.pixel_ray_cam(c + 0.5, r + 0.5);
            depth[std::size_t(r) * res + c] = (-2.0 / Vec3(0.1, 0, 1).norm()) / n_plane.dot(d);
        }
    auto buffer =
        depth_to_normals(Tensor<double>::from_data({res, res}, std::move(depth)), cam);
    const Vec3 expected = n_plane;  // +z component faces the camera
    double worst_plane = 0;
    for (int r = 1; r < res - 1; ++r)
        for (int c = 1; c < res - 1; ++c) {
            const double* n = buffer.normals.data() + (std::size_t(r) * res + c) * 3;
            worst_plane = std::max(
                worst_plane, (Vec3(n[0], n[1], n[2]) - expected).cwiseAbs().maxCoeff());
        }

    // constant-field TV is exactly zero
    NormalBuffer<double> constant;
    constant.height = constant.width = 6;
    constant.validity.assign(36, 1.f);
    std::vector<double> cdata(36 * 3);
    for (int p = 0; p < 36; ++p) cdata[p * 3 + 2] = 1.0;
    constant.normals = Tensor<double>::from_data({6, 6, 3}, std::move(cdata));
    const double tv = tv_loss(constant).item();

    // stop-gradient: exact zero on the stopped operand
    Rng rng(10010);
    NormalBuffer<double> a = constant, b = constant;
    a.normals = Tensor<double>::randn({6, 6, 3}, rng);
    b.normals = Tensor<double>::randn({6, 6, 3}, rng);
    a.normals.node()->requires_grad = true;
    b.normals.node()->requires_grad = true;
    a.normals.zero_grad();
    b.normals.zero_grad();
    backward(align_loss(a, b, AlignMode::RenderedToDepth));
    double stopped = 0, flowing = 0;
    for (auto g : a.normals.grad()) stopped += std::abs(g);
    for (auto g : b.normals.grad()) flowing += std::abs(g);

    const bool pass = worst_plane < 1e-3 && tv == 0.0 && stopped == 0.0 && flowing > 0.0;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "plane err %.1e, const TV %.1e, stopped-grad %.1e",
                  worst_plane, tv, stopped);
    report("10. normal losses", pass, buf);
    CHECK(pass);
}
