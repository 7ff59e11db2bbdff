#include "mvd/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mvd {

CaptureBounds capture_bounds(const Capture& capture, const CompletionPlan& plan) {
    if (capture.frames.empty()) throw DataError("capture_bounds: empty capture");
    CaptureBounds b;
    b.centroid = Vec3::Zero();
    for (const auto& f : capture.frames) b.centroid += f.camera.center;
    b.centroid /= double(capture.frames.size());
    double max_horizontal = 0;
    b.y_min = 1e30;
    b.y_max = -1e30;
    double fx = 0, fy = 0, cx = 0, cy = 0;
    for (const auto& f : capture.frames) {
        const Vec3 d = f.camera.center - b.centroid;
        max_horizontal = std::max(max_horizontal, std::hypot(d.x(), d.z()));
        b.y_min = std::min(b.y_min, f.camera.center.y());
        b.y_max = std::max(b.y_max, f.camera.center.y());
        fx += f.camera.fx;
        fy += f.camera.fy;
        cx += f.camera.cx;
        cy += f.camera.cy;
    }
    const double n = double(capture.frames.size());
    b.fx = fx / n;
    b.fy = fy / n;
    b.cx = cx / n;
    b.cy = cy / n;
    if (max_horizontal < 1e-9) max_horizontal = 0.5;  // degenerate single-point capture
    b.radius = plan.cylinder_radius_factor * max_horizontal;
    const double span = b.y_max - b.y_min;
    b.y_min -= plan.cylinder_height_margin * span;
    b.y_max += plan.cylinder_height_margin * span;
    return b;
}

std::vector<Camera> sample_cylinder_cameras(const CaptureBounds& bounds, int n, Rng& rng,
                                            double elevation_range) {
    if (bounds.radius <= 0) throw std::invalid_argument("sample_cylinder_cameras: radius <= 0");
    std::vector<Camera> cams;
    cams.reserve(n);
    for (int i = 0; i < n; ++i) {
        const double azimuth = rng.uniform(0, 2 * M_PI);
        const double y = rng.uniform(bounds.y_min, bounds.y_max);
        const Vec3 pos(bounds.centroid.x() + bounds.radius * std::cos(azimuth), y,
                       bounds.centroid.z() + bounds.radius * std::sin(azimuth));
        const double look_az = rng.uniform(0, 2 * M_PI);
        const double look_el = rng.uniform(-elevation_range, elevation_range);
        const Vec3 look_dir(std::cos(look_el) * std::cos(look_az), std::sin(look_el),
                            std::cos(look_el) * std::sin(look_az));
        cams.push_back(look_at_camera(pos, pos + look_dir, bounds.fx, bounds.fy, bounds.cx,
                                      bounds.cy));
    }
    return cams;
}

namespace {

// Conditioning sequence: known frames carry images + rays; target frames
// carry rays only. Raymaps are built from the jointly normalized cameras.
MultiViewSequence build_generation_sequence(const std::vector<const CaptureFrame*>& known,
                                            const std::vector<Camera>& target_cameras, int height,
                                            int width) {
    std::vector<Camera> all;
    for (const auto* f : known) all.push_back(f->camera);
    for (const auto& c : target_cameras) all.push_back(c);
    const auto normalized = normalize_sequence(all, 0).cameras;

    MultiViewSequence seq;
    seq.height = height;
    seq.width = width;
    const std::size_t hw = std::size_t(height) * width;
    for (std::size_t i = 0; i < all.size(); ++i) {
        SequenceFrame frame;
        frame.raymap = camera_to_raymap(normalized[i], height, width);
        frame.ray_mask.assign(hw, 1.f);
        if (i < known.size()) {
            frame.image = known[i]->image;
            frame.image_mask.assign(hw, 1.f);
        } else {
            frame.image.assign(hw * 3, 0.f);
            frame.image_mask.assign(hw, 0.f);
        }
        seq.frames.push_back(std::move(frame));
    }
    return seq;
}

std::vector<int> evenly_spaced(int available, int wanted) {
    std::vector<int> idx;
    wanted = std::min(available, wanted);
    for (int i = 0; i < wanted; ++i)
        idx.push_back(static_cast<int>(std::llround(double(i) * (available - 1) /
                                                    std::max(1, wanted - 1))));
    idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
    return idx;
}

}  // namespace

CompletionResult complete_capture(const Capture& capture, const MvDit<double>& model,
                                  const SequenceCodec<double>& codec, const CompletionPlan& plan,
                                  Rng& rng) {
    if (capture.frames.empty()) throw DataError("complete_capture: empty capture");
    const auto bounds = capture_bounds(capture, plan);

    CompletionResult result;
    result.capture = capture;  // originals untouched

    auto generate_batch = [&](const std::vector<const CaptureFrame*>& conditioning,
                              const std::vector<Camera>& targets) {
        auto seq = build_generation_sequence(conditioning, targets, capture.height, capture.width);
        SampleOptions opts;
        opts.steps = plan.sample_steps;
        opts.cfg = plan.cfg;
        auto out = sample(model, codec, seq, opts, rng);
        for (std::size_t i = 0; i < targets.size(); ++i) {
            CaptureFrame frame;
            frame.camera = targets[i];
            frame.time = -1;
            frame.generated = true;
            frame.image = out.frames[conditioning.size() + i].image;
            frame.depth.assign(std::size_t(capture.height) * capture.width, 0.f);
            result.capture.frames.push_back(std::move(frame));
            ++result.generated_count;
        }
    };

    // stage 1: anchors conditioned on evenly spaced capture frames
    std::vector<const CaptureFrame*> conditioning;
    for (int idx : evenly_spaced(static_cast<int>(capture.frames.size()), plan.conditioning_count))
        conditioning.push_back(&capture.frames[idx]);
    auto anchors = sample_cylinder_cameras(bounds, plan.anchor_count, rng,
                                           plan.look_elevation_range);
    generate_batch(conditioning, anchors);

    // stage 2: densify rounds conditioned on capture + previous generations
    int rounds = plan.densify_rounds;
    if (rounds < 0) {
        const int remaining = std::max(0, plan.target_total_new_views - plan.anchor_count);
        rounds = (remaining + plan.densify_batch - 1) / plan.densify_batch;
    }
    for (int round = 0; round < rounds; ++round) {
        auto targets = sample_cylinder_cameras(bounds, plan.densify_batch, rng,
                                               plan.look_elevation_range);
        Vec3 target_mean = Vec3::Zero();
        for (const auto& t : targets) target_mean += t.center;
        target_mean /= double(targets.size());

        // nearest frames by camera center, up to conditioning capacity
        std::vector<std::pair<double, const CaptureFrame*>> ranked;
        for (const auto& f : result.capture.frames)
            ranked.emplace_back((f.camera.center - target_mean).norm(), &f);
        std::stable_sort(ranked.begin(), ranked.end(),
                         [](const auto& a, const auto& b) { return a.first < b.first; });
        std::vector<const CaptureFrame*> cond_round;
        for (std::size_t i = 0; i < ranked.size() && i < std::size_t(plan.conditioning_count); ++i)
            cond_round.push_back(ranked[i].second);
        generate_batch(cond_round, targets);
    }
    return result;
}

Capture complete_partial_masks(const Capture& capture,
                               const std::vector<std::vector<float>>& inpaint_masks,
                               const MvDit<double>& model, const SequenceCodec<double>& codec,
                               const CompletionPlan& plan, Rng& rng) {
    if (inpaint_masks.size() != capture.frames.size())
        throw std::invalid_argument("complete_partial_masks: one mask per frame required");
    const std::size_t hw = std::size_t(capture.height) * capture.width;

    bool any_unknown = false;
    for (const auto& m : inpaint_masks) {
        if (m.size() != hw) throw std::invalid_argument("complete_partial_masks: mask size");
        for (float v : m)
            if (v == 0.f) any_unknown = true;
    }
    Capture out = capture;
    if (!any_unknown) return out;  // empty masks: identity

    std::vector<Camera> cams;
    for (const auto& f : capture.frames) cams.push_back(f.camera);
    const auto normalized = normalize_sequence(cams, 0).cameras;

    MultiViewSequence seq;
    seq.height = capture.height;
    seq.width = capture.width;
    for (std::size_t i = 0; i < capture.frames.size(); ++i) {
        SequenceFrame frame;
        frame.image = capture.frames[i].image;
        frame.image_mask = inpaint_masks[i];
        frame.raymap = camera_to_raymap(normalized[i], capture.height, capture.width);
        frame.ray_mask.assign(hw, 1.f);
        seq.frames.push_back(std::move(frame));
    }
    SampleOptions opts;
    opts.steps = plan.sample_steps;
    opts.cfg = plan.cfg;
    auto completed = sample(model, codec, seq, opts, rng);
    for (std::size_t i = 0; i < out.frames.size(); ++i)
        out.frames[i].image = completed.frames[i].image;
    return out;
}

PoseRecovery recover_poses(const std::vector<std::vector<float>>& images, int height, int width,
                           const MvDit<double>& model, const SequenceCodec<double>& codec,
                           const UncalibratedOptions& options, Rng& rng) {
    const int n = static_cast<int>(images.size());
    if (n < 1) throw std::invalid_argument("recover_poses: no images");

    // denoise raymaps conditioned on the images only
    MultiViewSequence seq;
    seq.height = height;
    seq.width = width;
    const std::size_t hw = std::size_t(height) * width;
    Camera placeholder;  // raymap contents are masked out before encoding
    placeholder.fx = placeholder.fy = width;
    placeholder.cx = width / 2.0;
    placeholder.cy = height / 2.0;
    const Raymap placeholder_rm = camera_to_raymap(placeholder, height, width);
    for (const auto& img : images) {
        if (img.size() != hw * 3)
            throw std::invalid_argument("recover_poses: image buffer size mismatch");
        SequenceFrame frame;
        frame.image = img;
        frame.image_mask.assign(hw, 1.f);
        frame.raymap = placeholder_rm;
        frame.ray_mask.assign(hw, 0.f);
        seq.frames.push_back(std::move(frame));
    }
    TiledOptions topts;
    topts.window = std::min(options.window, n);
    topts.passes = options.passes;
    topts.steps = options.pose_steps;
    topts.cfg = options.cfg;
    auto denoised = tiled_denoise(model, codec, seq, topts, rng);

    PoseRecovery result;
    for (const auto& f : denoised.frames) result.raymaps.push_back(f.raymap);
    auto solved = solve_sequence(result.raymaps, options.solver);
    result.reports = solved.reports;
    int failed = 0;
    for (const auto& r : result.reports) failed += r.converged ? 0 : 1;
    if (double(failed) > options.max_failed_fraction * n)
        throw NumericalError("recover_poses: pinhole solver failed on " + std::to_string(failed) +
                             "/" + std::to_string(n) + " frames");
    for (const auto& r : result.reports) result.cameras.push_back(r.camera);
    return result;
}

UncalibratedResult uncalibrated_complete(const std::vector<std::vector<float>>& images, int height,
                                         int width, const MvDit<double>& model,
                                         const SequenceCodec<double>& codec,
                                         const UncalibratedOptions& options, Rng& rng) {
    const int n = static_cast<int>(images.size());
    if (n < 5)
        throw std::invalid_argument(
            "uncalibrated_complete: need >= 5 images for the ellipse path, got " +
            std::to_string(n));

    auto poses = recover_poses(images, height, width, model, codec, options, rng);
    UncalibratedResult result;
    result.cameras = poses.cameras;
    result.reports = poses.reports;

    // step 3: novel trajectory, pointed at the convergence of the view axes
    std::vector<Vec3> origins, looks;
    for (const auto& c : result.cameras) {
        origins.push_back(c.center);
        looks.push_back(c.look_dir());
    }
    result.look_at = least_squares_ray_point(origins, looks);
    auto path = fit_ellipse_path(result.cameras, options.novel_views, result.look_at);
    result.novel_cameras = path.cameras;

    // step 4: one joint generation over inputs + novel views
    MultiViewSequence gen;
    gen.height = height;
    gen.width = width;
    const std::size_t hw = std::size_t(height) * width;
    for (int i = 0; i < n; ++i) {
        SequenceFrame frame;
        frame.image = images[i];
        frame.image_mask.assign(hw, 1.f);
        frame.raymap = camera_to_raymap(result.cameras[i], height, width);
        frame.ray_mask.assign(hw, 1.f);
        gen.frames.push_back(std::move(frame));
    }
    for (const auto& cam : result.novel_cameras) {
        SequenceFrame frame;
        frame.image.assign(hw * 3, 0.f);
        frame.image_mask.assign(hw, 0.f);
        frame.raymap = camera_to_raymap(cam, height, width);
        frame.ray_mask.assign(hw, 1.f);
        gen.frames.push_back(std::move(frame));
    }
    SampleOptions sopts;
    sopts.steps = options.sample_steps;
    sopts.cfg = options.cfg;
    result.completed = sample(model, codec, gen, sopts, rng);
    return result;
}

}  // namespace mvd
