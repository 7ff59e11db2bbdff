#pragma once

// End-to-end scene completion: calibrated anchor/densify completion and
// uncalibrated completion (pose recovery from images, ellipse path, one
// joint generation call). Inference runs in double precision.

#include "mvd/flow.hpp"
#include "mvd/solver.hpp"

namespace mvd {

struct CompletionPlan {
    int conditioning_count = 16;
    int anchor_count = 24;  // the paper quotes both ~25 and 24; 24 is the default
    int densify_rounds = -1;  // -1: derive from target_total_new_views
    int densify_batch = 24;
    int target_total_new_views = 100;
    int sample_steps = 24;
    CfgWeights cfg;
    double cylinder_radius_factor = 1.25;
    double cylinder_height_margin = 0.1;
    double look_elevation_range = 0.5;  // radians
};

struct CaptureBounds {
    Vec3 centroid = Vec3::Zero();
    double radius = 1.0;       // cylinder radius
    double y_min = 0, y_max = 0;
    double fx = 32, fy = 32, cx = 16, cy = 16;
};

CaptureBounds capture_bounds(const Capture& capture, const CompletionPlan& plan);

// Centers exactly on the cylinder surface at uniform azimuth and height,
// looking at uniform azimuth with bounded elevation.
std::vector<Camera> sample_cylinder_cameras(const CaptureBounds& bounds, int n, Rng& rng,
                                            double elevation_range = 0.5);

struct CompletionResult {
    Capture capture;  // originals first, generated frames appended and flagged
    int generated_count = 0;
};

// Stage 1: one sampling call conditioned on conditioning_count capture frames
// generating anchor_count anchors. Stage 2: densify rounds conditioning on
// capture + previous generations until the view target is met.
CompletionResult complete_capture(const Capture& capture, const MvDit<double>& model,
                                  const SequenceCodec<double>& codec, const CompletionPlan& plan,
                                  Rng& rng);

// Inpaints partially masked frames in one sampling call; pixels marked known
// are returned bit-exactly unchanged.
Capture complete_partial_masks(const Capture& capture,
                               const std::vector<std::vector<float>>& inpaint_masks,
                               const MvDit<double>& model, const SequenceCodec<double>& codec,
                               const CompletionPlan& plan, Rng& rng);

struct UncalibratedOptions {
    int window = 8;
    int passes = 8;
    int pose_steps = 24;
    int sample_steps = 24;
    int novel_views = 32;
    CfgWeights cfg;
    double max_failed_fraction = 0.25;
    SolverOptions solver;  // trim_fraction set for denoised raymaps
};

struct PoseRecovery {
    std::vector<Camera> cameras;  // recovered cameras in the model's normalized space
    std::vector<SolveReport> reports;
    std::vector<Raymap> raymaps;  // denoised raymaps
};

// Steps 1-2 of the uncalibrated pipeline: tiled raymap denoising conditioned
// on the images, then independent pinhole solves. Throws NumericalError when
// more than max_failed_fraction of the frames fail to converge.
PoseRecovery recover_poses(const std::vector<std::vector<float>>& images, int height, int width,
                           const MvDit<double>& model, const SequenceCodec<double>& codec,
                           const UncalibratedOptions& options, Rng& rng);

struct UncalibratedResult {
    std::vector<Camera> cameras;          // recovered input cameras (model space)
    std::vector<SolveReport> reports;
    std::vector<Camera> novel_cameras;    // ellipse path (model space)
    MultiViewSequence completed;          // 16 inputs + novel views
    Vec3 look_at = Vec3::Zero();
};

// Step 1: tiled raymap denoising conditioned on the images alone. Step 2:
// per-frame pinhole solves. Step 3: ellipse path through the recovered
// centers. Step 4: one sampling call over inputs + novel targets.
UncalibratedResult uncalibrated_complete(const std::vector<std::vector<float>>& images, int height,
                                         int width, const MvDit<double>& model,
                                         const SequenceCodec<double>& codec,
                                         const UncalibratedOptions& options, Rng& rng);

}  // namespace mvd
