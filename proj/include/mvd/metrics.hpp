#pragma once

// Reconstruction metrics, eight-point relative rotation from correspondences,
// and relative rotation accuracy over frame pairs.

#include <functional>
#include <string>
#include <vector>

#include "mvd/geometry.hpp"
#include "mvd/scenes.hpp"

namespace mvd {

// Standard PSNR, clamped at 100 dB for identical inputs.
double psnr(const std::vector<float>& a, const std::vector<float>& b, double peak = 1.0);
// PSNR restricted to pixels where region != 0 (per-pixel; buffers are H*W*C).
double psnr_region(const std::vector<float>& a, const std::vector<float>& b,
                   const std::vector<float>& region, int channels, double peak = 1.0);

// Mean SSIM with an 11x11 gaussian window (sigma 1.5, K1=0.01, K2=0.03),
// valid-mode windows, averaged over channels.
double ssim(const std::vector<float>& a, const std::vector<float>& b, int height, int width,
            int channels, double peak = 1.0);

// Relative rotation taking camera-A coordinates to camera-B coordinates
// (R_rel = R_B^T R_A for ground-truth world-from-camera rotations).
// Normalized eight-point estimation of the essential matrix with cheirality
// disambiguation; near-pure-rotation pairs are detected and solved by
// direct Procrustes alignment of the ray bundles.
Mat3 relative_rotation_from_matches(const std::vector<Match>& matches, const Camera& cam_a,
                                    const Camera& cam_b);

struct RotationPairResult {
    int frame_a = 0, frame_b = 0;
    Mat3 estimated = Mat3::Identity();
    Mat3 ground_truth = Mat3::Identity();
    double error_deg = 0;
    int matches = 0;
};

struct VideoFrame {
    Camera camera;
    double time = 0;
};

using Matcher = std::function<std::vector<Match>(int frame_a, int frame_b)>;

struct RotationAccuracyResult {
    std::vector<RotationPairResult> pairs;
    double accuracy = 0;  // fraction within the threshold
};

// Samples `pairs` frame pairs within a 1-second window and reports the
// fraction whose relative-rotation error is within threshold_deg.
RotationAccuracyResult relative_rotation_accuracy(const std::vector<VideoFrame>& video, int pairs,
                                                  double threshold_deg, const Matcher& matcher,
                                                  Rng& rng, double max_pair_seconds = 1.0);

// Line-delimited metric records: "<name> <value> <config_hash>".
std::string format_metric_record(const std::string& name, double value,
                                 const std::string& config_hash);

}  // namespace mvd
