#pragma once

// Procedural scene generator and raytracer. (seed, config) fully determines
// every byte of a capture; scenes double as the evaluation oracle since
// cameras, depth and correspondences are exact.

#include <optional>
#include <string>
#include <vector>

#include "mvd/geometry.hpp"

namespace mvd {

enum class PrimitiveType { Sphere, Box, GroundDisc };

struct Primitive {
    PrimitiveType type = PrimitiveType::Sphere;
    Vec3 center = Vec3::Zero();  // GroundDisc: (cx, plane height, cz)
    Vec3 size = Vec3::Ones();    // Sphere: x=radius; Box: half extents; GroundDisc: x=radius
    Vec3 albedo = Vec3(0.5, 0.5, 0.5);
};

struct SceneSpec {
    std::uint64_t seed = 0;
    std::vector<Primitive> primitives;
    Vec3 light_dir = Vec3(0.3, -1.0, 0.2).normalized();  // direction light travels
    double ambient = 0.3;
    Vec3 background = Vec3(0.05, 0.07, 0.10);

    // Radius of the smallest origin-centered sphere containing the scene.
    double bounding_radius() const;
    std::string to_json() const;
    static SceneSpec from_json(const std::string& json);
};

// 1-8 primitives, light from above, everything inside the unit sphere.
SceneSpec generate_scene(std::uint64_t seed);
// Forces the number of non-ground primitives and whether a ground disc is
// present (used for single-object evaluation scenes).
SceneSpec generate_scene(std::uint64_t seed, int object_count, bool with_ground);

struct SceneHit {
    bool hit = false;
    double t = 0;
    Vec3 normal = Vec3::Zero();  // oriented against the ray
    int primitive = -1;
};

SceneHit trace_scene(const SceneSpec& scene, const Vec3& origin, const Vec3& dir);

struct RenderBuffers {
    int height = 0, width = 0;
    std::vector<float> image;  // H*W*3
    std::vector<float> depth;  // H*W, distance along the unit pixel ray, 0 = background
};

// Lambertian shading, one directional light plus ambient. supersample > 1
// box-averages colors over a supersample^2 subpixel grid (depth stays at the
// pixel-center ray).
RenderBuffers render_view(const SceneSpec& scene, const Camera& camera, int height, int width,
                          int supersample = 1);

struct CaptureFrame {
    Camera camera;
    double time = 0;
    std::vector<float> image;  // quantized to 8-bit levels, H*W*3
    std::vector<float> depth;  // H*W
    bool generated = false;
};

struct Capture {
    std::string capture_id;
    SceneSpec scene;
    int height = 0, width = 0;
    std::vector<CaptureFrame> frames;
};

// Noisy arc around the scene with look-at jitter; emulates a casual capture
// that leaves parts of the scene unobserved.
Capture make_capture(const SceneSpec& scene, int n_frames, int height, int width, Rng& rng,
                     double fps = 2.0);

struct TrainingSample {
    MultiViewSequence sequence;            // all-known masks; raymaps normalized+augmented
    std::vector<int> frame_indices;        // into the capture
    std::vector<Camera> cameras;           // after normalize+augment, crop applied
    int crop_x = 0, crop_y = 0;
};

// Frames at a uniformly drawn stride from {1,2,4,8,random}, one shared crop
// window (centered with 10% probability), cameras crop-adjusted then
// normalized about a random pivot and augmented.
TrainingSample sample_training_sequence(const Capture& capture, Rng& rng, int sequence_size,
                                        int crop_size);

struct Match {
    double ua, va, ub, vb;  // continuous pixel coordinates
};

// Exact surface correspondences: points visible in A, reprojected into B,
// kept when an occlusion ray test passes within 1e-3. Throws DataError when
// fewer than 8 matches survive.
std::vector<Match> gt_correspondences(const SceneSpec& scene, const Camera& cam_a,
                                      const Camera& cam_b, int height, int width, int n_points,
                                      Rng& rng);

// Capture directory: frame_%04d.png, depth_%04d.bin, cameras.json (with the
// embedded scene spec so loaded captures keep their oracle).
void save_capture(const Capture& capture, const std::string& dir, const std::string& config_hash,
                  std::uint64_t seed);
Capture load_capture(const std::string& dir);

}  // namespace mvd
