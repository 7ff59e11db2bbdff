#pragma once

// Cameras, rays and raymaps. Convention used across the project:
// right-handed world, +y up; camera frame x right, y up, looking along -z;
// pixel rays pass through pixel centers, i.e. pixel (row, col) maps to
// continuous coordinates (col + 0.5, row + 0.5).

#include <Eigen/Dense>
#include <utility>
#include <vector>

#include "mvd/common.hpp"
#include "mvd/tensor.hpp"

namespace mvd {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct Camera {
    double fx = 1, fy = 1, cx = 0, cy = 0;
    Mat3 rotation = Mat3::Identity();  // world-from-camera
    Vec3 center = Vec3::Zero();

    // Throws invalid_argument if intrinsics are degenerate, the principal
    // point is outside (0,W)x(0,H), or rotation is not special orthogonal.
    void validate(double width, double height, double tol = 1e-6) const;

    // World-space unit ray through continuous pixel coordinates (u, v).
    Vec3 pixel_ray(double u, double v) const;
    // Unit ray in the camera frame (identity pose).
    Vec3 pixel_ray_cam(double u, double v) const;

    // Projects a world point; returns false when the point is not strictly
    // in front of the camera.
    bool project(const Vec3& p, double& u, double& v) const;

    Vec3 look_dir() const { return -rotation.col(2); }
    Vec3 up_dir() const { return rotation.col(1); }
};

struct Raymap {
    int height = 0, width = 0;
    std::vector<Vec3> origins;     // row-major, height*width
    std::vector<Vec3> directions;  // unit vectors

    std::size_t size() const { return origins.size(); }

    // Direction norms must be 1 +- tol; with normalized_origins also checks
    // the [-1,1] cube invariant on origins.
    void validate(double tol = 1e-6, bool normalized_origins = false) const;
};

// x' = scale * rotation * x + translation
struct SimilarityTransform {
    double scale = 1.0;
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    Vec3 apply_point(const Vec3& p) const { return scale * (rotation * p) + translation; }
    Vec3 apply_dir(const Vec3& d) const { return rotation * d; }
    Camera apply_camera(const Camera& c) const;
    SimilarityTransform inverse() const;
};

Camera look_at_camera(const Vec3& position, const Vec3& target, double fx, double fy, double cx,
                      double cy, const Vec3& up_hint = Vec3(0, 1, 0));

Mat3 rotation_about_y(double angle);
double rotation_geodesic_deg(const Mat3& a, const Mat3& b);

Raymap camera_to_raymap(const Camera& camera, int height, int width);

struct NormalizeResult {
    std::vector<Camera> cameras;
    SimilarityTransform transform;
};

// Pivot camera moved to the origin and rotated upright (its up axis to +y,
// look azimuth preserved); global scale 0.9 / max-abs center coordinate so
// all centers stay inside the cube. Coincident cameras fall back to scale 1.
NormalizeResult normalize_sequence(const std::vector<Camera>& cameras, std::size_t pivot_index,
                                   double margin = 0.9);

// Random rotation about world up plus random rescale; re-applies the cube
// bound if violated. Relative poses are preserved up to the similarity.
std::vector<Camera> augment_sequence(const std::vector<Camera>& cameras, Rng& rng);
std::vector<Camera> augment_sequence_with(const std::vector<Camera>& cameras, double angle,
                                          double scale, double margin = 0.9);

// Channel order (origin xyz | direction xyz), shape [H, W, 6]; round trip is
// bit-exact. unpack rejects zero-norm direction pixels.
template <typename T>
Tensor<T> pack_raymap(const Raymap& raymap);
template <typename T>
Raymap unpack_raymap(const Tensor<T>& tensor);

struct SequenceFrame {
    std::vector<float> image;       // H*W*3 RGB in [0,1]
    Raymap raymap;
    std::vector<float> image_mask;  // H*W, 1 = known
    std::vector<float> ray_mask;    // H*W, 1 = known
};

struct MultiViewSequence {
    int height = 0, width = 0;
    std::vector<SequenceFrame> frames;

    std::size_t size() const { return frames.size(); }
    void validate() const;  // shared extents, binary masks, raymap invariants
};

}  // namespace mvd
