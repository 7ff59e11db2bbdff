#pragma once

// Pinhole camera recovery from (possibly noisy) raymaps and novel-view
// ellipse path fitting.

#include <string>
#include <vector>

#include "mvd/geometry.hpp"

namespace mvd {

struct SolverOptions {
    int max_iterations = 50;
    double rotation_tol = 1e-8;               // radians; stop when update is smaller
    double direction_error_threshold = 0.05;  // radians; converged gate
    double origin_error_threshold = 0.25;     // scene units; converged gate
    double trim_fraction = 0.0;               // drop worst pixels for noisy raymaps
};

struct SolveReport {
    Camera camera;
    double mean_direction_error = 0.0;  // radians, over kept pixels
    double mean_origin_error = 0.0;     // scene units, over kept pixels
    bool converged = false;
    int iterations = 0;
    std::string diagnostic;
};

struct SequenceSolveResult {
    std::vector<SolveReport> reports;
    double wall_seconds = 0.0;
};

// Point minimizing the summed squared distance to the rays; falls back to
// the mean origin when the normal equations are near-singular.
Vec3 least_squares_ray_point(const std::vector<Vec3>& origins, const std::vector<Vec3>& directions,
                             bool* well_conditioned = nullptr);

// Center from the origins, then alternating orthogonal-Procrustes rotation /
// linear intrinsics fits refined by a joint Gauss-Newton pass over
// (rotation, fx, fy, cx, cy) on the angular residuals.
SolveReport solve_pinhole(const Raymap& raymap, const SolverOptions& options = {});

// Independent per-frame solves; per-frame failures are reported, not thrown.
SequenceSolveResult solve_sequence(const std::vector<Raymap>& raymaps,
                                   const SolverOptions& options = {});

struct IntrinsicsEstimate {
    double fx = 0, fy = 0, cx = 0, cy = 0;
    bool ok = false;
    std::string diagnostic;
};

// Linear least-squares pinhole fit to directions rotated into the camera
// frame by the given world-from-camera rotation.
IntrinsicsEstimate estimate_intrinsics_from_directions(const Raymap& raymap, const Mat3& rotation);

struct EllipsePath {
    Vec3 plane_origin;
    Vec3 plane_x, plane_y;     // orthonormal in-plane axes
    double center_x = 0, center_y = 0;
    double semi_major = 0, semi_minor = 0;
    double angle = 0;          // of the major axis in plane coordinates
    std::vector<Camera> cameras;
};

// Least-squares plane of the camera centers, direct conic fit with the
// ellipse constraint, then n_views cameras equally spaced in parameter angle
// looking at look_at. Throws on < 5 cameras or degenerate center layouts.
EllipsePath fit_ellipse_path(const std::vector<Camera>& cameras, int n_views, const Vec3& look_at);

}  // namespace mvd
