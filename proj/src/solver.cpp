#include "mvd/solver.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace mvd {

namespace {

bool all_finite(const Raymap& rm) {
    for (const auto& o : rm.origins)
        if (!o.allFinite()) return false;
    for (const auto& d : rm.directions)
        if (!d.allFinite()) return false;
    return true;
}

// Orthogonal Procrustes: rotation R maximizing sum_i d_i . (R a_i).
// Returns false when the direction field is rank deficient (parallel rays).
bool procrustes(const std::vector<Vec3>& cam_dirs, const std::vector<Vec3>& world_dirs,
                const std::vector<int>& keep, Mat3& rotation) {
    Mat3 m = Mat3::Zero();
    for (int i : keep) m += world_dirs[i] * cam_dirs[i].transpose();
    Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const auto& s = svd.singularValues();
    if (s(0) <= 0 || s(1) / s(0) < 1e-9) return false;
    Mat3 d = Mat3::Identity();
    d(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() > 0 ? 1.0 : -1.0;
    rotation = svd.matrixU() * d * svd.matrixV().transpose();
    return true;
}

struct LinearFit {
    double slope = 0, intercept = 0;
    bool ok = false;
};

LinearFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
    LinearFit f;
    const std::size_t n = x.size();
    if (n < 2) return f;
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= double(n);
    my /= double(n);
    double sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    if (sxx < 1e-12 * double(n)) return f;  // rank deficient
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    f.ok = true;
    return f;
}

IntrinsicsEstimate fit_intrinsics(const Raymap& rm, const Mat3& rotation,
                                  const std::vector<int>& keep) {
    IntrinsicsEstimate est;
    std::vector<double> xs, us, ys, vs;
    xs.reserve(keep.size());
    for (int i : keep) {
        const Vec3 dc = rotation.transpose() * rm.directions[i];
        if (dc.z() >= -1e-9) continue;  // behind the image plane for this rotation
        const double u = (i % rm.width) + 0.5;
        const double v = (i / rm.width) + 0.5;
        xs.push_back(-dc.x() / dc.z());
        us.push_back(u);
        ys.push_back(-dc.y() / dc.z());
        vs.push_back(v);
    }
    if (xs.size() < 2) {
        est.diagnostic = "too few usable pixels";
        return est;
    }
    const LinearFit fu = fit_line(xs, us);  // u = fx * X + cx
    const LinearFit fv = fit_line(ys, vs);  // v = -fy * Y + cy
    if (!fu.ok || !fv.ok) {
        est.diagnostic = "rank-deficient intrinsics system";
        return est;
    }
    est.fx = fu.slope;
    est.fy = -fv.slope;
    est.cx = fu.intercept;
    est.cy = fv.intercept;
    if (est.fx <= 0 || est.fy <= 0) {
        est.diagnostic = "non-positive focal length";
        return est;
    }
    est.ok = true;
    return est;
}

std::vector<Vec3> canonical_dirs(int height, int width, double fx, double fy, double cx, double cy,
                                 const std::vector<int>& keep) {
    Camera cam;
    cam.fx = fx;
    cam.fy = fy;
    cam.cx = cx;
    cam.cy = cy;
    std::vector<Vec3> dirs(static_cast<std::size_t>(height) * width, Vec3::Zero());
    for (int i : keep) dirs[i] = cam.pixel_ray_cam((i % width) + 0.5, (i / width) + 0.5);
    return dirs;
}

double angular_error(const Vec3& a, const Vec3& b) {
    const double c = std::min(1.0, std::max(-1.0, a.dot(b)));
    return std::acos(c);
}

// Joint Gauss-Newton on (so(3) increment, fx, fy, cx, cy) minimizing
// sum |R a_i(K) - d_i|^2.
void gauss_newton_refine(const Raymap& rm, const std::vector<int>& keep, Mat3& rotation, double& fx,
                         double& fy, double& cx, double& cy, int iterations) {
    for (int it = 0; it < iterations; ++it) {
        Eigen::Matrix<double, 7, 7> h = Eigen::Matrix<double, 7, 7>::Zero();
        Eigen::Matrix<double, 7, 1> g = Eigen::Matrix<double, 7, 1>::Zero();
        for (int i : keep) {
            const double u = (i % rm.width) + 0.5;
            const double v = (i / rm.width) + 0.5;
            const Vec3 vv((u - cx) / fx, -(v - cy) / fy, -1.0);
            const double norm = vv.norm();
            const Vec3 a = vv / norm;
            const Vec3 ra = rotation * a;
            const Vec3 r = ra - rm.directions[i];

            Eigen::Matrix<double, 3, 7> jac;
            // d(R a)/d omega with right perturbation R exp([w]x) a = -R [a]x
            Mat3 ax;
            ax << 0, -a.z(), a.y(), a.z(), 0, -a.x(), -a.y(), a.x(), 0;
            jac.block<3, 3>(0, 0) = -rotation * ax;
            const Mat3 proj = (Mat3::Identity() - a * a.transpose()) / norm;
            Eigen::Matrix<double, 3, 4> dv;  // dv/d(fx,fy,cx,cy)
            dv.setZero();
            dv(0, 0) = -(u - cx) / (fx * fx);
            dv(1, 1) = (v - cy) / (fy * fy);
            dv(0, 2) = -1.0 / fx;
            dv(1, 3) = 1.0 / fy;
            jac.block<3, 4>(0, 3) = rotation * (proj * dv);

            h += jac.transpose() * jac;
            g += jac.transpose() * r;
        }
        const Eigen::Matrix<double, 7, 1> delta = h.ldlt().solve(-g);
        if (!delta.allFinite()) break;
        const Vec3 w = delta.head<3>();
        Mat3 wx;
        wx << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
        rotation = rotation * Eigen::AngleAxisd(w.norm(), w.norm() > 1e-18 ? Vec3(w / w.norm())
                                                                           : Vec3(1, 0, 0))
                                  .toRotationMatrix();
        fx += delta(3);
        fy += delta(4);
        cx += delta(5);
        cy += delta(6);
        if (delta.norm() < 1e-14) break;
    }
}

struct CoreSolve {
    Mat3 rotation;
    double fx, fy, cx, cy;
    int iterations = 0;
    bool ok = false;
    std::string diagnostic;
};

CoreSolve solve_rotation_intrinsics(const Raymap& rm, const std::vector<int>& keep,
                                    const SolverOptions& options) {
    CoreSolve cs;
    cs.fx = cs.fy = static_cast<double>(std::max(rm.width, rm.height));
    cs.cx = rm.width / 2.0;
    cs.cy = rm.height / 2.0;
    cs.rotation = Mat3::Identity();

    Mat3 prev = cs.rotation;
    for (cs.iterations = 1; cs.iterations <= options.max_iterations; ++cs.iterations) {
        const auto cam_dirs = canonical_dirs(rm.height, rm.width, cs.fx, cs.fy, cs.cx, cs.cy, keep);
        if (!procrustes(cam_dirs, rm.directions, keep, cs.rotation)) {
            cs.diagnostic = "ill-conditioned direction field (rays nearly parallel)";
            return cs;
        }
        const IntrinsicsEstimate est = fit_intrinsics(rm, cs.rotation, keep);
        if (!est.ok) {
            cs.diagnostic = "intrinsics fit failed: " + est.diagnostic;
            return cs;
        }
        cs.fx = est.fx;
        cs.fy = est.fy;
        cs.cx = est.cx;
        cs.cy = est.cy;
        const double update = rotation_geodesic_deg(prev, cs.rotation) * M_PI / 180.0;
        prev = cs.rotation;
        if (cs.iterations > 1 && update < options.rotation_tol) break;
    }
    gauss_newton_refine(rm, keep, cs.rotation, cs.fx, cs.fy, cs.cx, cs.cy, 10);
    cs.ok = true;
    return cs;
}

}  // namespace

Vec3 least_squares_ray_point(const std::vector<Vec3>& origins, const std::vector<Vec3>& directions,
                             bool* well_conditioned) {
    Mat3 a = Mat3::Zero();
    Vec3 b = Vec3::Zero();
    Vec3 mean = Vec3::Zero();
    for (std::size_t i = 0; i < origins.size(); ++i) {
        const Mat3 p = Mat3::Identity() - directions[i] * directions[i].transpose();
        a += p;
        b += p * origins[i];
        mean += origins[i];
    }
    mean /= double(origins.size());
    Eigen::JacobiSVD<Mat3> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const bool ok = svd.singularValues()(2) > 1e-9 * std::max(1.0, svd.singularValues()(0));
    if (well_conditioned) *well_conditioned = ok;
    if (!ok) return mean;
    return svd.solve(b);
}

SolveReport solve_pinhole(const Raymap& raymap, const SolverOptions& options) {
    SolveReport report;
    if (raymap.size() < 2) {
        report.diagnostic = "raymap too small";
        return report;
    }
    if (!all_finite(raymap)) {
        report.diagnostic = "non-finite raymap values";
        return report;
    }

    // center estimate: exact on constant origins, robust otherwise
    bool constant_origins = true;
    for (const auto& o : raymap.origins)
        if ((o - raymap.origins[0]).cwiseAbs().maxCoeff() > 1e-9) {
            constant_origins = false;
            break;
        }
    if (constant_origins) {
        report.camera.center = raymap.origins[0];
    } else if (options.trim_fraction > 0) {
        // coordinate-wise median shrugs off outlier pixels
        for (int k = 0; k < 3; ++k) {
            std::vector<double> c(raymap.size());
            for (std::size_t i = 0; i < raymap.size(); ++i) c[i] = raymap.origins[i][k];
            std::nth_element(c.begin(), c.begin() + c.size() / 2, c.end());
            report.camera.center[k] = c[c.size() / 2];
        }
    } else {
        report.camera.center = least_squares_ray_point(raymap.origins, raymap.directions);
    }

    std::vector<int> keep(raymap.size());
    std::iota(keep.begin(), keep.end(), 0);

    CoreSolve cs = solve_rotation_intrinsics(raymap, keep, options);
    if (!cs.ok) {
        report.diagnostic = cs.diagnostic;
        report.iterations = cs.iterations;
        return report;
    }

    if (options.trim_fraction > 0) {
        // rank pixels by angular residual, drop the worst, re-solve
        Camera cam;
        cam.fx = cs.fx;
        cam.fy = cs.fy;
        cam.cx = cs.cx;
        cam.cy = cs.cy;
        cam.rotation = cs.rotation;
        std::vector<std::pair<double, int>> ranked(raymap.size());
        for (std::size_t i = 0; i < raymap.size(); ++i) {
            const Vec3 bp = cam.pixel_ray((i % raymap.width) + 0.5, (i / raymap.width) + 0.5);
            ranked[i] = {angular_error(bp, raymap.directions[i]), static_cast<int>(i)};
        }
        std::sort(ranked.begin(), ranked.end());
        const std::size_t kept_n = std::max<std::size_t>(
            8, static_cast<std::size_t>(std::round((1.0 - options.trim_fraction) * raymap.size())));
        keep.clear();
        for (std::size_t i = 0; i < kept_n && i < ranked.size(); ++i) keep.push_back(ranked[i].second);
        std::sort(keep.begin(), keep.end());
        cs = solve_rotation_intrinsics(raymap, keep, options);
        if (!cs.ok) {
            report.diagnostic = cs.diagnostic;
            report.iterations = cs.iterations;
            return report;
        }
    }

    report.camera.fx = cs.fx;
    report.camera.fy = cs.fy;
    report.camera.cx = cs.cx;
    report.camera.cy = cs.cy;
    report.camera.rotation = cs.rotation;
    report.iterations = cs.iterations;

    double dir_err = 0.0, orig_err = 0.0;
    for (int i : keep) {
        const Vec3 bp =
            report.camera.pixel_ray((i % raymap.width) + 0.5, (i / raymap.width) + 0.5);
        dir_err += angular_error(bp, raymap.directions[i]);
        orig_err += (raymap.origins[i] - report.camera.center).norm();
    }
    report.mean_direction_error = dir_err / double(keep.size());
    report.mean_origin_error = orig_err / double(keep.size());
    report.converged = report.mean_direction_error < options.direction_error_threshold &&
                       report.mean_origin_error < options.origin_error_threshold;
    if (!report.converged) report.diagnostic = "residuals above thresholds";
    return report;
}

SequenceSolveResult solve_sequence(const std::vector<Raymap>& raymaps,
                                   const SolverOptions& options) {
    SequenceSolveResult result;
    const auto t0 = std::chrono::steady_clock::now();
    result.reports.reserve(raymaps.size());
    for (const auto& rm : raymaps) result.reports.push_back(solve_pinhole(rm, options));
    result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

IntrinsicsEstimate estimate_intrinsics_from_directions(const Raymap& raymap, const Mat3& rotation) {
    std::vector<int> keep(raymap.size());
    std::iota(keep.begin(), keep.end(), 0);
    return fit_intrinsics(raymap, rotation, keep);
}

EllipsePath fit_ellipse_path(const std::vector<Camera>& cameras, int n_views, const Vec3& look_at) {
    if (cameras.size() < 5)
        throw std::invalid_argument("fit_ellipse_path: need at least 5 cameras, got " +
                                    std::to_string(cameras.size()));
    if (n_views < 1) throw std::invalid_argument("fit_ellipse_path: n_views must be >= 1");

    // best-fit plane of the centers
    Vec3 mean = Vec3::Zero();
    for (const auto& c : cameras) mean += c.center;
    mean /= double(cameras.size());
    Mat3 cov = Mat3::Zero();
    for (const auto& c : cameras) {
        const Vec3 d = c.center - mean;
        cov += d * d.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    // eigenvalues ascending: [2] and [1] span the plane
    if (eig.eigenvalues()(1) < 1e-10 * std::max(1.0, eig.eigenvalues()(2)))
        throw std::invalid_argument("fit_ellipse_path: camera centers are collinear");

    EllipsePath path;
    path.plane_origin = mean;
    path.plane_x = eig.eigenvectors().col(2);
    path.plane_y = eig.eigenvectors().col(1);

    const std::size_t n = cameras.size();
    std::vector<double> px(n), py(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Vec3 d = cameras[i].center - mean;
        px[i] = d.dot(path.plane_x);
        py[i] = d.dot(path.plane_y);
    }

    // Halir-Flusser direct least-squares ellipse fit
    Eigen::MatrixXd d1(n, 3), d2(n, 3);
    for (std::size_t i = 0; i < n; ++i) {
        d1(i, 0) = px[i] * px[i];
        d1(i, 1) = px[i] * py[i];
        d1(i, 2) = py[i] * py[i];
        d2(i, 0) = px[i];
        d2(i, 1) = py[i];
        d2(i, 2) = 1.0;
    }
    const Mat3 s1 = d1.transpose() * d1;
    const Mat3 s2 = d1.transpose() * d2;
    const Mat3 s3 = d2.transpose() * d2;
    const Eigen::FullPivLU<Mat3> s3lu(s3);
    if (!s3lu.isInvertible())
        throw std::invalid_argument("fit_ellipse_path: degenerate center configuration");
    const Mat3 t = -s3lu.inverse() * s2.transpose();
    const Mat3 m_full = s1 + s2 * t;
    Mat3 m;  // C^-1 * M with C = [[0,0,2],[0,-1,0],[2,0,0]]
    m.row(0) = m_full.row(2) / 2.0;
    m.row(1) = -m_full.row(1);
    m.row(2) = m_full.row(0) / 2.0;

    Eigen::EigenSolver<Mat3> es(m);
    int best = -1;
    for (int i = 0; i < 3; ++i) {
        if (std::abs(es.eigenvalues()(i).imag()) > 1e-9) continue;
        const Vec3 v = es.eigenvectors().col(i).real();
        const double cond = 4.0 * v(0) * v(2) - v(1) * v(1);
        if (cond > 0) best = i;
    }
    if (best < 0) throw std::invalid_argument("fit_ellipse_path: no ellipse solution found");
    const Vec3 abc = es.eigenvectors().col(best).real();
    const Vec3 def = t * abc;
    const double a = abc(0), b = abc(1), c = abc(2), d = def(0), e = def(1), f = def(2);

    // conic to center/axes/angle
    const double den = 4.0 * a * c - b * b;
    path.center_x = (b * e - 2.0 * c * d) / den;
    path.center_y = (b * d - 2.0 * a * e) / den;
    const double f0 =
        a * path.center_x * path.center_x + b * path.center_x * path.center_y +
        c * path.center_y * path.center_y + d * path.center_x + e * path.center_y + f;
    Eigen::Matrix2d quad;
    quad << a, b / 2.0, b / 2.0, c;
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> qe(quad);
    const double l1 = qe.eigenvalues()(0), l2 = qe.eigenvalues()(1);
    if (!(l1 * -f0 > 0) || !(l2 * -f0 > 0))
        throw std::invalid_argument("fit_ellipse_path: fitted conic is not an ellipse");
    const double axis1 = std::sqrt(-f0 / l1);
    const double axis2 = std::sqrt(-f0 / l2);
    Eigen::Vector2d major_dir;
    if (axis1 >= axis2) {
        path.semi_major = axis1;
        path.semi_minor = axis2;
        major_dir = qe.eigenvectors().col(0);
    } else {
        path.semi_major = axis2;
        path.semi_minor = axis1;
        major_dir = qe.eigenvectors().col(1);
    }
    path.angle = std::atan2(major_dir(1), major_dir(0));

    // mean intrinsics for the generated cameras
    double fx = 0, fy = 0, cx = 0, cy = 0;
    for (const auto& cam : cameras) {
        fx += cam.fx;
        fy += cam.fy;
        cx += cam.cx;
        cy += cam.cy;
    }
    fx /= double(n);
    fy /= double(n);
    cx /= double(n);
    cy /= double(n);

    const Eigen::Vector2d e1(std::cos(path.angle), std::sin(path.angle));
    const Eigen::Vector2d e2(-std::sin(path.angle), std::cos(path.angle));
    path.cameras.reserve(n_views);
    for (int k = 0; k < n_views; ++k) {
        const double phi = 2.0 * M_PI * double(k) / double(n_views);
        const Eigen::Vector2d p2 = Eigen::Vector2d(path.center_x, path.center_y) +
                                   path.semi_major * std::cos(phi) * e1 +
                                   path.semi_minor * std::sin(phi) * e2;
        const Vec3 p3 = mean + p2(0) * path.plane_x + p2(1) * path.plane_y;
        path.cameras.push_back(look_at_camera(p3, look_at, fx, fy, cx, cy));
    }
    return path;
}

}  // namespace mvd
