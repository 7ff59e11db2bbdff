#include "mvd/metrics.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <cstdio>

namespace mvd {

double psnr(const std::vector<float>& a, const std::vector<float>& b, double peak) {
    if (a.size() != b.size() || a.empty()) throw std::invalid_argument("psnr: shape mismatch");
    double mse = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = double(a[i]) - double(b[i]);
        mse += d * d;
    }
    mse /= double(a.size());
    if (mse <= 0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(peak * peak / mse));
}

double psnr_region(const std::vector<float>& a, const std::vector<float>& b,
                   const std::vector<float>& region, int channels, double peak) {
    if (a.size() != b.size() || a.size() != region.size() * channels)
        throw std::invalid_argument("psnr_region: shape mismatch");
    double mse = 0;
    std::int64_t count = 0;
    for (std::size_t p = 0; p < region.size(); ++p) {
        if (region[p] == 0.f) continue;
        for (int c = 0; c < channels; ++c) {
            const double d = double(a[p * channels + c]) - double(b[p * channels + c]);
            mse += d * d;
            ++count;
        }
    }
    if (count == 0) throw std::invalid_argument("psnr_region: empty region");
    mse /= double(count);
    if (mse <= 0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(peak * peak / mse));
}

double ssim(const std::vector<float>& a, const std::vector<float>& b, int height, int width,
            int channels, double peak) {
    if (a.size() != b.size() ||
        a.size() != std::size_t(height) * width * channels)
        throw std::invalid_argument("ssim: shape mismatch");
    constexpr int kWin = 11;
    if (height < kWin || width < kWin)
        throw std::invalid_argument("ssim: image smaller than the 11x11 window");
    // gaussian window, sigma 1.5
    double kernel[kWin];
    double ksum = 0;
    for (int i = 0; i < kWin; ++i) {
        const double x = i - kWin / 2;
        kernel[i] = std::exp(-x * x / (2.0 * 1.5 * 1.5));
        ksum += kernel[i];
    }
    for (auto& k : kernel) k /= ksum;

    const double c1 = (0.01 * peak) * (0.01 * peak);
    const double c2 = (0.03 * peak) * (0.03 * peak);

    double total = 0;
    std::int64_t count = 0;
    for (int ch = 0; ch < channels; ++ch) {
        for (int r = 0; r + kWin <= height; ++r) {
            for (int c = 0; c + kWin <= width; ++c) {
                double ma = 0, mb = 0, va = 0, vb = 0, cov = 0;
                for (int i = 0; i < kWin; ++i)
                    for (int j = 0; j < kWin; ++j) {
                        const double wgt = kernel[i] * kernel[j];
                        const std::size_t idx =
                            (std::size_t(r + i) * width + (c + j)) * channels + ch;
                        ma += wgt * a[idx];
                        mb += wgt * b[idx];
                    }
                for (int i = 0; i < kWin; ++i)
                    for (int j = 0; j < kWin; ++j) {
                        const double wgt = kernel[i] * kernel[j];
                        const std::size_t idx =
                            (std::size_t(r + i) * width + (c + j)) * channels + ch;
                        va += wgt * (a[idx] - ma) * (a[idx] - ma);
                        vb += wgt * (b[idx] - mb) * (b[idx] - mb);
                        cov += wgt * (a[idx] - ma) * (b[idx] - mb);
                    }
                const double s = ((2 * ma * mb + c1) * (2 * cov + c2)) /
                                 ((ma * ma + mb * mb + c1) * (va + vb + c2));
                total += s;
                ++count;
            }
        }
    }
    return total / double(count);
}

namespace {

// pixel -> normalized CV coordinates (x right, y down, z forward)
Eigen::Vector2d normalized_coords(double u, double v, const Camera& cam) {
    return {(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy};
}

constexpr double kPureRotationResidual = 1e-6;  // radians

// Converts a rotation between CV camera frames to this project's camera
// frames (x right, y up, z backward): R_ours = F R_cv F with F = diag(1,-1,-1).
Mat3 cv_to_ours(const Mat3& r) {
    Mat3 f = Mat3::Identity();
    f(1, 1) = -1;
    f(2, 2) = -1;
    return f * r * f;
}

}  // namespace

Mat3 relative_rotation_from_matches(const std::vector<Match>& matches, const Camera& cam_a,
                                    const Camera& cam_b) {
    if (matches.size() < 8)
        throw std::invalid_argument("relative_rotation_from_matches: need >= 8 matches, got " +
                                    std::to_string(matches.size()));
    const std::size_t n = matches.size();

    // ray bundles in CV coordinates
    std::vector<Vec3> da(n), db(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto xa = normalized_coords(matches[i].ua, matches[i].va, cam_a);
        const auto xb = normalized_coords(matches[i].ub, matches[i].vb, cam_b);
        da[i] = Vec3(xa.x(), xa.y(), 1.0).normalized();
        db[i] = Vec3(xb.x(), xb.y(), 1.0).normalized();
    }

    // pure-rotation handling: if a single rotation aligns the ray bundles to
    // numerical precision, the essential matrix is degenerate and the
    // Procrustes fit is the right estimator
    Mat3 m = Mat3::Zero();
    for (std::size_t i = 0; i < n; ++i) m += db[i] * da[i].transpose();
    Eigen::JacobiSVD<Mat3> msvd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 dfix = Mat3::Identity();
    dfix(2, 2) = (msvd.matrixU() * msvd.matrixV().transpose()).determinant() > 0 ? 1 : -1;
    const Mat3 r_procrustes = msvd.matrixU() * dfix * msvd.matrixV().transpose();
    double residual = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double c = std::min(1.0, std::max(-1.0, (r_procrustes * da[i]).dot(db[i])));
        residual += std::acos(c);
    }
    residual /= double(n);
    if (residual < kPureRotationResidual) return cv_to_ours(r_procrustes);

    // Hartley normalization of the inhomogeneous coordinates
    auto normalize_set = [](std::vector<Eigen::Vector2d>& pts, Mat3& t) {
        Eigen::Vector2d mean = Eigen::Vector2d::Zero();
        for (const auto& p : pts) mean += p;
        mean /= double(pts.size());
        double dist = 0;
        for (const auto& p : pts) dist += (p - mean).norm();
        dist /= double(pts.size());
        const double scale = dist > 1e-12 ? std::sqrt(2.0) / dist : 1.0;
        t.setIdentity();
        t(0, 0) = t(1, 1) = scale;
        t(0, 2) = -scale * mean.x();
        t(1, 2) = -scale * mean.y();
        for (auto& p : pts) p = scale * (p - mean);
    };
    std::vector<Eigen::Vector2d> pa(n), pb(n);
    for (std::size_t i = 0; i < n; ++i) {
        pa[i] = normalized_coords(matches[i].ua, matches[i].va, cam_a);
        pb[i] = normalized_coords(matches[i].ub, matches[i].vb, cam_b);
    }
    Mat3 ta, tb;
    normalize_set(pa, ta);
    normalize_set(pb, tb);

    Eigen::MatrixXd a(n, 9);
    for (std::size_t i = 0; i < n; ++i) {
        const double x1 = pa[i].x(), y1 = pa[i].y();
        const double x2 = pb[i].x(), y2 = pb[i].y();
        a.row(i) << x2 * x1, x2 * y1, x2, y2 * x1, y2 * y1, y2, x1, y1, 1.0;
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    if (sv(7) < 1e-12 * std::max(1.0, sv(0)))
        throw std::invalid_argument(
            "relative_rotation_from_matches: degenerate configuration (rank-deficient system)");
    Eigen::Matrix<double, 9, 1> e_vec = svd.matrixV().col(8);
    Mat3 e_norm;
    e_norm << e_vec(0), e_vec(1), e_vec(2), e_vec(3), e_vec(4), e_vec(5), e_vec(6), e_vec(7),
        e_vec(8);
    Mat3 e = tb.transpose() * e_norm * ta;

    // project onto the essential manifold: two equal singular values
    Eigen::JacobiSVD<Mat3> esvd(e, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 u = esvd.matrixU();
    Mat3 v = esvd.matrixV();
    if (u.determinant() < 0) u.col(2) *= -1;
    if (v.determinant() < 0) v.col(2) *= -1;
    Mat3 w;
    w << 0, -1, 0, 1, 0, 0, 0, 0, 1;

    const Mat3 r1 = u * w * v.transpose();
    const Mat3 r2 = u * w.transpose() * v.transpose();
    const Vec3 t_dir = u.col(2);

    // cheirality: count points with positive depth in both views
    auto depth_votes = [&](const Mat3& r, const Vec3& t) {
        int votes = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const Vec3 ra = r * da[i];
            const Vec3 cross_b = db[i].cross(ra);
            const double denom = cross_b.squaredNorm();
            if (denom < 1e-18) continue;
            const double za = -db[i].cross(t).dot(cross_b) / denom;
            const Vec3 pb_point = r * (za * da[i]) + t;
            if (za > 0 && pb_point.z() > 0) ++votes;
        }
        return votes;
    };
    int best_votes = -1;
    Mat3 best_r = r1;
    for (const Mat3& r : {r1, r2}) {
        for (const double s : {1.0, -1.0}) {
            const int votes = depth_votes(r, s * t_dir);
            if (votes > best_votes) {
                best_votes = votes;
                best_r = r;
            }
        }
    }
    return cv_to_ours(best_r);
}

RotationAccuracyResult relative_rotation_accuracy(const std::vector<VideoFrame>& video, int pairs,
                                                  double threshold_deg, const Matcher& matcher,
                                                  Rng& rng, double max_pair_seconds) {
    // enumerate admissible pairs within the time window
    std::vector<std::pair<int, int>> candidates;
    for (std::size_t i = 0; i < video.size(); ++i)
        for (std::size_t j = i + 1; j < video.size(); ++j)
            if (std::abs(video[i].time - video[j].time) <= max_pair_seconds)
                candidates.emplace_back(static_cast<int>(i), static_cast<int>(j));
    if (candidates.empty())
        throw DataError("relative_rotation_accuracy: no frame pairs within the time window");

    RotationAccuracyResult result;
    int within = 0;
    for (int k = 0; k < pairs; ++k) {
        const auto [ia, ib] = candidates[rng.uniform_index(candidates.size())];
        RotationPairResult pr;
        pr.frame_a = ia;
        pr.frame_b = ib;
        const auto matches = matcher(ia, ib);
        pr.matches = static_cast<int>(matches.size());
        pr.estimated = relative_rotation_from_matches(matches, video[ia].camera, video[ib].camera);
        pr.ground_truth = video[ib].camera.rotation.transpose() * video[ia].camera.rotation;
        pr.error_deg = rotation_geodesic_deg(pr.estimated, pr.ground_truth);
        if (pr.error_deg <= threshold_deg) ++within;
        result.pairs.push_back(pr);
    }
    result.accuracy = double(within) / double(pairs);
    return result;
}

std::string format_metric_record(const std::string& name, double value,
                                 const std::string& config_hash) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", value);
    return name + " " + buf + " " + config_hash;
}

}  // namespace mvd
