#include "mvd/geometry.hpp"

#include <cmath>

namespace mvd {

void Camera::validate(double width, double height, double tol) const {
    if (!(fx > 0) || !(fy > 0))
        throw std::invalid_argument("camera: focal lengths must be positive");
    if (!(cx > 0 && cx < width) || !(cy > 0 && cy < height))
        throw std::invalid_argument("camera: principal point outside image");
    const Mat3 rtr = rotation.transpose() * rotation;
    if ((rtr - Mat3::Identity()).cwiseAbs().maxCoeff() > tol)
        throw std::invalid_argument("camera: rotation is not orthonormal");
    if (std::abs(rotation.determinant() - 1.0) > tol)
        throw std::invalid_argument("camera: rotation determinant is not +1");
    if (!center.allFinite()) throw std::invalid_argument("camera: non-finite center");
}

Vec3 Camera::pixel_ray_cam(double u, double v) const {
    const Vec3 d((u - cx) / fx, -(v - cy) / fy, -1.0);
    return d.normalized();
}

Vec3 Camera::pixel_ray(double u, double v) const { return rotation * pixel_ray_cam(u, v); }

bool Camera::project(const Vec3& p, double& u, double& v) const {
    const Vec3 pc = rotation.transpose() * (p - center);
    if (pc.z() >= -1e-12) return false;
    u = cx + fx * (pc.x() / -pc.z());
    v = cy - fy * (pc.y() / -pc.z());
    return true;
}

void Raymap::validate(double tol, bool normalized_origins) const {
    if (height <= 0 || width <= 0 || origins.size() != static_cast<std::size_t>(height) * width ||
        directions.size() != origins.size())
        throw std::invalid_argument("raymap: inconsistent extents");
    for (const auto& d : directions) {
        const double n = d.norm();
        if (std::abs(n - 1.0) > tol)
            throw std::invalid_argument("raymap: direction norm " + std::to_string(n) +
                                        " out of tolerance");
    }
    if (normalized_origins) {
        for (const auto& o : origins)
            if (o.cwiseAbs().maxCoeff() > 1.0 + tol)
                throw std::invalid_argument("raymap: origin outside [-1,1] cube");
    }
}

Camera SimilarityTransform::apply_camera(const Camera& c) const {
    Camera out = c;
    out.rotation = rotation * c.rotation;
    out.center = apply_point(c.center);
    return out;
}

SimilarityTransform SimilarityTransform::inverse() const {
    SimilarityTransform inv;
    inv.scale = 1.0 / scale;
    inv.rotation = rotation.transpose();
    inv.translation = -inv.scale * (inv.rotation * translation);
    return inv;
}

Camera look_at_camera(const Vec3& position, const Vec3& target, double fx, double fy, double cx,
                      double cy, const Vec3& up_hint) {
    const Vec3 fwd_raw = target - position;
    if (fwd_raw.norm() < 1e-12)
        throw std::invalid_argument("look_at_camera: target coincides with position");
    const Vec3 f = fwd_raw.normalized();
    Vec3 up = up_hint;
    if (std::abs(f.dot(up.normalized())) > 1.0 - 1e-9) up = Vec3(1, 0, 0);
    const Vec3 zc = -f;
    const Vec3 xc = up.cross(zc).normalized();
    const Vec3 yc = zc.cross(xc);
    Camera cam;
    cam.fx = fx;
    cam.fy = fy;
    cam.cx = cx;
    cam.cy = cy;
    cam.rotation.col(0) = xc;
    cam.rotation.col(1) = yc;
    cam.rotation.col(2) = zc;
    cam.center = position;
    return cam;
}

Mat3 rotation_about_y(double angle) {
    Mat3 r;
    const double c = std::cos(angle), s = std::sin(angle);
    r << c, 0, s, 0, 1, 0, -s, 0, c;
    return r;
}

double rotation_geodesic_deg(const Mat3& a, const Mat3& b) {
    const double tr = (a.transpose() * b).trace();
    const double c = std::min(1.0, std::max(-1.0, (tr - 1.0) / 2.0));
    return std::acos(c) * 180.0 / M_PI;
}

Raymap camera_to_raymap(const Camera& camera, int height, int width) {
    if (height < 1 || width < 1) throw std::invalid_argument("camera_to_raymap: bad extents");
    if (!(camera.fx > 0) || !(camera.fy > 0))
        throw std::invalid_argument("camera_to_raymap: degenerate intrinsics");
    Raymap rm;
    rm.height = height;
    rm.width = width;
    rm.origins.assign(static_cast<std::size_t>(height) * width, camera.center);
    rm.directions.resize(rm.origins.size());
    for (int r = 0; r < height; ++r)
        for (int c = 0; c < width; ++c)
            rm.directions[static_cast<std::size_t>(r) * width + c] =
                camera.pixel_ray(c + 0.5, r + 0.5);
    return rm;
}

namespace {

// Minimal rotation taking unit vector a to unit vector b.
Mat3 rotation_between(const Vec3& a, const Vec3& b) {
    const Vec3 axis_raw = a.cross(b);
    const double s = axis_raw.norm();
    const double c = a.dot(b);
    if (s < 1e-12) {
        if (c > 0) return Mat3::Identity();
        // antiparallel: rotate pi about any axis orthogonal to a
        Vec3 axis = a.cross(Vec3(1, 0, 0));
        if (axis.norm() < 1e-6) axis = a.cross(Vec3(0, 0, 1));
        return Eigen::AngleAxisd(M_PI, axis.normalized()).toRotationMatrix();
    }
    return Eigen::AngleAxisd(std::atan2(s, c), axis_raw / s).toRotationMatrix();
}

double azimuth(const Vec3& v) { return std::atan2(v.x(), -v.z()); }

}  // namespace

NormalizeResult normalize_sequence(const std::vector<Camera>& cameras, std::size_t pivot_index,
                                   double margin) {
    if (cameras.empty()) throw std::invalid_argument("normalize_sequence: empty camera list");
    if (pivot_index >= cameras.size())
        throw std::invalid_argument("normalize_sequence: pivot index out of range");

    const Camera& pivot = cameras[pivot_index];
    const Mat3 align_up = rotation_between(pivot.up_dir(), Vec3(0, 1, 0));
    const Vec3 look = pivot.look_dir();
    const double yaw = azimuth(look) - azimuth(align_up * look);
    const Mat3 g = rotation_about_y(yaw) * align_up;

    double max_abs = 0.0;
    std::vector<Vec3> centered(cameras.size());
    for (std::size_t i = 0; i < cameras.size(); ++i) {
        centered[i] = g * (cameras[i].center - pivot.center);
        max_abs = std::max(max_abs, centered[i].cwiseAbs().maxCoeff());
    }
    const double scale = max_abs < 1e-12 ? 1.0 : margin / max_abs;

    NormalizeResult res;
    res.transform.scale = scale;
    res.transform.rotation = g;
    res.transform.translation = -scale * (g * pivot.center);
    res.cameras.reserve(cameras.size());
    for (std::size_t i = 0; i < cameras.size(); ++i) {
        Camera c = cameras[i];
        c.rotation = g * c.rotation;
        c.center = scale * centered[i];
        res.cameras.push_back(c);
    }
    return res;
}

std::vector<Camera> augment_sequence_with(const std::vector<Camera>& cameras, double angle,
                                          double scale, double margin) {
    const Mat3 r = rotation_about_y(angle);
    std::vector<Camera> out = cameras;
    double max_abs = 0.0;
    for (auto& c : out) {
        c.rotation = r * c.rotation;
        c.center = scale * (r * c.center);
        max_abs = std::max(max_abs, c.center.cwiseAbs().maxCoeff());
    }
    if (max_abs > margin) {
        const double fix = margin / max_abs;
        for (auto& c : out) c.center *= fix;
    }
    return out;
}

std::vector<Camera> augment_sequence(const std::vector<Camera>& cameras, Rng& rng) {
    const double angle = rng.uniform(0.0, 2.0 * M_PI);
    const double scale = rng.uniform(0.6, 1.1);
    return augment_sequence_with(cameras, angle, scale);
}

template <typename T>
Tensor<T> pack_raymap(const Raymap& raymap) {
    std::vector<T> data(raymap.size() * 6);
    for (std::size_t i = 0; i < raymap.size(); ++i) {
        for (int k = 0; k < 3; ++k) {
            data[i * 6 + k] = static_cast<T>(raymap.origins[i][k]);
            data[i * 6 + 3 + k] = static_cast<T>(raymap.directions[i][k]);
        }
    }
    return Tensor<T>::from_data({raymap.height, raymap.width, 6}, std::move(data));
}

template <typename T>
Raymap unpack_raymap(const Tensor<T>& tensor) {
    if (tensor.ndim() != 3 || tensor.dim(2) != 6)
        throw std::invalid_argument("unpack_raymap: expected [H,W,6], got " +
                                    shape_str(tensor.shape()));
    Raymap rm;
    rm.height = static_cast<int>(tensor.dim(0));
    rm.width = static_cast<int>(tensor.dim(1));
    rm.origins.resize(static_cast<std::size_t>(rm.height) * rm.width);
    rm.directions.resize(rm.origins.size());
    const T* v = tensor.data();
    for (std::size_t i = 0; i < rm.origins.size(); ++i) {
        rm.origins[i] = Vec3(v[i * 6 + 0], v[i * 6 + 1], v[i * 6 + 2]);
        Vec3 d(v[i * 6 + 3], v[i * 6 + 4], v[i * 6 + 5]);
        const double n = d.norm();
        if (n < 1e-9)
            throw std::invalid_argument("unpack_raymap: zero-norm direction at pixel " +
                                        std::to_string(i));
        rm.directions[i] = d;
    }
    return rm;
}

void MultiViewSequence::validate() const {
    for (const auto& f : frames) {
        if (static_cast<int>(f.raymap.height) != height || f.raymap.width != width)
            throw std::invalid_argument("sequence: frame extents mismatch");
        const std::size_t hw = static_cast<std::size_t>(height) * width;
        if (f.image.size() != hw * 3 || f.image_mask.size() != hw || f.ray_mask.size() != hw)
            throw std::invalid_argument("sequence: buffer size mismatch");
        for (float m : f.image_mask)
            if (m != 0.f && m != 1.f) throw std::invalid_argument("sequence: non-binary image mask");
        for (float m : f.ray_mask)
            if (m != 0.f && m != 1.f) throw std::invalid_argument("sequence: non-binary ray mask");
        f.raymap.validate();
    }
}

template Tensor<float> pack_raymap<float>(const Raymap&);
template Tensor<double> pack_raymap<double>(const Raymap&);
template Raymap unpack_raymap<float>(const Tensor<float>&);
template Raymap unpack_raymap<double>(const Tensor<double>&);

}  // namespace mvd
