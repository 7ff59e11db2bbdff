#include "mvd/normalreg.hpp"

#include <cmath>

#include "mvd/image_io.hpp"

namespace mvd {

namespace {

template <typename T>
Tensor<T> cross_channels(const Tensor<T>& a, const Tensor<T>& b) {
    // a, b: [..., 3]
    const int axis = a.ndim() - 1;
    auto ax = slice(a, axis, 0, 1), ay = slice(a, axis, 1, 1), az = slice(a, axis, 2, 1);
    auto bx = slice(b, axis, 0, 1), by = slice(b, axis, 1, 1), bz = slice(b, axis, 2, 1);
    auto cx = sub(mul(ay, bz), mul(az, by));
    auto cy = sub(mul(az, bx), mul(ax, bz));
    auto cz = sub(mul(ax, by), mul(ay, bx));
    return concat<T>({cx, cy, cz}, axis);
}

}  // namespace

template <typename T>
NormalBuffer<T> depth_to_normals(const Tensor<T>& depth, const Camera& camera) {
    if (depth.ndim() != 2) throw std::invalid_argument("depth_to_normals: depth must be [H,W]");
    const int h = static_cast<int>(depth.dim(0));
    const int w = static_cast<int>(depth.dim(1));
    NormalBuffer<T> buffer;
    buffer.height = h;
    buffer.width = w;
    buffer.validity.assign(std::size_t(h) * w, 0.f);
    if (h < 3 || w < 3) {
        buffer.normals = Tensor<T>::zeros({h, w, 3});
        return buffer;
    }

    // camera-frame unit rays through the pixel centers
    std::vector<T> dir_data(std::size_t(h) * w * 3);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            const Vec3 d = camera.pixel_ray_cam(c + 0.5, r + 0.5);
            for (int k = 0; k < 3; ++k) dir_data[(std::size_t(r) * w + c) * 3 + k] = T(d[k]);
        }
    auto dirs = Tensor<T>::from_data({h, w, 3}, std::move(dir_data));
    auto points = mul(reshape(depth, {h, w, 1}), dirs);  // [H,W,3]

    auto interior_rows = [&](const Tensor<T>& t, int r0) { return slice(t, 0, r0, h - 2); };
    auto interior_cols = [&](const Tensor<T>& t, int c0) { return slice(t, 1, c0, w - 2); };
    auto h_tan = sub(interior_cols(interior_rows(points, 1), 2),
                     interior_cols(interior_rows(points, 1), 0));
    auto v_tan = sub(interior_cols(interior_rows(points, 2), 1),
                     interior_cols(interior_rows(points, 0), 1));
    auto raw = cross_channels(h_tan, v_tan);  // [H-2, W-2, 3]

    // orientation: flip toward the camera; the sign is locally constant, so it
    // enters as a detached factor
    const T* rv = raw.data();
    const T* dp = depth.data();
    std::vector<T> sign_data(std::size_t(h - 2) * (w - 2), T(1));
    for (int r = 1; r < h - 1; ++r)
        for (int c = 1; c < w - 1; ++c) {
            const Vec3 dir = camera.pixel_ray_cam(c + 0.5, r + 0.5);
            const std::size_t i = std::size_t(r - 1) * (w - 2) + (c - 1);
            double dot = 0, norm2 = 0;
            for (int k = 0; k < 3; ++k) {
                dot += double(rv[i * 3 + k]) * dir[k];
                norm2 += double(rv[i * 3 + k]) * double(rv[i * 3 + k]);
            }
            if (dot > 0) sign_data[i] = T(-1);
            const bool neighbors_valid =
                dp[std::size_t(r) * w + c] > 0 && dp[std::size_t(r) * w + c - 1] > 0 &&
                dp[std::size_t(r) * w + c + 1] > 0 && dp[std::size_t(r - 1) * w + c] > 0 &&
                dp[std::size_t(r + 1) * w + c] > 0;
            if (neighbors_valid && norm2 > 1e-24)
                buffer.validity[std::size_t(r) * w + c] = 1.f;
        }
    auto sign = Tensor<T>::from_data({h - 2, w - 2, 1}, std::move(sign_data));
    auto oriented = mul(raw, sign);
    auto norm = sqrt_(add_scalar(sum_axis(square(oriented), 2, true), T(1e-24)));
    auto unit = div_(oriented, norm);

    // paste the interior back into a full-size buffer (borders invalid)
    auto nchw = reshape(permute(unit, {2, 0, 1}), {1, 3, h - 2, w - 2});
    auto padded = pad2d(nchw, 1, 1, 1, 1, PadMode::Zero);
    buffer.normals = permute(reshape(padded, {3, h, w}), {1, 2, 0});
    return buffer;
}

template <typename T>
Tensor<T> align_loss(const NormalBuffer<T>& rendered, const NormalBuffer<T>& depth_derived,
                     AlignMode mode) {
    if (rendered.height != depth_derived.height || rendered.width != depth_derived.width)
        throw std::invalid_argument("align_loss: buffer extents mismatch");
    const int h = rendered.height, w = rendered.width;
    std::vector<T> valid(std::size_t(h) * w);
    double count = 0;
    for (std::size_t i = 0; i < valid.size(); ++i) {
        valid[i] = T(rendered.validity[i] * depth_derived.validity[i]);
        count += double(valid[i]);
    }
    if (count == 0) return Tensor<T>::scalar(T(0));
    auto mask = Tensor<T>::from_data({h, w, 1}, std::move(valid));

    auto term = [&](const Tensor<T>& a, const Tensor<T>& b) {
        auto sq = sum_axis(square(sub(a, b)), 2, true);  // [H,W,1]
        return mul_scalar(sum_all(mul(sq, mask)), T(1.0 / count));
    };

    switch (mode) {
        case AlignMode::RenderedToDepth:
            return term(detach(rendered.normals), depth_derived.normals);
        case AlignMode::DepthToRendered:
            return term(rendered.normals, detach(depth_derived.normals));
        case AlignMode::Bidirectional:
        default:
            return add(term(detach(rendered.normals), depth_derived.normals),
                       term(rendered.normals, detach(depth_derived.normals)));
    }
}

template <typename T>
Tensor<T> tv_loss(const NormalBuffer<T>& buffer) {
    const int h = buffer.height, w = buffer.width;
    const auto& n = buffer.normals;
    double pairs = 0;
    std::vector<T> hmask(std::size_t(h) * (w - 1)), vmask(std::size_t(h - 1) * w);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c + 1 < w; ++c) {
            const float v = buffer.validity[std::size_t(r) * w + c] *
                            buffer.validity[std::size_t(r) * w + c + 1];
            hmask[std::size_t(r) * (w - 1) + c] = T(v);
            pairs += v;
        }
    for (int r = 0; r + 1 < h; ++r)
        for (int c = 0; c < w; ++c) {
            const float v = buffer.validity[std::size_t(r) * w + c] *
                            buffer.validity[std::size_t(r + 1) * w + c];
            vmask[std::size_t(r) * w + c] = T(v);
            pairs += v;
        }
    if (pairs == 0) return Tensor<T>::scalar(T(0));

    auto hdiff = sum_axis(square(sub(slice(n, 1, 1, w - 1), slice(n, 1, 0, w - 1))), 2, true);
    auto vdiff = sum_axis(square(sub(slice(n, 0, 1, h - 1), slice(n, 0, 0, h - 1))), 2, true);
    auto hsum = sum_all(mul(hdiff, Tensor<T>::from_data({h, w - 1, 1}, std::move(hmask))));
    auto vsum = sum_all(mul(vdiff, Tensor<T>::from_data({h - 1, w, 1}, std::move(vmask))));
    return mul_scalar(add(hsum, vsum), T(1.0 / pairs));
}

RegWeights regularization_schedule(std::int64_t step, std::int64_t start_step,
                                   const RegWeights& weights) {
    if (step < start_step) return RegWeights{0.0, 0.0};
    return weights;
}

template <typename T>
void save_normal_buffer(const std::string& path, const NormalBuffer<T>& buffer) {
    // invalid pixels are stored as zero vectors
    std::vector<float> data(std::size_t(buffer.height) * buffer.width * 3, 0.f);
    const T* n = buffer.normals.data();
    for (std::size_t i = 0; i < buffer.validity.size(); ++i)
        if (buffer.validity[i] != 0.f)
            for (int k = 0; k < 3; ++k) data[i * 3 + k] = float(n[i * 3 + k]);
    write_normals(path, buffer.height, buffer.width, data.data());
}

template <typename T>
NormalBuffer<T> load_normal_buffer(const std::string& path) {
    NormalBuffer<T> buffer;
    auto data = read_normals(path, buffer.height, buffer.width);
    buffer.validity.assign(std::size_t(buffer.height) * buffer.width, 0.f);
    std::vector<T> n(data.size());
    for (std::size_t i = 0; i < buffer.validity.size(); ++i) {
        double norm2 = 0;
        for (int k = 0; k < 3; ++k) {
            n[i * 3 + k] = T(data[i * 3 + k]);
            norm2 += double(data[i * 3 + k]) * data[i * 3 + k];
        }
        if (norm2 > 0.25) buffer.validity[i] = 1.f;
    }
    buffer.normals = Tensor<T>::from_data({buffer.height, buffer.width, 3}, std::move(n));
    return buffer;
}

#define MVD_NORMALREG_INSTANTIATE(T)                                                       \
    template NormalBuffer<T> depth_to_normals<T>(const Tensor<T>&, const Camera&);         \
    template Tensor<T> align_loss<T>(const NormalBuffer<T>&, const NormalBuffer<T>&,       \
                                     AlignMode);                                           \
    template Tensor<T> tv_loss<T>(const NormalBuffer<T>&);                                 \
    template void save_normal_buffer<T>(const std::string&, const NormalBuffer<T>&);       \
    template NormalBuffer<T> load_normal_buffer<T>(const std::string&);

MVD_NORMALREG_INSTANTIATE(float)
MVD_NORMALREG_INSTANTIATE(double)

#undef MVD_NORMALREG_INSTANTIATE

}  // namespace mvd
