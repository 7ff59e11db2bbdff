#pragma once

// Geometry regularization losses: depth-derived normals via central
// differences of backprojected points, the stop-gradient alignment loss, TV
// smoothness, and their activation schedule. All losses are differentiable
// tensor-engine functions usable inside an external splat trainer.

#include "mvd/geometry.hpp"
#include "mvd/tensor.hpp"

namespace mvd {

template <typename T>
struct NormalBuffer {
    Tensor<T> normals;          // [H, W, 3], unit where valid, camera frame
    std::vector<float> validity;  // H*W in {0,1}
    int height = 0, width = 0;
};

// Backprojects the 4-neighborhood of each pixel, forms central-difference
// tangents, and normalizes their cross product, flipped toward the camera
// (dot with the view ray <= 0). Border pixels and pixels touching invalid
// depth are masked out. Differentiable with respect to depth.
template <typename T>
NormalBuffer<T> depth_to_normals(const Tensor<T>& depth, const Camera& camera);

enum class AlignMode { Bidirectional, RenderedToDepth, DepthToRendered };

// Mean over valid pixels of |sg(N_r) - N_d|^2 (+ |N_r - sg(N_d)|^2 in
// bidirectional mode). Gradients flow only through the non-stopped operand
// of each term; empty validity overlap yields a zero loss.
template <typename T>
Tensor<T> align_loss(const NormalBuffer<T>& rendered, const NormalBuffer<T>& depth_derived,
                     AlignMode mode = AlignMode::Bidirectional);

// Mean squared horizontal + vertical finite difference over valid adjacent
// pixel pairs.
template <typename T>
Tensor<T> tv_loss(const NormalBuffer<T>& normals);

struct RegWeights {
    double align = 0.05;
    double tv = 0.01;
};

// Zero before start_step, the configured weights afterwards.
RegWeights regularization_schedule(std::int64_t step, std::int64_t start_step,
                                   const RegWeights& weights);

// Normal-buffer file exchange (header-compatible with the depth format).
template <typename T>
void save_normal_buffer(const std::string& path, const NormalBuffer<T>& buffer);
template <typename T>
NormalBuffer<T> load_normal_buffer(const std::string& path);

}  // namespace mvd
