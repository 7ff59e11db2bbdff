#pragma once

// Flow-matching objective, mask sampling, classifier-free-guidance sampling
// with spatially varying weights, tiled joint denoising, the conditional
// validation loss and the transformer training loop.

#include <array>
#include <functional>
#include <memory>
#include <vector>

#include "mvd/dit.hpp"
#include "mvd/scenes.hpp"
#include "mvd/vae.hpp"

namespace mvd {

// z_t = (1 - t) z + t eps
template <typename T>
Tensor<T> add_noise(const Tensor<T>& z, double t, const Tensor<T>& eps);

// logit-normal: sigmoid of a gaussian draw
double sample_timestep(Rng& rng, double loc = 0.0, double scale = 1.0);

struct CfgWeights {
    double unknown_weight = 7.0;
    double known_weight = 1.1;
};

// W = known_weight * m + unknown_weight * (1 - m) at latent resolution
template <typename T>
Tensor<T> cfg_weight_map(const Tensor<T>& mask_ds, const CfgWeights& cfg);

enum class TrainTask { Image, Raymap };

struct RotatedRect {
    double cx, cy;            // center, pixels
    double half_w, half_h;    // extents
    double angle;             // radians
};

struct MaskPlan {
    enum class Role { Known, Unknown, Partial };
    TrainTask task = TrainTask::Image;
    std::vector<Role> image_roles, ray_roles;
    std::vector<std::vector<RotatedRect>> image_rects;  // per frame, Partial only
    bool drop_image_cond = false;
    bool drop_ray_cond = false;
    std::vector<float> loss_mask;  // per frame; 0 for frames without ground truth
};

// Mixed roles, image:raymap task mix 3:1, independent 10% conditioning
// dropout per modality.
MaskPlan sample_masks(Rng& rng, int n_frames);

// 1 = known; pixels inside any rectangle become unknown.
std::vector<float> rasterize_rect_mask(const std::vector<RotatedRect>& rects, int height,
                                       int width);

// Writes the plan's masks into the sequence (pixel values stay untouched;
// masking happens at encode time).
void apply_mask_plan(MultiViewSequence& seq, const MaskPlan& plan);

// Frozen VAEs wrapping pixel-space sequences into Eq-style channel stacks.
template <typename T>
class SequenceCodec {
  public:
    const Vae<T>* image_vae = nullptr;
    const Vae<T>* raymap_vae = nullptr;

    int factor() const { return image_vae->config.downscale_factor(); }
    int latent_dim() const { return image_vae->config.latent_dim; }

    Tensor<T> images_to_tensor(const MultiViewSequence& seq) const;   // [N,3,H,W]
    Tensor<T> raymaps_to_tensor(const MultiViewSequence& seq) const;  // [N,6,H,W]
    Tensor<T> image_masks_to_tensor(const MultiViewSequence& seq) const;  // [N,1,H,W]
    Tensor<T> ray_masks_to_tensor(const MultiViewSequence& seq) const;

    // clean latents of the full content, scaled for diffusion
    Tensor<T> encode_images(const MultiViewSequence& seq) const;
    Tensor<T> encode_raymaps(const MultiViewSequence& seq) const;

    struct Conditioning {
        Tensor<T> known_image, known_ray;      // [N,d,h,w]
        Tensor<T> image_mask_ds, ray_mask_ds;  // [N,1,h,w]
    };

    // known branches encode pixel-masked inputs; dropped conditioning zeroes
    // both the latent and the mask channels
    Conditioning encode_conditioning(const MultiViewSequence& seq, bool drop_image,
                                     bool drop_ray) const;
    Conditioning zero_conditioning(int n_frames, int h, int w) const;

    Tensor<T> assemble(const Conditioning& cond, const Tensor<T>& noisy_image,
                       const Tensor<T>& noisy_ray) const;

    std::vector<std::vector<float>> decode_images(const Tensor<T>& z_scaled) const;
    std::vector<Raymap> decode_raymaps(const Tensor<T>& z_scaled) const;
};

// A denoiser as the samplers see it: the forward pass over an assembled
// sequence plus the index-key convention. Wraps MvDit in production; tests
// inject oracles with known velocity fields.
template <typename T>
struct DenoiserView {
    using Output = typename MvDit<T>::Output;
    std::function<Output(const Tensor<T>& s, int batch, int n_frames,
                         const std::vector<double>& keys, const std::vector<double>& t)>
        forward;
    IndexMode index_mode = IndexMode::Full;
};

template <typename T>
DenoiserView<T> as_view(const MvDit<T>& model);

// Mean squared error between predicted and target velocity v = eps - z,
// restricted to the active task's head and loss-masked frames. Differentiable
// with respect to the model weights; rng drives t and eps draws.
template <typename T>
Tensor<T> training_loss(const DenoiserView<T>& model, const SequenceCodec<T>& codec,
                        const std::vector<MultiViewSequence>& batch,
                        const std::vector<MaskPlan>& plans, Rng& rng,
                        double timestep_loc = 0.0, double timestep_scale = 1.0);
template <typename T>
Tensor<T> training_loss(const MvDit<T>& model, const SequenceCodec<T>& codec,
                        const std::vector<MultiViewSequence>& batch,
                        const std::vector<MaskPlan>& plans, Rng& rng,
                        double timestep_loc = 0.0, double timestep_scale = 1.0);

struct SampleOptions {
    int steps = 24;
    CfgWeights cfg;
};

// (noisy image latents, noisy ray latents, t, conditional) -> velocities
template <typename T>
using LatentVelocityFn = std::function<std::pair<Tensor<T>, Tensor<T>>(
    const Tensor<T>&, const Tensor<T>&, double, bool)>;

// Euler integration from t=1 to t=0 over uniform steps with per-cell CFG
// blending v = v_uncond + W (v_cond - v_uncond).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> integrate_velocity_field(const LatentVelocityFn<T>& velocity,
                                                         Tensor<T> noisy_image,
                                                         Tensor<T> noisy_ray, int steps,
                                                         const Tensor<T>& weight_image,
                                                         const Tensor<T>& weight_ray);

// Full sampling call: encode conditioning, integrate, decode, composite known
// pixels back bit-exactly.
template <typename T>
MultiViewSequence sample(const DenoiserView<T>& model, const SequenceCodec<T>& codec,
                         const MultiViewSequence& conditioning, const SampleOptions& options,
                         Rng& rng);
template <typename T>
MultiViewSequence sample(const MvDit<T>& model, const SequenceCodec<T>& codec,
                         const MultiViewSequence& conditioning, const SampleOptions& options,
                         Rng& rng);

struct TiledOptions {
    int window = 8;
    int passes = 8;
    int steps = 24;
    CfgWeights cfg;
    // testing hooks: forced window starts (steps*passes entries) and a
    // per-frame coverage accumulator
    const std::vector<int>* window_starts = nullptr;
    std::vector<int>* coverage_probe = nullptr;
};

// Joint denoising over random contiguous (wraparound) windows; per-frame
// velocities are averaged over the windows covering the frame each step,
// uncovered frames keep their previous latent.
template <typename T>
MultiViewSequence tiled_denoise(const DenoiserView<T>& model, const SequenceCodec<T>& codec,
                                const MultiViewSequence& sequence, const TiledOptions& options,
                                Rng& rng);
template <typename T>
MultiViewSequence tiled_denoise(const MvDit<T>& model, const SequenceCodec<T>& codec,
                                const MultiViewSequence& sequence, const TiledOptions& options,
                                Rng& rng);

// ---- validation loss (VAL) ----

struct EvalItem {
    MultiViewSequence seq;       // masks applied: ~N/4 known, ~N/4 partial, rest unknown
    std::uint64_t noise_seed = 0;
};

std::vector<EvalItem> build_eval_items(const std::vector<Capture>& captures, int count,
                                       int sequence_size, int crop, Rng& rng);

// Image-head flow loss averaged over the eval set at `timesteps` equally
// spaced t values with per-item fixed noise. Deterministic given
// (checkpoint, set); invariant to item order.
template <typename T>
double val_loss(const DenoiserView<T>& model, const SequenceCodec<T>& codec,
                const std::vector<EvalItem>& items, int timesteps = 20);
template <typename T>
double val_loss(const MvDit<T>& model, const SequenceCodec<T>& codec,
                const std::vector<EvalItem>& items, int timesteps = 20);

// ---- training loop ----

struct DitTrainConfig {
    int steps = 20000;
    int batch = 4;
    int sequence_size = 8;
    int crop = 32;
    double lr = 1e-4;  // constant learning rate
    double grad_clip = 1.0;
    double image_task_prob = 0.75;
    double dropout_prob = 0.1;
    double timestep_loc = 0.0, timestep_scale = 1.0;
    std::uint64_t seed = 0;
    int val_every = 2000;
    int log_every = 100;
    int checkpoint_every = 5000;
    std::string checkpoint_dir;  // empty: keep in memory only
    double max_seconds = 12 * 3600.0;
    bool verbose = false;
};

struct DitTrainResult {
    Checkpoint bundle;  // "dit." + "image_vae." + "raymap_vae." tensors
    std::vector<std::array<double, 2>> loss_log;  // (step, loss)
    std::vector<std::array<double, 2>> val_log;   // (step, val)
    double val_init = 0, val_final = 0;
    bool diverged = false;
    std::int64_t steps_done = 0;
};

DitTrainResult train_dit(const std::vector<Capture>& captures, const Checkpoint& image_vae_ck,
                         const Checkpoint& raymap_vae_ck, const DitConfig& dit_config,
                         const DitTrainConfig& tc,
                         const std::vector<EvalItem>* eval_items = nullptr);

// Bundle helpers for inference commands.
struct LoadedModel {
    std::unique_ptr<MvDit<double>> model;
    std::unique_ptr<Vae<double>> image_vae;
    std::unique_ptr<Vae<double>> raymap_vae;
    SequenceCodec<double> codec;
};
LoadedModel load_bundle(const Checkpoint& ck);
Checkpoint make_bundle(const MvDit<float>& model, const Checkpoint& image_vae_ck,
                       const Checkpoint& raymap_vae_ck);

}  // namespace mvd
