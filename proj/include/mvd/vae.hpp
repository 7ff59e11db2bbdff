#pragma once

// Convolutional autoencoders compressing images (3ch) and raymaps (6ch) to
// d-channel latents at 1/f resolution, plus the mask downscaler.

#include <memory>
#include <string>
#include <vector>

#include "mvd/checkpoint.hpp"
#include "mvd/nn.hpp"
#include "mvd/tensor.hpp"

namespace mvd {

enum class VaeKind { Image, Raymap };

struct VaeConfig {
    VaeKind kind = VaeKind::Image;
    int in_channels = 3;
    int latent_dim = 4;
    std::vector<int> block_channels = {32, 64, 128, 128};
    PadMode padding_mode = PadMode::Zero;
    bool use_group_norm = true;

    int downscale_factor() const { return 1 << (static_cast<int>(block_channels.size()) - 1); }

    // Desk-scale defaults; the paper-scale configs are kept for reference
    // (f=8, d=16, image blocks 128/256/512/512, raymap blocks 32/64/128/128,
    // raymap with replicate padding and no group norm).
    static VaeConfig image_desk();
    static VaeConfig raymap_desk();
    static VaeConfig image_paper();
    static VaeConfig raymap_paper();

    std::string to_json() const;
    static VaeConfig from_json(const std::string& json);
};

template <typename T>
class Vae {
  public:
    Vae(VaeConfig config, Rng& rng);

    // x [N, in_ch, H, W] with H, W divisible by f. Returns posterior mean
    // and log-variance, each [N, d, H/f, W/f]; the mean is the latent frame.
    std::pair<Tensor<T>, Tensor<T>> encode(const Tensor<T>& x) const;

    // Raw decoder output [N, in_ch, H, W].
    Tensor<T> decode_raw(const Tensor<T>& z) const;

    // Decode with the output contract applied: images clamped to [0,1],
    // raymap direction channels renormalized to unit norm.
    Tensor<T> decode(const Tensor<T>& z) const;

    // Diffusion-facing latents: posterior mean times latent_scale.
    Tensor<T> encode_scaled(const Tensor<T>& x) const;
    Tensor<T> decode_scaled(const Tensor<T>& z_scaled) const;

    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

    VaeConfig config;
    T latent_scale = T(1);

  private:
    struct ResBlock {
        NormAffine<T> norm1, norm2;
        Conv2dLayer<T> conv1, conv2;
        int groups = 1;
        bool use_norm = true;
    };

    Tensor<T> res_forward(const ResBlock& block, const Tensor<T>& x) const;
    ResBlock make_res(const std::string& name, int channels, Rng& rng);
    int downscale_factor_check(std::int64_t h, std::int64_t w) const;

    ParamStore<T> params_;
    // encoder
    Conv2dLayer<T> enc_stem_;
    std::vector<ResBlock> enc_res_;
    std::vector<Conv2dLayer<T>> enc_down_;
    ResBlock enc_mid_;
    NormAffine<T> enc_head_norm_;
    Conv2dLayer<T> enc_head_;
    // decoder
    Conv2dLayer<T> dec_stem_;
    ResBlock dec_mid_;
    std::vector<ResBlock> dec_res_;
    std::vector<Conv2dLayer<T>> dec_up_;
    ResBlock dec_final_;
    NormAffine<T> dec_head_norm_;
    Conv2dLayer<T> dec_head_;
    int head_groups_ = 1;
};

// Area-average pooling of a known-pixel mask; output values in [0,1] are the
// known fraction per latent cell. Pools the trailing two axes.
template <typename T>
Tensor<T> downscale_mask(const Tensor<T>& mask, int factor);

// KL(N(mu, sigma^2) || N(0,1)), mean over all elements.
template <typename T>
Tensor<T> kl_divergence(const Tensor<T>& mean, const Tensor<T>& logvar);

struct VaeTrainConfig {
    int steps = 6000;
    int batch = 16;
    double lr = 2e-4;
    double beta_kl = 1e-4;
    std::uint64_t seed = 0;
    double mask_augment_prob = 0.1;  // random rectangle zeroing; keeps masked encodes in-distribution
    int log_every = 200;
    double max_seconds = 7200;
};

struct VaeTrainResult {
    Checkpoint checkpoint;
    std::vector<std::pair<int, double>> loss_history;  // (step, loss)
    bool diverged = false;
    double first_epoch_loss = 0;
    double init_loss = 0;
};

// Minimizes L1 reconstruction + beta * KL with Adam; NaN loss aborts and the
// last-good parameter snapshot is returned. Deterministic given the seed in
// single-threaded mode. Frames are [C,H,W] tensors.
VaeTrainResult train_vae(const std::vector<Tensor<float>>& frames, const VaeConfig& config,
                         const VaeTrainConfig& train_config);

// Standalone VAE checkpoint helpers ("vae." tensor prefix).
Checkpoint vae_checkpoint(const Vae<float>& vae);
template <typename T>
std::unique_ptr<Vae<T>> load_vae(const Checkpoint& ck, const std::string& prefix = "vae.");

}  // namespace mvd
