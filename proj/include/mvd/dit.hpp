#pragma once

// The multi-view diffusion transformer: channel-wise sequence assembly,
// patchify + 2D-layout and per-frame index embeddings, AdaLN-modulated
// self-attention blocks with normalized keys/queries, and twin velocity
// heads for image and raymap latents.

#include <string>
#include <vector>

#include "mvd/checkpoint.hpp"
#include "mvd/nn.hpp"
#include "mvd/tensor.hpp"

namespace mvd {

// full:  sinusoidal embedding of a scalar key in [0,1); random keys during
//        training, uniformly spaced at inference (length generalization)
// fixed: learned per-integer-index table; indices beyond the trained range
//        fall back to freshly initialized rows
// none:  no index embedding
enum class IndexMode { Full, Fixed, None };

struct DitConfig {
    int width = 192;
    int depth = 6;
    int heads = 6;
    int patch_size = 2;
    int latent_dim = 4;   // d
    int downscale = 8;    // f, latent cells per pixel side
    int mlp_ratio = 4;
    IndexMode index_mode = IndexMode::Full;
    int fixed_table_size = 8;  // trained rows for IndexMode::Fixed

    int channels() const { return 4 * latent_dim + 2; }

    std::string to_json() const;
    static DitConfig from_json(const std::string& json);
};

// Concatenates the Eq.-style channel layout
// [noisy image (d) | known image (d) | image mask (1) |
//  noisy raymap (d) | known raymap (d) | ray mask (1)],
// all inputs [N, *, h, w].
template <typename T>
Tensor<T> assemble_channels(const Tensor<T>& noisy_image, const Tensor<T>& known_image,
                            const Tensor<T>& image_mask, const Tensor<T>& noisy_ray,
                            const Tensor<T>& known_ray, const Tensor<T>& ray_mask);

// Uniformly spaced inference keys i/N.
std::vector<double> inference_keys(int n_frames);
// Jittered stratified training keys: distinct, order-free, cover [0,1).
std::vector<double> training_keys(int n_frames, Rng& rng);

template <typename T>
class MvDit {
  public:
    MvDit(DitConfig config, Rng& rng);

    struct Output {
        Tensor<T> image_velocity;  // [B*N, d, h, w]
        Tensor<T> ray_velocity;    // [B*N, d, h, w]
    };

    struct DebugProbe {
        double min_qk_norm = 1e30;
        double max_qk_norm = -1e30;
    };

    // s: [B*N, 4d+2, h, w]; keys: one per frame (B*N), scalar in [0,1) for
    // Full mode or integer index for Fixed; t: one timestep per sequence.
    // Full self-attention over all tokens of a sequence; throws
    // NumericalError on non-finite activations, invalid_argument on
    // duplicate keys within a sequence.
    Output forward(const Tensor<T>& s, int batch, int n_frames, const std::vector<double>& keys,
                   const std::vector<double>& t) const;

    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

    DitConfig config;
    mutable DebugProbe* probe = nullptr;

  private:
    struct Block {
        Linear<T> qkv, proj, mlp_in, mlp_out, modulation;
        Tensor<T> attn_scale;  // learnable per-head logit scale
    };

    Tensor<T> pos_embedding(int batch, int n_frames, int hp, int wp,
                            const std::vector<double>& keys) const;

    ParamStore<T> params_;
    Linear<T> patch_in_;
    Linear<T> t_embed_in_, t_embed_out_;
    std::vector<Block> blocks_;
    Linear<T> final_modulation_, head_;
    Tensor<T> index_table_;  // Fixed mode
};

// Bundle checkpoint helpers: DiT weights plus both VAEs under prefixes
// "dit.", "image_vae.", "raymap_vae.".
template <typename T>
void fill_dit(MvDit<T>& model, const Checkpoint& ck, const std::string& prefix = "dit.");

}  // namespace mvd
