#include "mvd/flow.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>

namespace mvd {

template <typename T>
Tensor<T> add_noise(const Tensor<T>& z, double t, const Tensor<T>& eps) {
    if (z.shape() != eps.shape()) throw std::invalid_argument("add_noise: shape mismatch");
    if (t < 0.0 || t > 1.0) throw std::invalid_argument("add_noise: t outside [0,1]");
    return add(mul_scalar(z, T(1.0 - t)), mul_scalar(eps, T(t)));
}

double sample_timestep(Rng& rng, double loc, double scale) {
    const double g = loc + scale * rng.normal();
    return 1.0 / (1.0 + std::exp(-g));
}

template <typename T>
Tensor<T> cfg_weight_map(const Tensor<T>& mask_ds, const CfgWeights& cfg) {
    return add_scalar(mul_scalar(mask_ds, T(cfg.known_weight - cfg.unknown_weight)),
                      T(cfg.unknown_weight));
}

MaskPlan sample_masks(Rng& rng, int n_frames) {
    if (n_frames < 1) throw std::invalid_argument("sample_masks: need >= 1 frame");
    MaskPlan plan;
    plan.task = rng.bernoulli(0.75) ? TrainTask::Image : TrainTask::Raymap;
    plan.image_roles.resize(n_frames);
    plan.ray_roles.resize(n_frames);
    plan.image_rects.resize(n_frames);
    plan.loss_mask.assign(n_frames, 1.f);

    if (plan.task == TrainTask::Image) {
        for (int i = 0; i < n_frames; ++i) {
            plan.ray_roles[i] = MaskPlan::Role::Known;
            const double u = rng.uniform();
            if (u < 0.35) {
                plan.image_roles[i] = MaskPlan::Role::Known;
            } else if (u < 0.70) {
                plan.image_roles[i] = MaskPlan::Role::Unknown;
            } else {
                plan.image_roles[i] = MaskPlan::Role::Partial;
                const int rects = 1 + static_cast<int>(rng.uniform_index(3));
                for (int r = 0; r < rects; ++r) {
                    RotatedRect rect;
                    rect.cx = rng.uniform();  // normalized; scaled at rasterization
                    rect.cy = rng.uniform();
                    rect.half_w = rng.uniform(0.15, 0.45);
                    rect.half_h = rng.uniform(0.15, 0.45);
                    rect.angle = rng.uniform(0.0, M_PI);
                    plan.image_rects[i].push_back(rect);
                }
            }
        }
    } else {
        for (int i = 0; i < n_frames; ++i) {
            plan.image_roles[i] = MaskPlan::Role::Known;
            plan.ray_roles[i] = MaskPlan::Role::Unknown;
        }
    }
    plan.drop_image_cond = rng.bernoulli(0.1);
    plan.drop_ray_cond = rng.bernoulli(0.1);
    return plan;
}

std::vector<float> rasterize_rect_mask(const std::vector<RotatedRect>& rects, int height,
                                       int width) {
    std::vector<float> mask(std::size_t(height) * width, 1.f);
    for (const auto& rect : rects) {
        const double cx = rect.cx <= 1.0 ? rect.cx * width : rect.cx;
        const double cy = rect.cy <= 1.0 ? rect.cy * height : rect.cy;
        const double hw = rect.half_w <= 1.0 ? rect.half_w * width : rect.half_w;
        const double hh = rect.half_h <= 1.0 ? rect.half_h * height : rect.half_h;
        const double c = std::cos(rect.angle), s = std::sin(rect.angle);
        for (int r = 0; r < height; ++r)
            for (int col = 0; col < width; ++col) {
                const double px = col + 0.5 - cx;
                const double py = r + 0.5 - cy;
                const double lx = c * px + s * py;   // rotate into rect frame
                const double ly = -s * px + c * py;
                if (std::abs(lx) <= hw && std::abs(ly) <= hh)
                    mask[std::size_t(r) * width + col] = 0.f;
            }
    }
    return mask;
}

void apply_mask_plan(MultiViewSequence& seq, const MaskPlan& plan) {
    const int n = static_cast<int>(seq.frames.size());
    if (static_cast<int>(plan.image_roles.size()) != n)
        throw std::invalid_argument("apply_mask_plan: frame count mismatch");
    const std::size_t hw = std::size_t(seq.height) * seq.width;
    for (int i = 0; i < n; ++i) {
        auto& f = seq.frames[i];
        switch (plan.image_roles[i]) {
            case MaskPlan::Role::Known: f.image_mask.assign(hw, 1.f); break;
            case MaskPlan::Role::Unknown: f.image_mask.assign(hw, 0.f); break;
            case MaskPlan::Role::Partial:
                f.image_mask = rasterize_rect_mask(plan.image_rects[i], seq.height, seq.width);
                break;
        }
        f.ray_mask.assign(hw, plan.ray_roles[i] == MaskPlan::Role::Known ? 1.f : 0.f);
    }
}

// ---------------------------------------------------------------------------
// SequenceCodec
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> SequenceCodec<T>::images_to_tensor(const MultiViewSequence& seq) const {
    const int n = static_cast<int>(seq.frames.size());
    const std::size_t hw = std::size_t(seq.height) * seq.width;
    std::vector<T> data(std::size_t(n) * 3 * hw);
    for (int f = 0; f < n; ++f)
        for (std::size_t p = 0; p < hw; ++p)
            for (int c = 0; c < 3; ++c)
                data[(std::size_t(f) * 3 + c) * hw + p] = T(seq.frames[f].image[p * 3 + c]);
    return Tensor<T>::from_data({n, 3, seq.height, seq.width}, std::move(data));
}

template <typename T>
Tensor<T> SequenceCodec<T>::raymaps_to_tensor(const MultiViewSequence& seq) const {
    const int n = static_cast<int>(seq.frames.size());
    const std::size_t hw = std::size_t(seq.height) * seq.width;
    std::vector<T> data(std::size_t(n) * 6 * hw);
    for (int f = 0; f < n; ++f) {
        const auto& rm = seq.frames[f].raymap;
        for (std::size_t p = 0; p < hw; ++p)
            for (int c = 0; c < 3; ++c) {
                data[(std::size_t(f) * 6 + c) * hw + p] = T(rm.origins[p][c]);
                data[(std::size_t(f) * 6 + 3 + c) * hw + p] = T(rm.directions[p][c]);
            }
    }
    return Tensor<T>::from_data({n, 6, seq.height, seq.width}, std::move(data));
}

template <typename T>
Tensor<T> SequenceCodec<T>::image_masks_to_tensor(const MultiViewSequence& seq) const {
    const int n = static_cast<int>(seq.frames.size());
    const std::size_t hw = std::size_t(seq.height) * seq.width;
    std::vector<T> data(std::size_t(n) * hw);
    for (int f = 0; f < n; ++f)
        for (std::size_t p = 0; p < hw; ++p) data[std::size_t(f) * hw + p] = T(seq.frames[f].image_mask[p]);
    return Tensor<T>::from_data({n, 1, seq.height, seq.width}, std::move(data));
}

template <typename T>
Tensor<T> SequenceCodec<T>::ray_masks_to_tensor(const MultiViewSequence& seq) const {
    const int n = static_cast<int>(seq.frames.size());
    const std::size_t hw = std::size_t(seq.height) * seq.width;
    std::vector<T> data(std::size_t(n) * hw);
    for (int f = 0; f < n; ++f)
        for (std::size_t p = 0; p < hw; ++p) data[std::size_t(f) * hw + p] = T(seq.frames[f].ray_mask[p]);
    return Tensor<T>::from_data({n, 1, seq.height, seq.width}, std::move(data));
}

template <typename T>
Tensor<T> SequenceCodec<T>::encode_images(const MultiViewSequence& seq) const {
    NoGradGuard ng;
    return image_vae->encode_scaled(images_to_tensor(seq));
}

template <typename T>
Tensor<T> SequenceCodec<T>::encode_raymaps(const MultiViewSequence& seq) const {
    NoGradGuard ng;
    return raymap_vae->encode_scaled(raymaps_to_tensor(seq));
}

template <typename T>
typename SequenceCodec<T>::Conditioning SequenceCodec<T>::encode_conditioning(
    const MultiViewSequence& seq, bool drop_image, bool drop_ray) const {
    NoGradGuard ng;
    const int n = static_cast<int>(seq.frames.size());
    const int f = factor();
    const int h = seq.height / f, w = seq.width / f;
    const int d = latent_dim();
    Conditioning cond;

    if (drop_image) {
        cond.known_image = Tensor<T>::zeros({n, d, h, w});
        cond.image_mask_ds = Tensor<T>::zeros({n, 1, h, w});
    } else {
        // pixel-level masking before encoding
        auto masks = image_masks_to_tensor(seq);
        cond.known_image = image_vae->encode_scaled(mul(images_to_tensor(seq), masks));
        cond.image_mask_ds = downscale_mask(masks, f);
    }
    if (drop_ray) {
        cond.known_ray = Tensor<T>::zeros({n, d, h, w});
        cond.ray_mask_ds = Tensor<T>::zeros({n, 1, h, w});
    } else {
        auto masks = ray_masks_to_tensor(seq);
        cond.known_ray = raymap_vae->encode_scaled(mul(raymaps_to_tensor(seq), masks));
        cond.ray_mask_ds = downscale_mask(masks, f);
    }
    return cond;
}

template <typename T>
typename SequenceCodec<T>::Conditioning SequenceCodec<T>::zero_conditioning(int n_frames, int h,
                                                                            int w) const {
    const int f = factor();
    Conditioning cond;
    cond.known_image = Tensor<T>::zeros({n_frames, latent_dim(), h / f, w / f});
    cond.known_ray = Tensor<T>::zeros({n_frames, latent_dim(), h / f, w / f});
    cond.image_mask_ds = Tensor<T>::zeros({n_frames, 1, h / f, w / f});
    cond.ray_mask_ds = Tensor<T>::zeros({n_frames, 1, h / f, w / f});
    return cond;
}

template <typename T>
Tensor<T> SequenceCodec<T>::assemble(const Conditioning& cond, const Tensor<T>& noisy_image,
                                     const Tensor<T>& noisy_ray) const {
    return assemble_channels(noisy_image, cond.known_image, cond.image_mask_ds, noisy_ray,
                             cond.known_ray, cond.ray_mask_ds);
}

template <typename T>
std::vector<std::vector<float>> SequenceCodec<T>::decode_images(const Tensor<T>& z_scaled) const {
    NoGradGuard ng;
    auto px = image_vae->decode_scaled(z_scaled);  // [N,3,H,W] clamped
    const int n = static_cast<int>(px.dim(0));
    const std::size_t hw = std::size_t(px.dim(2)) * px.dim(3);
    std::vector<std::vector<float>> out(n);
    for (int f = 0; f < n; ++f) {
        out[f].resize(hw * 3);
        for (std::size_t p = 0; p < hw; ++p)
            for (int c = 0; c < 3; ++c)
                out[f][p * 3 + c] = float(px.data()[(std::size_t(f) * 3 + c) * hw + p]);
    }
    return out;
}

template <typename T>
std::vector<Raymap> SequenceCodec<T>::decode_raymaps(const Tensor<T>& z_scaled) const {
    NoGradGuard ng;
    auto rm = raymap_vae->decode_scaled(z_scaled);  // [N,6,H,W], unit directions
    const int n = static_cast<int>(rm.dim(0));
    const int h = static_cast<int>(rm.dim(2)), w = static_cast<int>(rm.dim(3));
    const std::size_t hw = std::size_t(h) * w;
    std::vector<Raymap> out(n);
    for (int f = 0; f < n; ++f) {
        out[f].height = h;
        out[f].width = w;
        out[f].origins.resize(hw);
        out[f].directions.resize(hw);
        for (std::size_t p = 0; p < hw; ++p) {
            for (int c = 0; c < 3; ++c) {
                out[f].origins[p][c] = rm.data()[(std::size_t(f) * 6 + c) * hw + p];
                out[f].directions[p][c] = rm.data()[(std::size_t(f) * 6 + 3 + c) * hw + p];
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training loss
// ---------------------------------------------------------------------------

template <typename T>
DenoiserView<T> as_view(const MvDit<T>& model) {
    DenoiserView<T> view;
    view.index_mode = model.config.index_mode;
    view.forward = [&model](const Tensor<T>& s, int batch, int n_frames,
                            const std::vector<double>& keys, const std::vector<double>& t) {
        return model.forward(s, batch, n_frames, keys, t);
    };
    return view;
}

namespace {

std::vector<double> make_keys(IndexMode mode, int batch, int n_frames, Rng* train_rng) {
    std::vector<double> keys;
    keys.reserve(std::size_t(batch) * n_frames);
    for (int b = 0; b < batch; ++b) {
        if (mode == IndexMode::Full) {
            auto k = train_rng ? training_keys(n_frames, *train_rng) : inference_keys(n_frames);
            keys.insert(keys.end(), k.begin(), k.end());
        } else if (mode == IndexMode::Fixed) {
            for (int i = 0; i < n_frames; ++i) keys.push_back(double(i));
        } else {
            for (int i = 0; i < n_frames; ++i) keys.push_back(double(i) / n_frames);
        }
    }
    return keys;
}

// per-frame weight vectors for the two heads; each sequence contributes its
// active head averaged over loss-masked frames
void head_weights(const std::vector<MaskPlan>& plans, int n_frames, std::vector<float>& wi,
                  std::vector<float>& wr) {
    const int batch = static_cast<int>(plans.size());
    wi.assign(std::size_t(batch) * n_frames, 0.f);
    wr.assign(std::size_t(batch) * n_frames, 0.f);
    for (int b = 0; b < batch; ++b) {
        double active = 0;
        for (int f = 0; f < n_frames; ++f) active += plans[b].loss_mask[f];
        if (active <= 0) continue;
        const float scale = float(1.0 / (active * batch));
        for (int f = 0; f < n_frames; ++f) {
            const float v = plans[b].loss_mask[f] * scale;
            if (plans[b].task == TrainTask::Image)
                wi[std::size_t(b) * n_frames + f] = v;
            else
                wr[std::size_t(b) * n_frames + f] = v;
        }
    }
}

template <typename T>
Tensor<T> weighted_frame_mse(const Tensor<T>& pred, const Tensor<T>& target,
                             const std::vector<float>& weights) {
    const std::int64_t frames = pred.dim(0);
    const std::int64_t per_frame = pred.numel() / frames;
    std::vector<T> w(weights.begin(), weights.end());
    auto wt = Tensor<T>::from_data({frames}, std::move(w));
    auto sq = square(sub(pred, target));
    auto frame_means = mul_scalar(sum_axis(reshape(sq, {frames, per_frame}), 1),
                                  T(1.0 / double(per_frame)));
    return sum_all(mul(frame_means, wt));
}

}  // namespace

template <typename T>
Tensor<T> training_loss(const DenoiserView<T>& model, const SequenceCodec<T>& codec,
                        const std::vector<MultiViewSequence>& batch,
                        const std::vector<MaskPlan>& plans, Rng& rng, double timestep_loc,
                        double timestep_scale) {
    if (batch.empty() || batch.size() != plans.size())
        throw std::invalid_argument("training_loss: batch/plan mismatch");
    const int bsz = static_cast<int>(batch.size());
    const int n = static_cast<int>(batch[0].frames.size());

    std::vector<Tensor<T>> s_parts, vi_parts, vr_parts;
    std::vector<double> ts(bsz);
    for (int b = 0; b < bsz; ++b) {
        const auto& seq = batch[b];
        ts[b] = sample_timestep(rng, timestep_loc, timestep_scale);
        Tensor<T> zi = codec.encode_images(seq);
        Tensor<T> zr = codec.encode_raymaps(seq);
        Rng noise = rng.fork(rng.next_u64());
        auto eps_i = Tensor<T>::randn(zi.shape(), noise);
        auto eps_r = Tensor<T>::randn(zr.shape(), noise);
        auto cond = codec.encode_conditioning(seq, plans[b].drop_image_cond,
                                              plans[b].drop_ray_cond);
        s_parts.push_back(codec.assemble(cond, add_noise(zi, ts[b], eps_i),
                                         add_noise(zr, ts[b], eps_r)));
        vi_parts.push_back(sub(eps_i, zi));  // velocity target eps - z
        vr_parts.push_back(sub(eps_r, zr));
    }
    auto s = bsz == 1 ? s_parts[0] : concat<T>(s_parts, 0);
    auto vi = bsz == 1 ? vi_parts[0] : concat<T>(vi_parts, 0);
    auto vr = bsz == 1 ? vr_parts[0] : concat<T>(vr_parts, 0);

    Rng key_rng = rng.fork(0x6b657973);
    const auto keys = make_keys(model.index_mode, bsz, n, &key_rng);
    auto out = model.forward(s, bsz, n, keys, ts);

    std::vector<float> wi, wr;
    head_weights(plans, n, wi, wr);
    return add(weighted_frame_mse(out.image_velocity, detach(vi), wi),
               weighted_frame_mse(out.ray_velocity, detach(vr), wr));
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

template <typename T>
std::pair<Tensor<T>, Tensor<T>> integrate_velocity_field(const LatentVelocityFn<T>& velocity,
                                                         Tensor<T> zi, Tensor<T> zr, int steps,
                                                         const Tensor<T>& weight_image,
                                                         const Tensor<T>& weight_ray) {
    if (steps < 1) throw std::invalid_argument("integrate_velocity_field: steps must be >= 1");
    NoGradGuard ng;
    const T dt = T(-1.0 / steps);
    for (int k = 0; k < steps; ++k) {
        const double t = 1.0 - double(k) / steps;
        auto [vc_i, vc_r] = velocity(zi, zr, t, true);
        auto [vu_i, vu_r] = velocity(zi, zr, t, false);
        auto v_i = add(vu_i, mul(weight_image, sub(vc_i, vu_i)));
        auto v_r = add(vu_r, mul(weight_ray, sub(vc_r, vu_r)));
        zi = add(zi, mul_scalar(v_i, dt));
        zr = add(zr, mul_scalar(v_r, dt));
    }
    return {zi, zr};
}

namespace {

// Composite decoded content under the conditioning: known pixels are copied
// from the conditioning bit-exactly (select, not arithmetic).
MultiViewSequence composite_sequence(const MultiViewSequence& conditioning,
                                     const std::vector<std::vector<float>>& images,
                                     const std::vector<Raymap>& raymaps) {
    MultiViewSequence out = conditioning;
    const std::size_t hw = std::size_t(out.height) * out.width;
    for (std::size_t f = 0; f < out.frames.size(); ++f) {
        auto& frame = out.frames[f];
        for (std::size_t p = 0; p < hw; ++p) {
            if (frame.image_mask[p] == 0.f)
                for (int c = 0; c < 3; ++c) frame.image[p * 3 + c] = images[f][p * 3 + c];
            if (frame.ray_mask[p] == 0.f) {
                frame.raymap.origins[p] = raymaps[f].origins[p];
                frame.raymap.directions[p] = raymaps[f].directions[p];
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> gather_frames(const Tensor<T>& t, const std::vector<int>& idx) {
    Shape shape = t.shape();
    const std::int64_t per_frame = t.numel() / shape[0];
    shape[0] = static_cast<std::int64_t>(idx.size());
    std::vector<T> data(per_frame * idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy(t.data() + idx[i] * per_frame, t.data() + (idx[i] + 1) * per_frame,
                  data.begin() + i * per_frame);
    return Tensor<T>::from_data(std::move(shape), std::move(data));
}

}  // namespace

template <typename T>
MultiViewSequence sample(const DenoiserView<T>& model, const SequenceCodec<T>& codec,
                         const MultiViewSequence& conditioning, const SampleOptions& options,
                         Rng& rng) {
    NoGradGuard ng;
    const int n = static_cast<int>(conditioning.frames.size());
    const int f = codec.factor();
    const int h = conditioning.height / f, w = conditioning.width / f;
    const int d = codec.latent_dim();

    auto cond = codec.encode_conditioning(conditioning, false, false);
    auto uncond = codec.zero_conditioning(n, conditioning.height, conditioning.width);
    auto zi = Tensor<T>::randn({n, d, h, w}, rng);
    auto zr = Tensor<T>::randn({n, d, h, w}, rng);
    auto wi = cfg_weight_map(cond.image_mask_ds, options.cfg);
    auto wr = cfg_weight_map(cond.ray_mask_ds, options.cfg);
    const auto keys = make_keys(model.index_mode, 1, n, nullptr);

    LatentVelocityFn<T> velocity = [&](const Tensor<T>& zi_, const Tensor<T>& zr_, double t,
                                       bool conditional) {
        auto s = codec.assemble(conditional ? cond : uncond, zi_, zr_);
        auto out = model.forward(s, 1, n, keys, {t});
        return std::make_pair(out.image_velocity, out.ray_velocity);
    };
    auto [zi_final, zr_final] =
        integrate_velocity_field(velocity, zi, zr, options.steps, wi, wr);
    return composite_sequence(conditioning, codec.decode_images(zi_final),
                              codec.decode_raymaps(zr_final));
}

template <typename T>
MultiViewSequence tiled_denoise(const DenoiserView<T>& model, const SequenceCodec<T>& codec,
                                const MultiViewSequence& sequence, const TiledOptions& options,
                                Rng& rng) {
    NoGradGuard ng;
    const int n = static_cast<int>(sequence.frames.size());
    if (options.window < 1 || options.window > n)
        throw std::invalid_argument("tiled_denoise: window must be in [1, N]");
    if (options.passes < 1) throw std::invalid_argument("tiled_denoise: passes must be >= 1");
    const int f = codec.factor();
    const int h = sequence.height / f, w = sequence.width / f;
    const int d = codec.latent_dim();
    const std::int64_t per_frame = std::int64_t(d) * h * w;

    auto cond = codec.encode_conditioning(sequence, false, false);
    auto uncond = codec.zero_conditioning(n, sequence.height, sequence.width);
    auto zi = Tensor<T>::randn({n, d, h, w}, rng);
    auto zr = Tensor<T>::randn({n, d, h, w}, rng);
    auto wi = cfg_weight_map(cond.image_mask_ds, options.cfg);
    auto wr = cfg_weight_map(cond.ray_mask_ds, options.cfg);
    const auto keys = make_keys(model.index_mode, 1, n, nullptr);
    if (options.window_starts &&
        options.window_starts->size() != std::size_t(options.steps) * options.passes)
        throw std::invalid_argument("tiled_denoise: window_starts size mismatch");
    if (options.coverage_probe) options.coverage_probe->assign(n, 0);

    const T dt = T(-1.0 / options.steps);
    std::vector<double> acc_i(std::size_t(n) * per_frame), acc_r(std::size_t(n) * per_frame);
    std::vector<int> count(n);
    for (int step = 0; step < options.steps; ++step) {
        const double t = 1.0 - double(step) / options.steps;
        std::fill(acc_i.begin(), acc_i.end(), 0.0);
        std::fill(acc_r.begin(), acc_r.end(), 0.0);
        std::fill(count.begin(), count.end(), 0);

        for (int pass = 0; pass < options.passes; ++pass) {
            const int start = options.window_starts
                                  ? (*options.window_starts)[std::size_t(step) * options.passes + pass]
                                  : static_cast<int>(rng.uniform_index(n));
            std::vector<int> idx(options.window);
            for (int j = 0; j < options.window; ++j) idx[j] = (start + j) % n;

            typename SequenceCodec<T>::Conditioning cond_sub, uncond_sub;
            cond_sub.known_image = gather_frames(cond.known_image, idx);
            cond_sub.known_ray = gather_frames(cond.known_ray, idx);
            cond_sub.image_mask_ds = gather_frames(cond.image_mask_ds, idx);
            cond_sub.ray_mask_ds = gather_frames(cond.ray_mask_ds, idx);
            uncond_sub.known_image = gather_frames(uncond.known_image, idx);
            uncond_sub.known_ray = gather_frames(uncond.known_ray, idx);
            uncond_sub.image_mask_ds = gather_frames(uncond.image_mask_ds, idx);
            uncond_sub.ray_mask_ds = gather_frames(uncond.ray_mask_ds, idx);

            auto zi_sub = gather_frames(zi, idx);
            auto zr_sub = gather_frames(zr, idx);
            std::vector<double> keys_sub(options.window);
            for (int j = 0; j < options.window; ++j) keys_sub[j] = keys[idx[j]];

            auto out_c = model.forward(codec.assemble(cond_sub, zi_sub, zr_sub), 1,
                                       options.window, keys_sub, {t});
            auto out_u = model.forward(codec.assemble(uncond_sub, zi_sub, zr_sub), 1,
                                       options.window, keys_sub, {t});
            auto wi_sub = gather_frames(wi, idx);
            auto wr_sub = gather_frames(wr, idx);
            auto v_i = add(out_u.image_velocity,
                           mul(wi_sub, sub(out_c.image_velocity, out_u.image_velocity)));
            auto v_r = add(out_u.ray_velocity,
                           mul(wr_sub, sub(out_c.ray_velocity, out_u.ray_velocity)));

            for (int j = 0; j < options.window; ++j) {
                const int frame = idx[j];
                ++count[frame];
                if (options.coverage_probe) ++(*options.coverage_probe)[frame];
                for (std::int64_t k = 0; k < per_frame; ++k) {
                    acc_i[frame * per_frame + k] += double(v_i.data()[j * per_frame + k]);
                    acc_r[frame * per_frame + k] += double(v_r.data()[j * per_frame + k]);
                }
            }
        }

        for (int frame = 0; frame < n; ++frame) {
            if (count[frame] == 0) continue;  // uncovered frames keep their latent
            const double inv = 1.0 / count[frame];
            for (std::int64_t k = 0; k < per_frame; ++k) {
                zi.data()[frame * per_frame + k] +=
                    dt * T(acc_i[frame * per_frame + k] * inv);
                zr.data()[frame * per_frame + k] +=
                    dt * T(acc_r[frame * per_frame + k] * inv);
            }
        }
    }
    return composite_sequence(sequence, codec.decode_images(zi), codec.decode_raymaps(zr));
}

// ---------------------------------------------------------------------------
// Validation loss
// ---------------------------------------------------------------------------

std::vector<EvalItem> build_eval_items(const std::vector<Capture>& captures, int count,
                                       int sequence_size, int crop, Rng& rng) {
    if (captures.empty()) throw DataError("build_eval_items: no captures");
    std::vector<EvalItem> items;
    for (int i = 0; i < count; ++i) {
        const auto& cap = captures[rng.uniform_index(captures.size())];
        auto ts = sample_training_sequence(cap, rng, sequence_size, crop);

        // protocol: ~N/4 fully known, ~N/4 partial, the rest unknown; rays known
        MaskPlan plan;
        plan.task = TrainTask::Image;
        const int n = sequence_size;
        plan.image_roles.assign(n, MaskPlan::Role::Unknown);
        plan.ray_roles.assign(n, MaskPlan::Role::Known);
        plan.image_rects.resize(n);
        plan.loss_mask.assign(n, 1.f);
        std::vector<int> order(n);
        for (int k = 0; k < n; ++k) order[k] = k;
        rng.shuffle(order);
        const int quarter = std::max(1, n / 4);
        for (int k = 0; k < quarter; ++k) plan.image_roles[order[k]] = MaskPlan::Role::Known;
        for (int k = quarter; k < 2 * quarter && k < n; ++k) {
            plan.image_roles[order[k]] = MaskPlan::Role::Partial;
            plan.image_rects[order[k]].push_back(
                {rng.uniform(), rng.uniform(), rng.uniform(0.2, 0.45), rng.uniform(0.2, 0.45),
                 rng.uniform(0.0, M_PI)});
        }
        apply_mask_plan(ts.sequence, plan);
        items.push_back({std::move(ts.sequence), rng.next_u64()});
    }
    return items;
}

template <typename T>
double val_loss(const DenoiserView<T>& model, const SequenceCodec<T>& codec,
                const std::vector<EvalItem>& items, int timesteps) {
    if (items.empty()) throw std::invalid_argument("val_loss: empty eval set");
    NoGradGuard ng;
    double total = 0;
    for (const auto& item : items) {
        const int n = static_cast<int>(item.seq.frames.size());
        auto zi = codec.encode_images(item.seq);
        auto zr = codec.encode_raymaps(item.seq);
        auto cond = codec.encode_conditioning(item.seq, false, false);
        const auto keys = make_keys(model.index_mode, 1, n, nullptr);
        double item_total = 0;
        for (int j = 0; j < timesteps; ++j) {
            const double t = (j + 0.5) / timesteps;
            Rng noise(item.noise_seed ^ (0x9e3779b97f4a7c15ull * (j + 1)));
            auto eps_i = Tensor<T>::randn(zi.shape(), noise);
            auto eps_r = Tensor<T>::randn(zr.shape(), noise);
            auto s = codec.assemble(cond, add_noise(zi, t, eps_i), add_noise(zr, t, eps_r));
            auto out = model.forward(s, 1, n, keys, {t});
            auto diff = sub(out.image_velocity, sub(eps_i, zi));
            item_total += mean_all(square(diff)).item();
        }
        total += item_total / timesteps;
    }
    return total / double(items.size());
}

template <typename T>
Tensor<T> training_loss(const MvDit<T>& model, const SequenceCodec<T>& codec,
                        const std::vector<MultiViewSequence>& batch,
                        const std::vector<MaskPlan>& plans, Rng& rng, double timestep_loc,
                        double timestep_scale) {
    return training_loss(as_view(model), codec, batch, plans, rng, timestep_loc, timestep_scale);
}

template <typename T>
MultiViewSequence sample(const MvDit<T>& model, const SequenceCodec<T>& codec,
                         const MultiViewSequence& conditioning, const SampleOptions& options,
                         Rng& rng) {
    return sample(as_view(model), codec, conditioning, options, rng);
}

template <typename T>
MultiViewSequence tiled_denoise(const MvDit<T>& model, const SequenceCodec<T>& codec,
                                const MultiViewSequence& sequence, const TiledOptions& options,
                                Rng& rng) {
    return tiled_denoise(as_view(model), codec, sequence, options, rng);
}

template <typename T>
double val_loss(const MvDit<T>& model, const SequenceCodec<T>& codec,
                const std::vector<EvalItem>& items, int timesteps) {
    return val_loss(as_view(model), codec, items, timesteps);
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

namespace {

std::vector<float> snapshot(const ParamStore<float>& ps) {
    std::vector<float> out;
    for (auto& [name, t] : ps.entries()) out.insert(out.end(), t.data(), t.data() + t.numel());
    return out;
}

void restore(ParamStore<float>& ps, const std::vector<float>& snap) {
    std::size_t off = 0;
    for (auto& [name, t] : ps.entries()) {
        Tensor<float> tt = t;
        std::copy(snap.begin() + off, snap.begin() + off + t.numel(), tt.data());
        off += t.numel();
    }
}

}  // namespace

Checkpoint make_bundle(const MvDit<float>& model, const Checkpoint& image_vae_ck,
                       const Checkpoint& raymap_vae_ck) {
    Checkpoint ck;
    ck.meta["kind"] = "bundle";
    ck.meta["dit_config"] = model.config.to_json();
    ck.meta["code_version"] = kCodeVersion;
    ck.meta["image_vae.config"] = image_vae_ck.meta_or("vae_config", "");
    ck.meta["image_vae.latent_scale"] = image_vae_ck.meta_or("vae.latent_scale", "1");
    ck.meta["raymap_vae.config"] = raymap_vae_ck.meta_or("vae_config", "");
    ck.meta["raymap_vae.latent_scale"] = raymap_vae_ck.meta_or("vae.latent_scale", "1");
    ck.put_params(model.params(), "dit.");
    for (const auto& [name, entry] : image_vae_ck.tensors)
        if (name.rfind("vae.", 0) == 0)
            ck.tensors["image_vae." + name.substr(4)] = entry;
    for (const auto& [name, entry] : raymap_vae_ck.tensors)
        if (name.rfind("vae.", 0) == 0)
            ck.tensors["raymap_vae." + name.substr(4)] = entry;
    return ck;
}

LoadedModel load_bundle(const Checkpoint& ck) {
    if (ck.meta_or("kind", "") != "bundle")
        throw CheckpointError("expected a model bundle checkpoint");
    LoadedModel lm;
    Rng rng(0);
    lm.model = std::make_unique<MvDit<double>>(DitConfig::from_json(ck.meta.at("dit_config")), rng);
    fill_dit(*lm.model, ck, "dit.");
    lm.image_vae = load_vae<double>(ck, "image_vae.");
    lm.raymap_vae = load_vae<double>(ck, "raymap_vae.");
    lm.codec.image_vae = lm.image_vae.get();
    lm.codec.raymap_vae = lm.raymap_vae.get();
    return lm;
}

DitTrainResult train_dit(const std::vector<Capture>& captures, const Checkpoint& image_vae_ck,
                         const Checkpoint& raymap_vae_ck, const DitConfig& dit_config,
                         const DitTrainConfig& tc, const std::vector<EvalItem>* eval_items) {
    if (captures.empty()) throw DataError("train_dit: no captures");
    auto image_vae = load_vae<float>(image_vae_ck, "vae.");
    auto raymap_vae = load_vae<float>(raymap_vae_ck, "vae.");
    image_vae->params().set_requires_grad(false);  // frozen during transformer training
    raymap_vae->params().set_requires_grad(false);
    SequenceCodec<float> codec;
    codec.image_vae = image_vae.get();
    codec.raymap_vae = raymap_vae.get();

    Rng init_rng(tc.seed);
    MvDit<float> model(dit_config, init_rng);
    Adam<float> opt(model.params().tensors(), tc.lr);
    Rng data_rng = init_rng.fork(11);
    Rng mask_rng = init_rng.fork(22);
    Rng noise_rng = init_rng.fork(33);
    Rng key_rng = init_rng.fork(44);

    const int n = tc.sequence_size;
    const int d = dit_config.latent_dim;
    const int f = codec.factor();
    const int hl = tc.crop / f, wl = tc.crop / f;
    const std::int64_t per_frame = std::int64_t(d) * hl * wl;

    DitTrainResult result;

    // cache clean image latents per capture frame (valid when crop == full frame)
    const bool can_cache =
        tc.crop == captures[0].width && tc.crop == captures[0].height;
    std::vector<std::vector<float>> latent_cache;  // capture-major, frame rows
    if (can_cache) {
        NoGradGuard ng;
        latent_cache.resize(captures.size());
        for (std::size_t ci = 0; ci < captures.size(); ++ci) {
            const auto& cap = captures[ci];
            latent_cache[ci].resize(cap.frames.size() * per_frame);
            const int chunk = 32;
            for (std::size_t base = 0; base < cap.frames.size(); base += chunk) {
                const int count = static_cast<int>(
                    std::min<std::size_t>(chunk, cap.frames.size() - base));
                std::vector<float> px(std::size_t(count) * 3 * tc.crop * tc.crop);
                for (int k = 0; k < count; ++k) {
                    const auto& img = cap.frames[base + k].image;
                    const std::size_t hw = std::size_t(tc.crop) * tc.crop;
                    for (std::size_t p = 0; p < hw; ++p)
                        for (int c = 0; c < 3; ++c)
                            px[(std::size_t(k) * 3 + c) * hw + p] = img[p * 3 + c];
                }
                auto z = image_vae->encode_scaled(Tensor<float>::from_data(
                    {count, 3, tc.crop, tc.crop}, std::move(px)));
                std::copy(z.data(), z.data() + z.numel(),
                          latent_cache[ci].begin() + base * per_frame);
            }
        }
    }
    // zero-input latents (fully unknown frames encode a zeroed signal)
    std::vector<float> zero_img_latent(per_frame), zero_ray_latent(per_frame);
    {
        NoGradGuard ng;
        auto zi = image_vae->encode_scaled(Tensor<float>::zeros({1, 3, tc.crop, tc.crop}));
        std::copy(zi.data(), zi.data() + per_frame, zero_img_latent.begin());
        auto zr = raymap_vae->encode_scaled(Tensor<float>::zeros({1, 6, tc.crop, tc.crop}));
        std::copy(zr.data(), zr.data() + per_frame, zero_ray_latent.begin());
    }

    if (eval_items && !eval_items->empty()) {
        result.val_init = val_loss(model, codec, *eval_items);
        result.val_log.push_back({0.0, result.val_init});
    }

    std::vector<float> last_good = snapshot(model.params());
    const auto t_start = std::chrono::steady_clock::now();
    const std::size_t hw_px = std::size_t(tc.crop) * tc.crop;

    for (int step = 0; step < tc.steps; ++step) {
        // -- draw batch
        std::vector<TrainingSample> samples;
        std::vector<MaskPlan> plans;
        std::vector<std::size_t> capture_ids;
        for (int b = 0; b < tc.batch; ++b) {
            const std::size_t ci = data_rng.uniform_index(captures.size());
            capture_ids.push_back(ci);
            samples.push_back(sample_training_sequence(captures[ci], data_rng, n, tc.crop));
            plans.push_back(sample_masks(mask_rng, n));
            apply_mask_plan(samples.back().sequence, plans.back());
        }

        // -- clean latents (constants; the graph starts at the transformer)
        const int frames_total = tc.batch * n;
        std::vector<float> zi_data(std::size_t(frames_total) * per_frame);
        for (int b = 0; b < tc.batch; ++b) {
            if (can_cache) {
                for (int k = 0; k < n; ++k) {
                    const int frame = samples[b].frame_indices[k];
                    const float* src =
                        latent_cache[capture_ids[b]].data() + std::size_t(frame) * per_frame;
                    std::copy(src, src + per_frame,
                              zi_data.data() + (std::size_t(b) * n + k) * per_frame);
                }
            } else {
                auto z = codec.encode_images(samples[b].sequence);
                std::copy(z.data(), z.data() + z.numel(),
                          zi_data.data() + std::size_t(b) * n * per_frame);
            }
        }
        auto zi = Tensor<float>::from_data({frames_total, d, hl, wl}, std::move(zi_data));

        // one batched raymap encode for the whole step
        std::vector<float> ray_px(std::size_t(frames_total) * 6 * hw_px);
        for (int b = 0; b < tc.batch; ++b) {
            const auto& seq = samples[b].sequence;
            for (int k = 0; k < n; ++k) {
                const auto& rm = seq.frames[k].raymap;
                float* base = ray_px.data() + (std::size_t(b) * n + k) * 6 * hw_px;
                for (std::size_t p = 0; p < hw_px; ++p)
                    for (int c = 0; c < 3; ++c) {
                        base[std::size_t(c) * hw_px + p] = float(rm.origins[p][c]);
                        base[std::size_t(3 + c) * hw_px + p] = float(rm.directions[p][c]);
                    }
            }
        }
        Tensor<float> zr;
        {
            NoGradGuard ng;
            zr = raymap_vae->encode_scaled(Tensor<float>::from_data(
                {frames_total, 6, tc.crop, tc.crop}, std::move(ray_px)));
        }

        // -- noise
        std::vector<double> ts(tc.batch);
        for (int b = 0; b < tc.batch; ++b)
            ts[b] = sample_timestep(noise_rng, tc.timestep_loc, tc.timestep_scale);
        auto eps_i = Tensor<float>::randn(zi.shape(), noise_rng);
        auto eps_r = Tensor<float>::randn(zr.shape(), noise_rng);
        std::vector<float> noisy_i(zi.numel()), noisy_r(zr.numel());
        std::vector<float> vi_target(zi.numel()), vr_target(zr.numel());
        for (int b = 0; b < tc.batch; ++b) {
            const float t = float(ts[b]);
            for (std::int64_t k = std::int64_t(b) * n * per_frame;
                 k < std::int64_t(b + 1) * n * per_frame; ++k) {
                noisy_i[k] = (1.f - t) * zi.data()[k] + t * eps_i.data()[k];
                noisy_r[k] = (1.f - t) * zr.data()[k] + t * eps_r.data()[k];
                vi_target[k] = eps_i.data()[k] - zi.data()[k];
                vr_target[k] = eps_r.data()[k] - zr.data()[k];
            }
        }

        // -- known branches (cache known/unknown, batch the partial encodes)
        std::vector<float> known_i(zi.numel(), 0.f), known_r(zr.numel(), 0.f);
        std::vector<float> mask_i_ds(std::size_t(frames_total) * hl * wl, 0.f);
        std::vector<float> mask_r_ds(std::size_t(frames_total) * hl * wl, 0.f);
        std::vector<std::pair<int, int>> partial;  // (flat frame, batch)
        for (int b = 0; b < tc.batch; ++b) {
            const auto& plan = plans[b];
            const auto& seq = samples[b].sequence;
            for (int k = 0; k < n; ++k) {
                const int flat = b * n + k;
                float* ki = known_i.data() + std::size_t(flat) * per_frame;
                float* kr = known_r.data() + std::size_t(flat) * per_frame;
                float* mi = mask_i_ds.data() + std::size_t(flat) * hl * wl;
                float* mr = mask_r_ds.data() + std::size_t(flat) * hl * wl;
                if (!plan.drop_image_cond) {
                    switch (plan.image_roles[k]) {
                        case MaskPlan::Role::Known:
                            std::copy(zi.data() + std::size_t(flat) * per_frame,
                                      zi.data() + std::size_t(flat + 1) * per_frame, ki);
                            std::fill(mi, mi + hl * wl, 1.f);
                            break;
                        case MaskPlan::Role::Unknown:
                            std::copy(zero_img_latent.begin(), zero_img_latent.end(), ki);
                            break;
                        case MaskPlan::Role::Partial: {
                            partial.emplace_back(flat, b);
                            // downscale the rasterized mask by area average
                            const auto& m = seq.frames[k].image_mask;
                            for (int r = 0; r < tc.crop; ++r)
                                for (int c = 0; c < tc.crop; ++c)
                                    mi[(r / f) * wl + c / f] +=
                                        m[std::size_t(r) * tc.crop + c] / float(f * f);
                            break;
                        }
                    }
                }
                if (!plan.drop_ray_cond) {
                    if (plan.ray_roles[k] == MaskPlan::Role::Known) {
                        std::copy(zr.data() + std::size_t(flat) * per_frame,
                                  zr.data() + std::size_t(flat + 1) * per_frame, kr);
                        std::fill(mr, mr + hl * wl, 1.f);
                    } else {
                        std::copy(zero_ray_latent.begin(), zero_ray_latent.end(), kr);
                    }
                }
            }
        }
        if (!partial.empty()) {
            std::vector<float> px(partial.size() * 3 * hw_px, 0.f);
            for (std::size_t pi = 0; pi < partial.size(); ++pi) {
                const auto [flat, b] = partial[pi];
                const auto& frame = samples[b].sequence.frames[flat - b * n];
                for (std::size_t p = 0; p < hw_px; ++p) {
                    const float m = frame.image_mask[p];
                    if (m == 0.f) continue;
                    for (int c = 0; c < 3; ++c)
                        px[(pi * 3 + c) * hw_px + p] = frame.image[p * 3 + c] * m;
                }
            }
            NoGradGuard ng;
            auto enc = image_vae->encode_scaled(Tensor<float>::from_data(
                {std::int64_t(partial.size()), 3, tc.crop, tc.crop}, std::move(px)));
            for (std::size_t pi = 0; pi < partial.size(); ++pi)
                std::copy(enc.data() + pi * per_frame, enc.data() + (pi + 1) * per_frame,
                          known_i.data() + std::size_t(partial[pi].first) * per_frame);
        }

        typename SequenceCodec<float>::Conditioning cond;
        cond.known_image = Tensor<float>::from_data({frames_total, d, hl, wl}, std::move(known_i));
        cond.known_ray = Tensor<float>::from_data({frames_total, d, hl, wl}, std::move(known_r));
        cond.image_mask_ds =
            Tensor<float>::from_data({frames_total, 1, hl, wl}, std::move(mask_i_ds));
        cond.ray_mask_ds =
            Tensor<float>::from_data({frames_total, 1, hl, wl}, std::move(mask_r_ds));
        auto s = codec.assemble(
            cond, Tensor<float>::from_data(zi.shape(), std::move(noisy_i)),
            Tensor<float>::from_data(zr.shape(), std::move(noisy_r)));

        const auto keys = make_keys(dit_config.index_mode, tc.batch, n, &key_rng);
        auto out = model.forward(s, tc.batch, n, keys, ts);
        std::vector<float> wi, wr;
        head_weights(plans, n, wi, wr);
        auto loss = add(
            weighted_frame_mse(out.image_velocity,
                               Tensor<float>::from_data(zi.shape(), std::move(vi_target)), wi),
            weighted_frame_mse(out.ray_velocity,
                               Tensor<float>::from_data(zr.shape(), std::move(vr_target)), wr));

        const double loss_v = loss.item();
        if (!std::isfinite(loss_v)) {
            restore(model.params(), last_good);
            result.diverged = true;
            break;
        }
        opt.zero_grad();
        backward(loss);
        opt.clip_grad_norm(tc.grad_clip);
        opt.step();
        result.steps_done = step + 1;

        if (step % tc.log_every == 0 || step == tc.steps - 1) {
            result.loss_log.push_back({double(step), loss_v});
            last_good = snapshot(model.params());
            if (tc.verbose) {
                std::printf("[train-dit] step %d loss %.5f\n", step, loss_v);
                std::fflush(stdout);
            }
        }
        if (eval_items && !eval_items->empty() &&
            ((step + 1) % tc.val_every == 0 || step == tc.steps - 1)) {
            const double v = val_loss(model, codec, *eval_items);
            result.val_log.push_back({double(step + 1), v});
            if (tc.verbose) {
                std::printf("[train-dit] step %d val %.5f\n", step + 1, v);
                std::fflush(stdout);
            }
        }
        if (!tc.checkpoint_dir.empty() &&
            ((step + 1) % tc.checkpoint_every == 0 || step == tc.steps - 1)) {
            auto ck = make_bundle(model, image_vae_ck, raymap_vae_ck);
            ck.meta["trained_steps"] = std::to_string(step + 1);
            std::filesystem::create_directories(tc.checkpoint_dir);
            ck.save(tc.checkpoint_dir + "/checkpoint_latest.ckpt");
        }
        if (std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count() >
            tc.max_seconds)
            break;
    }

    if (eval_items && !eval_items->empty()) {
        result.val_final = val_loss(model, codec, *eval_items);
        if (result.val_log.empty() ||
            result.val_log.back()[0] != double(result.steps_done))
            result.val_log.push_back({double(result.steps_done), result.val_final});
    }
    result.bundle = make_bundle(model, image_vae_ck, raymap_vae_ck);
    result.bundle.meta["trained_steps"] = std::to_string(result.steps_done);
    return result;
}

// ---------------------------------------------------------------------------
// Explicit instantiation
// ---------------------------------------------------------------------------

#define MVD_FLOW_INSTANTIATE(T)                                                                  \
    template Tensor<T> add_noise<T>(const Tensor<T>&, double, const Tensor<T>&);                 \
    template Tensor<T> cfg_weight_map<T>(const Tensor<T>&, const CfgWeights&);                   \
    template class SequenceCodec<T>;                                                             \
    template DenoiserView<T> as_view<T>(const MvDit<T>&);                                        \
    template Tensor<T> training_loss<T>(const DenoiserView<T>&, const SequenceCodec<T>&,         \
                                        const std::vector<MultiViewSequence>&,                   \
                                        const std::vector<MaskPlan>&, Rng&, double, double);     \
    template Tensor<T> training_loss<T>(const MvDit<T>&, const SequenceCodec<T>&,                \
                                        const std::vector<MultiViewSequence>&,                   \
                                        const std::vector<MaskPlan>&, Rng&, double, double);     \
    template std::pair<Tensor<T>, Tensor<T>> integrate_velocity_field<T>(                        \
        const LatentVelocityFn<T>&, Tensor<T>, Tensor<T>, int, const Tensor<T>&,                 \
        const Tensor<T>&);                                                                       \
    template MultiViewSequence sample<T>(const DenoiserView<T>&, const SequenceCodec<T>&,        \
                                         const MultiViewSequence&, const SampleOptions&, Rng&);  \
    template MultiViewSequence sample<T>(const MvDit<T>&, const SequenceCodec<T>&,               \
                                         const MultiViewSequence&, const SampleOptions&, Rng&);  \
    template MultiViewSequence tiled_denoise<T>(const DenoiserView<T>&, const SequenceCodec<T>&, \
                                                const MultiViewSequence&, const TiledOptions&,   \
                                                Rng&);                                           \
    template MultiViewSequence tiled_denoise<T>(const MvDit<T>&, const SequenceCodec<T>&,       \
                                                const MultiViewSequence&, const TiledOptions&,   \
                                                Rng&);                                           \
    template double val_loss<T>(const DenoiserView<T>&, const SequenceCodec<T>&,                 \
                                const std::vector<EvalItem>&, int);                              \
    template double val_loss<T>(const MvDit<T>&, const SequenceCodec<T>&,                        \
                                const std::vector<EvalItem>&, int);

MVD_FLOW_INSTANTIATE(float)
MVD_FLOW_INSTANTIATE(double)

#undef MVD_FLOW_INSTANTIATE

}  // namespace mvd
