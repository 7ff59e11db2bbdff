#include "mvd/vae.hpp"

#include <chrono>
#include <cmath>

#include <json.hpp>

namespace mvd {

namespace {

int norm_groups(int channels) {
    int g = std::min(8, channels);
    while (channels % g) --g;
    return g;
}

}  // namespace

VaeConfig VaeConfig::image_desk() {
    VaeConfig c;
    c.kind = VaeKind::Image;
    c.in_channels = 3;
    c.latent_dim = 4;
    c.block_channels = {32, 64, 128, 128};
    c.padding_mode = PadMode::Zero;
    c.use_group_norm = true;
    return c;
}

VaeConfig VaeConfig::raymap_desk() {
    VaeConfig c;
    c.kind = VaeKind::Raymap;
    c.in_channels = 6;
    c.latent_dim = 4;
    c.block_channels = {16, 32, 64, 64};
    c.padding_mode = PadMode::Replicate;  // zero padding produced corner artifacts
    c.use_group_norm = false;
    return c;
}

VaeConfig VaeConfig::image_paper() {
    VaeConfig c = image_desk();
    c.latent_dim = 16;
    c.block_channels = {128, 256, 512, 512};
    return c;
}

VaeConfig VaeConfig::raymap_paper() {
    VaeConfig c = raymap_desk();
    c.latent_dim = 16;
    c.block_channels = {32, 64, 128, 128};
    return c;
}

std::string VaeConfig::to_json() const {
    nlohmann::json j;
    j["kind"] = kind == VaeKind::Image ? "image" : "raymap";
    j["in_channels"] = in_channels;
    j["latent_dim"] = latent_dim;
    j["block_channels"] = block_channels;
    j["padding_mode"] = padding_mode == PadMode::Zero ? "zero" : "replicate";
    j["use_group_norm"] = use_group_norm;
    return j.dump();
}

VaeConfig VaeConfig::from_json(const std::string& json) {
    auto j = nlohmann::json::parse(json);
    VaeConfig c;
    c.kind = j.at("kind") == "image" ? VaeKind::Image : VaeKind::Raymap;
    c.in_channels = j.at("in_channels").get<int>();
    c.latent_dim = j.at("latent_dim").get<int>();
    c.block_channels = j.at("block_channels").get<std::vector<int>>();
    c.padding_mode = j.at("padding_mode") == "zero" ? PadMode::Zero : PadMode::Replicate;
    c.use_group_norm = j.at("use_group_norm").get<bool>();
    return c;
}

template <typename T>
typename Vae<T>::ResBlock Vae<T>::make_res(const std::string& name, int channels, Rng& rng) {
    ResBlock b;
    b.use_norm = config.use_group_norm;
    b.groups = norm_groups(channels);
    if (b.use_norm) {
        b.norm1 = NormAffine<T>(params_, name + ".norm1", channels);
        b.norm2 = NormAffine<T>(params_, name + ".norm2", channels);
    }
    b.conv1 =
        Conv2dLayer<T>(params_, name + ".conv1", channels, channels, 3, 1, config.padding_mode, rng);
    b.conv2 =
        Conv2dLayer<T>(params_, name + ".conv2", channels, channels, 3, 1, config.padding_mode, rng);
    return b;
}

template <typename T>
Tensor<T> Vae<T>::res_forward(const ResBlock& block, const Tensor<T>& x) const {
    auto h = x;
    if (block.use_norm) h = group_norm(h, block.groups, block.norm1.gamma, block.norm1.beta);
    h = block.conv1.forward(silu(h));
    if (block.use_norm) h = group_norm(h, block.groups, block.norm2.gamma, block.norm2.beta);
    h = block.conv2.forward(silu(h));
    return add(x, h);
}

template <typename T>
Vae<T>::Vae(VaeConfig cfg, Rng& rng) : config(std::move(cfg)) {
    const auto& blocks = config.block_channels;
    if (blocks.empty()) throw std::invalid_argument("vae: empty block list");
    if (config.latent_dim < 1) throw std::invalid_argument("vae: latent_dim must be >= 1");
    const int levels = static_cast<int>(blocks.size());

    enc_stem_ = Conv2dLayer<T>(params_, "enc.stem", config.in_channels, blocks[0], 3, 1,
                               config.padding_mode, rng);
    for (int i = 0; i < levels; ++i) {
        if (i > 0)
            enc_down_.push_back(Conv2dLayer<T>(params_, "enc.down" + std::to_string(i),
                                               blocks[i - 1], blocks[i], 3, 2, config.padding_mode,
                                               rng));
        enc_res_.push_back(make_res("enc.res" + std::to_string(i), blocks[i], rng));
    }
    enc_mid_ = make_res("enc.mid", blocks.back(), rng);
    head_groups_ = norm_groups(blocks.back());
    if (config.use_group_norm)
        enc_head_norm_ = NormAffine<T>(params_, "enc.head_norm", blocks.back());
    enc_head_ = Conv2dLayer<T>(params_, "enc.head", blocks.back(), 2 * config.latent_dim, 3, 1,
                               config.padding_mode, rng);

    dec_stem_ = Conv2dLayer<T>(params_, "dec.stem", config.latent_dim, blocks.back(), 3, 1,
                               config.padding_mode, rng);
    dec_mid_ = make_res("dec.mid", blocks.back(), rng);
    for (int i = levels - 1; i > 0; --i) {
        dec_res_.push_back(make_res("dec.res" + std::to_string(i), blocks[i], rng));
        dec_up_.push_back(Conv2dLayer<T>(params_, "dec.up" + std::to_string(i), blocks[i],
                                         blocks[i - 1], 3, 1, config.padding_mode, rng));
    }
    dec_final_ = make_res("dec.final", blocks[0], rng);
    if (config.use_group_norm) dec_head_norm_ = NormAffine<T>(params_, "dec.head_norm", blocks[0]);
    dec_head_ = Conv2dLayer<T>(params_, "dec.head", blocks[0], config.in_channels, 3, 1,
                               config.padding_mode, rng);
}

template <typename T>
int Vae<T>::downscale_factor_check(std::int64_t h, std::int64_t w) const {
    const int f = config.downscale_factor();
    if (h % f != 0 || w % f != 0)
        throw std::invalid_argument("vae: spatial extents " + std::to_string(h) + "x" +
                                    std::to_string(w) + " not divisible by f=" + std::to_string(f));
    return f;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> Vae<T>::encode(const Tensor<T>& x) const {
    if (x.ndim() != 4 || x.dim(1) != config.in_channels)
        throw std::invalid_argument("vae encode: expected [N," +
                                    std::to_string(config.in_channels) + ",H,W], got " +
                                    shape_str(x.shape()));
    downscale_factor_check(x.dim(2), x.dim(3));
    auto h = enc_stem_.forward(x);
    for (std::size_t i = 0; i < enc_res_.size(); ++i) {
        if (i > 0) h = enc_down_[i - 1].forward(h);
        h = res_forward(enc_res_[i], h);
    }
    h = res_forward(enc_mid_, h);
    if (config.use_group_norm)
        h = group_norm(h, head_groups_, enc_head_norm_.gamma, enc_head_norm_.beta);
    h = enc_head_.forward(silu(h));
    auto mean = slice(h, 1, 0, config.latent_dim);
    auto logvar = slice(h, 1, config.latent_dim, config.latent_dim);
    return {mean, logvar};
}

template <typename T>
Tensor<T> Vae<T>::decode_raw(const Tensor<T>& z) const {
    if (z.ndim() != 4 || z.dim(1) != config.latent_dim)
        throw std::invalid_argument("vae decode: expected [N," + std::to_string(config.latent_dim) +
                                    ",h,w], got " + shape_str(z.shape()));
    auto h = dec_stem_.forward(z);
    h = res_forward(dec_mid_, h);
    for (std::size_t i = 0; i < dec_res_.size(); ++i) {
        h = res_forward(dec_res_[i], h);
        h = dec_up_[i].forward(upsample_nearest2(h));
    }
    h = res_forward(dec_final_, h);
    if (config.use_group_norm)
        h = group_norm(h, norm_groups(config.block_channels[0]), dec_head_norm_.gamma,
                       dec_head_norm_.beta);
    return dec_head_.forward(silu(h));
}

template <typename T>
Tensor<T> Vae<T>::decode(const Tensor<T>& z) const {
    auto raw = decode_raw(z);
    if (config.kind == VaeKind::Image) return clamp(raw, T(0), T(1));
    auto origins = slice(raw, 1, 0, 3);
    auto dirs = slice(raw, 1, 3, 3);
    auto norm = sqrt_(sum_axis(square(dirs), 1, true));  // [N,1,H,W]
    return concat<T>({origins, div_(dirs, norm)}, 1);
}

template <typename T>
Tensor<T> Vae<T>::encode_scaled(const Tensor<T>& x) const {
    return mul_scalar(encode(x).first, latent_scale);
}

template <typename T>
Tensor<T> Vae<T>::decode_scaled(const Tensor<T>& z_scaled) const {
    return decode(mul_scalar(z_scaled, T(1) / latent_scale));
}

template <typename T>
Tensor<T> downscale_mask(const Tensor<T>& mask, int factor) {
    if (mask.ndim() < 2) throw std::invalid_argument("downscale_mask: need >= 2 dims");
    const std::int64_t h = mask.dim(mask.ndim() - 2);
    const std::int64_t w = mask.dim(mask.ndim() - 1);
    if (h % factor != 0 || w % factor != 0)
        throw std::invalid_argument("downscale_mask: extents not divisible by factor");
    const std::int64_t oh = h / factor, ow = w / factor;
    const std::int64_t outer = mask.numel() / (h * w);
    Shape out_shape = mask.shape();
    out_shape[out_shape.size() - 2] = oh;
    out_shape[out_shape.size() - 1] = ow;
    std::vector<T> out(outer * oh * ow, T(0));
    const T* src = mask.data();
    const T inv = T(1) / T(factor * factor);
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t r = 0; r < h; ++r)
            for (std::int64_t c = 0; c < w; ++c)
                out[(o * oh + r / factor) * ow + c / factor] += src[(o * h + r) * w + c] * inv;
    return Tensor<T>::from_data(std::move(out_shape), std::move(out));
}

template <typename T>
Tensor<T> kl_divergence(const Tensor<T>& mean, const Tensor<T>& logvar) {
    // 0.5 * (mu^2 + exp(logvar) - 1 - logvar), averaged over elements
    auto term = add(add(square(mean), exp_(logvar)), add_scalar(neg(logvar), T(-1)));
    return mul_scalar(mean_all(term), T(0.5));
}

namespace {

std::vector<float> snapshot_params(const ParamStore<float>& ps) {
    std::vector<float> out;
    for (auto& [name, t] : ps.entries()) out.insert(out.end(), t.data(), t.data() + t.numel());
    return out;
}

void restore_params(ParamStore<float>& ps, const std::vector<float>& snap) {
    std::size_t off = 0;
    for (auto& [name, t] : ps.entries()) {
        Tensor<float> tt = t;
        std::copy(snap.begin() + off, snap.begin() + off + t.numel(), tt.data());
        off += t.numel();
    }
}

}  // namespace

VaeTrainResult train_vae(const std::vector<Tensor<float>>& frames, const VaeConfig& config,
                         const VaeTrainConfig& tc) {
    if (frames.empty()) throw DataError("train_vae: empty dataset");
    Rng init_rng(tc.seed);
    Vae<float> vae(config, init_rng);
    Adam<float> opt(vae.params().tensors(), tc.lr);
    Rng rng = init_rng.fork(1);

    VaeTrainResult result;
    std::vector<float> last_good = snapshot_params(vae.params());
    const auto t_start = std::chrono::steady_clock::now();

    const int hh = static_cast<int>(frames[0].dim(1));
    const int ww = static_cast<int>(frames[0].dim(2));

    for (int step = 0; step < tc.steps; ++step) {
        std::vector<float> batch_data;
        batch_data.reserve(std::size_t(tc.batch) * config.in_channels * hh * ww);
        for (int b = 0; b < tc.batch; ++b) {
            const auto& f = frames[rng.uniform_index(frames.size())];
            const std::size_t base = batch_data.size();
            batch_data.insert(batch_data.end(), f.data(), f.data() + f.numel());
            if (rng.bernoulli(tc.mask_augment_prob)) {
                // zero a random rectangle across all channels
                const int rw = 1 + static_cast<int>(rng.uniform_index(ww - 1));
                const int rh = 1 + static_cast<int>(rng.uniform_index(hh - 1));
                const int x0 = static_cast<int>(rng.uniform_index(ww - rw + 1));
                const int y0 = static_cast<int>(rng.uniform_index(hh - rh + 1));
                for (int c = 0; c < config.in_channels; ++c)
                    for (int y = y0; y < y0 + rh; ++y)
                        for (int x = x0; x < x0 + rw; ++x)
                            batch_data[base + (std::size_t(c) * hh + y) * ww + x] = 0.f;
            }
        }
        auto x = Tensor<float>::from_data({tc.batch, config.in_channels, hh, ww},
                                          std::move(batch_data));

        auto [mean, logvar] = vae.encode(x);
        auto eps = Tensor<float>::randn(mean.shape(), rng);
        auto z = add(mean, mul(exp_(mul_scalar(logvar, 0.5f)), eps));
        auto recon = vae.decode_raw(z);
        auto l1 = mean_all(abs_(sub(recon, x)));
        auto loss = tc.beta_kl > 0
                        ? add(l1, mul_scalar(kl_divergence(mean, logvar), float(tc.beta_kl)))
                        : l1;

        const double loss_v = loss.item();
        if (!std::isfinite(loss_v)) {
            restore_params(vae.params(), last_good);
            result.diverged = true;
            break;
        }
        if (step == 0) result.init_loss = loss_v;

        opt.zero_grad();
        backward(loss);
        opt.clip_grad_norm(1.0);
        opt.step();

        if (step % tc.log_every == 0 || step == tc.steps - 1) {
            result.loss_history.emplace_back(step, loss_v);
            last_good = snapshot_params(vae.params());
        }
        if (static_cast<std::size_t>(step) + 1 == frames.size() / tc.batch)
            result.first_epoch_loss = loss_v;
        if (std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count() >
            tc.max_seconds)
            break;
    }

    // calibrate latent scale so diffusion-facing latents have ~unit variance
    {
        NoGradGuard ng;
        double sum = 0, sum2 = 0;
        std::int64_t count = 0;
        const std::size_t probe = std::min<std::size_t>(frames.size(), 64);
        for (std::size_t i = 0; i < probe; ++i) {
            const auto& f = frames[(i * frames.size()) / probe];
            auto x = reshape(f, {1, config.in_channels, hh, ww});
            auto z = vae.encode(x).first;
            for (std::int64_t k = 0; k < z.numel(); ++k) {
                sum += z.data()[k];
                sum2 += double(z.data()[k]) * z.data()[k];
                ++count;
            }
        }
        const double var = std::max(1e-8, sum2 / count - (sum / count) * (sum / count));
        vae.latent_scale =
            std::min(100.f, std::max(0.01f, static_cast<float>(1.0 / std::sqrt(var))));
    }

    result.checkpoint = vae_checkpoint(vae);
    return result;
}

Checkpoint vae_checkpoint(const Vae<float>& vae) {
    Checkpoint ck;
    ck.meta["kind"] = "vae";
    ck.meta["vae_config"] = vae.config.to_json();
    ck.meta["vae.latent_scale"] = std::to_string(vae.latent_scale);
    ck.meta["code_version"] = kCodeVersion;
    ck.put_params(vae.params(), "vae.");
    return ck;
}

template <typename T>
std::unique_ptr<Vae<T>> load_vae(const Checkpoint& ck, const std::string& prefix) {
    std::string cfg_json = ck.meta_or(prefix + "config", ck.meta_or("vae_config", ""));
    if (cfg_json.empty()) throw CheckpointError("checkpoint has no vae config");
    Rng rng(0);
    auto vae = std::make_unique<Vae<T>>(VaeConfig::from_json(cfg_json), rng);
    ck.fill_params(vae->params(), prefix);
    const std::string ls = ck.meta_or(prefix + "latent_scale", "1");
    vae->latent_scale = static_cast<T>(std::stod(ls));
    return vae;
}

template class Vae<float>;
template class Vae<double>;
template Tensor<float> downscale_mask<float>(const Tensor<float>&, int);
template Tensor<double> downscale_mask<double>(const Tensor<double>&, int);
template Tensor<float> kl_divergence<float>(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> kl_divergence<double>(const Tensor<double>&, const Tensor<double>&);
template std::unique_ptr<Vae<float>> load_vae<float>(const Checkpoint&, const std::string&);
template std::unique_ptr<Vae<double>> load_vae<double>(const Checkpoint&, const std::string&);

}  // namespace mvd
