#include "mvd/dit.hpp"

#include <cmath>
#include <set>

#include <json.hpp>

namespace mvd {

std::string DitConfig::to_json() const {
    nlohmann::json j;
    j["width"] = width;
    j["depth"] = depth;
    j["heads"] = heads;
    j["patch_size"] = patch_size;
    j["latent_dim"] = latent_dim;
    j["downscale"] = downscale;
    j["mlp_ratio"] = mlp_ratio;
    j["index_mode"] = index_mode == IndexMode::Full    ? "full"
                      : index_mode == IndexMode::Fixed ? "fixed"
                                                       : "none";
    j["fixed_table_size"] = fixed_table_size;
    return j.dump();
}

DitConfig DitConfig::from_json(const std::string& json) {
    auto j = nlohmann::json::parse(json);
    DitConfig c;
    c.width = j.at("width").get<int>();
    c.depth = j.at("depth").get<int>();
    c.heads = j.at("heads").get<int>();
    c.patch_size = j.at("patch_size").get<int>();
    c.latent_dim = j.at("latent_dim").get<int>();
    c.downscale = j.at("downscale").get<int>();
    c.mlp_ratio = j.at("mlp_ratio").get<int>();
    const std::string mode = j.at("index_mode");
    c.index_mode = mode == "full" ? IndexMode::Full
                   : mode == "fixed" ? IndexMode::Fixed
                                     : IndexMode::None;
    c.fixed_table_size = j.at("fixed_table_size").get<int>();
    return c;
}

template <typename T>
Tensor<T> assemble_channels(const Tensor<T>& noisy_image, const Tensor<T>& known_image,
                            const Tensor<T>& image_mask, const Tensor<T>& noisy_ray,
                            const Tensor<T>& known_ray, const Tensor<T>& ray_mask) {
    const std::int64_t d = noisy_image.dim(1);
    if (known_image.dim(1) != d || noisy_ray.dim(1) != d || known_ray.dim(1) != d)
        throw std::invalid_argument("assemble_channels: latent dim mismatch");
    if (image_mask.dim(1) != 1 || ray_mask.dim(1) != 1)
        throw std::invalid_argument("assemble_channels: masks must have one channel");
    return concat<T>({noisy_image, known_image, image_mask, noisy_ray, known_ray, ray_mask}, 1);
}

std::vector<double> inference_keys(int n_frames) {
    std::vector<double> keys(n_frames);
    for (int i = 0; i < n_frames; ++i) keys[i] = double(i) / double(n_frames);
    return keys;
}

std::vector<double> training_keys(int n_frames, Rng& rng) {
    std::vector<int> strata(n_frames);
    for (int i = 0; i < n_frames; ++i) strata[i] = i;
    rng.shuffle(strata);
    std::vector<double> keys(n_frames);
    for (int i = 0; i < n_frames; ++i)
        keys[i] = (strata[i] + rng.uniform()) / double(n_frames);
    return keys;
}

template <typename T>
MvDit<T>::MvDit(DitConfig cfg, Rng& rng) : config(std::move(cfg)) {
    if (config.width % config.heads != 0)
        throw std::invalid_argument("dit: width must be divisible by heads");
    const int w = config.width;
    const int in_features = config.channels() * config.patch_size * config.patch_size;
    patch_in_ = Linear<T>(params_, "patch_in", in_features, w, rng);
    t_embed_in_ = Linear<T>(params_, "t_embed.in", w, w, rng);
    t_embed_out_ = Linear<T>(params_, "t_embed.out", w, w, rng);
    for (int i = 0; i < config.depth; ++i) {
        Block b;
        const std::string p = "block" + std::to_string(i);
        b.qkv = Linear<T>(params_, p + ".qkv", w, 3 * w, rng);
        b.proj = Linear<T>(params_, p + ".proj", w, w, rng);
        b.mlp_in = Linear<T>(params_, p + ".mlp_in", w, config.mlp_ratio * w, rng);
        b.mlp_out = Linear<T>(params_, p + ".mlp_out", config.mlp_ratio * w, w, rng);
        // zero-init modulation: blocks start as identity
        b.modulation = Linear<T>(params_, p + ".mod", w, 6 * w, rng, /*zero_init=*/true);
        b.attn_scale = Tensor<T>::full({config.heads}, T(10));
        b.attn_scale.node()->requires_grad = true;
        params_.add(p + ".attn_scale", b.attn_scale);
        blocks_.push_back(std::move(b));
    }
    final_modulation_ = Linear<T>(params_, "final.mod", w, 2 * w, rng, /*zero_init=*/true);
    head_ = Linear<T>(params_, "head",
                      w, 2 * config.latent_dim * config.patch_size * config.patch_size, rng,
                      /*zero_init=*/true);
    if (config.index_mode == IndexMode::Fixed) {
        index_table_ = Tensor<T>::randn({config.fixed_table_size, w}, rng, T(0.02));
        index_table_.node()->requires_grad = true;
        params_.add("index_table", index_table_);
    }
}

template <typename T>
Tensor<T> MvDit<T>::pos_embedding(int batch, int n_frames, int hp, int wp,
                                  const std::vector<double>& keys) const {
    const int w = config.width;
    const int tokens_per_frame = hp * wp;
    const std::int64_t total = std::int64_t(batch) * n_frames * tokens_per_frame;

    // fixed 2D layout embedding: first half encodes the row, second the column
    std::vector<T> layout(std::size_t(tokens_per_frame) * w);
    for (int r = 0; r < hp; ++r)
        for (int c = 0; c < wp; ++c) {
            const auto row_feat = sincos_features<T>(double(r), w / 2);
            const auto col_feat = sincos_features<T>(double(c), w / 2);
            T* dst = layout.data() + (std::size_t(r) * wp + c) * w;
            std::copy(row_feat.begin(), row_feat.end(), dst);
            std::copy(col_feat.begin(), col_feat.end(), dst + w / 2);
        }

    std::vector<T> data(std::size_t(total) * w);
    for (int b = 0; b < batch; ++b) {
        // duplicate keys make frames indistinguishable within a sequence
        std::set<double> unique(keys.begin() + b * n_frames, keys.begin() + (b + 1) * n_frames);
        if (config.index_mode != IndexMode::None &&
            static_cast<int>(unique.size()) != n_frames)
            throw std::invalid_argument("dit: duplicate index keys within a sequence");
        for (int f = 0; f < n_frames; ++f) {
            std::vector<T> idx_feat(w, T(0));
            if (config.index_mode == IndexMode::Full) {
                // scalar key spread over the sinusoidal spectrum
                idx_feat = sincos_features<T>(keys[b * n_frames + f] * 1000.0, w);
            }
            T* frame_base =
                data.data() + (std::size_t(b) * n_frames + f) * tokens_per_frame * w;
            for (int tkn = 0; tkn < tokens_per_frame; ++tkn)
                for (int k = 0; k < w; ++k)
                    frame_base[std::size_t(tkn) * w + k] =
                        layout[std::size_t(tkn) * w + k] + idx_feat[k];
        }
    }
    auto pos = Tensor<T>::from_data({total, w}, std::move(data));
    if (config.index_mode != IndexMode::Fixed) return pos;

    // learned per-index table, gathered per frame and broadcast over tokens
    std::vector<std::int64_t> idx;
    idx.reserve(total);
    for (int b = 0; b < batch; ++b)
        for (int f = 0; f < n_frames; ++f) {
            const auto key = static_cast<std::int64_t>(keys[b * n_frames + f]);
            if (key < 0 || key >= index_table_.dim(0))
                throw std::invalid_argument("dit: fixed index key out of table range");
            for (int tkn = 0; tkn < tokens_per_frame; ++tkn) idx.push_back(key);
        }
    return add(pos, gather_rows(index_table_, idx));
}

template <typename T>
typename MvDit<T>::Output MvDit<T>::forward(const Tensor<T>& s, int batch, int n_frames,
                                            const std::vector<double>& keys,
                                            const std::vector<double>& t) const {
    if (s.ndim() != 4 || s.dim(0) != std::int64_t(batch) * n_frames ||
        s.dim(1) != config.channels())
        throw std::invalid_argument("dit forward: expected [" +
                                    std::to_string(std::int64_t(batch) * n_frames) + "," +
                                    std::to_string(config.channels()) + ",h,w], got " +
                                    shape_str(s.shape()));
    if (static_cast<int>(keys.size()) != batch * n_frames)
        throw std::invalid_argument("dit forward: need one key per frame");
    if (static_cast<int>(t.size()) != batch)
        throw std::invalid_argument("dit forward: need one timestep per sequence");
    const int h = static_cast<int>(s.dim(2));
    const int wd = static_cast<int>(s.dim(3));
    const int p = config.patch_size;
    if (h % p != 0 || wd % p != 0)
        throw std::invalid_argument("dit forward: latent extents not divisible by patch size");
    const int hp = h / p, wp = wd / p;
    const int tokens_per_seq = n_frames * hp * wp;
    const int w = config.width;
    const int dh = w / config.heads;

    auto x = patch_in_.forward(patchify(s, p));
    x = add(x, pos_embedding(batch, n_frames, hp, wp, keys));
    x = reshape(x, {batch, tokens_per_seq, w});

    // timestep conditioning, one vector per sequence
    std::vector<T> t_feat;
    t_feat.reserve(std::size_t(batch) * w);
    for (int b = 0; b < batch; ++b) {
        const auto f = sincos_features<T>(t[b] * 1000.0, w);
        t_feat.insert(t_feat.end(), f.begin(), f.end());
    }
    auto cond = t_embed_out_.forward(
        silu(t_embed_in_.forward(Tensor<T>::from_data({batch, w}, std::move(t_feat)))));

    auto modulate = [&](const Tensor<T>& xs, const Tensor<T>& shift, const Tensor<T>& scale) {
        // shift/scale [B, w] broadcast over tokens
        auto sc = reshape(scale, {batch, 1, w});
        auto sh = reshape(shift, {batch, 1, w});
        return add(mul(xs, add_scalar(sc, T(1))), sh);
    };

    for (const auto& block : blocks_) {
        auto mod = block.modulation.forward(silu(cond));  // [B, 6w]
        auto shift_a = slice(mod, 1, 0, w);
        auto scale_a = slice(mod, 1, w, w);
        auto gate_a = reshape(slice(mod, 1, 2 * w, w), {batch, 1, w});
        auto shift_m = slice(mod, 1, 3 * w, w);
        auto scale_m = slice(mod, 1, 4 * w, w);
        auto gate_m = reshape(slice(mod, 1, 5 * w, w), {batch, 1, w});

        // attention with L2-normalized keys and queries
        auto xa = modulate(layer_norm(x, Tensor<T>(), Tensor<T>()), shift_a, scale_a);
        auto qkv = block.qkv.forward(xa);  // [B, S, 3w]
        auto split_heads = [&](Tensor<T> part) {
            part = reshape(part, {batch, tokens_per_seq, config.heads, dh});
            part = permute(part, {0, 2, 1, 3});
            return reshape(part, {std::int64_t(batch) * config.heads, tokens_per_seq, dh});
        };
        auto q = l2_normalize_last(split_heads(slice(qkv, 2, 0, w)));
        auto k = l2_normalize_last(split_heads(slice(qkv, 2, w, w)));
        auto v = split_heads(slice(qkv, 2, 2 * w, w));
        if (probe) {
            for (const auto* part : {&q, &k}) {
                const T* pv = part->data();
                for (std::int64_t r = 0; r < part->numel() / dh; ++r) {
                    double nrm = 0;
                    for (int i = 0; i < dh; ++i)
                        nrm += double(pv[r * dh + i]) * double(pv[r * dh + i]);
                    nrm = std::sqrt(nrm);
                    probe->min_qk_norm = std::min(probe->min_qk_norm, nrm);
                    probe->max_qk_norm = std::max(probe->max_qk_norm, nrm);
                }
            }
        }
        auto logits = matmul(q, k, false, true);  // [B*H, S, S]
        logits = reshape(logits, {batch, config.heads, tokens_per_seq, tokens_per_seq});
        logits = mul(logits, reshape(block.attn_scale, {config.heads, 1, 1}));
        logits = reshape(logits,
                         {std::int64_t(batch) * config.heads, tokens_per_seq, tokens_per_seq});
        auto attn = matmul(softmax_last(logits), v);  // [B*H, S, dh]
        attn = reshape(attn, {batch, config.heads, tokens_per_seq, dh});
        attn = reshape(permute(attn, {0, 2, 1, 3}), {batch, tokens_per_seq, w});
        x = add(x, mul(gate_a, block.proj.forward(attn)));

        auto xm = modulate(layer_norm(x, Tensor<T>(), Tensor<T>()), shift_m, scale_m);
        auto mlp = block.mlp_out.forward(gelu(block.mlp_in.forward(xm)));
        x = add(x, mul(gate_m, mlp));
    }

    auto final_mod = final_modulation_.forward(silu(cond));
    auto out = modulate(layer_norm(x, Tensor<T>(), Tensor<T>()), slice(final_mod, 1, 0, w),
                        slice(final_mod, 1, w, w));
    auto tokens = head_.forward(reshape(out, {std::int64_t(batch) * tokens_per_seq, w}));
    auto latents =
        unpatchify(tokens, batch * n_frames, 2 * config.latent_dim, h, wd, p);

    Output result;
    result.image_velocity = slice(latents, 1, 0, config.latent_dim);
    result.ray_velocity = slice(latents, 1, config.latent_dim, config.latent_dim);
    check_finite(result.image_velocity, "dit image velocity head");
    check_finite(result.ray_velocity, "dit raymap velocity head");
    return result;
}

template <typename T>
void fill_dit(MvDit<T>& model, const Checkpoint& ck, const std::string& prefix) {
    ck.fill_params(model.params(), prefix);
}

template class MvDit<float>;
template class MvDit<double>;
template Tensor<float> assemble_channels<float>(const Tensor<float>&, const Tensor<float>&,
                                                const Tensor<float>&, const Tensor<float>&,
                                                const Tensor<float>&, const Tensor<float>&);
template Tensor<double> assemble_channels<double>(const Tensor<double>&, const Tensor<double>&,
                                                  const Tensor<double>&, const Tensor<double>&,
                                                  const Tensor<double>&, const Tensor<double>&);
template void fill_dit<float>(MvDit<float>&, const Checkpoint&, const std::string&);
template void fill_dit<double>(MvDit<double>&, const Checkpoint&, const std::string&);

}  // namespace mvd
