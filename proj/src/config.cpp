#include "mvd/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace mvd {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_int_list(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

// Binds config keys to typed getters/setters over a RunConfig.
class Schema {
  public:
    explicit Schema(RunConfig& c) : c_(c) {
        bind_u64("seed", &c.seed);
        bind_int("threads", &c.threads);
        bind_int("data.resolution", &c.resolution);
        bind_int("data.captures", &c.captures);
        bind_int("data.frames_per_capture", &c.frames_per_capture);
        bind_double("data.fps", &c.fps);
        bind_int("train.sequence_size", &c.sequence_size);
        bind_int("train.crop", &c.crop);

        bind_int("vae.image.latent_dim", &c.image_vae.latent_dim);
        bind_int_list("vae.image.blocks", &c.image_vae.block_channels);
        bind_bool("vae.image.group_norm", &c.image_vae.use_group_norm);
        bind_pad("vae.image.padding", &c.image_vae.padding_mode);
        bind_int("vae.raymap.latent_dim", &c.raymap_vae.latent_dim);
        bind_int_list("vae.raymap.blocks", &c.raymap_vae.block_channels);
        bind_bool("vae.raymap.group_norm", &c.raymap_vae.use_group_norm);
        bind_pad("vae.raymap.padding", &c.raymap_vae.padding_mode);
        bind_int("vae.train.steps", &c.vae_train.steps);
        bind_int("vae.train.batch", &c.vae_train.batch);
        bind_double("vae.train.lr", &c.vae_train.lr);
        bind_double("vae.train.beta_kl", &c.vae_train.beta_kl);
        bind_double("vae.train.mask_augment_prob", &c.vae_train.mask_augment_prob);
        bind_double("vae.train.max_seconds", &c.vae_train.max_seconds);
        bind_int("vae.train.log_every", &c.vae_train.log_every);
        bind_int("vae.train.raymap_samples", &c.raymap_samples);

        bind_int("dit.width", &c.dit.width);
        bind_int("dit.depth", &c.dit.depth);
        bind_int("dit.heads", &c.dit.heads);
        bind_int("dit.patch_size", &c.dit.patch_size);
        bind_int("dit.mlp_ratio", &c.dit.mlp_ratio);
        bind_index_mode("dit.index_mode", &c.dit.index_mode);
        bind_int("dit.fixed_table_size", &c.dit.fixed_table_size);
        bind_int("dit.train.steps", &c.dit_train.steps);
        bind_int("dit.train.batch", &c.dit_train.batch);
        bind_double("dit.train.lr", &c.dit_train.lr);
        bind_double("dit.train.grad_clip", &c.dit_train.grad_clip);
        bind_double("dit.train.image_task_prob", &c.dit_train.image_task_prob);
        bind_double("dit.train.dropout_prob", &c.dit_train.dropout_prob);
        bind_double("dit.train.timestep_loc", &c.dit_train.timestep_loc);
        bind_double("dit.train.timestep_scale", &c.dit_train.timestep_scale);
        bind_int("dit.train.val_every", &c.dit_train.val_every);
        bind_int("dit.train.log_every", &c.dit_train.log_every);
        bind_int("dit.train.checkpoint_every", &c.dit_train.checkpoint_every);
        bind_double("dit.train.max_seconds", &c.dit_train.max_seconds);
        bind_double("train.holdout_fraction", &c.holdout_fraction);

        bind_int("sample.steps", &c.sampler.steps);
        bind_double("sample.cfg_unknown", &c.sampler.cfg.unknown_weight);
        bind_double("sample.cfg_known", &c.sampler.cfg.known_weight);

        bind_int("plan.conditioning_count", &c.plan.conditioning_count);
        bind_int("plan.anchor_count", &c.plan.anchor_count);
        bind_int("plan.densify_rounds", &c.plan.densify_rounds);
        bind_int("plan.densify_batch", &c.plan.densify_batch);
        bind_int("plan.target_new_views", &c.plan.target_total_new_views);
        bind_double("plan.cylinder_radius_factor", &c.plan.cylinder_radius_factor);
        bind_double("plan.cylinder_height_margin", &c.plan.cylinder_height_margin);
        bind_double("plan.look_elevation_range", &c.plan.look_elevation_range);

        bind_int("pose.window", &c.pose.window);
        bind_int("pose.passes", &c.pose.passes);
        bind_int("pose.steps", &c.pose.pose_steps);
        bind_int("pose.novel_views", &c.pose.novel_views);
        bind_double("pose.trim_fraction", &c.pose.solver.trim_fraction);

        bind_int("eval.items", &c.eval_items);
        bind_int("eval.pairs", &c.eval_pairs);
    }

    void set(const std::string& key, const std::string& value) {
        auto it = setters_.find(key);
        if (it == setters_.end()) throw ConfigError("unknown config key: " + key);
        try {
            it->second(value);
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            throw ConfigError("bad value for " + key + ": '" + value + "'");
        }
    }

    std::string canonical() const {
        std::string out;
        for (const auto& [key, getter] : getters_) out += key + " = " + getter() + "\n";
        return out;
    }

  private:
    void bind_int(const std::string& k, int* p) {
        setters_[k] = [p](const std::string& v) { *p = std::stoi(v); };
        getters_[k] = [p] { return std::to_string(*p); };
    }
    void bind_u64(const std::string& k, std::uint64_t* p) {
        setters_[k] = [p](const std::string& v) { *p = std::stoull(v); };
        getters_[k] = [p] { return std::to_string(*p); };
    }
    void bind_double(const std::string& k, double* p) {
        setters_[k] = [p](const std::string& v) { *p = std::stod(v); };
        getters_[k] = [p] { return fmt_double(*p); };
    }
    void bind_bool(const std::string& k, bool* p) {
        setters_[k] = [k, p](const std::string& v) {
            if (v == "true" || v == "1")
                *p = true;
            else if (v == "false" || v == "0")
                *p = false;
            else
                throw ConfigError("bad boolean for " + k + ": " + v);
        };
        getters_[k] = [p] { return *p ? std::string("true") : std::string("false"); };
    }
    void bind_int_list(const std::string& k, std::vector<int>* p) {
        setters_[k] = [p](const std::string& v) {
            std::vector<int> out;
            std::stringstream ss(v);
            std::string item;
            while (std::getline(ss, item, ',')) out.push_back(std::stoi(trim(item)));
            if (out.empty()) throw std::invalid_argument("empty list");
            *p = out;
        };
        getters_[k] = [p] { return fmt_int_list(*p); };
    }
    void bind_pad(const std::string& k, PadMode* p) {
        setters_[k] = [k, p](const std::string& v) {
            if (v == "zero")
                *p = PadMode::Zero;
            else if (v == "replicate")
                *p = PadMode::Replicate;
            else
                throw ConfigError("bad padding mode for " + k + ": " + v);
        };
        getters_[k] = [p] { return *p == PadMode::Zero ? "zero" : "replicate"; };
    }
    void bind_index_mode(const std::string& k, IndexMode* p) {
        setters_[k] = [k, p](const std::string& v) {
            if (v == "full")
                *p = IndexMode::Full;
            else if (v == "fixed")
                *p = IndexMode::Fixed;
            else if (v == "none")
                *p = IndexMode::None;
            else
                throw ConfigError("bad index mode for " + k + ": " + v);
        };
        getters_[k] = [p] {
            return *p == IndexMode::Full ? "full" : *p == IndexMode::Fixed ? "fixed" : "none";
        };
    }

    RunConfig& c_;
    std::map<std::string, std::function<void(const std::string&)>> setters_;
    std::map<std::string, std::function<std::string()>> getters_;
};

}  // namespace

RunConfig RunConfig::parse(const std::string& text) {
    RunConfig config;
    Schema schema(config);
    std::stringstream ss(text);
    std::string line;
    int line_no = 0;
    while (std::getline(ss, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) + " is not 'key = value'");
        schema.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    config.validate_and_derive();
    return config;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open config: " + path);
    std::stringstream buffer;
    buffer << is.rdbuf();
    return parse(buffer.str());
}

void RunConfig::validate_and_derive() {
    if (image_vae.latent_dim != raymap_vae.latent_dim)
        throw ConfigError("image and raymap VAEs must share the latent dim (got " +
                          std::to_string(image_vae.latent_dim) + " vs " +
                          std::to_string(raymap_vae.latent_dim) + ")");
    if (image_vae.downscale_factor() != raymap_vae.downscale_factor())
        throw ConfigError("image and raymap VAEs must share the downscale factor");
    dit.latent_dim = image_vae.latent_dim;
    dit.downscale = image_vae.downscale_factor();
    if (crop % dit.downscale != 0)
        throw ConfigError("train.crop must be divisible by the VAE downscale factor");
    if ((crop / dit.downscale) % dit.patch_size != 0)
        throw ConfigError("latent extent must be divisible by dit.patch_size");
    if (dit.width % dit.heads != 0) throw ConfigError("dit.width must be divisible by dit.heads");
    if (dit.width % 4 != 0) throw ConfigError("dit.width must be divisible by 4");
    if (crop > resolution) throw ConfigError("train.crop larger than data.resolution");
    if (sequence_size < 1 || captures < 1 || frames_per_capture < 1)
        throw ConfigError("data sizes must be positive");
    // trainer settings flow into the nested configs
    dit_train.sequence_size = sequence_size;
    dit_train.crop = crop;
    dit_train.seed = seed;
    vae_train.seed = seed;
    pose.solver.origin_error_threshold = 0.5;  // normalized-cube units, noisy raymaps
}

std::string RunConfig::canonical() const {
    RunConfig copy = *this;
    Schema schema(copy);
    return schema.canonical();
}

std::string RunConfig::config_hash() const {
    const auto canon = canonical();
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(canon)));
    return buf;
}

}  // namespace mvd
