#pragma once

// Flat, typed key-value run configuration. Every output artifact embeds the
// hash of the canonical (resolved, sorted) key set, so identical hashes mean
// identical configurations.

#include <string>
#include <vector>

#include "mvd/dit.hpp"
#include "mvd/flow.hpp"
#include "mvd/pipeline.hpp"
#include "mvd/vae.hpp"

namespace mvd {

struct RunConfig {
    std::uint64_t seed = 0;
    int threads = 1;

    // data generation
    int resolution = 32;
    int captures = 200;
    int frames_per_capture = 40;
    double fps = 2.0;

    // sequence sampling
    int sequence_size = 8;
    int crop = 32;

    VaeConfig image_vae = VaeConfig::image_desk();
    VaeConfig raymap_vae = VaeConfig::raymap_desk();
    VaeTrainConfig vae_train;
    int raymap_samples = 4096;  // raymap-VAE training set size

    DitConfig dit;
    DitTrainConfig dit_train;
    double holdout_fraction = 0.1;  // captures reserved for the eval set

    SampleOptions sampler;
    CompletionPlan plan;
    UncalibratedOptions pose;

    int eval_items = 16;
    int eval_pairs = 20;

    // Parses a config file (lines of "key = value", '#' comments). Unknown
    // keys or malformed values raise ConfigError.
    static RunConfig load(const std::string& path);
    static RunConfig parse(const std::string& text);

    // Canonical sorted "key = value" listing of every setting.
    std::string canonical() const;
    std::string config_hash() const;  // fnv-1a of the canonical form, hex

    // Cross-field checks (latent dims agree, divisibility); ConfigError on
    // violation. Called by load/parse.
    void validate_and_derive();
};

}  // namespace mvd
