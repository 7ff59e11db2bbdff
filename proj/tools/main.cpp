// mvdiff: multi-view latent diffusion for scene completion, desk scale.

#include <CLI11.hpp>
#include <cstdio>
#include <sstream>

#include "mvd/commands.hpp"

using namespace mvd;

int main(int argc, char** argv) {
    CLI::App app{"mvdiff: multi-view latent diffusion scene completion"};
    app.require_subcommand(1);

    std::string config_path, checkpoint, out_dir, data_dir, capture_dir, kind = "image";
    std::string image_vae_path, raymap_vae_path, loss_log, known_csv;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int threads = 0, steps = 0, max_frames = 0;
    double cfg_unknown = -1, cfg_known = -1, threshold_deg = 0;
    bool resume = false;

    app.add_option("--config", config_path, "config file (key = value lines)");
    auto* seed_opt = app.add_option("--seed", seed, "seed override");
    app.add_option("--threads", threads, "parallelism degree (1 = bit-deterministic)");

    auto add_common = [&](CLI::App* sub, bool needs_ckpt) {
        sub->add_option("--out", out_dir, "output directory")->required();
        if (needs_ckpt)
            sub->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    };

    auto* render = app.add_subcommand("render-data", "generate procedural captures");
    add_common(render, false);

    auto* train_vae_cmd = app.add_subcommand("train-vae", "train an autoencoder");
    add_common(train_vae_cmd, false);
    train_vae_cmd->add_option("--kind", kind, "image|raymap")->required();
    train_vae_cmd->add_option("--data", data_dir, "captures directory")->required();

    auto* train_dit_cmd = app.add_subcommand("train-dit", "train the diffusion transformer");
    add_common(train_dit_cmd, false);
    train_dit_cmd->add_option("--data", data_dir, "captures directory")->required();
    train_dit_cmd->add_option("--image-vae", image_vae_path, "image VAE checkpoint")->required();
    train_dit_cmd->add_option("--raymap-vae", raymap_vae_path, "raymap VAE checkpoint")->required();
    train_dit_cmd->add_flag("--resume", resume, "resume from out/checkpoint_latest.ckpt");

    auto* sample_cmd = app.add_subcommand("sample", "complete a capture and write contact sheets");
    add_common(sample_cmd, true);
    sample_cmd->add_option("--capture", capture_dir, "capture directory")->required();
    sample_cmd->add_option("--known", known_csv, "comma-separated known frame indices");
    sample_cmd->add_option("--frames", max_frames, "limit the number of frames");
    sample_cmd->add_option("--steps", steps, "denoising steps override");
    sample_cmd->add_option("--cfg-unknown", cfg_unknown, "CFG weight for unknown regions");
    sample_cmd->add_option("--cfg-known", cfg_known, "CFG weight for known regions");

    auto* complete_cmd = app.add_subcommand("complete", "anchor + densify scene completion");
    add_common(complete_cmd, true);
    complete_cmd->add_option("--capture", capture_dir, "capture directory")->required();

    auto* pose_cmd = app.add_subcommand("pose", "recover cameras from unposed images");
    add_common(pose_cmd, true);
    pose_cmd->add_option("--capture", capture_dir, "capture directory (images)")->required();

    auto* eval_cmd = app.add_subcommand("eval", "metric records and plots");
    add_common(eval_cmd, true);
    eval_cmd->add_option("--data", data_dir, "eval captures directory")->required();
    eval_cmd->add_option("--threshold-deg", threshold_deg, "rotation accuracy threshold")
        ->required();
    eval_cmd->add_option("--loss-log", loss_log, "training loss log to plot");

    CLI11_PARSE(app, argc, argv);
    seed_set = seed_opt->count() > 0;

    try {
        RunConfig config = config_path.empty() ? RunConfig() : RunConfig::load(config_path);
        if (config_path.empty()) config.validate_and_derive();
        if (seed_set) config.seed = seed;
        if (threads > 0) config.threads = threads;
        set_thread_count(config.threads);
        if (steps > 0) config.sampler.steps = steps;
        if (cfg_unknown >= 0) config.sampler.cfg.unknown_weight = cfg_unknown;
        if (cfg_known >= 0) config.sampler.cfg.known_weight = cfg_known;

        std::vector<int> known_frames;
        if (!known_csv.empty()) {
            std::stringstream ss(known_csv);
            std::string item;
            while (std::getline(ss, item, ',')) known_frames.push_back(std::stoi(item));
        }

        if (render->parsed()) return cmd_render_data(config, out_dir);
        if (train_vae_cmd->parsed()) return cmd_train_vae(config, kind, data_dir, out_dir);
        if (train_dit_cmd->parsed())
            return cmd_train_dit(config, data_dir, image_vae_path, raymap_vae_path, out_dir,
                                 resume);
        if (sample_cmd->parsed())
            return cmd_sample(config, checkpoint, capture_dir, out_dir, known_frames, max_frames);
        if (complete_cmd->parsed()) return cmd_complete(config, checkpoint, capture_dir, out_dir);
        if (pose_cmd->parsed()) return cmd_pose(config, checkpoint, capture_dir, out_dir);
        if (eval_cmd->parsed())
            return cmd_eval(config, checkpoint, data_dir, out_dir, threshold_deg, loss_log);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfigError;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfigError;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kExitDataError;
    } catch (const CheckpointError& e) {
        std::fprintf(stderr, "checkpoint error: %s\n", e.what());
        return kExitCheckpointError;
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return kExitNumericalError;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitDataError;
    }
    return kExitOk;
}
