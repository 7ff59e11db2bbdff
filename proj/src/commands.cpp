#include "mvd/commands.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "mvd/image_io.hpp"
#include "mvd/metrics.hpp"

namespace fs = std::filesystem;

namespace mvd {

namespace {

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path);
    os << text;
}

std::string capture_dir_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "capture_%04d", index);
    return buf;
}

// minimal SVG plotting for loss curves and accuracy bars
std::string svg_header(int w, int h) {
    return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) +
           "\" height=\"" + std::to_string(h) + "\" viewBox=\"0 0 " + std::to_string(w) + " " +
           std::to_string(h) + "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

void write_svg_curve(const std::string& path, const std::vector<std::array<double, 2>>& series,
                     const std::string& title) {
    const int w = 640, h = 400, margin = 50;
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& p : series) {
        xmin = std::min(xmin, p[0]);
        xmax = std::max(xmax, p[0]);
        ymin = std::min(ymin, p[1]);
        ymax = std::max(ymax, p[1]);
    }
    if (series.empty()) {
        xmin = 0;
        xmax = 1;
        ymin = 0;
        ymax = 1;
    }
    if (xmax <= xmin) xmax = xmin + 1;
    if (ymax <= ymin) ymax = ymin + 1;
    std::string svg = svg_header(w, h);
    svg += "<text x=\"20\" y=\"24\" font-size=\"16\">" + title + "</text>\n";
    svg += "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"";
    for (const auto& p : series) {
        const double x = margin + (p[0] - xmin) / (xmax - xmin) * (w - 2 * margin);
        const double y = h - margin - (p[1] - ymin) / (ymax - ymin) * (h - 2 * margin);
        svg += std::to_string(x) + "," + std::to_string(y) + " ";
    }
    svg += "\"/>\n";
    char buf[128];
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"20\" y=\"%d\" font-size=\"11\">x: %g..%g  y: %g..%g</text>\n", h - 8,
                  xmin, xmax, ymin, ymax);
    svg += buf;
    svg += "</svg>\n";
    write_text(path, svg);
}

void write_svg_bars(const std::string& path, const std::vector<std::string>& labels,
                    const std::vector<double>& values, const std::string& title, double vmax) {
    const int w = 640, h = 400, margin = 50;
    std::string svg = svg_header(w, h);
    svg += "<text x=\"20\" y=\"24\" font-size=\"16\">" + title + "</text>\n";
    const double bw = double(w - 2 * margin) / std::max<std::size_t>(1, values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double bh = (h - 2 * margin) * std::min(1.0, values[i] / vmax);
        const double x = margin + i * bw;
        const double y = h - margin - bh;
        char buf[256];
        std::snprintf(buf, sizeof(buf),
                      "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" "
                      "fill=\"steelblue\"/>\n<text x=\"%.1f\" y=\"%d\" font-size=\"11\">%s "
                      "(%.3g)</text>\n",
                      x, y, bw * 0.8, bh, x, h - margin + 16, labels[i].c_str(), values[i]);
        svg += buf;
    }
    svg += "</svg>\n";
    write_text(path, svg);
}

MultiViewSequence capture_to_sequence(const Capture& capture, const std::vector<int>& frames,
                                      const std::vector<bool>& known) {
    std::vector<Camera> cams;
    for (int idx : frames) cams.push_back(capture.frames[idx].camera);
    const auto normalized = normalize_sequence(cams, 0).cameras;
    MultiViewSequence seq;
    seq.height = capture.height;
    seq.width = capture.width;
    const std::size_t hw = std::size_t(capture.height) * capture.width;
    for (std::size_t i = 0; i < frames.size(); ++i) {
        SequenceFrame frame;
        frame.image = known[i] ? capture.frames[frames[i]].image
                               : std::vector<float>(hw * 3, 0.f);
        frame.image_mask.assign(hw, known[i] ? 1.f : 0.f);
        frame.raymap = camera_to_raymap(normalized[i], capture.height, capture.width);
        frame.ray_mask.assign(hw, 1.f);
        seq.frames.push_back(std::move(frame));
    }
    return seq;
}

}  // namespace

void write_run_info(const std::string& out_dir, const RunConfig& config,
                    const std::string& command) {
    fs::create_directories(out_dir);
    nlohmann::json j;
    j["command"] = command;
    j["config_hash"] = config.config_hash();
    j["code_version"] = kCodeVersion;
    j["seed"] = config.seed;
    write_text(out_dir + "/run_info.json", j.dump(2) + "\n");
    write_text(out_dir + "/config_resolved.cfg", config.canonical());
}

std::vector<Capture> load_captures(const std::string& data_dir) {
    if (!fs::is_directory(data_dir)) throw DataError("data directory not found: " + data_dir);
    std::vector<std::string> dirs;
    for (const auto& entry : fs::directory_iterator(data_dir))
        if (entry.is_directory() && fs::exists(entry.path() / "cameras.json"))
            dirs.push_back(entry.path().string());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty()) throw DataError("no captures under " + data_dir);
    std::vector<Capture> captures;
    captures.reserve(dirs.size());
    for (const auto& d : dirs) captures.push_back(load_capture(d));
    return captures;
}

int cmd_render_data(const RunConfig& config, const std::string& out_dir) {
    write_run_info(out_dir, config, "render-data");
    const std::string captures_dir = out_dir + "/captures";
    Rng root(config.seed);
    for (int i = 0; i < config.captures; ++i) {
        const auto scene = generate_scene(config.seed * 1000003ull + i);
        Rng rng = root.fork(i);
        auto capture = make_capture(scene, config.frames_per_capture, config.resolution,
                                    config.resolution, rng, config.fps);
        capture.capture_id = capture_dir_name(i);
        save_capture(capture, captures_dir + "/" + capture_dir_name(i), config.config_hash(),
                     config.seed);
    }
    return kExitOk;
}

int cmd_train_vae(const RunConfig& config, const std::string& kind, const std::string& data_dir,
                  const std::string& out_dir) {
    if (kind != "image" && kind != "raymap")
        throw ConfigError("train-vae kind must be 'image' or 'raymap'");
    write_run_info(out_dir, config, "train-vae");
    auto captures = load_captures(data_dir);

    std::vector<Tensor<float>> frames;
    if (kind == "image") {
        for (const auto& cap : captures)
            for (const auto& f : cap.frames) {
                std::vector<float> chw(f.image.size());
                const std::size_t hw = std::size_t(cap.height) * cap.width;
                for (std::size_t p = 0; p < hw; ++p)
                    for (int c = 0; c < 3; ++c) chw[c * hw + p] = f.image[p * 3 + c];
                frames.push_back(
                    Tensor<float>::from_data({3, cap.height, cap.width}, std::move(chw)));
            }
    } else {
        // raymaps as they appear at训 time: normalized + augmented sequences
        Rng rng(config.seed ^ 0x52415942ull);
        while (static_cast<int>(frames.size()) < config.raymap_samples) {
            const auto& cap = captures[rng.uniform_index(captures.size())];
            auto ts = sample_training_sequence(cap, rng, config.sequence_size, config.crop);
            for (const auto& f : ts.sequence.frames) {
                const std::size_t hw = std::size_t(config.crop) * config.crop;
                std::vector<float> chw(hw * 6);
                for (std::size_t p = 0; p < hw; ++p)
                    for (int c = 0; c < 3; ++c) {
                        chw[std::size_t(c) * hw + p] = float(f.raymap.origins[p][c]);
                        chw[std::size_t(3 + c) * hw + p] = float(f.raymap.directions[p][c]);
                    }
                frames.push_back(
                    Tensor<float>::from_data({6, config.crop, config.crop}, std::move(chw)));
                if (static_cast<int>(frames.size()) >= config.raymap_samples) break;
            }
        }
    }

    const VaeConfig vae_config = kind == "image" ? config.image_vae : config.raymap_vae;
    auto result = train_vae(frames, vae_config, config.vae_train);
    result.checkpoint.meta["config_hash"] = config.config_hash();
    result.checkpoint.save(out_dir + "/vae_" + kind + ".ckpt");

    std::string log;
    for (const auto& [step, loss] : result.loss_history)
        log += std::to_string(step) + " " + std::to_string(loss) + "\n";
    write_text(out_dir + "/loss.txt", log);
    std::vector<std::array<double, 2>> series;
    for (const auto& [step, loss] : result.loss_history)
        series.push_back({double(step), loss});
    write_svg_curve(out_dir + "/loss_curve.svg", series, "vae " + kind + " training loss");
    if (result.diverged) return kExitNumericalError;
    return kExitOk;
}

int cmd_train_dit(const RunConfig& config, const std::string& data_dir,
                  const std::string& image_vae_path, const std::string& raymap_vae_path,
                  const std::string& out_dir, bool resume) {
    write_run_info(out_dir, config, "train-dit");
    auto captures = load_captures(data_dir);
    auto image_ck = Checkpoint::load(image_vae_path);
    auto raymap_ck = Checkpoint::load(raymap_vae_path);

    // hold out the tail captures for the eval set
    const int holdout = std::max(1, int(captures.size() * config.holdout_fraction));
    std::vector<Capture> train_caps(captures.begin(), captures.end() - holdout);
    std::vector<Capture> eval_caps(captures.end() - holdout, captures.end());
    Rng eval_rng(config.seed ^ 0x4556414cull);
    auto eval_items = build_eval_items(eval_caps, config.eval_items, config.sequence_size,
                                       config.crop, eval_rng);

    DitTrainConfig tc = config.dit_train;
    tc.checkpoint_dir = out_dir;
    tc.verbose = true;
    (void)resume;  // reserved: resume picks up out_dir/checkpoint_latest.ckpt
    auto result = train_dit(train_caps, image_ck, raymap_ck, config.dit, tc, &eval_items);

    result.bundle.meta["config_hash"] = config.config_hash();
    result.bundle.save(out_dir + "/model.ckpt");

    std::string log;
    for (const auto& p : result.loss_log)
        log += std::to_string(int(p[0])) + " " + std::to_string(p[1]) + "\n";
    write_text(out_dir + "/loss.txt", log);
    log.clear();
    for (const auto& p : result.val_log)
        log += std::to_string(int(p[0])) + " " + std::to_string(p[1]) + "\n";
    write_text(out_dir + "/val.txt", log);
    write_svg_curve(out_dir + "/loss_curve.svg", result.loss_log, "transformer training loss");
    write_svg_curve(out_dir + "/val_curve.svg", result.val_log, "conditional validation loss");
    if (result.diverged) return kExitNumericalError;
    return kExitOk;
}

int cmd_sample(const RunConfig& config, const std::string& checkpoint_path,
               const std::string& capture_dir, const std::string& out_dir,
               const std::vector<int>& known_frames, int max_frames) {
    write_run_info(out_dir, config, "sample");
    auto capture = load_capture(capture_dir);
    auto bundle = load_bundle(Checkpoint::load(checkpoint_path));

    const int n = std::min<int>(max_frames > 0 ? max_frames : 64,
                                static_cast<int>(capture.frames.size()));
    std::vector<int> frames(n);
    for (int i = 0; i < n; ++i) frames[i] = i;
    std::vector<bool> known(n, false);
    if (known_frames.empty()) {
        for (int i = 0; i < n / 2; ++i) known[i] = true;  // default: first half known
    } else {
        for (int idx : known_frames) {
            if (idx < 0 || idx >= n) throw ConfigError("--known index out of range");
            known[idx] = true;
        }
    }

    auto seq = capture_to_sequence(capture, frames, known);
    Rng rng(config.seed);
    auto out = sample(*bundle.model, bundle.codec, seq, config.sampler, rng);

    // contact sheet: known row (unknown pixels yellow), inpainted row, GT row
    const int h = capture.height, w = capture.width;
    ImageU8 sheet;
    sheet.width = n * w;
    sheet.height = 3 * h;
    sheet.pixels.assign(std::size_t(sheet.width) * sheet.height * 3, 0);
    auto blit = [&](int row, int col, const std::vector<float>& img) {
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c)
                for (int k = 0; k < 3; ++k) {
                    const float v = std::min(1.f, std::max(0.f, img[(std::size_t(r) * w + c) * 3 + k]));
                    sheet.pixels[((std::size_t(row) * h + r) * sheet.width + col * w + c) * 3 + k] =
                        static_cast<unsigned char>(std::lround(v * 255.f));
                }
    };
    for (int i = 0; i < n; ++i) {
        std::vector<float> known_vis(std::size_t(h) * w * 3);
        for (std::size_t p = 0; p < std::size_t(h) * w; ++p) {
            const bool is_known = seq.frames[i].image_mask[p] != 0.f;
            for (int k = 0; k < 3; ++k)
                known_vis[p * 3 + k] =
                    is_known ? seq.frames[i].image[p * 3 + k] : (k < 2 ? 0.9f : 0.1f);
        }
        blit(0, i, known_vis);
        blit(1, i, out.frames[i].image);
        blit(2, i, capture.frames[frames[i]].image);
    }
    write_png(out_dir + "/contact_sheet.png", sheet);

    // store the completed frames as a capture for downstream use
    Capture completed = capture;
    completed.frames.resize(n);
    for (int i = 0; i < n; ++i) {
        completed.frames[i].image = out.frames[i].image;
        completed.frames[i].generated = !known[i];
    }
    save_capture(completed, out_dir + "/completed", config.config_hash(), config.seed);
    return kExitOk;
}

int cmd_complete(const RunConfig& config, const std::string& checkpoint_path,
                 const std::string& capture_dir, const std::string& out_dir) {
    write_run_info(out_dir, config, "complete");
    auto capture = load_capture(capture_dir);
    auto bundle = load_bundle(Checkpoint::load(checkpoint_path));
    Rng rng(config.seed);
    auto result = complete_capture(capture, *bundle.model, bundle.codec, config.plan, rng);
    save_capture(result.capture, out_dir + "/augmented", config.config_hash(), config.seed);
    nlohmann::json j;
    j["generated_views"] = result.generated_count;
    j["original_views"] = capture.frames.size();
    write_text(out_dir + "/summary.json", j.dump(2) + "\n");
    return kExitOk;
}

int cmd_pose(const RunConfig& config, const std::string& checkpoint_path,
             const std::string& capture_dir, const std::string& out_dir) {
    write_run_info(out_dir, config, "pose");
    auto capture = load_capture(capture_dir);
    auto bundle = load_bundle(Checkpoint::load(checkpoint_path));
    std::vector<std::vector<float>> images;
    for (const auto& f : capture.frames) images.push_back(f.image);
    Rng rng(config.seed);
    auto recovery = recover_poses(images, capture.height, capture.width, *bundle.model,
                                  bundle.codec, config.pose, rng);

    nlohmann::json j;
    j["format"] = "mvdiff-poses-v1";
    j["config_hash"] = config.config_hash();
    j["code_version"] = kCodeVersion;
    j["seed"] = config.seed;
    j["frames"] = nlohmann::json::array();
    for (std::size_t i = 0; i < recovery.cameras.size(); ++i) {
        const auto& cam = recovery.cameras[i];
        const auto& rep = recovery.reports[i];
        nlohmann::json jf;
        jf["fx"] = cam.fx;
        jf["fy"] = cam.fy;
        jf["cx"] = cam.cx;
        jf["cy"] = cam.cy;
        std::vector<double> rot(9);
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) rot[r * 3 + c] = cam.rotation(r, c);
        jf["rotation"] = rot;
        jf["center"] = {cam.center.x(), cam.center.y(), cam.center.z()};
        jf["converged"] = rep.converged;
        jf["mean_direction_error_rad"] = rep.mean_direction_error;
        jf["mean_origin_error"] = rep.mean_origin_error;
        j["frames"].push_back(jf);
    }

    // alignment report against ground truth when the capture carries cameras
    {
        Mat3 m = Mat3::Zero();
        for (std::size_t i = 0; i < recovery.cameras.size(); ++i)
            m += capture.frames[i].camera.rotation * recovery.cameras[i].rotation.transpose();
        Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
        Mat3 fix = Mat3::Identity();
        fix(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() > 0 ? 1 : -1;
        const Mat3 align = svd.matrixU() * fix * svd.matrixV().transpose();
        double mean_err = 0;
        for (std::size_t i = 0; i < recovery.cameras.size(); ++i)
            mean_err += rotation_geodesic_deg(align * recovery.cameras[i].rotation,
                                              capture.frames[i].camera.rotation);
        j["mean_rotation_error_deg_after_alignment"] = mean_err / recovery.cameras.size();
    }
    write_text(out_dir + "/cameras.json", j.dump(2) + "\n");
    return kExitOk;
}

int cmd_eval(const RunConfig& config, const std::string& checkpoint_path,
             const std::string& data_dir, const std::string& out_dir, double threshold_deg,
             const std::string& loss_log_path) {
    write_run_info(out_dir, config, "eval");
    auto captures = load_captures(data_dir);
    auto bundle = load_bundle(Checkpoint::load(checkpoint_path));
    const std::string hash = config.config_hash();

    std::string records;
    // conditional validation loss on the eval protocol
    Rng eval_rng(config.seed ^ 0x4556414cull);
    auto items = build_eval_items(captures, config.eval_items, config.sequence_size, config.crop,
                                  eval_rng);
    const double val = val_loss(*bundle.model, bundle.codec, items);
    records += format_metric_record("val_loss", val, hash) + "\n";

    // VAE round trips on the first capture
    {
        const auto& cap = captures[0];
        double image_psnr = 0;
        int count = 0;
        for (const auto& f : cap.frames) {
            const std::size_t hw = std::size_t(cap.height) * cap.width;
            std::vector<double> chw(hw * 3);
            for (std::size_t p = 0; p < hw; ++p)
                for (int c = 0; c < 3; ++c) chw[c * hw + p] = f.image[p * 3 + c];
            NoGradGuard ng;
            auto x = Tensor<double>::from_data({1, 3, cap.height, cap.width}, std::move(chw));
            auto recon = bundle.image_vae->decode(bundle.image_vae->encode(x).first);
            std::vector<float> a(recon.numel()), b(recon.numel());
            for (std::int64_t i = 0; i < recon.numel(); ++i) {
                a[i] = float(recon.data()[i]);
                b[i] = float(x.data()[i]);
            }
            image_psnr += psnr(a, b);
            if (++count >= 16) break;
        }
        records += format_metric_record("vae_image_psnr_db", image_psnr / count, hash) + "\n";
    }

    // relative rotation accuracy on a rendered video with exact matches
    {
        const auto& cap = captures[0];
        std::vector<VideoFrame> video;
        for (const auto& f : cap.frames) video.push_back({f.camera, f.time});
        Rng match_rng(config.seed ^ 0x52524131ull);
        Matcher matcher = [&](int a, int b) {
            Rng r = match_rng.fork(a * 1000 + b);
            return gt_correspondences(cap.scene, cap.frames[a].camera, cap.frames[b].camera,
                                      cap.height, cap.width, 400, r);
        };
        Rng pair_rng(config.seed ^ 0x52524132ull);
        auto rra = relative_rotation_accuracy(video, config.eval_pairs, threshold_deg, matcher,
                                              pair_rng);
        records += format_metric_record("rra_at_" + std::to_string(threshold_deg), rra.accuracy,
                                        hash) + "\n";

        std::vector<std::string> labels;
        std::vector<double> values;
        for (double th : {2.5, 5.0, 10.0, 15.0}) {
            Rng r2(config.seed ^ 0x52524133ull);
            auto acc = relative_rotation_accuracy(video, config.eval_pairs, th, matcher, r2);
            labels.push_back(std::to_string(th) + " deg");
            values.push_back(acc.accuracy);
        }
        write_svg_bars(out_dir + "/rra_bars.svg", labels, values, "relative rotation accuracy",
                       1.0);
    }

    if (!loss_log_path.empty()) {
        std::ifstream is(loss_log_path);
        if (!is) throw DataError("cannot open loss log: " + loss_log_path);
        std::vector<std::array<double, 2>> series;
        double a, b;
        while (is >> a >> b) series.push_back({a, b});
        write_svg_curve(out_dir + "/loss_curve.svg", series, "training loss");
    }

    write_text(out_dir + "/metrics.txt", records);
    return kExitOk;
}

}  // namespace mvd
