#include "mvd/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "mvd/image_io.hpp"

namespace fs = std::filesystem;

namespace mvd {

namespace {

constexpr double kRayEps = 1e-9;

bool hit_sphere(const Primitive& p, const Vec3& o, const Vec3& d, double& t, Vec3& n) {
    const Vec3 oc = o - p.center;
    const double r = p.size.x();
    const double b = oc.dot(d);
    const double c = oc.squaredNorm() - r * r;
    const double disc = b * b - c;
    if (disc < 0) return false;
    const double sq = std::sqrt(disc);
    double tt = -b - sq;
    if (tt < kRayEps) tt = -b + sq;
    if (tt < kRayEps) return false;
    t = tt;
    n = (o + t * d - p.center) / r;
    return true;
}

bool hit_box(const Primitive& p, const Vec3& o, const Vec3& d, double& t, Vec3& n) {
    const Vec3 lo = p.center - p.size, hi = p.center + p.size;
    double tmin = -1e30, tmax = 1e30;
    int axis = -1;
    for (int i = 0; i < 3; ++i) {
        if (std::abs(d[i]) < 1e-12) {
            if (o[i] < lo[i] || o[i] > hi[i]) return false;
            continue;
        }
        double t0 = (lo[i] - o[i]) / d[i];
        double t1 = (hi[i] - o[i]) / d[i];
        if (t0 > t1) std::swap(t0, t1);
        if (t0 > tmin) {
            tmin = t0;
            axis = i;
        }
        tmax = std::min(tmax, t1);
        if (tmin > tmax) return false;
    }
    if (tmin < kRayEps || axis < 0) return false;  // origins inside the box see no face
    t = tmin;
    n = Vec3::Zero();
    n[axis] = d[axis] > 0 ? -1.0 : 1.0;
    return true;
}

bool hit_ground_disc(const Primitive& p, const Vec3& o, const Vec3& d, double& t, Vec3& n) {
    if (std::abs(d.y()) < 1e-12) return false;
    const double tt = (p.center.y() - o.y()) / d.y();
    if (tt < kRayEps) return false;
    const Vec3 q = o + tt * d;
    const double dx = q.x() - p.center.x(), dz = q.z() - p.center.z();
    if (dx * dx + dz * dz > p.size.x() * p.size.x()) return false;
    t = tt;
    n = Vec3(0, o.y() > p.center.y() ? 1.0 : -1.0, 0);
    return true;
}

}  // namespace

double SceneSpec::bounding_radius() const {
    double r = 0;
    for (const auto& p : primitives) {
        switch (p.type) {
            case PrimitiveType::Sphere: r = std::max(r, p.center.norm() + p.size.x()); break;
            case PrimitiveType::Box: r = std::max(r, p.center.norm() + p.size.norm()); break;
            case PrimitiveType::GroundDisc: {
                const double dxz = std::hypot(p.center.x(), p.center.z()) + p.size.x();
                r = std::max(r, std::hypot(dxz, p.center.y()));
                break;
            }
        }
    }
    return r;
}

std::string SceneSpec::to_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["ambient"] = ambient;
    j["light_dir"] = {light_dir.x(), light_dir.y(), light_dir.z()};
    j["background"] = {background.x(), background.y(), background.z()};
    j["primitives"] = nlohmann::json::array();
    for (const auto& p : primitives) {
        nlohmann::json jp;
        jp["type"] = p.type == PrimitiveType::Sphere  ? "sphere"
                     : p.type == PrimitiveType::Box   ? "box"
                                                      : "ground";
        jp["center"] = {p.center.x(), p.center.y(), p.center.z()};
        jp["size"] = {p.size.x(), p.size.y(), p.size.z()};
        jp["albedo"] = {p.albedo.x(), p.albedo.y(), p.albedo.z()};
        j["primitives"].push_back(jp);
    }
    return j.dump();
}

SceneSpec SceneSpec::from_json(const std::string& json) {
    auto j = nlohmann::json::parse(json);
    SceneSpec s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.ambient = j.at("ambient").get<double>();
    auto v3 = [](const nlohmann::json& a) { return Vec3(a[0], a[1], a[2]); };
    s.light_dir = v3(j.at("light_dir"));
    s.background = v3(j.at("background"));
    s.primitives.clear();
    for (const auto& jp : j.at("primitives")) {
        Primitive p;
        const std::string type = jp.at("type");
        p.type = type == "sphere" ? PrimitiveType::Sphere
                 : type == "box"  ? PrimitiveType::Box
                                  : PrimitiveType::GroundDisc;
        p.center = v3(jp.at("center"));
        p.size = v3(jp.at("size"));
        p.albedo = v3(jp.at("albedo"));
        s.primitives.push_back(p);
    }
    return s;
}

SceneSpec generate_scene(std::uint64_t seed) {
    Rng rng(seed * 0x9e3779b97f4a7c15ull + 0xabcdef12345ull);
    const bool ground = rng.bernoulli(0.75);
    const int max_objects = ground ? 7 : 8;
    const int objects = 1 + static_cast<int>(rng.uniform_index(max_objects));
    SceneSpec s = generate_scene(seed, objects, ground);
    return s;
}

SceneSpec generate_scene(std::uint64_t seed, int object_count, bool with_ground) {
    if (object_count < 1) throw std::invalid_argument("generate_scene: need >= 1 object");
    Rng rng(seed * 0x9e3779b97f4a7c15ull + 0x5134ull);
    SceneSpec s;
    s.seed = seed;
    s.ambient = rng.uniform(0.25, 0.4);
    const double az = rng.uniform(0, 2 * M_PI);
    const double down = rng.uniform(0.6, 1.4);
    s.light_dir = Vec3(std::cos(az), -down, std::sin(az)).normalized();
    s.background = Vec3(0.05, 0.07, 0.10);

    double ground_y = -0.45;
    if (with_ground) {
        Primitive g;
        g.type = PrimitiveType::GroundDisc;
        ground_y = rng.uniform(-0.5, -0.3);
        g.center = Vec3(0, ground_y, 0);
        g.size = Vec3(0.85, 0, 0);
        g.albedo = Vec3(rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7));
        s.primitives.push_back(g);
    }
    for (int i = 0; i < object_count; ++i) {
        Primitive p;
        p.type = rng.bernoulli(0.5) ? PrimitiveType::Sphere : PrimitiveType::Box;
        const double extent = rng.uniform(0.12, 0.3);
        const double cx = rng.uniform(-0.45, 0.45);
        const double cz = rng.uniform(-0.45, 0.45);
        double cy;
        if (with_ground && rng.bernoulli(0.7)) {
            cy = ground_y + extent;  // resting on the ground
        } else {
            cy = rng.uniform(-0.15, 0.4);
        }
        p.center = Vec3(cx, cy, cz);
        p.size = p.type == PrimitiveType::Sphere
                     ? Vec3(extent, extent, extent)
                     : Vec3(extent * rng.uniform(0.6, 1.0), extent * rng.uniform(0.6, 1.0),
                            extent * rng.uniform(0.6, 1.0));
        p.albedo = Vec3(rng.uniform(0.15, 0.95), rng.uniform(0.15, 0.95), rng.uniform(0.15, 0.95));

        // enforce the unit bounding sphere
        const double max_ext = p.type == PrimitiveType::Sphere ? p.size.x() : p.size.norm();
        const double budget = 1.0 - max_ext;
        if (p.center.norm() > budget) p.center *= budget / p.center.norm();
        s.primitives.push_back(p);
    }
    return s;
}

SceneHit trace_scene(const SceneSpec& scene, const Vec3& origin, const Vec3& dir) {
    SceneHit best;
    for (std::size_t i = 0; i < scene.primitives.size(); ++i) {
        const auto& p = scene.primitives[i];
        double t;
        Vec3 n;
        bool ok = false;
        switch (p.type) {
            case PrimitiveType::Sphere: ok = hit_sphere(p, origin, dir, t, n); break;
            case PrimitiveType::Box: ok = hit_box(p, origin, dir, t, n); break;
            case PrimitiveType::GroundDisc: ok = hit_ground_disc(p, origin, dir, t, n); break;
        }
        if (ok && (!best.hit || t < best.t)) {
            best.hit = true;
            best.t = t;
            best.normal = n.dot(dir) > 0 ? Vec3(-n) : n;
            best.primitive = static_cast<int>(i);
        }
    }
    return best;
}

namespace {

Vec3 shade(const SceneSpec& scene, const SceneHit& hit) {
    const auto& p = scene.primitives[hit.primitive];
    const double diffuse = std::max(0.0, hit.normal.dot(-scene.light_dir));
    const double li = scene.ambient + (1.0 - scene.ambient) * diffuse;
    return p.albedo * li;
}

}  // namespace

RenderBuffers render_view(const SceneSpec& scene, const Camera& camera, int height, int width,
                          int supersample) {
    if (height < 1 || width < 1) throw std::invalid_argument("render_view: bad extents");
    RenderBuffers out;
    out.height = height;
    out.width = width;
    out.image.assign(std::size_t(height) * width * 3, 0.f);
    out.depth.assign(std::size_t(height) * width, 0.f);
    const int ss = std::max(1, supersample);
    parallel_for(0, height, thread_count(), [&](std::int64_t r) {
        for (int c = 0; c < width; ++c) {
            Vec3 color = Vec3::Zero();
            for (int a = 0; a < ss; ++a) {
                for (int b = 0; b < ss; ++b) {
                    const double u = c + (b + 0.5) / ss;
                    const double v = r + (a + 0.5) / ss;
                    const Vec3 dir = camera.pixel_ray(u, v);
                    const auto hit = trace_scene(scene, camera.center, dir);
                    color += hit.hit ? shade(scene, hit) : scene.background;
                }
            }
            color /= double(ss * ss);
            const std::size_t px = (std::size_t(r) * width + c);
            for (int k = 0; k < 3; ++k)
                out.image[px * 3 + k] = static_cast<float>(std::min(1.0, std::max(0.0, color[k])));
            const auto center_hit =
                trace_scene(scene, camera.center, camera.pixel_ray(c + 0.5, r + 0.5));
            out.depth[px] = center_hit.hit ? static_cast<float>(center_hit.t) : 0.f;
        }
    });
    return out;
}

Capture make_capture(const SceneSpec& scene, int n_frames, int height, int width, Rng& rng,
                     double fps) {
    if (n_frames < 1) throw std::invalid_argument("make_capture: need >= 1 frame");
    Capture cap;
    cap.scene = scene;
    cap.height = height;
    cap.width = width;
    cap.capture_id = "scene" + std::to_string(scene.seed);

    const double radius = rng.uniform(1.6, 2.4);
    const double base_height = rng.uniform(0.4, 1.1);
    const double fx = rng.uniform(0.9, 1.4) * width;
    const double fy = fx * height / width;
    const double cx = width / 2.0 + rng.uniform(-0.05, 0.05) * width;
    const double cy = height / 2.0 + rng.uniform(-0.05, 0.05) * height;
    const double span = rng.uniform(M_PI * 2.0 / 3.0, 2.0 * M_PI);
    const double start = rng.uniform(0, 2 * M_PI);

    for (int i = 0; i < n_frames; ++i) {
        const double frac = n_frames > 1 ? double(i) / double(n_frames - 1) : 0.0;
        const double a = start + span * frac + 0.02 * rng.normal();
        const double r = radius * (1.0 + 0.05 * rng.normal());
        const double y = base_height + 0.08 * rng.normal();
        const Vec3 pos(r * std::cos(a), y, r * std::sin(a));
        const Vec3 target(0.05 * rng.normal(), 0.05 + 0.05 * rng.normal(), 0.05 * rng.normal());
        CaptureFrame frame;
        frame.camera = look_at_camera(pos, target, fx, fy, cx, cy);
        frame.time = i / fps;
        auto buffers = render_view(scene, frame.camera, height, width);
        // store at 8-bit precision so in-memory captures equal reloaded ones
        frame.image = dequantize_image(quantize_image(buffers.image, height, width));
        frame.depth = std::move(buffers.depth);
        cap.frames.push_back(std::move(frame));
    }
    return cap;
}

TrainingSample sample_training_sequence(const Capture& capture, Rng& rng, int sequence_size,
                                        int crop_size) {
    const int n = static_cast<int>(capture.frames.size());
    if (sequence_size < 1 || n < sequence_size)
        throw DataError("sample_training_sequence: capture shorter than sequence");
    if (crop_size < 1 || crop_size > capture.width || crop_size > capture.height)
        throw DataError("sample_training_sequence: bad crop size");

    // stride from {1,2,4,8,random}; resample when the capture is too short
    TrainingSample sample;
    const int stride_options[4] = {1, 2, 4, 8};
    while (true) {
        const int pick = static_cast<int>(rng.uniform_index(5));
        if (pick == 4) {
            std::vector<int> all(n);
            for (int i = 0; i < n; ++i) all[i] = i;
            rng.shuffle(all);
            sample.frame_indices.assign(all.begin(), all.begin() + sequence_size);
            std::sort(sample.frame_indices.begin(), sample.frame_indices.end());
            break;
        }
        const int stride = stride_options[pick];
        const int span = stride * (sequence_size - 1) + 1;
        if (span > n) continue;
        const int start = static_cast<int>(rng.uniform_index(n - span + 1));
        sample.frame_indices.clear();
        for (int i = 0; i < sequence_size; ++i) sample.frame_indices.push_back(start + i * stride);
        break;
    }

    // shared crop window, centered with 10% probability
    const int max_x = capture.width - crop_size;
    const int max_y = capture.height - crop_size;
    if (rng.bernoulli(0.1)) {
        sample.crop_x = max_x / 2;
        sample.crop_y = max_y / 2;
    } else {
        sample.crop_x = max_x > 0 ? static_cast<int>(rng.uniform_index(max_x + 1)) : 0;
        sample.crop_y = max_y > 0 ? static_cast<int>(rng.uniform_index(max_y + 1)) : 0;
    }

    std::vector<Camera> cams;
    for (int idx : sample.frame_indices) {
        Camera c = capture.frames[idx].camera;
        c.cx -= sample.crop_x;
        c.cy -= sample.crop_y;
        cams.push_back(c);
    }
    const std::size_t pivot = rng.uniform_index(cams.size());
    auto normalized = normalize_sequence(cams, pivot);
    sample.cameras = augment_sequence(normalized.cameras, rng);

    sample.sequence.height = crop_size;
    sample.sequence.width = crop_size;
    for (int i = 0; i < sequence_size; ++i) {
        const auto& src = capture.frames[sample.frame_indices[i]];
        SequenceFrame frame;
        frame.image.resize(std::size_t(crop_size) * crop_size * 3);
        for (int r = 0; r < crop_size; ++r)
            for (int c = 0; c < crop_size; ++c)
                for (int k = 0; k < 3; ++k)
                    frame.image[(std::size_t(r) * crop_size + c) * 3 + k] =
                        src.image[((std::size_t(r) + sample.crop_y) * capture.width + c +
                                   sample.crop_x) *
                                      3 +
                                  k];
        frame.raymap = camera_to_raymap(sample.cameras[i], crop_size, crop_size);
        frame.image_mask.assign(std::size_t(crop_size) * crop_size, 1.f);
        frame.ray_mask.assign(std::size_t(crop_size) * crop_size, 1.f);
        sample.sequence.frames.push_back(std::move(frame));
    }
    return sample;
}

std::vector<Match> gt_correspondences(const SceneSpec& scene, const Camera& cam_a,
                                      const Camera& cam_b, int height, int width, int n_points,
                                      Rng& rng) {
    std::vector<Match> matches;
    for (int i = 0; i < n_points; ++i) {
        const double ua = rng.uniform(0.0, double(width));
        const double va = rng.uniform(0.0, double(height));
        const Vec3 dir = cam_a.pixel_ray(ua, va);
        const auto hit = trace_scene(scene, cam_a.center, dir);
        if (!hit.hit) continue;
        const Vec3 p = cam_a.center + hit.t * dir;
        double ub, vb;
        if (!cam_b.project(p, ub, vb)) continue;
        if (ub < 0 || ub >= width || vb < 0 || vb >= height) continue;
        // occlusion test: the first surface toward p must be p itself
        const Vec3 to_p = p - cam_b.center;
        const double dist = to_p.norm();
        const auto vis = trace_scene(scene, cam_b.center, to_p / dist);
        if (!vis.hit || vis.t < dist - 1e-3) continue;
        matches.push_back({ua, va, ub, vb});
    }
    if (matches.size() < 8)
        throw DataError("gt_correspondences: only " + std::to_string(matches.size()) +
                        " matches; views may not overlap");
    return matches;
}

void save_capture(const Capture& capture, const std::string& dir, const std::string& config_hash,
                  std::uint64_t seed) {
    fs::create_directories(dir);
    nlohmann::json j;
    j["format"] = "mvdiff-capture-v1";
    j["capture_id"] = capture.capture_id;
    j["config_hash"] = config_hash;
    j["code_version"] = kCodeVersion;
    j["seed"] = seed;
    j["resolution"] = {capture.height, capture.width};
    j["scene"] = nlohmann::json::parse(capture.scene.to_json());
    j["frames"] = nlohmann::json::array();
    char name[64];
    for (std::size_t i = 0; i < capture.frames.size(); ++i) {
        const auto& f = capture.frames[i];
        std::snprintf(name, sizeof(name), "frame_%04zu.png", i);
        const std::string img_name = name;
        std::snprintf(name, sizeof(name), "depth_%04zu.bin", i);
        const std::string depth_name = name;

        write_png(dir + "/" + img_name, quantize_image(f.image, capture.height, capture.width));
        write_depth(dir + "/" + depth_name, capture.height, capture.width, f.depth.data());

        nlohmann::json jf;
        jf["file"] = img_name;
        jf["depth_file"] = depth_name;
        jf["time"] = f.time;
        jf["fx"] = f.camera.fx;
        jf["fy"] = f.camera.fy;
        jf["cx"] = f.camera.cx;
        jf["cy"] = f.camera.cy;
        std::vector<double> rot(9);
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) rot[r * 3 + c] = f.camera.rotation(r, c);
        jf["rotation"] = rot;
        jf["center"] = {f.camera.center.x(), f.camera.center.y(), f.camera.center.z()};
        jf["generated"] = f.generated;
        j["frames"].push_back(jf);
    }
    std::ofstream os(dir + "/cameras.json");
    if (!os) throw DataError("cannot write cameras.json in " + dir);
    os << j.dump(2) << "\n";
}

Capture load_capture(const std::string& dir) {
    std::ifstream is(dir + "/cameras.json");
    if (!is) throw DataError("missing cameras.json in " + dir);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        throw DataError("invalid cameras.json in " + dir + ": " + e.what());
    }
    if (j.value("format", "") != "mvdiff-capture-v1")
        throw DataError("unknown capture format in " + dir);

    Capture cap;
    cap.capture_id = j.value("capture_id", "");
    cap.height = j.at("resolution")[0].get<int>();
    cap.width = j.at("resolution")[1].get<int>();
    cap.scene = SceneSpec::from_json(j.at("scene").dump());
    for (const auto& jf : j.at("frames")) {
        CaptureFrame f;
        f.time = jf.at("time").get<double>();
        f.camera.fx = jf.at("fx").get<double>();
        f.camera.fy = jf.at("fy").get<double>();
        f.camera.cx = jf.at("cx").get<double>();
        f.camera.cy = jf.at("cy").get<double>();
        const auto& rot = jf.at("rotation");
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) f.camera.rotation(r, c) = rot[r * 3 + c].get<double>();
        const auto& ctr = jf.at("center");
        f.camera.center = Vec3(ctr[0], ctr[1], ctr[2]);
        f.generated = jf.value("generated", false);

        const auto img = read_png(dir + "/" + jf.at("file").get<std::string>());
        if (img.height != cap.height || img.width != cap.width)
            throw DataError("frame resolution mismatch in " + dir);
        f.image = dequantize_image(img);
        if (jf.contains("depth_file")) {
            int dh, dw;
            f.depth = read_depth(dir + "/" + jf.at("depth_file").get<std::string>(), dh, dw);
            if (dh != cap.height || dw != cap.width)
                throw DataError("depth resolution mismatch in " + dir);
        }
        cap.frames.push_back(std::move(f));
    }
    return cap;
}

}  // namespace mvd
