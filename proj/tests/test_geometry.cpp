#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mvd/geometry.hpp"

using namespace mvd;

namespace {

Camera random_camera(Rng& rng, int w = 32, int h = 32) {
    Camera cam;
    cam.fx = rng.uniform(0.8, 2.5) * w;
    cam.fy = rng.uniform(0.8, 2.5) * h;
    cam.cx = rng.uniform(0.3, 0.7) * w;
    cam.cy = rng.uniform(0.3, 0.7) * h;
    const Vec3 pos(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
    Vec3 target(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
    if ((target - pos).norm() < 0.5) target += Vec3(0, 0, 3);
    return look_at_camera(pos, target, cam.fx, cam.fy, cam.cx, cam.cy);
}

}  // namespace

TEST_CASE("center pixel of a canonical camera looks along -z") {
    Camera cam;
    cam.fx = cam.fy = 40;
    cam.cx = 16;
    cam.cy = 16;
    auto rm = camera_to_raymap(cam, 32, 32);
    // pixel (15.5+0.5, 15.5+0.5) is exactly the principal point
    const Vec3 d = rm.directions[15 * 32 + 15 + 0];
    // the exact principal ray goes through continuous coords (16,16); check via pixel_ray
    const Vec3 exact = cam.pixel_ray(16.0, 16.0);
    CHECK((exact - Vec3(0, 0, -1)).norm() < 1e-9);
    CHECK(d.z() < -0.99);
}

TEST_CASE("raymap directions are unit and origins equal the camera center") {
    Rng rng(1);
    for (int trial = 0; trial < 10; ++trial) {
        Camera cam = random_camera(rng);
        auto rm = camera_to_raymap(cam, 16, 16);
        for (const auto& d : rm.directions) CHECK(std::abs(d.norm() - 1.0) < 1e-6);
        for (const auto& o : rm.origins) CHECK((o - cam.center).norm() == 0.0);
        CHECK_NOTHROW(rm.validate());
    }
}

TEST_CASE("rotated camera rays equal rotation applied to canonical rays") {
    Camera base;
    base.fx = base.fy = 40;
    base.cx = base.cy = 16;
    Camera rotated = base;
    rotated.rotation = rotation_about_y(M_PI / 2.0);
    auto rm_base = camera_to_raymap(base, 8, 8);
    auto rm_rot = camera_to_raymap(rotated, 8, 8);
    for (std::size_t i = 0; i < rm_base.size(); ++i) {
        const Vec3 expected = rotated.rotation * rm_base.directions[i];
        CHECK((expected - rm_rot.directions[i]).norm() < 1e-12);
    }
}

TEST_CASE("direction field is invariant to translating the camera center") {
    Rng rng(2);
    Camera cam = random_camera(rng);
    auto rm1 = camera_to_raymap(cam, 8, 8);
    cam.center += Vec3(3, -1, 2);
    auto rm2 = camera_to_raymap(cam, 8, 8);
    for (std::size_t i = 0; i < rm1.size(); ++i)
        CHECK((rm1.directions[i] - rm2.directions[i]).norm() == 0.0);
}

TEST_CASE("project and pixel_ray are consistent") {
    Rng rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        Camera cam = random_camera(rng);
        const double u = rng.uniform(1, 31), v = rng.uniform(1, 31);
        const Vec3 p = cam.center + 2.5 * cam.pixel_ray(u, v);
        double pu, pv;
        REQUIRE(cam.project(p, pu, pv));
        CHECK(pu == doctest::Approx(u).epsilon(1e-9));
        CHECK(pv == doctest::Approx(v).epsilon(1e-9));
    }
}

TEST_CASE("normalize_sequence places a single canonical camera at the origin") {
    Camera cam;
    cam.fx = cam.fy = 40;
    cam.cx = cam.cy = 16;
    cam.center = Vec3(5, 2, -3);
    auto res = normalize_sequence({cam}, 0);
    CHECK(res.cameras[0].center.norm() < 1e-12);
    CHECK((res.cameras[0].rotation - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(res.transform.scale == 1.0);  // coincident fallback
}

TEST_CASE("normalize_sequence: pivot upright, cube bound, similarity returned") {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<Camera> cams;
        const int n = rng.uniform_int(2, 8);
        for (int i = 0; i < n; ++i) cams.push_back(random_camera(rng));
        const std::size_t pivot = rng.uniform_index(n);
        auto res = normalize_sequence(cams, pivot);

        CHECK(res.cameras[pivot].center.norm() < 1e-9);
        CHECK((res.cameras[pivot].up_dir() - Vec3(0, 1, 0)).norm() < 1e-9);
        double max_abs = 0;
        for (const auto& c : res.cameras) max_abs = std::max(max_abs, c.center.cwiseAbs().maxCoeff());
        CHECK(max_abs <= 1.0 + 1e-12);

        // transform maps original centers onto normalized centers
        for (int i = 0; i < n; ++i)
            CHECK((res.transform.apply_point(cams[i].center) - res.cameras[i].center).norm() < 1e-9);
        // inverse maps back
        auto inv = res.transform.inverse();
        for (int i = 0; i < n; ++i)
            CHECK((inv.apply_point(res.cameras[i].center) - cams[i].center).norm() < 1e-9);
    }
}

TEST_CASE("normalize_sequence is idempotent") {
    Rng rng(5);
    std::vector<Camera> cams;
    for (int i = 0; i < 5; ++i) cams.push_back(random_camera(rng));
    auto once = normalize_sequence(cams, 2);
    auto twice = normalize_sequence(once.cameras, 2);
    for (int i = 0; i < 5; ++i) {
        CHECK((twice.cameras[i].center - once.cameras[i].center).norm() < 1e-9);
        CHECK((twice.cameras[i].rotation - once.cameras[i].rotation).cwiseAbs().maxCoeff() < 1e-9);
    }
}

TEST_CASE("normalize_sequence is invariant to a global pre-scaling") {
    Rng rng(6);
    std::vector<Camera> cams;
    for (int i = 0; i < 4; ++i) cams.push_back(random_camera(rng));
    std::vector<Camera> scaled = cams;
    for (auto& c : scaled) c.center *= 10.0;
    auto a = normalize_sequence(cams, 1);
    auto b = normalize_sequence(scaled, 1);
    for (int i = 0; i < 4; ++i) {
        CHECK((a.cameras[i].center - b.cameras[i].center).norm() < 1e-6);
        CHECK((a.cameras[i].rotation - b.cameras[i].rotation).cwiseAbs().maxCoeff() < 1e-9);
    }
}

TEST_CASE("augment with zero rotation and unit scale is the identity") {
    Rng rng(7);
    std::vector<Camera> cams;
    for (int i = 0; i < 4; ++i) cams.push_back(random_camera(rng));
    auto normalized = normalize_sequence(cams, 0).cameras;
    auto same = augment_sequence_with(normalized, 0.0, 1.0);
    for (int i = 0; i < 4; ++i) {
        CHECK((same[i].center - normalized[i].center).norm() == 0.0);
        CHECK((same[i].rotation - normalized[i].rotation).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("augment preserves pairwise distance ratios and the cube invariant") {
    Rng rng(8);
    std::vector<Camera> cams;
    for (int i = 0; i < 5; ++i) cams.push_back(random_camera(rng));
    auto normalized = normalize_sequence(cams, 0).cameras;
    const double ref = (normalized[1].center - normalized[0].center).norm();

    for (int draw = 0; draw < 1000; ++draw) {
        auto aug = augment_sequence(normalized, rng);
        double max_abs = 0;
        for (const auto& c : aug) max_abs = std::max(max_abs, c.center.cwiseAbs().maxCoeff());
        CHECK(max_abs <= 1.0 + 1e-12);
        if (draw < 50) {
            const double r = (aug[1].center - aug[0].center).norm();
            for (int i = 0; i < 4; ++i) {
                const double d0 = (normalized[i + 1].center - normalized[i].center).norm();
                const double d1 = (aug[i + 1].center - aug[i].center).norm();
                if (d0 > 1e-9 && ref > 1e-9)
                    CHECK(d1 / r == doctest::Approx(d0 / ref).epsilon(1e-6));
            }
        }
    }
}

TEST_CASE("pack/unpack raymap round trip is bit exact") {
    Rng rng(9);
    Camera cam = random_camera(rng);
    auto rm = camera_to_raymap(cam, 8, 8);
    auto packed = pack_raymap<double>(rm);
    CHECK(packed.shape() == Shape{8, 8, 6});
    auto back = unpack_raymap(packed);
    for (std::size_t i = 0; i < rm.size(); ++i) {
        CHECK(back.origins[i] == rm.origins[i]);
        CHECK(back.directions[i] == rm.directions[i]);
    }
    // channel slices 0..3 all equal the constant origin
    for (std::size_t i = 0; i < rm.size(); ++i)
        for (int k = 0; k < 3; ++k) CHECK(packed.data()[i * 6 + k] == cam.center[k]);
}

TEST_CASE("unpack rejects zero-norm directions") {
    auto zeros = Tensor<double>::zeros({4, 4, 6});
    CHECK_THROWS_AS(unpack_raymap(zeros), std::invalid_argument);
    auto bad_shape = Tensor<double>::zeros({4, 4, 5});
    CHECK_THROWS_AS(unpack_raymap(bad_shape), std::invalid_argument);
}

TEST_CASE("camera validation rejects degenerate setups") {
    Camera cam;
    cam.fx = cam.fy = 40;
    cam.cx = cam.cy = 16;
    CHECK_NOTHROW(cam.validate(32, 32));
    Camera bad = cam;
    bad.fx = -1;
    CHECK_THROWS_AS(bad.validate(32, 32), std::invalid_argument);
    bad = cam;
    bad.cx = 33;
    CHECK_THROWS_AS(bad.validate(32, 32), std::invalid_argument);
    bad = cam;
    bad.rotation(0, 0) = 2.0;
    CHECK_THROWS_AS(bad.validate(32, 32), std::invalid_argument);
}
