#pragma once

// Fixtures shared by the unit tests and the acceptance runner.

#include "egopat/geometry.hpp"
#include "egopat/rng.hpp"
#include "egopat/simulator.hpp"

#include <cstdlib>
#include <filesystem>
#include <numbers>
#include <string>

namespace egopat::testing {

inline double deg(double rad) { return rad * 180.0 / std::numbers::pi; }

/// A rendered view of a scene and a second view whose camera is displaced by
/// `truth`, so that truth maps source coordinates into target coordinates.
struct RegistrationPair {
    PointCloud source;
    PointCloud target;
    RigidTransform truth;
};

inline Scene registration_scene(std::uint64_t seed) {
    SceneSpec spec;
    spec.plane_points = 8000;
    spec.seed = seed;
    return generate_scene(spec);
}

inline RegistrationPair make_registration_pair(const Scene& scene, Rng& rng, double max_angle_deg,
                                               double max_translation, double noise_std,
                                               std::size_t points = 5000) {
    const Vec3 eye(rng.uniform(-0.4, 0.4), -1.25, 1.55);
    const Vec3 at(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 0.75);
    const RigidTransform pose(look_at(eye, at), eye);

    const Vec3 axis = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
    const double angle = rng.uniform(0.0, max_angle_deg) * std::numbers::pi / 180.0;
    const Vec3 shift = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized() * rng.uniform(0.0, max_translation);

    RegistrationPair pair;
    pair.truth = compose(RigidTransform::from_axis_angle(axis, angle), RigidTransform::from_translation(shift));
    CameraSpec camera;
    camera.max_points = points;
    pair.target = render_frame(scene.cloud, pose, camera, rng.next());
    pair.source = render_frame(scene.cloud, compose(pose, pair.truth), camera, rng.next());
    for (auto& p : pair.source.points()) p.position += noise_std * Vec3(rng.normal(), rng.normal(), rng.normal());
    return pair;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("egopat_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace egopat::testing
