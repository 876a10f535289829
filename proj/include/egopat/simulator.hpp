#pragma once

#include "egopat/clip.hpp"
#include "egopat/geometry.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace egopat {

inline constexpr double kGravity = 9.81;

struct SceneSpec {
    Box workspace;  // world frame, z up
    int n_objects = 8;
    int points_per_object = 200;
    int plane_points = 3000;
    double table_height = 0.75;
    double object_spread = 0.04;  // std of each Gaussian cluster, m
    std::uint64_t seed = 0;

    void validate() const;
};

struct Scene {
    PointCloud cloud;  // table points first, then objects in order
    std::vector<Vec3> object_centroids;
    std::size_t plane_count = 0;
};

struct HeadMotionSpec {
    double gaze_lead_fraction = 0.4;
    double angular_noise_std = 0.02;   // rad/s
    double position_noise_std = 5e-4;  // m
    double fps = 30.0;
    double head_height = 1.55;
    double standoff = 1.25;           // distance of the standing point from the workspace center along -y
    double lateral_range = 0.4;       // standing x drawn from [-r, r]
    double initial_gaze_min_deg = 10.0;
    double initial_gaze_max_deg = 25.0;
    double lean_min = 0.03;  // forward head travel over the clip, m
    double lean_max = 0.12;
    double reach_max = 1.6;  // targets farther than this are not chosen when a closer one exists

    void validate() const;
};

struct CameraSpec {
    double hfov_deg = 90.0;
    double vfov_deg = 70.0;
    double near = 0.15;
    double far = 3.0;
    std::size_t max_points = 4096;
};

struct LengthSampler {
    double log_mean = 3.01;   // ln-space location
    double log_sigma = 0.5;
    int min_length = 6;
    int max_length = 133;

    int sample(class Rng& rng) const;
};

Scene generate_scene(const SceneSpec& spec);

struct ActionSample {
    std::vector<RigidTransform> head_poses;  // camera -> world, one per frame
    Vec3 world_target = Vec3::Zero();
    std::size_t target_object = 0;
};

/// Camera orientation looking from `eye` at `at`, optical axis +z, image y
/// pointing down, world z up.
Eigen::Quaterniond look_at(const Vec3& eye, const Vec3& at);

ActionSample sample_action(const Scene& scene, const HeadMotionSpec& motion, int length,
                           std::uint64_t seed, const LengthSampler& bounds = {});

PointCloud render_frame(const PointCloud& scene, const RigidTransform& head_pose, const CameraSpec& camera,
                        std::uint64_t seed);

bool in_frustum(const Vec3& p, const CameraSpec& camera, double tol = 0.0);

std::vector<ImuSample> derive_imu(const std::vector<RigidTransform>& head_poses, double dt);

struct SyntheticClip {
    Clip clip;  // frames, track and true odometry
    std::vector<RigidTransform> head_poses;
    Vec3 world_target = Vec3::Zero();
};

struct DatasetConfig {
    SceneSpec scene;
    HeadMotionSpec motion;
    CameraSpec camera;
    LengthSampler lengths;
    int train_clips = 500;
    int val_clips = 90;
    int test_clips = 79;
    int unseen_clips = 194;
    int seen_scenes = 5;
    int unseen_scenes = 6;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Deterministic in (config, clip_id). Scene seeds derive from the split
/// family (seen / unseen) so unseen scenes never appear in seen splits.
SyntheticClip generate_clip(const DatasetConfig& config, Split split, int index);

std::string clip_id_for(Split split, int index);

struct DatasetSummary {
    struct Entry {
        std::string clip_id;
        std::string scene_id;
        Split split = Split::train;
        std::size_t length = 0;
    };
    std::vector<Entry> clips;
    std::uint64_t digest = 0;
};

/// Writes every split under out_dir (one directory per clip plus
/// summary.json). Throws std::runtime_error with the failing path on I/O errors.
DatasetSummary make_dataset(const DatasetConfig& config, const std::filesystem::path& out_dir,
                            unsigned max_threads = 0);

}  // namespace egopat
