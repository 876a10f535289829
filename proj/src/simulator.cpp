#include "egopat/simulator.hpp"

#include "egopat/dataset_io.hpp"
#include "egopat/parallel.hpp"
#include "egopat/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <stdexcept>

namespace egopat {

namespace fs = std::filesystem;

void SceneSpec::validate() const {
    if (!((workspace.hi - workspace.lo).array() > 0.0).all()) {
        throw std::invalid_argument("SceneSpec: workspace must have positive volume");
    }
    if (n_objects < 1 || points_per_object < 1) {
        throw std::invalid_argument("SceneSpec: n_objects and points_per_object must be >= 1");
    }
    if (plane_points < 0) throw std::invalid_argument("SceneSpec: plane_points must be >= 0");
    if (table_height < workspace.lo.z() || table_height > workspace.hi.z()) {
        throw std::invalid_argument("SceneSpec: table_height outside the workspace");
    }
    if (!(object_spread > 0.0)) throw std::invalid_argument("SceneSpec: object_spread must be positive");
}

void HeadMotionSpec::validate() const {
    if (!(gaze_lead_fraction >= 0.0 && gaze_lead_fraction <= 1.0)) {
        throw std::invalid_argument("HeadMotionSpec: gaze_lead_fraction must lie in [0,1]");
    }
    if (!(fps > 0.0)) throw std::invalid_argument("HeadMotionSpec: fps must be positive");
    if (angular_noise_std < 0.0 || position_noise_std < 0.0) {
        throw std::invalid_argument("HeadMotionSpec: noise levels must be non-negative");
    }
    if (initial_gaze_min_deg > initial_gaze_max_deg || lean_min > lean_max) {
        throw std::invalid_argument("HeadMotionSpec: inverted range");
    }
}

void DatasetConfig::validate() const {
    scene.validate();
    motion.validate();
    if (train_clips < 0 || val_clips < 0 || test_clips < 0 || unseen_clips < 0) {
        throw std::invalid_argument("DatasetConfig: split sizes must be non-negative");
    }
    if (seen_scenes < 1 || unseen_scenes < 1) {
        throw std::invalid_argument("DatasetConfig: scene counts must be >= 1");
    }
    if (lengths.min_length < 1 || lengths.min_length > lengths.max_length) {
        throw std::invalid_argument("DatasetConfig: invalid clip length bounds");
    }
}

int LengthSampler::sample(Rng& rng) const {
    const double v = std::exp(rng.normal(log_mean, log_sigma));
    return std::clamp(static_cast<int>(std::lround(v)), min_length, max_length);
}

namespace {

Vec3 hsv_to_rgb(double h, double s, double v) {
    const double c = v * s;
    const double hp = std::fmod(h * 6.0, 6.0);
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    Vec3 rgb;
    if (hp < 1) rgb = {c, x, 0};
    else if (hp < 2) rgb = {x, c, 0};
    else if (hp < 3) rgb = {0, c, x};
    else if (hp < 4) rgb = {0, x, c};
    else if (hp < 5) rgb = {x, 0, c};
    else rgb = {c, 0, x};
    return rgb.array() + (v - c);
}

Vec3 clamp_color(const Vec3& c) { return c.cwiseMax(0.0).cwiseMin(1.0); }

double min_jerk(double u) {
    u = std::clamp(u, 0.0, 1.0);
    return u * u * u * (10.0 - 15.0 * u + 6.0 * u * u);
}

Vec3 random_unit(Rng& rng) {
    for (;;) {
        const Vec3 v(rng.normal(), rng.normal(), rng.normal());
        const double n = v.norm();
        if (n > 1e-9) return v / n;
    }
}

}  // namespace

Scene generate_scene(const SceneSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    Scene scene;
    const Box& ws = spec.workspace;
    auto& cloud = scene.cloud;
    cloud.reserve(static_cast<std::size_t>(spec.plane_points + spec.n_objects * spec.points_per_object));

    // Table top: a wood tone modulated by a few random plane waves. The sum is
    // aperiodic, so the color term sees gradients without repeating patterns.
    const Vec3 wood(0.62, 0.46, 0.30);
    struct Wave {
        Eigen::Vector2d k;
        double phase;
    };
    std::vector<Wave> waves;
    for (int i = 0; i < 4; ++i) {
        const double dir = rng.uniform(0.0, std::numbers::pi);
        const double wavelength = rng.uniform(0.12, 0.5);
        waves.push_back({(2.0 * std::numbers::pi / wavelength) * Eigen::Vector2d(std::cos(dir), std::sin(dir)),
                         rng.uniform(0.0, 2.0 * std::numbers::pi)});
    }
    for (int i = 0; i < spec.plane_points; ++i) {
        ColoredPoint p;
        p.position = Vec3(rng.uniform(ws.lo.x(), ws.hi.x()), rng.uniform(ws.lo.y(), ws.hi.y()), spec.table_height);
        double shade = 0.0;
        for (const auto& w : waves) shade += std::sin(w.k.dot(p.position.head<2>()) + w.phase);
        p.color = clamp_color(wood * (1.0 + 0.2 * shade) + Vec3::Constant(rng.normal(0.0, 0.01)));
        cloud.push_back(p);
    }
    scene.plane_count = cloud.size();

    const double margin = 3.0 * spec.object_spread;
    const double hue0 = rng.uniform();
    for (int k = 0; k < spec.n_objects; ++k) {
        const double lo_x = std::min(ws.lo.x() + margin, ws.center().x());
        const double hi_x = std::max(ws.hi.x() - margin, ws.center().x());
        const double lo_y = std::min(ws.lo.y() + margin, ws.center().y());
        const double hi_y = std::max(ws.hi.y() - margin, ws.center().y());
        const double z = std::min(spec.table_height + margin, ws.hi.z() - margin);
        const Vec3 center(rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y), std::max(z, ws.lo.z()));
        const Vec3 color = hsv_to_rgb(std::fmod(hue0 + static_cast<double>(k) / spec.n_objects, 1.0), 0.8, 0.9);

        Vec3 sum = Vec3::Zero();
        for (int i = 0; i < spec.points_per_object; ++i) {
            ColoredPoint p;
            do {
                p.position = center + spec.object_spread * Vec3(rng.normal(), rng.normal(), rng.normal());
            } while (!ws.contains(p.position));
            p.color = clamp_color(color + Vec3::Constant(rng.normal(0.0, 0.02)));
            sum += p.position;
            cloud.push_back(p);
        }
        scene.object_centroids.push_back(sum / spec.points_per_object);
    }
    return scene;
}

Eigen::Quaterniond look_at(const Vec3& eye, const Vec3& at) {
    const Vec3 z = (at - eye).normalized();
    Vec3 up(0.0, 0.0, 1.0);
    if (std::abs(z.dot(up)) > 0.999) up = Vec3(0.0, 1.0, 0.0);
    const Vec3 x = z.cross(up).normalized();
    const Vec3 y = z.cross(x);
    Mat3 r;
    r.col(0) = x;
    r.col(1) = y;
    r.col(2) = z;
    return Eigen::Quaterniond(r).normalized();
}

ActionSample sample_action(const Scene& scene, const HeadMotionSpec& motion, int length, std::uint64_t seed,
                           const LengthSampler& bounds) {
    motion.validate();
    if (length < bounds.min_length || length > bounds.max_length) {
        throw std::invalid_argument("sample_action: clip length " + std::to_string(length) + " outside [" +
                                    std::to_string(bounds.min_length) + ", " +
                                    std::to_string(bounds.max_length) + "]");
    }
    if (scene.object_centroids.empty()) throw std::invalid_argument("sample_action: scene has no objects");
    Rng rng(seed);

    const Vec3 stand(rng.uniform(-motion.lateral_range, motion.lateral_range), -motion.standoff,
                     motion.head_height);
    ActionSample out;

    std::vector<std::size_t> reachable;
    std::size_t nearest = 0;
    for (std::size_t k = 0; k < scene.object_centroids.size(); ++k) {
        const double d = (scene.object_centroids[k] - stand).norm();
        if (d >= 0.35 && d <= motion.reach_max) reachable.push_back(k);
        if (d < (scene.object_centroids[nearest] - stand).norm()) nearest = k;
    }
    out.target_object = reachable.empty() ? nearest : reachable[rng.index(reachable.size())];
    out.world_target = scene.object_centroids[out.target_object];

    // Initial gaze: the target direction tilted by a random angle about a random perpendicular axis.
    const Vec3 to_target = out.world_target - stand;
    Vec3 axis = random_unit(rng);
    axis = (axis - axis.dot(to_target.normalized()) * to_target.normalized()).normalized();
    const double offset =
        rng.uniform(motion.initial_gaze_min_deg, motion.initial_gaze_max_deg) * std::numbers::pi / 180.0;
    const Vec3 gaze_start = stand + Eigen::AngleAxisd(offset, axis) * to_target;

    Vec3 lean_dir(to_target.x(), to_target.y(), 0.0);
    lean_dir = lean_dir.norm() > 1e-9 ? lean_dir.normalized() : Vec3(0.0, 1.0, 0.0);
    const Vec3 lean = rng.uniform(motion.lean_min, motion.lean_max) * lean_dir +
                      Vec3(0.0, 0.0, rng.uniform(-0.03, 0.0));

    const double dt = 1.0 / motion.fps;
    const int last = length - 1;
    const double align_at = motion.gaze_lead_fraction * last;
    out.head_poses.reserve(static_cast<std::size_t>(length));
    for (int t = 0; t < length; ++t) {
        const double tau = last > 0 ? static_cast<double>(t) / last : 1.0;
        Vec3 pos = stand + min_jerk(tau) * lean;
        if (motion.position_noise_std > 0.0) {
            pos += motion.position_noise_std * Vec3(rng.normal(), rng.normal(), rng.normal());
        }
        const Eigen::Quaterniond face = look_at(pos, out.world_target);
        Eigen::Quaterniond q = face;
        const double alpha = align_at > 0.0 ? min_jerk(t / align_at) : 1.0;
        if (alpha < 1.0) q = look_at(pos, gaze_start).slerp(alpha, face);
        if (motion.angular_noise_std > 0.0) {
            const Vec3 jitter = motion.angular_noise_std * dt * Vec3(rng.normal(), rng.normal(), rng.normal());
            q = q * exp_rotation(jitter);
        }
        out.head_poses.emplace_back(q, pos);
    }
    return out;
}

bool in_frustum(const Vec3& p, const CameraSpec& camera, double tol) {
    const double th = std::tan(0.5 * camera.hfov_deg * std::numbers::pi / 180.0);
    const double tv = std::tan(0.5 * camera.vfov_deg * std::numbers::pi / 180.0);
    return p.z() >= camera.near - tol && p.z() <= camera.far + tol && std::abs(p.x()) <= p.z() * th + tol &&
           std::abs(p.y()) <= p.z() * tv + tol;
}

PointCloud render_frame(const PointCloud& scene, const RigidTransform& head_pose, const CameraSpec& camera,
                        std::uint64_t seed) {
    const RigidTransform world_to_camera = inverse(head_pose);
    const Mat3 r = world_to_camera.rotation_matrix();
    std::vector<std::size_t> visible;
    std::vector<ColoredPoint> mapped;
    mapped.reserve(scene.size());
    for (const auto& p : scene) {
        ColoredPoint q = p;
        q.position = r * p.position + world_to_camera.translation();
        if (p.normal) q.normal = r * *p.normal;
        if (in_frustum(q.position, camera)) mapped.push_back(q);
    }
    if (mapped.size() <= camera.max_points) return PointCloud(std::move(mapped));

    // Partial Fisher-Yates for a uniform subset, then restore scene order.
    Rng rng(seed);
    std::vector<std::size_t> idx(mapped.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = 0; i < camera.max_points; ++i) {
        std::swap(idx[i], idx[i + rng.index(idx.size() - i)]);
    }
    idx.resize(camera.max_points);
    std::sort(idx.begin(), idx.end());
    PointCloud out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(mapped[i]);
    return out;
}

std::vector<ImuSample> derive_imu(const std::vector<RigidTransform>& poses, double dt) {
    if (poses.size() < 3) throw std::invalid_argument("derive_imu: need at least 3 poses");
    if (!(dt > 0.0)) throw std::invalid_argument("derive_imu: dt must be positive");
    const std::size_t n = poses.size();
    const Vec3 g(0.0, 0.0, kGravity);

    // Body-frame rate over each interval [t, t+1].
    std::vector<Vec3> rate(n - 1);
    for (std::size_t t = 0; t + 1 < n; ++t) {
        rate[t] = log_rotation(poses[t].rotation().conjugate() * poses[t + 1].rotation()) / dt;
    }

    std::vector<ImuSample> out(n);
    for (std::size_t t = 0; t < n; ++t) {
        Vec3 omega;
        if (t == 0) omega = rate[0];
        else if (t == n - 1) omega = rate[n - 2];
        else omega = 0.5 * (rate[t - 1] + rate[t]);

        const std::size_t c = std::clamp<std::size_t>(t, 1, n - 2);  // one-sided at the ends
        const Vec3 accel = (poses[c + 1].translation() - 2.0 * poses[c].translation() +
                            poses[c - 1].translation()) /
                           (dt * dt);
        const Vec3 specific = poses[t].rotation().conjugate() * (accel + g);
        out[t] = {omega.x(), omega.y(), omega.z(), specific.x(), specific.y(), specific.z()};
    }
    return out;
}

std::string clip_id_for(Split split, int index) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_%05d", std::string(to_string(split)).c_str(), index);
    return buf;
}

SyntheticClip generate_clip(const DatasetConfig& config, Split split, int index) {
    const std::string clip_id = clip_id_for(split, index);
    const std::uint64_t clip_seed = derive_seed(config.seed, clip_id);
    Rng rng(clip_seed);

    const bool unseen = split == Split::unseen;
    const auto scene_index = rng.index(static_cast<std::uint64_t>(unseen ? config.unseen_scenes : config.seen_scenes));
    const std::string scene_id = (unseen ? "unseen_" : "seen_") + std::to_string(scene_index);
    SceneSpec scene_spec = config.scene;
    scene_spec.seed = derive_seed(config.seed, "scene/" + scene_id);
    const Scene scene = generate_scene(scene_spec);

    for (int attempt = 0; attempt < 16; ++attempt) {
        const int length = config.lengths.sample(rng);
        const std::uint64_t action_seed = rng.next();
        const ActionSample action = sample_action(scene, config.motion, length, action_seed, config.lengths);

        SyntheticClip out;
        Clip& clip = out.clip;
        clip.clip_id = clip_id;
        clip.scene_id = scene_id;
        clip.split = split;
        clip.fps = config.motion.fps;
        clip.seed = clip_seed;
        bool empty_frame = false;
        for (int t = 0; t < length; ++t) {
            Frame f;
            f.cloud = render_frame(scene.cloud, action.head_poses[t], config.camera, rng.next());
            empty_frame = empty_frame || f.cloud.empty();
            clip.frames.push_back(std::move(f));
        }
        if (empty_frame) continue;

        const auto imu = derive_imu(action.head_poses, 1.0 / config.motion.fps);
        for (int t = 0; t < length; ++t) {
            clip.frames[t].imu = imu[t];
            clip.track.targets.push_back(apply(inverse(action.head_poses[t]), action.world_target));
            if (t > 0) {
                const RigidTransform odo = compose(inverse(action.head_poses[t]), action.head_poses[t - 1]);
                clip.odometry.push_back({odo, 1.0, 0.0});
                clip.frames[t].rel_transform = odo;
            }
        }
        out.head_poses = action.head_poses;
        out.world_target = action.world_target;
        return out;
    }
    throw std::runtime_error("generate_clip: could not render a non-empty clip for " + clip_id);
}

DatasetSummary make_dataset(const DatasetConfig& config, const fs::path& out_dir, unsigned max_threads) {
    config.validate();
    const fs::path parent = out_dir.has_parent_path() ? out_dir.parent_path() : fs::path(".");
    if (!fs::is_directory(parent)) {
        throw std::runtime_error("make_dataset: parent directory does not exist: " + parent.string());
    }
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw std::runtime_error("make_dataset: cannot create " + out_dir.string() + ": " + ec.message());

    struct Job {
        Split split;
        int index;
    };
    std::vector<Job> jobs;
    const std::pair<Split, int> sizes[] = {{Split::train, config.train_clips},
                                           {Split::val, config.val_clips},
                                           {Split::test, config.test_clips},
                                           {Split::unseen, config.unseen_clips}};
    for (const auto& [split, count] : sizes) {
        for (int i = 0; i < count; ++i) jobs.push_back({split, i});
    }

    std::vector<DatasetSummary::Entry> entries(jobs.size());
    std::vector<std::uint64_t> digests(jobs.size());
    parallel_for(jobs.size(), worker_count(max_threads), [&](std::size_t j) {
        const SyntheticClip sc = generate_clip(config, jobs[j].split, jobs[j].index);
        const fs::path dir = out_dir / std::string(to_string(jobs[j].split)) / sc.clip.clip_id;
        digests[j] = write_clip(dir, sc.clip);
        entries[j] = {sc.clip.clip_id, sc.clip.scene_id, sc.clip.split, sc.clip.length()};
    });

    DatasetSummary summary;
    summary.clips = std::move(entries);
    Fnv1a h;
    for (std::size_t j = 0; j < jobs.size(); ++j) {
        h.update(summary.clips[j].clip_id);
        h.update_u64(digests[j]);
    }
    summary.digest = h.value();
    write_summary(out_dir / "summary.json", summary);
    return summary;
}

}  // namespace egopat
