#pragma once

#include "egopat/geometry.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace egopat {

/// Axis-aligned box in meters.
struct Box {
    Vec3 lo = Vec3(-1.0, -1.0, 0.0);
    Vec3 hi = Vec3(1.0, 1.0, 2.0);

    Vec3 center() const { return 0.5 * (lo + hi); }
    Vec3 extent() const { return hi - lo; }
    double volume() const { return extent().prod(); }
    bool contains(const Vec3& p, double tol = 0.0) const {
        return (p.array() >= lo.array() - tol).all() && (p.array() <= hi.array() + tol).all();
    }
    Vec3 clamp(const Vec3& p) const { return p.cwiseMax(lo).cwiseMin(hi); }
};

/// Body-frame angular velocity (rad/s) then gravity-inclusive specific force (m/s^2).
using ImuSample = std::array<double, 6>;

struct Frame {
    PointCloud cloud;  // camera coordinates
    ImuSample imu{};
    std::optional<RigidTransform> rel_transform;  // previous frame -> this frame
};

/// Per-frame action target, each entry in its own frame's camera coordinates.
struct TargetTrack {
    std::vector<Vec3> targets;
    std::size_t size() const { return targets.size(); }
};

struct OdometryRow {
    RigidTransform transform;  // T_{t->t+1}
    double fitness = 1.0;
    double rmse = 0.0;
};

enum class Split { train, val, test, unseen };

std::string_view to_string(Split s);
/// Throws std::invalid_argument on an unknown name.
Split parse_split(std::string_view s);

struct Clip {
    std::string clip_id;
    std::string scene_id;
    Split split = Split::train;
    double fps = 30.0;
    std::uint64_t seed = 0;
    std::vector<Frame> frames;
    TargetTrack track;
    std::vector<OdometryRow> odometry;  // size frames.size() - 1

    std::size_t length() const { return frames.size(); }
};

}  // namespace egopat
