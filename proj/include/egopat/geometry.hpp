#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstddef>
#include <optional>
#include <vector>

namespace egopat {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

bool is_finite(const Vec3& v);

/// One sample of a colored cloud. Color channels live in [0,1]; the normal is
/// unit length when present.
struct ColoredPoint {
    Vec3 position = Vec3::Zero();
    Vec3 color = Vec3::Zero();
    std::optional<Vec3> normal;
};

class PointCloud {
public:
    PointCloud() = default;
    explicit PointCloud(std::vector<ColoredPoint> points) : points_(std::move(points)) {}

    std::size_t size() const { return points_.size(); }
    bool empty() const { return points_.empty(); }
    bool has_normals() const;

    const ColoredPoint& operator[](std::size_t i) const { return points_[i]; }
    ColoredPoint& operator[](std::size_t i) { return points_[i]; }

    const std::vector<ColoredPoint>& points() const { return points_; }
    std::vector<ColoredPoint>& points() { return points_; }

    void push_back(const ColoredPoint& p) { points_.push_back(p); }
    void reserve(std::size_t n) { points_.reserve(n); }

    auto begin() const { return points_.begin(); }
    auto end() const { return points_.end(); }

private:
    std::vector<ColoredPoint> points_;
};

/// Rigid motion in SE(3): x -> R x + t, with R held as a unit quaternion.
class RigidTransform {
public:
    RigidTransform() = default;
    /// Normalizes `rotation`; throws std::invalid_argument on a zero or
    /// non-finite quaternion or a non-finite translation.
    RigidTransform(const Eigen::Quaterniond& rotation, const Vec3& translation);

    static RigidTransform identity() { return {}; }
    static RigidTransform from_translation(const Vec3& t);
    static RigidTransform from_axis_angle(const Vec3& axis, double angle, const Vec3& t = Vec3::Zero());
    /// Rotation vector (axis * angle, radians) plus translation.
    static RigidTransform from_rotation_vector(const Vec3& rotvec, const Vec3& t = Vec3::Zero());
    static RigidTransform from_matrix(const Mat4& m);

    const Eigen::Quaterniond& rotation() const { return rotation_; }
    const Vec3& translation() const { return translation_; }

    Mat3 rotation_matrix() const { return rotation_.toRotationMatrix(); }
    Mat4 matrix() const;
    Vec3 rotation_vector() const;
    double rotation_angle() const;

private:
    Eigen::Quaterniond rotation_ = Eigen::Quaterniond::Identity();
    Vec3 translation_ = Vec3::Zero();
};

/// a ∘ b: applies b first, then a.
RigidTransform compose(const RigidTransform& a, const RigidTransform& b);
RigidTransform inverse(const RigidTransform& t);
Vec3 apply(const RigidTransform& t, const Vec3& p);
Vec3 rotate(const RigidTransform& t, const Vec3& v);

/// Rotation angle (rad) and translation norm (m) of a⁻¹ ∘ b.
struct PoseError {
    double rotation_rad = 0.0;
    double translation_m = 0.0;
};
PoseError pose_error(const RigidTransform& a, const RigidTransform& b);

/// Quaternion logarithm as a rotation vector, shortest arc.
Vec3 log_rotation(const Eigen::Quaterniond& q);
Eigen::Quaterniond exp_rotation(const Vec3& rotvec);

PointCloud transform_cloud(const RigidTransform& t, const PointCloud& c);

/// Voxel-grid filter. Voxel ids are floor(p / cell) relative to the global
/// origin; output keeps first-seen voxel order with centroid position and mean
/// color. Normals are dropped.
PointCloud voxel_downsample(const PointCloud& c, double cell);

/// PCA normals over k nearest neighbours (the point itself included), flipped
/// to face `viewpoint`.
PointCloud estimate_normals(const PointCloud& c, std::size_t k, const Vec3& viewpoint = Vec3::Zero());

double luminance(const Vec3& rgb);

}  // namespace egopat
