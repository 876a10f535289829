#include "egopat/geometry.hpp"

#include "egopat/kdtree.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <stdexcept>
#include <unordered_map>

namespace egopat {

bool is_finite(const Vec3& v) {
    return std::isfinite(v.x()) && std::isfinite(v.y()) && std::isfinite(v.z());
}

bool PointCloud::has_normals() const {
    for (const auto& p : points_) {
        if (!p.normal) return false;
    }
    return true;
}

RigidTransform::RigidTransform(const Eigen::Quaterniond& rotation, const Vec3& translation)
    : rotation_(rotation), translation_(translation) {
    const double n = rotation_.norm();
    if (!std::isfinite(n) || n < 1e-12) {
        throw std::invalid_argument("RigidTransform: rotation quaternion is zero or non-finite");
    }
    if (!is_finite(translation_)) {
        throw std::invalid_argument("RigidTransform: non-finite translation");
    }
    rotation_.coeffs() /= n;
    // canonical hemisphere keeps serialized values stable
    if (rotation_.w() < 0.0) rotation_.coeffs() = -rotation_.coeffs();
}

RigidTransform RigidTransform::from_translation(const Vec3& t) {
    return {Eigen::Quaterniond::Identity(), t};
}

RigidTransform RigidTransform::from_axis_angle(const Vec3& axis, double angle, const Vec3& t) {
    return {Eigen::Quaterniond(Eigen::AngleAxisd(angle, axis.normalized())), t};
}

RigidTransform RigidTransform::from_rotation_vector(const Vec3& rotvec, const Vec3& t) {
    return {exp_rotation(rotvec), t};
}

RigidTransform RigidTransform::from_matrix(const Mat4& m) {
    const Mat3 r = m.topLeftCorner<3, 3>();
    return {Eigen::Quaterniond(r), m.topRightCorner<3, 1>()};
}

Mat4 RigidTransform::matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = rotation_matrix();
    m.topRightCorner<3, 1>() = translation_;
    return m;
}

Vec3 RigidTransform::rotation_vector() const { return log_rotation(rotation_); }

double RigidTransform::rotation_angle() const { return rotation_vector().norm(); }

RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
    return {a.rotation() * b.rotation(), a.rotation() * b.translation() + a.translation()};
}

RigidTransform inverse(const RigidTransform& t) {
    const Eigen::Quaterniond qi = t.rotation().conjugate();
    return {qi, -(qi * t.translation())};
}

Vec3 apply(const RigidTransform& t, const Vec3& p) { return t.rotation() * p + t.translation(); }

Vec3 rotate(const RigidTransform& t, const Vec3& v) { return t.rotation() * v; }

PoseError pose_error(const RigidTransform& a, const RigidTransform& b) {
    const RigidTransform d = compose(inverse(a), b);
    return {d.rotation_angle(), d.translation().norm()};
}

Vec3 log_rotation(const Eigen::Quaterniond& q_in) {
    Eigen::Quaterniond q = q_in.normalized();
    if (q.w() < 0.0) q.coeffs() = -q.coeffs();
    const Vec3 v = q.vec();
    const double s = v.norm();
    if (s < 1e-12) return 2.0 * v;  // first-order; exact to rounding for tiny angles
    const double angle = 2.0 * std::atan2(s, q.w());
    return v * (angle / s);
}

Eigen::Quaterniond exp_rotation(const Vec3& rotvec) {
    const double angle = rotvec.norm();
    if (angle < 1e-12) {
        Eigen::Quaterniond q(1.0, 0.5 * rotvec.x(), 0.5 * rotvec.y(), 0.5 * rotvec.z());
        return q.normalized();
    }
    return Eigen::Quaterniond(Eigen::AngleAxisd(angle, rotvec / angle));
}

PointCloud transform_cloud(const RigidTransform& t, const PointCloud& c) {
    PointCloud out;
    out.reserve(c.size());
    const Mat3 r = t.rotation_matrix();
    for (const auto& p : c) {
        ColoredPoint q = p;
        q.position = r * p.position + t.translation();
        if (p.normal) q.normal = r * *p.normal;
        out.push_back(q);
    }
    return out;
}

namespace {

struct VoxelKey {
    std::int64_t x, y, z;
    bool operator==(const VoxelKey&) const = default;
};

struct VoxelKeyHash {
    std::size_t operator()(const VoxelKey& k) const {
        std::size_t h = static_cast<std::size_t>(k.x) * 73856093u;
        h ^= static_cast<std::size_t>(k.y) * 19349663u;
        h ^= static_cast<std::size_t>(k.z) * 83492791u;
        return h;
    }
};

}  // namespace

PointCloud voxel_downsample(const PointCloud& c, double cell) {
    if (!(cell > 0.0) || !std::isfinite(cell)) {
        throw std::invalid_argument("voxel_downsample: cell size must be positive");
    }
    struct Acc {
        Vec3 pos = Vec3::Zero();
        Vec3 color = Vec3::Zero();
        std::size_t n = 0;
    };
    std::unordered_map<VoxelKey, std::size_t, VoxelKeyHash> index;
    std::vector<Acc> acc;
    for (const auto& p : c) {
        const VoxelKey key{static_cast<std::int64_t>(std::floor(p.position.x() / cell)),
                           static_cast<std::int64_t>(std::floor(p.position.y() / cell)),
                           static_cast<std::int64_t>(std::floor(p.position.z() / cell))};
        auto [it, inserted] = index.try_emplace(key, acc.size());
        if (inserted) acc.emplace_back();
        Acc& a = acc[it->second];
        a.pos += p.position;
        a.color += p.color;
        ++a.n;
    }
    PointCloud out;
    out.reserve(acc.size());
    for (const auto& a : acc) {
        ColoredPoint q;
        q.position = a.pos / static_cast<double>(a.n);
        q.color = a.color / static_cast<double>(a.n);
        out.push_back(q);
    }
    return out;
}

PointCloud estimate_normals(const PointCloud& c, std::size_t k, const Vec3& viewpoint) {
    if (k < 3) throw std::invalid_argument("estimate_normals: k must be at least 3");
    if (c.size() < k) {
        throw std::invalid_argument("estimate_normals: cloud has fewer points than k");
    }
    const KdTree tree(c);
    PointCloud out = c;
    for (std::size_t i = 0; i < c.size(); ++i) {
        const auto hits = tree.knn(c[i].position, k);
        Vec3 mean = Vec3::Zero();
        for (const auto& h : hits) mean += tree.position(h.index);
        mean /= static_cast<double>(hits.size());
        Mat3 cov = Mat3::Zero();
        for (const auto& h : hits) {
            const Vec3 d = tree.position(h.index) - mean;
            cov += d * d.transpose();
        }
        Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
        Vec3 n = eig.eigenvectors().col(0).normalized();
        if (n.dot(viewpoint - c[i].position) < 0.0) n = -n;
        out[i].normal = n;
    }
    return out;
}

double luminance(const Vec3& rgb) { return 0.299 * rgb.x() + 0.587 * rgb.y() + 0.114 * rgb.z(); }

}  // namespace egopat
