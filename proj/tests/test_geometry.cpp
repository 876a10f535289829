#include <doctest.h>

#include "egopat/geometry.hpp"
#include "egopat/kdtree.hpp"
#include "egopat/rng.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <tuple>

using namespace egopat;

namespace {

constexpr double kPi = std::numbers::pi;

Vec3 random_vec(Rng& rng, double lo, double hi) { return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)}; }

RigidTransform random_transform(Rng& rng) {
    const Vec3 axis = random_vec(rng, -1.0, 1.0).normalized();
    return RigidTransform::from_axis_angle(axis, rng.uniform(-kPi, kPi), random_vec(rng, -2.0, 2.0));
}

PointCloud random_cloud(Rng& rng, std::size_t n, double extent) {
    PointCloud c;
    for (std::size_t i = 0; i < n; ++i) {
        ColoredPoint p;
        p.position = random_vec(rng, -extent, extent);
        p.color = random_vec(rng, 0.0, 1.0);
        c.push_back(p);
    }
    return c;
}

void check_near(const Vec3& a, const Vec3& b, double tol) {
    CHECK((a - b).norm() < tol);
}

}  // namespace

TEST_CASE("compose with identity returns the other transform") {
    Rng rng(1);
    const RigidTransform t = random_transform(rng);
    const auto e = pose_error(compose(RigidTransform::identity(), t), t);
    CHECK(e.rotation_rad < 1e-12);
    CHECK(e.translation_m < 1e-12);
}

TEST_CASE("compose with the inverse is the identity") {
    Rng rng(2);
    for (int i = 0; i < 20; ++i) {
        const RigidTransform t = random_transform(rng);
        const auto e = pose_error(compose(t, inverse(t)), RigidTransform::identity());
        CHECK(e.rotation_rad < 1e-9);
        CHECK(e.translation_m < 1e-9);
    }
}

TEST_CASE("compose applies the right operand first") {
    const auto rz = RigidTransform::from_axis_angle(Vec3::UnitZ(), kPi / 2);
    const auto rx = RigidTransform::from_axis_angle(Vec3::UnitX(), kPi / 2);
    const Vec3 p = apply(compose(rz, rx), Vec3::UnitX());

    // Homogeneous 4x4 product written out by hand.
    Mat4 mz = Mat4::Identity(), mx = Mat4::Identity();
    mz.topLeftCorner<3, 3>() << 0, -1, 0, 1, 0, 0, 0, 0, 1;
    mx.topLeftCorner<3, 3>() << 1, 0, 0, 0, 0, -1, 0, 1, 0;
    const Eigen::Vector4d h = mz * mx * Eigen::Vector4d(1, 0, 0, 1);
    check_near(p, h.head<3>(), 1e-9);
    // Rx leaves the x axis fixed and Rz then turns it onto y.
    check_near(p, Vec3(0, 1, 0), 1e-9);
}

TEST_CASE("compose matches the product of homogeneous matrices") {
    Rng rng(3);
    for (int i = 0; i < 20; ++i) {
        const RigidTransform a = random_transform(rng), b = random_transform(rng);
        CHECK((compose(a, b).matrix() - a.matrix() * b.matrix()).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("inverse of simple transforms") {
    const auto e = pose_error(inverse(RigidTransform::identity()), RigidTransform::identity());
    CHECK(e.rotation_rad == 0.0);
    CHECK(e.translation_m == 0.0);

    const auto t = inverse(RigidTransform::from_translation(Vec3(1, 2, 3)));
    check_near(t.translation(), Vec3(-1, -2, -3), 1e-15);
    CHECK(t.rotation_angle() < 1e-15);
}

TEST_CASE("inverse round trip on random points") {
    Rng rng(4);
    const RigidTransform t = random_transform(rng);
    const RigidTransform ti = inverse(t);
    for (int i = 0; i < 100; ++i) {
        const Vec3 p = random_vec(rng, -5.0, 5.0);
        check_near(apply(ti, apply(t, p)), p, 1e-9);
    }
}

TEST_CASE("apply on basic cases") {
    const Vec3 p(0.3, -1.2, 4.0);
    CHECK(apply(RigidTransform::identity(), p) == p);
    check_near(apply(RigidTransform::from_translation(Vec3(0, 0, 1)), Vec3::Zero()), Vec3(0, 0, 1), 1e-15);

    Mat3 rz;
    rz << 0, -1, 0, 1, 0, 0, 0, 0, 1;
    const Vec3 q = apply(RigidTransform::from_axis_angle(Vec3::UnitZ(), kPi / 2), Vec3::UnitX());
    check_near(q, rz * Vec3::UnitX(), 1e-9);
    check_near(q, Vec3::UnitY(), 1e-9);
}

TEST_CASE("apply is an isometry") {
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
        const RigidTransform t = random_transform(rng);
        const Vec3 p = random_vec(rng, -3, 3), q = random_vec(rng, -3, 3);
        CHECK(std::abs((apply(t, p) - apply(t, q)).norm() - (p - q).norm()) < 1e-9);
    }
}

TEST_CASE("compose keeps unit quaternions and is associative") {
    Rng rng(6);
    RigidTransform chain;
    for (int i = 0; i < 500; ++i) {
        chain = compose(random_transform(rng), chain);
        CHECK(std::abs(chain.rotation().norm() - 1.0) < 1e-12);
    }
    for (int i = 0; i < 50; ++i) {
        const RigidTransform a = random_transform(rng), b = random_transform(rng), c = random_transform(rng);
        const auto e = pose_error(compose(compose(a, b), c), compose(a, compose(b, c)));
        CHECK(e.rotation_rad < 1e-9);
        CHECK(e.translation_m < 1e-9);
    }
}

TEST_CASE("construction rejects degenerate quaternions") {
    CHECK_THROWS_AS(RigidTransform(Eigen::Quaterniond(0, 0, 0, 0), Vec3::Zero()), std::invalid_argument);
    CHECK_THROWS_AS(RigidTransform(Eigen::Quaterniond::Identity(), Vec3(NAN, 0, 0)), std::invalid_argument);
    const RigidTransform t(Eigen::Quaterniond(2, 0, 0, 0), Vec3::Zero());
    CHECK(std::abs(t.rotation().norm() - 1.0) < 1e-15);
}

TEST_CASE("rotation vector round trip") {
    Rng rng(7);
    for (int i = 0; i < 50; ++i) {
        const Vec3 v = random_vec(rng, -1.5, 1.5);
        check_near(log_rotation(exp_rotation(v)), v, 1e-12);
        check_near(RigidTransform::from_rotation_vector(v).rotation_vector(), v, 1e-12);
    }
    check_near(log_rotation(exp_rotation(Vec3::Zero())), Vec3::Zero(), 1e-15);
}

TEST_CASE("transform_cloud on identity and empty input") {
    Rng rng(8);
    PointCloud c = random_cloud(rng, 50, 1.0);
    c[3].normal = Vec3::UnitZ();
    const PointCloud same = transform_cloud(RigidTransform::identity(), c);
    REQUIRE(same.size() == c.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
        CHECK(same[i].position == c[i].position);
        CHECK(same[i].color == c[i].color);
        CHECK(same[i].normal.has_value() == c[i].normal.has_value());
    }
    CHECK(transform_cloud(random_transform(rng), PointCloud{}).empty());
}

TEST_CASE("transform_cloud preserves distances, colors and rotates normals") {
    Rng rng(9);
    PointCloud c = random_cloud(rng, 1000, 2.0);
    c[0].normal = Vec3::UnitX();
    const RigidTransform t = random_transform(rng);
    const PointCloud m = transform_cloud(t, c);
    double worst = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) {
        CHECK(m[i].color == c[i].color);
        for (std::size_t j = i + 1; j < c.size(); ++j) {
            const double d0 = (c[i].position - c[j].position).norm();
            const double d1 = (m[i].position - m[j].position).norm();
            worst = std::max(worst, std::abs(d0 - d1));
        }
    }
    CHECK(worst < 1e-9);
    check_near(*m[0].normal, t.rotation_matrix() * Vec3::UnitX(), 1e-12);
}

TEST_CASE("voxel_downsample on small inputs") {
    PointCloud c;
    c.push_back({Vec3(0.01, 0.01, 0.01), Vec3(0.2, 0.4, 0.6), std::nullopt});
    c.push_back({Vec3(0.03, 0.02, 0.04), Vec3(0.4, 0.0, 0.2), std::nullopt});
    const PointCloud one = voxel_downsample(c, 0.05);
    REQUIRE(one.size() == 1);
    check_near(one[0].position, Vec3(0.02, 0.015, 0.025), 1e-15);
    check_near(one[0].color, Vec3(0.3, 0.2, 0.4), 1e-15);

    Rng rng(10);
    const PointCloud big = random_cloud(rng, 100, 0.4);
    Vec3 mean = Vec3::Zero();
    for (const auto& p : big) mean += p.position;
    mean /= 100.0;
    // Cell boundaries sit at multiples of the cell, so keep the cloud inside one.
    PointCloud shifted = transform_cloud(RigidTransform::from_translation(Vec3(5.0, 5.0, 5.0)), big);
    const PointCloud single = voxel_downsample(shifted, 10.0);
    REQUIRE(single.size() == 1);
    check_near(single[0].position, mean + Vec3(5, 5, 5), 1e-12);

    CHECK_THROWS_AS(voxel_downsample(c, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(voxel_downsample(c, -1.0), std::invalid_argument);
    CHECK(voxel_downsample(PointCloud{}, 0.1).empty());
}

TEST_CASE("voxel_downsample matches a brute-force voxelizer") {
    Rng rng(11);
    const PointCloud c = random_cloud(rng, 10000, 1.0);
    const double cell = 0.05;
    std::map<std::tuple<long, long, long>, std::pair<Vec3, int>> oracle;
    std::map<std::tuple<long, long, long>, Vec3> colors;
    for (const auto& p : c) {
        const auto key = std::make_tuple(static_cast<long>(std::floor(p.position.x() / cell)),
                                         static_cast<long>(std::floor(p.position.y() / cell)),
                                         static_cast<long>(std::floor(p.position.z() / cell)));
        auto& e = oracle[key];
        if (e.second == 0) e.first.setZero();
        e.first += p.position;
        ++e.second;
        colors.try_emplace(key, Vec3::Zero()).first->second += p.color;
    }
    const PointCloud d = voxel_downsample(c, cell);
    REQUIRE(d.size() == oracle.size());
    for (const auto& q : d) {
        const auto key = std::make_tuple(static_cast<long>(std::floor(q.position.x() / cell)),
                                         static_cast<long>(std::floor(q.position.y() / cell)),
                                         static_cast<long>(std::floor(q.position.z() / cell)));
        REQUIRE(oracle.count(key) == 1);
        const auto& [sum, n] = oracle.at(key);
        CHECK(q.position == sum / n);
        CHECK(q.color == colors.at(key) / n);
    }
}

TEST_CASE("voxel_downsample is idempotent once voxels hold single points") {
    Rng rng(12);
    const PointCloud c = random_cloud(rng, 2000, 1.0);
    const PointCloud once = voxel_downsample(c, 0.1);
    const PointCloud twice = voxel_downsample(once, 0.1);
    REQUIRE(once.size() == twice.size());
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(once[i].position == twice[i].position);
}

TEST_CASE("estimate_normals on a plane") {
    Rng rng(13);
    PointCloud plane;
    for (int i = 0; i < 400; ++i) plane.push_back({Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), 0.0), Vec3::Zero(), {}});
    const PointCloud n = estimate_normals(plane, 10, Vec3(0, 0, 1));
    for (const auto& p : n) {
        REQUIRE(p.normal.has_value());
        CHECK(std::acos(std::min(1.0, std::abs(p.normal->z()))) < 1e-3);
        CHECK(p.normal->z() > 0.0);  // faces the viewpoint
    }

    const PointCloud whole = estimate_normals(plane, plane.size(), Vec3(0, 0, 1));
    for (const auto& p : whole) check_near(*p.normal, *whole[0].normal, 1e-12);
}

TEST_CASE("estimate_normals on a sphere are radial") {
    // Fibonacci lattice: even spacing, so every neighbourhood is well spread.
    PointCloud sphere;
    const int n_points = 2000;
    const double golden = kPi * (3.0 - std::sqrt(5.0));
    for (int i = 0; i < n_points; ++i) {
        const double z = 1.0 - (2.0 * i + 1.0) / n_points;
        const double r = std::sqrt(1.0 - z * z);
        sphere.push_back({Vec3(r * std::cos(golden * i), r * std::sin(golden * i), z), Vec3::Zero(), {}});
    }
    const PointCloud n = estimate_normals(sphere, 15, Vec3::Zero());
    double worst = 0.0;
    for (const auto& p : n) {
        const double c = std::abs(p.normal->dot(p.position.normalized()));
        worst = std::max(worst, std::acos(std::min(1.0, c)));
        CHECK(std::abs(p.normal->norm() - 1.0) < 1e-6);
    }
    CHECK(worst < 5.0 * kPi / 180.0);
}

TEST_CASE("estimate_normals rejects small clouds") {
    PointCloud c;
    for (int i = 0; i < 4; ++i) c.push_back({Vec3(i, 0, 0), Vec3::Zero(), {}});
    CHECK_THROWS_AS(estimate_normals(c, 5), std::invalid_argument);
    CHECK_THROWS_AS(estimate_normals(c, 2), std::invalid_argument);
}

TEST_CASE("kd-tree queries agree with linear scans") {
    Rng rng(15);
    std::vector<Vec3> pts;
    for (int i = 0; i < 3000; ++i) pts.push_back(random_vec(rng, -1, 1));
    const KdTree tree(pts);
    for (int q = 0; q < 100; ++q) {
        const Vec3 query = random_vec(rng, -1.2, 1.2);
        std::vector<std::pair<double, std::uint32_t>> all;
        for (std::uint32_t i = 0; i < pts.size(); ++i) all.emplace_back((pts[i] - query).squaredNorm(), i);
        std::sort(all.begin(), all.end());

        KdTree::Hit hit;
        REQUIRE(tree.nearest(query, 10.0, hit));
        CHECK(hit.dist2 == all[0].first);

        const auto knn = tree.knn(query, 8);
        REQUIRE(knn.size() == 8);
        for (std::size_t k = 0; k < 8; ++k) CHECK(knn[k].index == all[k].second);

        const double gate = std::sqrt(all[0].first) * 0.5;
        CHECK_FALSE(tree.nearest(query, gate, hit));
    }
}
