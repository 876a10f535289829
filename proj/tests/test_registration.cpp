#include <doctest.h>

#include "egopat/registration.hpp"
#include "egopat/rng.hpp"
#include "egopat/simulator.hpp"
#include "support.hpp"

#include <cmath>
#include <stdexcept>

using namespace egopat;
using egopat::testing::deg;

namespace {

IcpParams wide_gate() {
    IcpParams p;
    p.max_correspondence_dist = 0.25;
    return p;
}

const Scene& shared_scene() {
    static const Scene scene = egopat::testing::registration_scene(3);
    return scene;
}

PointCloud single_view(std::uint64_t seed) {
    Rng rng(seed);
    return egopat::testing::make_registration_pair(shared_scene(), rng, 0.0, 0.0, 0.0).target;
}

}  // namespace

TEST_CASE("identical clouds register to the identity with full fitness") {
    const PointCloud cloud = single_view(1);
    const IcpResult r = colored_icp(cloud, cloud, RigidTransform::identity(), IcpParams{});
    const PoseError e = pose_error(r.transform, RigidTransform::identity());
    CHECK(e.rotation_rad < 1e-6);
    CHECK(e.translation_m < 1e-6);
    CHECK(r.fitness == doctest::Approx(1.0));
    CHECK(r.converged);
}

TEST_CASE("exactly transformed copy recovers a 10 degree, 5 cm motion") {
    const PointCloud target = single_view(2);
    const RigidTransform truth =
        RigidTransform::from_axis_angle(Vec3(1.0, 2.0, -1.0).normalized(), 10.0 * std::numbers::pi / 180.0,
                                        Vec3(0.03, -0.03, 0.0283));
    const PointCloud source = transform_cloud(inverse(truth), target);
    const IcpResult r = colored_icp(source, target, RigidTransform::identity(), wide_gate());
    const PoseError e = pose_error(r.transform, truth);
    CHECK(deg(e.rotation_rad) < 0.1);
    CHECK(e.translation_m < 1e-3);
}

TEST_CASE("independently rendered noisy views register within half a degree and 5 mm") {
    Rng rng(11);
    for (int i = 0; i < 4; ++i) {
        const auto pair = egopat::testing::make_registration_pair(shared_scene(), rng, 10.0, 0.05, 0.002);
        const IcpResult r = colored_icp(pair.source, pair.target, RigidTransform::identity(), wide_gate());
        const PoseError e = pose_error(r.transform, pair.truth);
        CAPTURE(i);
        CHECK(deg(e.rotation_rad) < 0.5);
        CHECK(e.translation_m < 0.005);
        CHECK(r.fitness > 0.5);
    }
}

TEST_CASE("accepted inlier RMSE never increases") {
    Rng rng(21);
    for (int i = 0; i < 3; ++i) {
        const auto pair = egopat::testing::make_registration_pair(shared_scene(), rng, 8.0, 0.04, 0.002);
        const IcpResult r = colored_icp(pair.source, pair.target, RigidTransform::identity(), wide_gate());
        REQUIRE(r.rmse_history.size() >= 2);
        for (std::size_t k = 2; k < r.rmse_history.size(); ++k) CHECK(r.rmse_history[k] <= r.rmse_history[k - 1] + 1e-12);
        CHECK(r.iterations_used <= wide_gate().max_iterations);
    }
}

TEST_CASE("forward and backward registrations are mutually inverse") {
    Rng rng(31);
    const auto pair = egopat::testing::make_registration_pair(shared_scene(), rng, 6.0, 0.03, 0.002);
    const IcpResult ab = colored_icp(pair.source, pair.target, RigidTransform::identity(), wide_gate());
    const IcpResult ba = colored_icp(pair.target, pair.source, RigidTransform::identity(), wide_gate());
    const PoseError e = pose_error(compose(ab.transform, ba.transform), RigidTransform::identity());
    CHECK(deg(e.rotation_rad) < 0.5);
    CHECK(e.translation_m < 0.005);
}

TEST_CASE("a failed registration still returns a proper rigid transform") {
    const PointCloud target = single_view(4);
    const PointCloud source = transform_cloud(RigidTransform::from_translation(Vec3(10.0, 0.0, 0.0)), target);
    const IcpResult r = colored_icp(source, target, RigidTransform::identity(), IcpParams{});
    CHECK(r.fitness == 0.0);
    CHECK_FALSE(r.converged);
    CHECK(r.transform.rotation().norm() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::isfinite(r.transform.translation().norm()));
}

TEST_CASE("empty inputs are rejected") {
    const PointCloud cloud = single_view(5);
    CHECK_THROWS_AS(colored_icp(PointCloud{}, cloud, RigidTransform::identity(), IcpParams{}), std::invalid_argument);
    CHECK_THROWS_AS(colored_icp(cloud, PointCloud{}, RigidTransform::identity(), IcpParams{}), std::invalid_argument);
}

TEST_CASE("parameter validation") {
    CHECK_NOTHROW(IcpParams{}.validate());
    IcpParams p;
    p.max_iterations = 0;
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
    p = {};
    p.max_correspondence_dist = -0.1;
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
    p = {};
    p.geometric_weight = 1.5;
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
    p = {};
    p.normal_neighbors = 2;
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
}

TEST_CASE("odometry chain shape and trivial cases") {
    const PointCloud cloud = single_view(6);
    CHECK_THROWS_AS(chain_odometry({}, IcpParams{}), std::invalid_argument);
    CHECK_THROWS_AS(chain_odometry({cloud}, IcpParams{}), std::invalid_argument);

    const OdometryResult two = chain_odometry({cloud, cloud}, IcpParams{});
    REQUIRE(two.transforms.size() == 1);
    CHECK(two.pairs.size() == 1);
    CHECK(two.low_fitness.size() == 1);

    const OdometryResult same = chain_odometry({cloud, cloud, cloud, cloud}, IcpParams{}, kDefaultFitnessFloor, 2);
    REQUIRE(same.transforms.size() == 3);
    for (const auto& t : same.transforms) {
        const PoseError e = pose_error(t, RigidTransform::identity());
        CHECK(e.rotation_rad < 1e-6);
        CHECK(e.translation_m < 1e-6);
    }
    CHECK_FALSE(same.any_flagged());
    CHECK(same.last_flagged() == -1);
}

TEST_CASE("pairs without overlap are flagged") {
    const PointCloud a = single_view(7);
    const PointCloud far = transform_cloud(RigidTransform::from_translation(Vec3(0.0, 0.0, 20.0)), a);
    const OdometryResult r = chain_odometry({a, a, far}, IcpParams{});
    CHECK_FALSE(r.low_fitness[0]);
    CHECK(r.low_fitness[1]);
    CHECK(r.any_flagged());
    CHECK(r.last_flagged() == 1);
}

TEST_CASE("odometry on a simulated clip tracks the true head motion") {
    DatasetConfig config;
    config.lengths.min_length = config.lengths.max_length = 20;
    config.seed = 5;
    const SyntheticClip sc = generate_clip(config, Split::train, 0);
    std::vector<PointCloud> frames;
    for (const auto& f : sc.clip.frames) frames.push_back(f.cloud);
    const OdometryResult od = chain_odometry(frames, IcpParams{}, kDefaultFitnessFloor, 1);
    REQUIRE(od.transforms.size() == 19);

    RigidTransform est, truth;
    for (std::size_t k = 0; k < od.transforms.size(); ++k) {
        est = compose(od.transforms[k], est);
        truth = compose(sc.clip.odometry[k].transform, truth);
    }
    const PoseError e = pose_error(est, truth);
    CHECK(deg(e.rotation_rad) < 1.0);
    CHECK(e.translation_m < 0.01);
}

TEST_CASE("thread count does not change the odometry") {
    DatasetConfig config;
    config.lengths.min_length = config.lengths.max_length = 8;
    config.seed = 9;
    const SyntheticClip sc = generate_clip(config, Split::train, 1);
    std::vector<PointCloud> frames;
    for (const auto& f : sc.clip.frames) frames.push_back(f.cloud);
    const OdometryResult one = chain_odometry(frames, IcpParams{}, kDefaultFitnessFloor, 1);
    const OdometryResult many = chain_odometry(frames, IcpParams{}, kDefaultFitnessFloor, 4);
    for (std::size_t k = 0; k < one.transforms.size(); ++k) {
        CHECK(one.transforms[k].matrix() == many.transforms[k].matrix());
        CHECK(one.pairs[k].fitness == many.pairs[k].fitness);
    }
}
