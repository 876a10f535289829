#pragma once

#include "egopat/geometry.hpp"

#include <vector>

namespace egopat {

struct IcpParams {
    int max_iterations = 30;
    double max_correspondence_dist = 0.15;  // m, starting gate
    /// The correspondence gate adapts downward toward mean + 3 std of the
    /// pair distances but never below this (or the maximum, if smaller).
    double min_correspondence_dist = 0.05;
    double geometric_weight = 0.968;
    double convergence_tol = 1e-6;  // relative inlier-RMSE change
    double downsample_cell = 0.02;  // m; <= 0 disables the voxel filter
    std::size_t normal_neighbors = 20;
    std::size_t gradient_neighbors = 10;

    /// Throws std::invalid_argument when a field is out of range.
    void validate() const;
};

struct IcpResult {
    RigidTransform transform;  // source -> target
    double fitness = 0.0;
    double inlier_rmse = 0.0;
    int iterations_used = 0;
    bool converged = false;
    /// Accepted inlier RMSE per iteration, starting with the initial guess.
    std::vector<double> rmse_history;
};

IcpResult colored_icp(const PointCloud& source, const PointCloud& target, const RigidTransform& init,
                      const IcpParams& params);

struct OdometryResult {
    std::vector<RigidTransform> transforms;  // T_{t->t+1}, maps frame t coords into frame t+1
    std::vector<IcpResult> pairs;
    std::vector<bool> low_fitness;

    bool any_flagged() const;
    /// Index of the last flagged pair, or -1.
    int last_flagged() const;
};

inline constexpr double kDefaultFitnessFloor = 0.3;

/// Registers every adjacent pair with an identity initial guess. Pairs run
/// concurrently up to `max_threads` workers; output order is by frame index.
OdometryResult chain_odometry(const std::vector<PointCloud>& frames, const IcpParams& params,
                              double fitness_floor = kDefaultFitnessFloor, unsigned max_threads = 0);

}  // namespace egopat
