#include "egopat/registration.hpp"

#include "egopat/kdtree.hpp"
#include "egopat/parallel.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace egopat {

void IcpParams::validate() const {
    if (max_iterations < 1) throw std::invalid_argument("IcpParams: max_iterations must be >= 1");
    if (!(max_correspondence_dist > 0.0) || !(min_correspondence_dist > 0.0)) {
        throw std::invalid_argument("IcpParams: correspondence distances must be positive");
    }
    if (!(geometric_weight >= 0.0 && geometric_weight <= 1.0)) {
        throw std::invalid_argument("IcpParams: geometric_weight must lie in [0,1]");
    }
    if (!(convergence_tol >= 0.0)) throw std::invalid_argument("IcpParams: convergence_tol must be >= 0");
    if (normal_neighbors < 3) throw std::invalid_argument("IcpParams: normal_neighbors must be >= 3");
    if (gradient_neighbors < 3) throw std::invalid_argument("IcpParams: gradient_neighbors must be >= 3");
}

bool OdometryResult::any_flagged() const {
    return std::find(low_fitness.begin(), low_fitness.end(), true) != low_fitness.end();
}

int OdometryResult::last_flagged() const {
    for (int i = static_cast<int>(low_fitness.size()) - 1; i >= 0; --i) {
        if (low_fitness[i]) return i;
    }
    return -1;
}

namespace {

/// Target-side data reused across iterations: positions, normals, intensity
/// and the tangent-plane intensity gradient of every point.
struct PreparedTarget {
    KdTree tree;
    std::vector<Vec3> normals;
    std::vector<double> intensity;
    std::vector<Vec3> gradient;
};

struct PreparedSource {
    std::vector<Vec3> positions;
    std::vector<double> intensity;
};

PointCloud maybe_downsample(const PointCloud& c, double cell) {
    return cell > 0.0 ? voxel_downsample(c, cell) : c;
}

PreparedSource prepare_source(const PointCloud& source, const IcpParams& params) {
    const PointCloud src = maybe_downsample(source, params.downsample_cell);
    PreparedSource out;
    out.positions.reserve(src.size());
    out.intensity.reserve(src.size());
    for (const auto& p : src) {
        out.positions.push_back(p.position);
        out.intensity.push_back(luminance(p.color));
    }
    return out;
}

PreparedTarget prepare_target(const PointCloud& target, const IcpParams& params) {
    PointCloud tgt = maybe_downsample(target, params.downsample_cell);
    if (tgt.size() < 3) {
        throw std::invalid_argument("colored_icp: target needs at least 3 points after downsampling");
    }
    if (params.downsample_cell > 0.0 || !tgt.has_normals()) {
        tgt = estimate_normals(tgt, std::min(params.normal_neighbors, tgt.size()));
    }

    PreparedTarget out;
    out.tree = KdTree(tgt);
    out.normals.reserve(tgt.size());
    out.intensity.reserve(tgt.size());
    for (const auto& p : tgt) {
        out.normals.push_back(p.normal->normalized());
        out.intensity.push_back(luminance(p.color));
    }

    // Least-squares intensity gradient restricted to each tangent plane.
    out.gradient.assign(tgt.size(), Vec3::Zero());
    const std::size_t k = std::min(params.gradient_neighbors, tgt.size());
    for (std::size_t i = 0; i < tgt.size(); ++i) {
        const Vec3& q = tgt[i].position;
        const Vec3& n = out.normals[i];
        const Vec3 u = n.unitOrthogonal();
        const Vec3 v = n.cross(u);
        Eigen::Matrix2d ata = Eigen::Matrix2d::Zero();
        Eigen::Vector2d atb = Eigen::Vector2d::Zero();
        for (const auto& h : out.tree.knn(q, k)) {
            if (h.index == i) continue;
            const Vec3 d = out.tree.position(h.index) - q;
            const Eigen::Vector2d a(d.dot(u), d.dot(v));
            ata += a * a.transpose();
            atb += a * (out.intensity[h.index] - out.intensity[i]);
        }
        ata += 1e-12 * Eigen::Matrix2d::Identity();
        const Eigen::Vector2d x = ata.ldlt().solve(atb);
        if (x.allFinite()) out.gradient[i] = x(0) * u + x(1) * v;
    }
    return out;
}

struct Correspondences {
    std::vector<std::uint32_t> src;
    std::vector<std::uint32_t> tgt;
    double rmse = 0.0;
    double fitness = 0.0;
    double dist_mean = 0.0;  // Euclidean pair distances
    double dist_std = 0.0;
};

double joint_residual2(const PreparedSource& src, const PreparedTarget& tgt, std::size_t i, std::uint32_t j,
                       const Vec3& s, double geometric_weight) {
    const Vec3 diff = s - tgt.tree.position(j);
    const Vec3& n = tgt.normals[j];
    const double rg = diff.dot(n);
    const double rc = tgt.intensity[j] + tgt.gradient[j].dot(diff - rg * n) - src.intensity[i];
    return geometric_weight * rg * rg + (1.0 - geometric_weight) * rc * rc;
}

/// Nearest-neighbor pairs within max_dist. `rmse` is the root mean of the
/// joint objective over the pairs, the quantity the Gauss-Newton step reduces.
Correspondences find_correspondences(const PreparedSource& src, const PreparedTarget& tgt,
                                     const RigidTransform& t, double max_dist, double geometric_weight) {
    Correspondences c;
    const Mat3 r = t.rotation_matrix();
    double sum = 0.0, sum_d = 0.0, sum_d2 = 0.0;
    for (std::size_t i = 0; i < src.positions.size(); ++i) {
        const Vec3 s = r * src.positions[i] + t.translation();
        KdTree::Hit hit;
        if (tgt.tree.nearest(s, max_dist, hit)) {
            c.src.push_back(static_cast<std::uint32_t>(i));
            c.tgt.push_back(hit.index);
            sum += joint_residual2(src, tgt, i, hit.index, s, geometric_weight);
            sum_d += std::sqrt(hit.dist2);
            sum_d2 += hit.dist2;
        }
    }
    if (!c.src.empty()) {
        const double n = static_cast<double>(c.src.size());
        c.rmse = std::sqrt(sum / n);
        c.dist_mean = sum_d / n;
        c.dist_std = std::sqrt(std::max(0.0, sum_d2 / n - c.dist_mean * c.dist_mean));
    }
    c.fitness = src.positions.empty() ? 0.0
                                      : static_cast<double>(c.src.size()) /
                                            static_cast<double>(src.positions.size());
    return c;
}

using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

/// One Gauss-Newton step on the joint point-to-plane / intensity objective,
/// parameterized as a left perturbation (rotation vector, translation).
Vec6 gauss_newton_step(const PreparedSource& src, const PreparedTarget& tgt, const RigidTransform& t,
                       const Correspondences& c, double geometric_weight) {
    const Mat3 r = t.rotation_matrix();
    const double wg = std::sqrt(geometric_weight);
    const double wc = std::sqrt(1.0 - geometric_weight);
    Mat6 h = Mat6::Zero();
    Vec6 b = Vec6::Zero();
    for (std::size_t k = 0; k < c.src.size(); ++k) {
        const Vec3 s = r * src.positions[c.src[k]] + t.translation();
        const std::uint32_t j = c.tgt[k];
        const Vec3& q = tgt.tree.position(j);
        const Vec3& n = tgt.normals[j];
        const Vec3& d = tgt.gradient[j];

        const Vec3 diff = s - q;
        const double rg = diff.dot(n);
        const Vec3 on_plane = diff - rg * n;
        const double rc = tgt.intensity[j] + d.dot(on_plane) - src.intensity[c.src[k]];

        Vec6 jg;
        jg << s.cross(n), n;
        Vec6 jc;
        jc << s.cross(d), d;
        jg *= wg;
        jc *= wc;
        h.noalias() += jg * jg.transpose() + jc * jc.transpose();
        b.noalias() += jg * (wg * rg) + jc * (wc * rc);
    }
    Eigen::SelfAdjointEigenSolver<Mat6> eig(h, Eigen::EigenvaluesOnly);
    const double max_ev = eig.eigenvalues().maxCoeff();
    const double min_ev = eig.eigenvalues().minCoeff();
    if (max_ev <= 0.0 || min_ev < 1e-10 * max_ev) h += 1e-6 * h.trace() * Mat6::Identity();
    Vec6 x = h.ldlt().solve(-b);
    if (!x.allFinite()) x.setZero();
    return x;
}

RigidTransform perturb(const RigidTransform& t, const Vec6& xi, double scale) {
    const RigidTransform delta =
        RigidTransform::from_rotation_vector(scale * xi.head<3>(), scale * xi.tail<3>());
    return compose(delta, t);
}

IcpResult run_icp(const PreparedSource& src, const PreparedTarget& tgt, const RigidTransform& init,
                  const IcpParams& params) {
    IcpResult result;
    result.transform = init;
    Correspondences current = find_correspondences(src, tgt, init, params.max_correspondence_dist, params.geometric_weight);
    result.fitness = current.fitness;
    result.inlier_rmse = current.rmse;
    if (current.src.empty()) return result;
    result.rmse_history.push_back(current.rmse);

    RigidTransform t = init;
    double gate = params.max_correspondence_dist;
    const double gate_floor = std::min(params.min_correspondence_dist, params.max_correspondence_dist);
    for (int iter = 0; iter < params.max_iterations; ++iter) {
        result.iterations_used = iter + 1;
        const Vec6 xi = gauss_newton_step(src, tgt, t, current, params.geometric_weight);
        const double prev = current.rmse;

        // Step damping: halve the step until the objective does not grow.
        bool accepted = false;
        double scale = 1.0;
        for (int attempt = 0; attempt < 6; ++attempt, scale *= 0.5) {
            const RigidTransform candidate = perturb(t, xi, scale);
            Correspondences next = find_correspondences(src, tgt, candidate, gate, params.geometric_weight);
            if (!next.src.empty() && next.rmse <= current.rmse) {
                t = candidate;
                current = std::move(next);
                accepted = true;
                break;
            }
        }

        const double rel = prev > 0.0 ? (prev - current.rmse) / prev : 0.0;
        if (accepted) result.rmse_history.push_back(current.rmse);
        if (accepted && current.rmse > 0.0 && rel >= params.convergence_tol) continue;

        // Converged at this gate. Pairs beyond mean + 3 std of the pair
        // distances are then treated as outliers (mostly points whose partner
        // left the field of view) and the loop resumes with the tighter gate.
        // The gate only shrinks, and only when that does not raise the objective.
        const double proposed = std::clamp(current.dist_mean + 3.0 * current.dist_std, gate_floor, gate);
        if (current.rmse > 0.0 && proposed < gate) {
            Correspondences tighter = find_correspondences(src, tgt, t, proposed, params.geometric_weight);
            if (!tighter.src.empty() && tighter.rmse <= current.rmse) {
                gate = proposed;
                current = std::move(tighter);
                result.rmse_history.push_back(current.rmse);
                continue;
            }
        }
        result.converged = true;
        break;
    }
    result.transform = t;
    result.fitness = current.fitness;
    result.inlier_rmse = current.rmse;
    return result;
}

}  // namespace

IcpResult colored_icp(const PointCloud& source, const PointCloud& target, const RigidTransform& init,
                      const IcpParams& params) {
    if (source.empty() || target.empty()) throw std::invalid_argument("colored_icp: empty cloud");
    params.validate();
    const PreparedTarget tgt = prepare_target(target, params);
    const PreparedSource src = prepare_source(source, params);
    return run_icp(src, tgt, init, params);
}

OdometryResult chain_odometry(const std::vector<PointCloud>& frames, const IcpParams& params,
                              double fitness_floor, unsigned max_threads) {
    if (frames.size() < 2) throw std::invalid_argument("chain_odometry: need at least 2 frames");
    params.validate();
    for (const auto& f : frames) {
        if (f.empty()) throw std::invalid_argument("chain_odometry: empty frame cloud");
    }
    const std::size_t pairs = frames.size() - 1;
    OdometryResult out;
    out.pairs.resize(pairs);
    parallel_for(pairs, worker_count(max_threads), [&](std::size_t i) {
        const PreparedSource src = prepare_source(frames[i], params);
        const PreparedTarget tgt = prepare_target(frames[i + 1], params);
        out.pairs[i] = run_icp(src, tgt, RigidTransform::identity(), params);
    });
    out.transforms.reserve(pairs);
    out.low_fitness.reserve(pairs);
    for (const auto& r : out.pairs) {
        out.transforms.push_back(r.transform);
        out.low_fitness.push_back(r.fitness < fitness_floor);
    }
    return out;
}

}  // namespace egopat
