// meshfuse: LiDAR-camera human mesh fitting and semantic occupancy toolkit
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "meshfuse/body_model.hpp"
#include "meshfuse/geometry.hpp"
#include "meshfuse/nn_index.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <vector>

namespace meshfuse {

struct IcpConfig {
    int max_iters = 50;
    double mse_improvement_tol = 1e-8;  // m^2
    double rejection_factor = 3.0;      // pairs beyond factor * median are dropped
};

struct IcpResult {
    RigidTransform transform;
    double rmse = 0.0;
    int iterations = 0;
    bool converged = false;
};

namespace detail {

/// Closed-form least-squares rigid fit (SVD, no scale, reflection guarded).
inline RigidTransform best_fit_rigid(const std::vector<Vec3>& src, const std::vector<Vec3>& dst) {
    const double n = static_cast<double>(src.size());
    Vec3 cs = Vec3::Zero(), cd = Vec3::Zero();
    for (const auto& p : src) cs += p;
    for (const auto& p : dst) cd += p;
    cs /= n;
    cd /= n;

    Mat3 h = Mat3::Zero();
    for (std::size_t i = 0; i < src.size(); ++i) h += (src[i] - cs) * (dst[i] - cd).transpose();

    Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 d = Mat3::Identity();
    if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
    const Mat3 r = svd.matrixV() * d * svd.matrixU().transpose();
    return {r, cd - r * cs};
}

}  // namespace detail

/// Point-to-point rigid ICP of source points onto a target cloud.
///
/// Each iteration matches every source point to its exact nearest target
/// point, drops pairs beyond rejection_factor x median distance, and solves
/// the closed-form rigid update. Stops when the mean-squared correspondence
/// error improves by less than mse_improvement_tol.
inline IcpResult icp_align(const std::vector<Vec3>& source, const PointCloud& target,
                           const RigidTransform& init, const IcpConfig& config = {}) {
    if (source.size() < 3 || target.size() < 3)
        throw std::invalid_argument("icp_align: need at least 3 points on both sides");

    // Degeneracy: rotation is unobservable for a collinear source.
    {
        Vec3 mean = Vec3::Zero();
        for (const auto& p : source) mean += p;
        mean /= static_cast<double>(source.size());
        Mat3 cov = Mat3::Zero();
        for (const auto& p : source) cov += (p - mean) * (p - mean).transpose();
        Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
        const double largest = eig.eigenvalues()(2);
        if (largest <= 0.0 || eig.eigenvalues()(1) <= 1e-12 * largest)
            throw std::domain_error("icp_align: source points are (near) collinear");
    }

    NNIndex index(target.points);
    RigidTransform t = init;
    double prev_mse = std::numeric_limits<double>::infinity();
    IcpResult result;

    std::vector<Vec3> moved(source.size());
    std::vector<double> dists(source.size());
    std::vector<int> match(source.size());

    for (int iter = 0; iter < config.max_iters; ++iter) {
        double mse = 0.0;
        for (std::size_t i = 0; i < source.size(); ++i) {
            moved[i] = t.apply(source[i]);
            const auto nn = index.nearest(moved[i]);
            match[i] = nn.index;
            dists[i] = nn.squared_distance;
            mse += nn.squared_distance;
        }
        mse /= static_cast<double>(source.size());
        result.iterations = iter;
        result.rmse = std::sqrt(mse);

        if (prev_mse - mse < config.mse_improvement_tol) {
            result.converged = true;
            break;
        }
        prev_mse = mse;

        std::vector<double> sorted = dists;
        std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
        const double median_sq = sorted[sorted.size() / 2];
        const double factor_sq = config.rejection_factor * config.rejection_factor;
        // On (near-)exact overlap the median collapses; keep everything then.
        const double cutoff = median_sq < 1e-18 ? std::numeric_limits<double>::infinity()
                                                : factor_sq * median_sq;

        std::vector<Vec3> src_kept, dst_kept;
        src_kept.reserve(source.size());
        dst_kept.reserve(source.size());
        for (std::size_t i = 0; i < source.size(); ++i) {
            if (dists[i] <= cutoff) {
                src_kept.push_back(source[i]);
                dst_kept.push_back(index.point(match[i]));
            }
        }
        if (src_kept.size() < 3) {
            for (std::size_t i = 0; i < source.size(); ++i) {
                src_kept.push_back(source[i]);
                dst_kept.push_back(index.point(match[i]));
            }
        }
        t = detail::best_fit_rigid(src_kept, dst_kept);
    }

    result.transform = t;
    return result;
}

/// Fold a rigid update into body parameters: the rotation left-multiplies the
/// global orientation and acts on t_cam, internal pose and shape untouched.
inline BodyParams apply_global_update(const BodyParams& params, const RigidTransform& t) {
    BodyParams out = params;
    const Mat3 r_old = axis_angle_to_matrix(params.theta_global);
    out.theta_global = matrix_to_axis_angle(t.rotation * r_old);
    out.t_cam = t.rotation * params.t_cam + t.translation;
    return out;
}

}  // namespace meshfuse
