// meshfuse: LiDAR-camera human mesh fitting and semantic occupancy toolkit
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "meshfuse/body_model.hpp"
#include "meshfuse/geometry.hpp"
#include "meshfuse/nn_index.hpp"
#include "meshfuse/visibility.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <array>
#include <memory>
#include <string>
#include <vector>

namespace meshfuse {

// ---------------------------------------------------------------------------
// Weights and priors
// ---------------------------------------------------------------------------

struct FitWeights {
    double rho_scale = 100.0;  // Geman-McClure scale, pixels
    double lambda_3d = 0.0;
    double lambda_theta = 0.0;
    double lambda_a = 0.0;
    double lambda_beta = 0.0;
    double lambda_occ = 0.0;

    void validate() const {
        if (!(rho_scale > 0.0)) throw ConfigError("weights: rho scale must be positive");
        for (double v : {lambda_3d, lambda_theta, lambda_a, lambda_beta, lambda_occ})
            if (v < 0.0) throw ConfigError("weights: lambdas must be non-negative");
    }
};

struct DatasetWeights {
    FitWeights fit;
    VisibilityConfig visibility;
};

/// Published per-dataset hyperparameter rows.
inline DatasetWeights builtin_dataset_weights(const std::string& name) {
    auto make = [](double rho, double lt, double la, double lb, double l3d, double locc,
                   double w, double jconf) {
        DatasetWeights d;
        d.fit = {rho, l3d, lt, la, lb, locc};
        d.visibility = {w, jconf};
        return d;
    };
    if (name == "3dpw") return make(100, 2.2, 11.0, 5.0, 800, 35, 0.2, 0.6);
    if (name == "sloper4d") return make(100, 0.75, 8.5, 1.0, 500, 55, 0.2, 0.7);
    if (name == "humanm3") return make(100, 1.0, 3.0, 17.5, 600, 135, -1.0, 0.6);
    if (name == "utcampus") return make(100, 1.4, 10.0, 10.0, 300, 50, 0.2, 0.7);
    throw ConfigError("unknown weight set: " + name);
}

/// Mixture-of-Gaussians prior over the stacked body-pose vector.
class PosePriorMoG {
public:
    struct Component {
        double weight = 1.0;
        Eigen::VectorXd mean;
        Eigen::MatrixXd cov;
    };

    explicit PosePriorMoG(std::vector<Component> components) : components_(std::move(components)) {
        if (components_.empty()) throw ConfigError("pose prior: no components");
        double wsum = 0.0;
        const Eigen::Index d = components_.front().mean.size();
        for (const auto& c : components_) {
            if (c.weight <= 0.0) throw ConfigError("pose prior: non-positive component weight");
            if (c.mean.size() != d || c.cov.rows() != d || c.cov.cols() != d)
                throw ConfigError("pose prior: inconsistent component dimensions");
            if ((c.cov - c.cov.transpose()).cwiseAbs().maxCoeff() > 1e-9)
                throw ConfigError("pose prior: covariance not symmetric");
            wsum += c.weight;
        }
        if (std::abs(wsum - 1.0) > 1e-9) throw ConfigError("pose prior: weights must sum to 1");
        llts_.reserve(components_.size());
        log_norms_.reserve(components_.size());
        for (const auto& c : components_) {
            Eigen::LLT<Eigen::MatrixXd> llt(c.cov);
            if (llt.info() != Eigen::Success)
                throw ConfigError("pose prior: covariance not positive definite");
            double log_det = 0.0;
            for (Eigen::Index i = 0; i < d; ++i) log_det += 2.0 * std::log(llt.matrixL()(i, i));
            llts_.push_back(std::move(llt));
            log_norms_.push_back(-0.5 * (d * std::log(2.0 * M_PI) + log_det));
        }
    }

    static PosePriorMoG standard_normal(Eigen::Index dim) {
        return PosePriorMoG({Component{1.0, Eigen::VectorXd::Zero(dim),
                                       Eigen::MatrixXd::Identity(dim, dim)}});
    }

    Eigen::Index dim() const { return components_.front().mean.size(); }
    const std::vector<Component>& components() const { return components_; }

    /// -log sum_j g_j N(theta; mu_j, Sigma_j), via log-sum-exp.
    double nll(const Eigen::VectorXd& theta) const {
        return -log_sum_exp(component_logs(theta));
    }

    Eigen::VectorXd nll_gradient(const Eigen::VectorXd& theta) const {
        const std::vector<double> logs = component_logs(theta);
        const double lse = log_sum_exp(logs);
        Eigen::VectorXd g = Eigen::VectorXd::Zero(theta.size());
        for (std::size_t j = 0; j < components_.size(); ++j) {
            const double resp = std::exp(logs[j] - lse);
            g += resp * llts_[j].solve(theta - components_[j].mean);
        }
        return g;
    }

private:
    std::vector<double> component_logs(const Eigen::VectorXd& theta) const {
        if (theta.size() != dim()) throw std::invalid_argument("pose prior: dimension mismatch");
        std::vector<double> logs(components_.size());
        for (std::size_t j = 0; j < components_.size(); ++j) {
            const Eigen::VectorXd r = theta - components_[j].mean;
            const double mahal = r.dot(llts_[j].solve(r));
            logs[j] = std::log(components_[j].weight) + log_norms_[j] - 0.5 * mahal;
        }
        return logs;
    }

    static double log_sum_exp(const std::vector<double>& v) {
        double m = v[0];
        for (double x : v) m = std::max(m, x);
        double s = 0.0;
        for (double x : v) s += std::exp(x - m);
        return m + std::log(s);
    }

    std::vector<Component> components_;
    std::vector<Eigen::LLT<Eigen::MatrixXd>> llts_;
    std::vector<double> log_norms_;
};

/// Quadratic shape prior beta' * precision * beta.
struct ShapePrior {
    Eigen::MatrixXd precision;

    static ShapePrior identity(Eigen::Index dim) {
        return {Eigen::MatrixXd::Identity(dim, dim)};
    }

    void validate() const {
        if ((precision - precision.transpose()).cwiseAbs().maxCoeff() > 1e-9)
            throw ConfigError("shape prior: precision not symmetric");
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(precision);
        if (eig.eigenvalues().minCoeff() < -1e-12)
            throw ConfigError("shape prior: precision not positive semidefinite");
    }

    double value(const Eigen::VectorXd& beta) const {
        if (beta.size() != precision.rows()) throw std::invalid_argument("shape prior: dimension mismatch");
        return beta.dot(precision * beta);
    }

    Eigen::VectorXd gradient(const Eigen::VectorXd& beta) const {
        return 2.0 * (precision * beta);
    }
};

// ---------------------------------------------------------------------------
// Problem definition
// ---------------------------------------------------------------------------

struct FitProblem {
    const BodyModel* model = nullptr;
    BodyParams init;
    Keypoints2D keypoints;
    CameraModel camera;
    PointCloud lidar;  // sensor frame
    std::shared_ptr<const NNIndex> lidar_index;
    std::vector<int> visible;              // vertex indices V
    std::vector<int> occluded_joints;      // non-root joint ids I
    std::vector<UnitQuaternion> initial_quats;  // aligned with occluded_joints
    FitWeights weights;
    std::shared_ptr<const PosePriorMoG> pose_prior;
    std::shared_ptr<const ShapePrior> shape_prior;

    void prepare() {
        if (!model) throw ConfigError("fit problem: missing body model");
        init.validate(*model);
        weights.validate();
        keypoints.validate();
        for (int v : visible)
            if (v < 0 || v >= model->vertex_count()) throw ConfigError("fit problem: visible index out of range");
        for (int j : occluded_joints)
            if (j <= 0 || j >= model->joint_count()) throw ConfigError("fit problem: occluded joint out of range");
        if (!pose_prior) pose_prior = std::make_shared<PosePriorMoG>(
            PosePriorMoG::standard_normal(3 * (model->joint_count() - 1)));
        if (pose_prior->dim() != 3 * (model->joint_count() - 1))
            throw ConfigError("fit problem: pose prior dimension mismatch");
        if (!shape_prior) shape_prior = std::make_shared<ShapePrior>(ShapePrior::identity(model->shape_count()));
        shape_prior->validate();
        if (shape_prior->precision.rows() != model->shape_count())
            throw ConfigError("fit problem: shape prior dimension mismatch");
        if (initial_quats.empty() && !occluded_joints.empty()) {
            for (int j : occluded_joints)
                initial_quats.push_back(axis_angle_to_quaternion(init.theta_body[j - 1]));
        }
        if (initial_quats.size() != occluded_joints.size())
            throw ConfigError("fit problem: initial quaternion count mismatch");
        if (!lidar.points.empty() && !lidar_index)
            lidar_index = std::make_shared<NNIndex>(lidar.points);
    }
};

// ---------------------------------------------------------------------------
// Parameter vector layout: [beta | theta_global | theta_body | t_cam]
// ---------------------------------------------------------------------------

inline int param_count(const BodyModel& model) {
    return model.shape_count() + 3 + 3 * (model.joint_count() - 1) + 3;
}

inline Eigen::VectorXd pack_params(const BodyModel& model, const BodyParams& p) {
    Eigen::VectorXd x(param_count(model));
    const int b = model.shape_count();
    x.head(b) = p.beta;
    x.segment(b, 3) = p.theta_global.v;
    for (int j = 1; j < model.joint_count(); ++j)
        x.segment(b + 3 + 3 * (j - 1), 3) = p.theta_body[j - 1].v;
    x.tail(3) = p.t_cam;
    return x;
}

inline BodyParams unpack_params(const BodyModel& model, const Eigen::VectorXd& x) {
    BodyParams p;
    const int b = model.shape_count();
    p.beta = x.head(b);
    p.theta_global = AxisAngle(Vec3(x.segment(b, 3)));
    p.theta_body.resize(model.joint_count() - 1);
    for (int j = 1; j < model.joint_count(); ++j)
        p.theta_body[j - 1] = AxisAngle(Vec3(x.segment(b + 3 + 3 * (j - 1), 3)));
    p.t_cam = x.tail(3);
    return p;
}

// ---------------------------------------------------------------------------
// Loss terms
// ---------------------------------------------------------------------------

enum class LossTerm : int {
    kJoint2D = 0,
    kChamfer3D = 1,
    kPosePrior = 2,
    kHyperextension = 3,
    kShapePrior = 4,
    kOcclusionConsistency = 5,
};
constexpr int kNumLossTerms = 6;

inline const char* loss_term_name(LossTerm t) {
    switch (t) {
        case LossTerm::kJoint2D: return "joint2d";
        case LossTerm::kChamfer3D: return "chamfer3d";
        case LossTerm::kPosePrior: return "pose_prior";
        case LossTerm::kHyperextension: return "hyperext";
        case LossTerm::kShapePrior: return "shape_prior";
        case LossTerm::kOcclusionConsistency: return "occ_consistency";
    }
    return "?";
}

/// Geman-McClure: sigma^2 r2 / (sigma^2 + r2) on the squared residual norm.
inline double geman_mcclure(double squared_norm, double sigma) {
    const double s2 = sigma * sigma;
    return s2 * squared_norm / (s2 + squared_norm);
}

/// d rho / d r2
inline double geman_mcclure_deriv(double squared_norm, double sigma) {
    const double s2 = sigma * sigma;
    const double denom = s2 + squared_norm;
    return s2 * s2 / (denom * denom);
}

/// Symmetric size-normalized Chamfer distance between point sets.
inline double loss_3d(const std::vector<Vec3>& visible_vertices, const PointCloud& lidar,
                      const NNIndex* lidar_index = nullptr) {
    if (visible_vertices.empty() || lidar.points.empty()) return 0.0;
    std::unique_ptr<NNIndex> own;
    if (!lidar_index) {
        own = std::make_unique<NNIndex>(lidar.points);
        lidar_index = own.get();
    }
    double fwd = 0.0;
    for (const auto& v : visible_vertices) fwd += lidar_index->nearest(v).squared_distance;
    fwd /= static_cast<double>(visible_vertices.size());

    NNIndex vert_index(visible_vertices);
    double bwd = 0.0;
    for (const auto& p : lidar.points) bwd += vert_index.nearest(p).squared_distance;
    bwd /= static_cast<double>(lidar.points.size());
    return fwd + bwd;
}

/// Anti-hyperextension prior: sum over designated hinges of exp(signed coord).
inline double loss_hyperext(const BodyModel& model, const BodyParams& params) {
    double sum = 0.0;
    for (const auto& h : model.hinges)
        sum += std::exp(h.sign * params.theta_body[h.joint - 1].v[h.axis]);
    return sum;
}

/// Occlusion consistency: sum over occluded joints of 1 - <q0, q>^2.
inline double loss_occ(const BodyParams& params, const std::vector<int>& occluded_joints,
                       const std::vector<UnitQuaternion>& initial_quats) {
    double sum = 0.0;
    for (std::size_t i = 0; i < occluded_joints.size(); ++i) {
        const UnitQuaternion q = axis_angle_to_quaternion(params.theta_body[occluded_joints[i] - 1]);
        const double c = initial_quats[i].dot(q);
        sum += 1.0 - c * c;
    }
    return sum;
}

inline Eigen::VectorXd stack_theta_body(const BodyParams& params) {
    Eigen::VectorXd t(3 * params.theta_body.size());
    for (std::size_t j = 0; j < params.theta_body.size(); ++j) t.segment(3 * j, 3) = params.theta_body[j].v;
    return t;
}

struct LossBreakdown {
    double total = 0.0;
    std::array<double, kNumLossTerms> raw{};       // unweighted term values
    std::array<double, kNumLossTerms> weighted{};  // lambda * raw (L_J weight is 1)
    std::vector<std::string> warnings;

    double raw_term(LossTerm t) const { return raw[static_cast<int>(t)]; }
};

struct GradientBreakdown {
    Eigen::VectorXd total;
    std::array<Eigen::VectorXd, kNumLossTerms> raw;  // unweighted per-term gradients
    std::vector<std::string> warnings;

    const Eigen::VectorXd& raw_term(LossTerm t) const { return raw[static_cast<int>(t)]; }
};

// ---------------------------------------------------------------------------
// Forward pass with analytic Jacobians of posed joints/vertices
// ---------------------------------------------------------------------------

namespace detail {

/// dR(theta)/d theta_i for i = 0..2 (Gallego & Yezzi; skew basis near zero).
inline std::array<Mat3, 3> axis_angle_matrix_jacobian(const AxisAngle& aa) {
    std::array<Mat3, 3> out;
    const double phi = aa.angle();
    if (phi < 1e-7) {
        for (int i = 0; i < 3; ++i) out[i] = skew(Vec3::Unit(i));
        return out;
    }
    const Mat3 r = axis_angle_to_matrix(aa);
    const Mat3 tk = skew(aa.v);
    for (int i = 0; i < 3; ++i) {
        const Vec3 ei = Vec3::Unit(i);
        out[i] = ((aa.v[i] * tk + skew(aa.v.cross((Mat3::Identity() - r) * ei))) / (phi * phi)) * r;
    }
    return out;
}

struct PosedWithJacobians {
    // Final (camera-frame) positions.
    std::vector<Vec3> joints;                 // J
    std::vector<Vec3> vertex_positions;       // selected vertices
    // Jacobians w.r.t. the packed parameter vector, 3 x P each.
    std::vector<Eigen::MatrixXd> joint_jac;   // J
    std::vector<Eigen::MatrixXd> vertex_jac;  // selected vertices
    ForwardKinematics fk;
};

/// Forward map plus exact Jacobians for all joints and the selected vertices.
inline PosedWithJacobians pose_with_jacobians(const BodyModel& model, const BodyParams& params,
                                              const std::vector<int>& vertex_selection,
                                              bool with_jacobians) {
    const int n_joints = model.joint_count();
    const int n_shape = model.shape_count();
    const int n_params = param_count(model);
    const int off_glob = n_shape;
    const int off_body = n_shape + 3;
    const int off_tcam = n_shape + 3 + 3 * (n_joints - 1);

    PosedWithJacobians out;
    out.fk = forward_kinematics(model, params);
    const Mat3 r_glob = axis_angle_to_matrix(params.theta_global);

    out.joints.resize(n_joints);
    for (int j = 0; j < n_joints; ++j)
        out.joints[j] = r_glob * Vec3(out.fk.joints_pre.row(j)) + params.t_cam;
    out.vertex_positions.resize(vertex_selection.size());
    for (std::size_t i = 0; i < vertex_selection.size(); ++i)
        out.vertex_positions[i] =
            r_glob * Vec3(out.fk.vertices_pre.row(vertex_selection[i])) + params.t_cam;
    if (!with_jacobians) return out;

    // Ancestor-or-self table over the kinematic tree.
    std::vector<std::vector<char>> anc(n_joints, std::vector<char>(n_joints, 0));
    for (int j = 0; j < n_joints; ++j)
        for (int a = j; a != -1; a = model.kinematic_parents[a]) anc[a][j] = 1;

    // Shape derivatives of rest joints and of FK translations.
    // t_j = t_parent + R_parent^w (rest_j - rest_parent); rotations are
    // independent of beta.
    std::vector<Eigen::MatrixXd> d_rest(n_shape);          // J x 3 per shape coeff
    std::vector<Eigen::MatrixXd> d_world_t(n_shape);       // J x 3 per shape coeff
    for (int k = 0; k < n_shape; ++k) {
        d_rest[k] = model.joint_regressor * model.shape_dirs[k];
        d_world_t[k].resize(n_joints, 3);
        d_world_t[k].row(0) = d_rest[k].row(0);
        for (int j = 1; j < n_joints; ++j) {
            const int p = model.kinematic_parents[j];
            d_world_t[k].row(j) =
                d_world_t[k].row(p) +
                (out.fk.world[p].rotation * Vec3(d_rest[k].row(j) - d_rest[k].row(p))).transpose();
        }
    }

    // Rotation derivative of the subtree rooted at each body joint b:
    // d(world point y)/d theta_{b,i} = M_{b,i} (y - t_b) for y under b.
    std::vector<std::array<Mat3, 3>> subtree_rot(n_joints);
    for (int b = 1; b < n_joints; ++b) {
        const int p = model.kinematic_parents[b];
        const auto d_local = axis_angle_matrix_jacobian(params.theta_body[b - 1]);
        for (int i = 0; i < 3; ++i)
            subtree_rot[b][i] = out.fk.world[p].rotation * d_local[i] * out.fk.world[b].rotation.transpose();
    }

    auto point_jacobian = [&](const Vec3& pre_global, auto&& d_pre) {
        // d_pre(block 3xP writer) fills beta/body columns of the pre-global point.
        Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(3, n_params);
        d_pre(jac);
        // Chain through the global rotation, then add the global blocks.
        jac.leftCols(off_tcam) = (r_glob * jac.leftCols(off_tcam)).eval();
        jac.block(0, off_glob, 3, 3) = axis_angle_rotate_jacobian(params.theta_global, pre_global);
        jac.block(0, off_tcam, 3, 3) = Mat3::Identity();
        return jac;
    };

    out.joint_jac.resize(n_joints);
    for (int j = 0; j < n_joints; ++j) {
        const Vec3 pre = out.fk.joints_pre.row(j);
        out.joint_jac[j] = point_jacobian(pre, [&](Eigen::MatrixXd& jac) {
            for (int k = 0; k < n_shape; ++k) jac.col(k) = d_world_t[k].row(j).transpose();
            for (int b = 1; b < n_joints; ++b) {
                if (!anc[b][j]) continue;
                const Vec3 lever = pre - out.fk.world[b].translation;
                for (int i = 0; i < 3; ++i)
                    jac.col(off_body + 3 * (b - 1) + i) = subtree_rot[b][i] * lever;
            }
        });
    }

    out.vertex_jac.resize(vertex_selection.size());
    for (std::size_t s = 0; s < vertex_selection.size(); ++s) {
        const int v = vertex_selection[s];
        const Vec3 vs = out.fk.shaped.row(v);
        out.vertex_jac[s] = point_jacobian(out.fk.vertices_pre.row(v), [&](Eigen::MatrixXd& jac) {
            for (int j = 0; j < n_joints; ++j) {
                const double w = model.skinning_weights(v, j);
                if (w == 0.0) continue;
                const Vec3 offset = vs - Vec3(out.fk.rest_joints.row(j));
                const Vec3 y = out.fk.world[j].apply(offset);
                // beta: shaped vertex and rest joint both move, plus FK translation.
                for (int k = 0; k < n_shape; ++k) {
                    const Vec3 d_offset = Vec3(model.shape_dirs[k].row(v)) - Vec3(d_rest[k].row(j));
                    jac.col(k) += w * (out.fk.world[j].rotation * d_offset +
                                       Vec3(d_world_t[k].row(j).transpose()));
                }
                // body pose: rotation of every ancestor subtree about its pivot.
                for (int b = 1; b < n_joints; ++b) {
                    if (!anc[b][j]) continue;
                    const Vec3 lever = y - out.fk.world[b].translation;
                    for (int i = 0; i < 3; ++i)
                        jac.col(off_body + 3 * (b - 1) + i) += w * (subtree_rot[b][i] * lever);
                }
            }
        });
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Objective evaluation (value and exact gradient share one code path)
// ---------------------------------------------------------------------------

struct FitEvaluation {
    LossBreakdown loss;
    GradientBreakdown gradient;
    bool has_gradient = false;
};

/// Evaluate Eq. 1. Chamfer correspondences are re-matched here and treated as
/// fixed for the gradient (piecewise-smooth treatment of the min).
inline FitEvaluation evaluate_fit(const FitProblem& problem, const BodyParams& params,
                                  bool with_gradient) {
    const BodyModel& model = *problem.model;
    const int n_params = param_count(model);
    FitEvaluation ev;
    auto& loss = ev.loss;
    ev.has_gradient = with_gradient;
    if (with_gradient) {
        ev.gradient.total = Eigen::VectorXd::Zero(n_params);
        for (auto& g : ev.gradient.raw) g = Eigen::VectorXd::Zero(n_params);
    }
    auto grad_of = [&](LossTerm t) -> Eigen::VectorXd& {
        return ev.gradient.raw[static_cast<int>(t)];
    };

    const auto posed = detail::pose_with_jacobians(model, params, problem.visible, with_gradient);

    // --- L_J: robust 2D reprojection over mapped keypoints -----------------
    {
        double sum = 0.0;
        const double sigma = problem.weights.rho_scale;
        for (int j = 0; j < model.joint_count(); ++j) {
            const int det_id = model.keypoint_map[j];
            if (det_id < 0) continue;
            const Keypoint* kp = problem.keypoints.find(det_id);
            if (!kp) continue;
            const Vec3& y = posed.joints[j];
            if (!(y.z() > 0.0)) {
                loss.warnings.push_back(std::string("joint2d: joint ") + std::to_string(j) +
                                        " behind camera, term skipped");
                continue;
            }
            const Vec2 proj(problem.camera.fx * y.x() / y.z() + problem.camera.cx,
                            problem.camera.fy * y.y() / y.z() + problem.camera.cy);
            const Vec2 r = proj - kp->position;
            const double r2 = r.squaredNorm();
            sum += kp->confidence * geman_mcclure(r2, sigma);
            if (with_gradient) {
                Eigen::Matrix<double, 2, 3> dproj;
                dproj << problem.camera.fx / y.z(), 0.0, -problem.camera.fx * y.x() / (y.z() * y.z()),
                         0.0, problem.camera.fy / y.z(), -problem.camera.fy * y.y() / (y.z() * y.z());
                const Vec2 dr = kp->confidence * geman_mcclure_deriv(r2, sigma) * 2.0 * r;
                grad_of(LossTerm::kJoint2D) += (dr.transpose() * dproj * posed.joint_jac[j]).transpose();
            }
        }
        loss.raw[static_cast<int>(LossTerm::kJoint2D)] = sum;
    }

    // --- L_3D: symmetric size-normalized Chamfer ---------------------------
    {
        double value = 0.0;
        const std::size_t nv = posed.vertex_positions.size();
        const std::size_t np = problem.lidar.points.size();
        if (nv == 0 || np == 0) {
            if (problem.weights.lambda_3d > 0.0)
                loss.warnings.push_back("chamfer3d: empty vertex or point set, term skipped");
        } else {
            // forward: visible vertices to nearest lidar point
            std::vector<Vec3> nearest_pt(nv);
            for (std::size_t i = 0; i < nv; ++i) {
                const auto nn = problem.lidar_index->nearest(posed.vertex_positions[i]);
                nearest_pt[i] = problem.lidar.points[nn.index];
                value += nn.squared_distance / static_cast<double>(nv);
            }
            // backward: lidar points to nearest visible vertex, aggregated per vertex
            NNIndex vert_index(posed.vertex_positions);
            std::vector<double> cnt(nv, 0.0);
            std::vector<Vec3> sum_p(nv, Vec3::Zero());
            for (const auto& p : problem.lidar.points) {
                const auto nn = vert_index.nearest(p);
                value += nn.squared_distance / static_cast<double>(np);
                cnt[nn.index] += 1.0;
                sum_p[nn.index] += p;
            }
            if (with_gradient) {
                auto& g = grad_of(LossTerm::kChamfer3D);
                for (std::size_t i = 0; i < nv; ++i) {
                    Vec3 dv = (2.0 / static_cast<double>(nv)) * (posed.vertex_positions[i] - nearest_pt[i]);
                    dv += (2.0 / static_cast<double>(np)) *
                          (cnt[i] * posed.vertex_positions[i] - sum_p[i]);
                    g += (dv.transpose() * posed.vertex_jac[i]).transpose();
                }
            }
        }
        loss.raw[static_cast<int>(LossTerm::kChamfer3D)] = value;
    }

    const int off_beta = 0;
    const int off_body = model.shape_count() + 3;

    // --- L_theta: MoG pose prior -------------------------------------------
    {
        const Eigen::VectorXd theta = stack_theta_body(params);
        loss.raw[static_cast<int>(LossTerm::kPosePrior)] = problem.pose_prior->nll(theta);
        if (with_gradient)
            grad_of(LossTerm::kPosePrior).segment(off_body, theta.size()) =
                problem.pose_prior->nll_gradient(theta);
    }

    // --- L_a: anti-hyperextension -------------------------------------------
    {
        double sum = 0.0;
        for (const auto& h : model.hinges) {
            const double coord = h.sign * params.theta_body[h.joint - 1].v[h.axis];
            const double e = std::exp(coord);
            sum += e;
            if (with_gradient)
                grad_of(LossTerm::kHyperextension)[off_body + 3 * (h.joint - 1) + h.axis] += h.sign * e;
        }
        loss.raw[static_cast<int>(LossTerm::kHyperextension)] = sum;
    }

    // --- L_beta: quadratic shape prior --------------------------------------
    {
        loss.raw[static_cast<int>(LossTerm::kShapePrior)] = problem.shape_prior->value(params.beta);
        if (with_gradient)
            grad_of(LossTerm::kShapePrior).segment(off_beta, params.beta.size()) =
                problem.shape_prior->gradient(params.beta);
    }

    // --- L_occ: occluded-joint quaternion consistency -----------------------
    {
        double sum = 0.0;
        for (std::size_t i = 0; i < problem.occluded_joints.size(); ++i) {
            const int j = problem.occluded_joints[i];
            const AxisAngle& aa = params.theta_body[j - 1];
            const UnitQuaternion q = axis_angle_to_quaternion(aa);
            const UnitQuaternion& q0 = problem.initial_quats[i];
            const double c = q0.dot(q);
            sum += 1.0 - c * c;
            if (with_gradient) {
                const Eigen::Matrix<double, 4, 3> dq = axis_angle_quaternion_jacobian(aa);
                const Eigen::Vector4d q0v(q0.w, q0.x, q0.y, q0.z);
                grad_of(LossTerm::kOcclusionConsistency).segment(off_body + 3 * (j - 1), 3) +=
                    -2.0 * c * (q0v.transpose() * dq).transpose();
            }
        }
        loss.raw[static_cast<int>(LossTerm::kOcclusionConsistency)] = sum;
    }

    // --- weighted sum --------------------------------------------------------
    const std::array<double, kNumLossTerms> lambdas = {
        1.0, problem.weights.lambda_3d, problem.weights.lambda_theta,
        problem.weights.lambda_a, problem.weights.lambda_beta, problem.weights.lambda_occ};
    for (int t = 0; t < kNumLossTerms; ++t) {
        loss.weighted[t] = lambdas[t] * loss.raw[t];
        loss.total += loss.weighted[t];
        if (with_gradient) ev.gradient.total += lambdas[t] * ev.gradient.raw[t];
    }
    if (with_gradient) {
        ev.gradient.warnings = loss.warnings;
        for (int t = 0; t < kNumLossTerms; ++t) {
            if (!ev.gradient.raw[t].allFinite())
                ev.gradient.warnings.push_back(std::string("non-finite gradient in term ") +
                                               loss_term_name(static_cast<LossTerm>(t)));
        }
    }
    return ev;
}

inline LossBreakdown loss_total(const FitProblem& problem, const BodyParams& params) {
    return evaluate_fit(problem, params, false).loss;
}

inline GradientBreakdown fit_gradient(const FitProblem& problem, const BodyParams& params) {
    return evaluate_fit(problem, params, true).gradient;
}

/// Robust 2D reprojection term alone (Eq. 2 semantics).
inline double loss_j(const FitProblem& problem, const BodyParams& params) {
    FitProblem p2 = problem;
    p2.weights = FitWeights{problem.weights.rho_scale, 0, 0, 0, 0, 0};
    return loss_total(p2, params).raw_term(LossTerm::kJoint2D);
}

// ---------------------------------------------------------------------------
// Optimizer: per-parameter RMS-scaled gradient descent with monotone
// backtracking acceptance.
// ---------------------------------------------------------------------------

struct OptimizeConfig {
    int max_iters = 300;
    double init_step = 1e-2;
    double shrink = 0.5;
    double grow = 1.3;
    double max_step = 5e-2;
    double min_step = 1e-10;
    int divergence_limit = 20;  // consecutive iterations without an acceptable step
    double rms_decay = 0.9;
};

enum class OptimizeStatus { kConverged, kMaxIters, kStalled, kNumericError };

inline const char* optimize_status_name(OptimizeStatus s) {
    switch (s) {
        case OptimizeStatus::kConverged: return "converged";
        case OptimizeStatus::kMaxIters: return "max_iters";
        case OptimizeStatus::kStalled: return "stalled";
        case OptimizeStatus::kNumericError: return "numeric_error";
    }
    return "?";
}

struct IterationRecord {
    int iteration = 0;
    double loss = 0.0;
    std::array<double, kNumLossTerms> weighted{};
    double step = 0.0;
    bool accepted = false;
};

struct OptimizeResult {
    BodyParams params;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<IterationRecord> trace;
    OptimizeStatus status = OptimizeStatus::kMaxIters;
    std::vector<std::string> warnings;
};

inline OptimizeResult optimize(const FitProblem& problem, const OptimizeConfig& config = {}) {
    const BodyModel& model = *problem.model;
    OptimizeResult result;

    Eigen::VectorXd x = pack_params(model, problem.init);
    LossBreakdown cur = loss_total(problem, problem.init);
    result.initial_loss = cur.total;
    result.warnings = cur.warnings;

    Eigen::VectorXd best_x = x;
    double best_loss = cur.total;

    Eigen::VectorXd rms = Eigen::VectorXd::Zero(x.size());
    double step = config.init_step;
    int consecutive_failures = 0;
    const int n_beta = model.shape_count();

    for (int iter = 0; iter < config.max_iters; ++iter) {
        const GradientBreakdown grad = fit_gradient(problem, unpack_params(model, x));
        if (!grad.total.allFinite()) {
            for (const auto& w : grad.warnings) result.warnings.push_back(w);
            result.status = OptimizeStatus::kNumericError;
            break;
        }
        rms = config.rms_decay * rms + (1.0 - config.rms_decay) * grad.total.cwiseProduct(grad.total);
        const Eigen::VectorXd dir =
            grad.total.cwiseQuotient(rms.cwiseSqrt() + Eigen::VectorXd::Constant(x.size(), 1e-12));

        IterationRecord rec;
        rec.iteration = iter;
        bool accepted = false;
        for (double a = step; a >= config.min_step; a *= config.shrink) {
            Eigen::VectorXd cand = x - a * dir;
            // keep beta inside its sanity bound
            cand.head(n_beta) = cand.head(n_beta).cwiseMax(-10.0).cwiseMin(10.0);
            const LossBreakdown cand_loss = loss_total(problem, unpack_params(model, cand));
            if (cand_loss.total < cur.total) {
                x = cand;
                cur = cand_loss;
                step = std::min(a * config.grow, config.max_step);
                rec.step = a;
                accepted = true;
                break;
            }
        }
        rec.accepted = accepted;
        rec.loss = cur.total;
        rec.weighted = cur.weighted;
        result.trace.push_back(rec);

        if (cur.total < best_loss) {
            best_loss = cur.total;
            best_x = x;
        }
        if (!accepted) {
            ++consecutive_failures;
            step = std::max(step * config.shrink, config.min_step);
            if (consecutive_failures >= config.divergence_limit) {
                result.status = OptimizeStatus::kConverged;
                break;
            }
        } else {
            consecutive_failures = 0;
        }
    }

    result.params = unpack_params(model, best_x);
    result.final_loss = best_loss;
    return result;
}

}  // namespace meshfuse
