// meshfuse: LiDAR-camera human mesh fitting and semantic occupancy toolkit
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "meshfuse/geometry.hpp"

#include <Eigen/Dense>

#include <map>
#include <set>
#include <utility>
#include <vector>

namespace meshfuse {

/// Parametric articulated body: shape blendshapes, joint regression,
/// kinematic chain and linear blend skinning.
///
/// Conventions: kinematic_parents[0] == -1 (single root), parents[j] < j.
/// Per-joint body rotations cover joints 1..J-1; the global rotation and
/// camera translation are applied after skinning.
struct BodyModel {
    Eigen::MatrixXd template_vertices;        // V x 3, meters
    std::vector<std::array<int, 3>> faces;    // F triangles
    std::vector<Eigen::MatrixXd> shape_dirs;  // B slices of V x 3
    Eigen::MatrixXd joint_regressor;          // J x V, rows sum to 1
    std::vector<int> kinematic_parents;       // length J, root = -1
    Eigen::MatrixXd skinning_weights;         // V x J, rows sum to 1
    std::vector<int> part_of_vertex;          // length V
    std::vector<int> part_of_joint;           // length J
    std::vector<int> keypoint_map;            // model joint -> detector joint id (-1: unmapped)

    /// Signed bending coordinate of one knee/elbow: sign * theta_body[joint][axis].
    struct Hinge {
        int joint = 0;
        int axis = 0;
        double sign = 1.0;
    };
    std::vector<Hinge> hinges;

    /// Detector joint ids informative for each body part.
    std::map<int, std::vector<int>> part_joint_sets;

    int vertex_count() const { return static_cast<int>(template_vertices.rows()); }
    int joint_count() const { return static_cast<int>(joint_regressor.rows()); }
    int shape_count() const { return static_cast<int>(shape_dirs.size()); }

    TriangleMesh mesh_with_vertices(const Eigen::MatrixXd& vertices) const {
        TriangleMesh m;
        m.vertices.reserve(vertices.rows());
        for (Eigen::Index i = 0; i < vertices.rows(); ++i) m.vertices.push_back(vertices.row(i));
        m.faces = faces;
        m.part_of_vertex = part_of_vertex;
        return m;
    }

    void validate() const {
        const int v = vertex_count();
        const int j = joint_count();
        if (joint_regressor.cols() != v) throw ConfigError("body model: regressor column count != V");
        if (skinning_weights.rows() != v || skinning_weights.cols() != j)
            throw ConfigError("body model: skinning weight shape mismatch");
        for (const auto& s : shape_dirs)
            if (s.rows() != v || s.cols() != 3) throw ConfigError("body model: shape_dirs slice shape mismatch");
        for (Eigen::Index r = 0; r < skinning_weights.rows(); ++r) {
            if (skinning_weights.row(r).minCoeff() < -1e-12)
                throw ConfigError("body model: negative skinning weight");
            if (std::abs(skinning_weights.row(r).sum() - 1.0) > 1e-6)
                throw ConfigError("body model: skinning weights row does not sum to 1");
        }
        for (Eigen::Index r = 0; r < joint_regressor.rows(); ++r)
            if (std::abs(joint_regressor.row(r).sum() - 1.0) > 1e-6)
                throw ConfigError("body model: joint regressor row does not sum to 1");
        if (static_cast<int>(kinematic_parents.size()) != j)
            throw ConfigError("body model: kinematic_parents size mismatch");
        if (j < 1 || kinematic_parents[0] != -1)
            throw ConfigError("body model: root joint must be index 0");
        for (int i = 1; i < j; ++i)
            if (kinematic_parents[i] < 0 || kinematic_parents[i] >= i)
                throw ConfigError("body model: parents must be topologically ordered");
        if (static_cast<int>(part_of_vertex.size()) != v || static_cast<int>(part_of_joint.size()) != j)
            throw ConfigError("body model: part id array size mismatch");
        if (static_cast<int>(keypoint_map.size()) != j)
            throw ConfigError("body model: keypoint_map size mismatch");
        for (const auto& h : hinges)
            if (h.joint <= 0 || h.joint >= j || h.axis < 0 || h.axis > 2)
                throw ConfigError("body model: invalid hinge designation");
        TriangleMesh m;
        m.vertices.assign(static_cast<std::size_t>(v), Vec3::Zero());
        m.faces = faces;
        m.validate();
    }
};

struct BodyParams {
    Eigen::VectorXd beta;
    AxisAngle theta_global;
    std::vector<AxisAngle> theta_body;  // joints 1..J-1
    Vec3 t_cam = Vec3::Zero();

    void validate(const BodyModel& model) const {
        if (beta.size() != model.shape_count()) throw ConfigError("params: beta length != B");
        if (static_cast<int>(theta_body.size()) != model.joint_count() - 1)
            throw ConfigError("params: theta_body length != J-1");
        if (!beta.allFinite() || !theta_global.v.allFinite() || !t_cam.allFinite())
            throw std::domain_error("params: non-finite entry");
        for (const auto& aa : theta_body)
            if (!aa.v.allFinite()) throw std::domain_error("params: non-finite theta_body entry");
        if (beta.size() > 0 && beta.cwiseAbs().maxCoeff() > 10.0)
            throw std::domain_error("params: |beta| exceeds sanity bound 10");
    }
};

/// template + sum_k beta_k * shape_dirs[k]
inline Eigen::MatrixXd shaped_template(const BodyModel& model, const Eigen::VectorXd& beta) {
    if (beta.size() != model.shape_count())
        throw std::invalid_argument("shaped_template: beta length mismatch");
    Eigen::MatrixXd v = model.template_vertices;
    for (int k = 0; k < model.shape_count(); ++k) v += beta[k] * model.shape_dirs[k];
    return v;
}

inline Eigen::MatrixXd regress_joints(const BodyModel& model, const Eigen::MatrixXd& shaped_vertices) {
    if (shaped_vertices.rows() != model.vertex_count() || shaped_vertices.cols() != 3)
        throw std::invalid_argument("regress_joints: vertex matrix shape mismatch");
    return model.joint_regressor * shaped_vertices;
}

/// Kinematic state before the global rotation/translation.
struct ForwardKinematics {
    Eigen::MatrixXd shaped;            // V x 3
    Eigen::MatrixXd rest_joints;       // J x 3
    std::vector<RigidTransform> world; // per-joint transform G_j
    Eigen::MatrixXd vertices_pre;      // V x 3, skinned
    Eigen::MatrixXd joints_pre;        // J x 3
};

inline ForwardKinematics forward_kinematics(const BodyModel& model, const BodyParams& params) {
    params.validate(model);
    ForwardKinematics fk;
    fk.shaped = shaped_template(model, params.beta);
    fk.rest_joints = regress_joints(model, fk.shaped);

    const int j_count = model.joint_count();
    fk.world.resize(j_count);
    fk.world[0] = {Mat3::Identity(), fk.rest_joints.row(0)};
    for (int j = 1; j < j_count; ++j) {
        const int p = model.kinematic_parents[j];
        const RigidTransform local{axis_angle_to_matrix(params.theta_body[j - 1]),
                                   Vec3(fk.rest_joints.row(j) - fk.rest_joints.row(p))};
        fk.world[j] = fk.world[p].compose(local);
    }

    fk.joints_pre.resize(j_count, 3);
    for (int j = 0; j < j_count; ++j) fk.joints_pre.row(j) = fk.world[j].translation;

    const int v_count = model.vertex_count();
    fk.vertices_pre.setZero(v_count, 3);
    for (int v = 0; v < v_count; ++v) {
        const Vec3 vs = fk.shaped.row(v);
        Vec3 acc = Vec3::Zero();
        for (int j = 0; j < j_count; ++j) {
            const double w = model.skinning_weights(v, j);
            if (w == 0.0) continue;
            acc += w * fk.world[j].apply(vs - Vec3(fk.rest_joints.row(j)));
        }
        fk.vertices_pre.row(v) = acc;
    }
    return fk;
}

struct PosedBody {
    Eigen::MatrixXd vertices;  // V x 3
    Eigen::MatrixXd joints;    // J x 3
};

/// Full forward map (beta, theta, t_cam) -> posed mesh and joints.
inline PosedBody pose_mesh(const BodyModel& model, const BodyParams& params) {
    const ForwardKinematics fk = forward_kinematics(model, params);
    const Mat3 r_glob = axis_angle_to_matrix(params.theta_global);
    PosedBody out;
    out.vertices = (fk.vertices_pre * r_glob.transpose()).rowwise() + params.t_cam.transpose();
    out.joints = (fk.joints_pre * r_glob.transpose()).rowwise() + params.t_cam.transpose();
    return out;
}

/// Unique undirected edges of the face list, lexicographically sorted.
inline std::vector<std::pair<int, int>> mesh_edges(const std::vector<std::array<int, 3>>& faces) {
    std::set<std::pair<int, int>> edges;
    for (const auto& f : faces) {
        for (int k = 0; k < 3; ++k) {
            int a = f[k], b = f[(k + 1) % 3];
            if (a == b) continue;
            if (a > b) std::swap(a, b);
            edges.insert({a, b});
        }
    }
    return {edges.begin(), edges.end()};
}

inline std::vector<std::pair<int, int>> mesh_edges(const BodyModel& model) {
    return mesh_edges(model.faces);
}

}  // namespace meshfuse
