// meshfuse: LiDAR-camera human mesh fitting and semantic occupancy toolkit
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "meshfuse/body_model.hpp"
#include "meshfuse/geometry.hpp"

#include <map>
#include <set>
#include <vector>

namespace meshfuse {

/// One detected 2D joint with confidence in [0, 1].
struct Keypoint {
    int joint_id = 0;
    Vec2 position = Vec2::Zero();
    double confidence = 0.0;
};

struct Keypoints2D {
    std::vector<Keypoint> joints;

    void validate() const {
        for (const auto& k : joints) {
            if (!k.position.allFinite()) throw ConfigError("keypoints: non-finite position");
            if (k.confidence < 0.0 || k.confidence > 1.0)
                throw ConfigError("keypoints: confidence outside [0,1]");
        }
    }

    const Keypoint* find(int joint_id) const {
        for (const auto& k : joints)
            if (k.joint_id == joint_id) return &k;
        return nullptr;
    }
};

struct VisibilityConfig {
    double backface_threshold = 0.2;   // w in [-1, 1]
    double joint_conf_threshold = 0.6; // J_conf in [0, 1]

    void validate() const {
        if (backface_threshold < -1.0 || backface_threshold > 1.0)
            throw ConfigError("visibility: backface threshold outside [-1,1]");
        if (joint_conf_threshold < 0.0 || joint_conf_threshold > 1.0)
            throw ConfigError("visibility: joint confidence threshold outside [0,1]");
    }
};

struct FaceGeometry {
    Vec3 normal = Vec3::Zero();   // unit, from face winding order
    Vec3 centroid = Vec3::Zero();
    bool degenerate = false;      // zero-area face, excluded downstream
};

inline std::vector<FaceGeometry> face_normals_centroids(const TriangleMesh& mesh) {
    std::vector<FaceGeometry> out(mesh.faces.size());
    for (std::size_t i = 0; i < mesh.faces.size(); ++i) {
        const auto& f = mesh.faces[i];
        const Vec3& a = mesh.vertices[f[0]];
        const Vec3& b = mesh.vertices[f[1]];
        const Vec3& c = mesh.vertices[f[2]];
        out[i].centroid = (a + b + c) / 3.0;
        const Vec3 n = (b - a).cross(c - a);
        const double len = n.norm();
        if (len < 1e-12) {
            out[i].degenerate = true;
        } else {
            out[i].normal = n / len;
        }
    }
    return out;
}

/// Vertices belonging to at least one front-facing face: n_f . p_f < w with
/// p_f the unit direction from the camera center to the face centroid.
inline std::vector<int> backface_cull(const TriangleMesh& mesh, const CameraModel& camera, double w) {
    const Vec3 o = camera.center();
    const auto geo = face_normals_centroids(mesh);
    std::vector<char> keep(mesh.vertices.size(), 0);
    for (std::size_t i = 0; i < mesh.faces.size(); ++i) {
        if (geo[i].degenerate) continue;
        const Vec3 to_face = geo[i].centroid - o;
        const double len = to_face.norm();
        if (len < 1e-12) continue;
        if (geo[i].normal.dot(to_face / len) < w) {
            for (int vi : mesh.faces[i]) keep[vi] = 1;
        }
    }
    std::vector<int> front;
    for (std::size_t v = 0; v < keep.size(); ++v)
        if (keep[v]) front.push_back(static_cast<int>(v));
    return front;
}

/// Parts whose best associated keypoint confidence is strictly below J_conf.
/// Keypoints absent from the detection count as confidence 0.
inline std::set<int> occluded_parts(const Keypoints2D& keypoints,
                                    const std::map<int, std::vector<int>>& part_joint_sets,
                                    double joint_conf_threshold) {
    std::set<int> occluded;
    for (const auto& [part, joint_ids] : part_joint_sets) {
        if (joint_ids.empty()) throw ConfigError("visibility: part with empty joint set");
        double best = 0.0;
        for (int id : joint_ids) {
            const Keypoint* k = keypoints.find(id);
            if (k) best = std::max(best, k->confidence);
        }
        if (best < joint_conf_threshold) occluded.insert(part);
    }
    return occluded;
}

struct VisibilityResult {
    std::vector<int> visible;       // sorted vertex indices V
    std::set<int> occluded_parts;   // part ids removed by the keypoint filter
    bool empty() const { return visible.empty(); }
};

/// Final visible set: backface culling minus all vertices of occluded parts.
/// An empty result is valid (e.g. backface threshold -1) and flagged upstream.
inline VisibilityResult visible_set(const TriangleMesh& mesh, const CameraModel& camera,
                                    const Keypoints2D& keypoints,
                                    const std::map<int, std::vector<int>>& part_joint_sets,
                                    const VisibilityConfig& config) {
    config.validate();
    if (mesh.part_of_vertex.size() != mesh.vertices.size())
        throw ConfigError("visible_set: mesh lacks per-vertex part labels");
    VisibilityResult result;
    result.occluded_parts = occluded_parts(keypoints, part_joint_sets, config.joint_conf_threshold);
    for (int v : backface_cull(mesh, camera, config.backface_threshold))
        if (!result.occluded_parts.count(mesh.part_of_vertex[v])) result.visible.push_back(v);
    return result;
}

/// Model joints belonging to occluded parts; the Eq. 7 regularization set.
/// The root joint carries no local rotation here and is skipped.
inline std::vector<int> occluded_joints(const BodyModel& model, const std::set<int>& occluded_part_ids) {
    std::vector<int> joints;
    for (int j = 1; j < model.joint_count(); ++j)
        if (occluded_part_ids.count(model.part_of_joint[j])) joints.push_back(j);
    return joints;
}

}  // namespace meshfuse
