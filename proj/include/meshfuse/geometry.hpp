// meshfuse: LiDAR-camera human mesh fitting and semantic occupancy toolkit
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

namespace meshfuse {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Thrown on malformed inputs / configuration (CLI maps it to exit code 2).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Rigid transforms and rotation parameterizations
// ---------------------------------------------------------------------------

/// Proper rigid transform in SE(3): x -> rotation * x + translation.
struct RigidTransform {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    static RigidTransform identity() { return {}; }

    Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

    /// this ∘ other: other is applied first.
    RigidTransform compose(const RigidTransform& other) const {
        return {rotation * other.rotation, rotation * other.translation + translation};
    }

    RigidTransform inverse() const {
        Mat3 rt = rotation.transpose();
        return {rt, -(rt * translation)};
    }
};

inline bool is_rotation_matrix(const Mat3& r, double tol = 1e-6) {
    return (r * r.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
           std::abs(r.determinant() - 1.0) <= tol;
}

/// Validating constructor; rejects non-orthonormal / reflecting matrices.
inline RigidTransform make_rigid(const Mat3& rotation, const Vec3& translation, double tol = 1e-6) {
    if (!is_rotation_matrix(rotation, tol))
        throw std::domain_error("make_rigid: rotation matrix is not orthonormal with det +1");
    return {rotation, translation};
}

/// Rotation as angle * unit axis (radians). Zero vector is the identity.
struct AxisAngle {
    Vec3 v = Vec3::Zero();

    AxisAngle() = default;
    explicit AxisAngle(const Vec3& vec) : v(vec) {}
    AxisAngle(double x, double y, double z) : v(x, y, z) {}

    double angle() const { return v.norm(); }
};

inline Mat3 skew(const Vec3& v) {
    Mat3 s;
    s << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
    return s;
}

/// Rodrigues formula with a Taylor fallback near zero.
inline Mat3 axis_angle_to_matrix(const AxisAngle& aa) {
    const double phi = aa.angle();
    const Mat3 k = skew(aa.v);
    if (phi < 1e-8) {
        return Mat3::Identity() + k + 0.5 * (k * k);
    }
    const double a = std::sin(phi) / phi;
    const double b = (1.0 - std::cos(phi)) / (phi * phi);
    return Mat3::Identity() + a * k + b * (k * k);
}

/// Unit quaternion (w, x, y, z); q and -q act identically.
struct UnitQuaternion {
    double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

    double dot(const UnitQuaternion& o) const { return w * o.w + x * o.x + y * o.y + z * o.z; }
    double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
};

/// Shepperd's method: stable across all rotation angles.
inline UnitQuaternion matrix_to_quaternion(const Mat3& m, double tol = 1e-6) {
    if (!is_rotation_matrix(m, tol))
        throw std::domain_error("matrix_to_quaternion: input is not a rotation matrix");
    UnitQuaternion q;
    const double tr = m.trace();
    if (tr > 0.0) {
        double s = std::sqrt(tr + 1.0) * 2.0;
        q.w = 0.25 * s;
        q.x = (m(2, 1) - m(1, 2)) / s;
        q.y = (m(0, 2) - m(2, 0)) / s;
        q.z = (m(1, 0) - m(0, 1)) / s;
    } else if (m(0, 0) > m(1, 1) && m(0, 0) > m(2, 2)) {
        double s = std::sqrt(1.0 + m(0, 0) - m(1, 1) - m(2, 2)) * 2.0;
        q.w = (m(2, 1) - m(1, 2)) / s;
        q.x = 0.25 * s;
        q.y = (m(0, 1) + m(1, 0)) / s;
        q.z = (m(0, 2) + m(2, 0)) / s;
    } else if (m(1, 1) > m(2, 2)) {
        double s = std::sqrt(1.0 + m(1, 1) - m(0, 0) - m(2, 2)) * 2.0;
        q.w = (m(0, 2) - m(2, 0)) / s;
        q.x = (m(0, 1) + m(1, 0)) / s;
        q.y = 0.25 * s;
        q.z = (m(1, 2) + m(2, 1)) / s;
    } else {
        double s = std::sqrt(1.0 + m(2, 2) - m(0, 0) - m(1, 1)) * 2.0;
        q.w = (m(1, 0) - m(0, 1)) / s;
        q.x = (m(0, 2) + m(2, 0)) / s;
        q.y = (m(1, 2) + m(2, 1)) / s;
        q.z = 0.25 * s;
    }
    const double n = q.norm();
    q.w /= n; q.x /= n; q.y /= n; q.z /= n;
    return q;
}

inline Mat3 quaternion_to_matrix(const UnitQuaternion& q) {
    const double w = q.w, x = q.x, y = q.y, z = q.z;
    Mat3 m;
    m << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return m;
}

inline UnitQuaternion axis_angle_to_quaternion(const AxisAngle& aa) {
    const double phi = aa.angle();
    // s = sin(phi/2)/phi, Taylor near zero.
    const double s = phi < 1e-8 ? 0.5 - phi * phi / 48.0 : std::sin(0.5 * phi) / phi;
    UnitQuaternion q;
    q.w = std::cos(0.5 * phi);
    q.x = s * aa.v.x();
    q.y = s * aa.v.y();
    q.z = s * aa.v.z();
    return q;
}

inline AxisAngle matrix_to_axis_angle(const Mat3& m, double tol = 1e-6) {
    const UnitQuaternion q = matrix_to_quaternion(m, tol);
    const double vn = std::sqrt(q.x * q.x + q.y * q.y + q.z * q.z);
    const double w = std::clamp(q.w, -1.0, 1.0);
    double angle = 2.0 * std::atan2(vn, w);
    if (vn < 1e-12) return AxisAngle();
    if (angle > M_PI) angle -= 2.0 * M_PI;  // keep |angle| <= pi
    return AxisAngle(Vec3(q.x, q.y, q.z) * (angle / vn));
}

/// d(R(theta) * x)/d theta, 3x3 (Gallego & Yezzi closed form, identity fallback).
inline Mat3 axis_angle_rotate_jacobian(const AxisAngle& aa, const Vec3& x) {
    const double phi = aa.angle();
    if (phi < 1e-7) {
        // R ≈ I + [theta]x : d(theta × x)/d theta = -[x]x
        return -skew(x);
    }
    const Mat3 r = axis_angle_to_matrix(aa);
    const Vec3 rx = r * x;
    const Mat3 tk = skew(aa.v);
    Mat3 j;
    for (int i = 0; i < 3; ++i) {
        const Vec3 ei = Vec3::Unit(i);
        const Mat3 di = (aa.v[i] * tk + skew(aa.v.cross((Mat3::Identity() - r) * ei))) / (phi * phi);
        j.col(i) = di * rx;
    }
    return j;
}

/// d(quaternion(theta))/d theta as a 4x3 block [dw; dx; dy; dz].
inline Eigen::Matrix<double, 4, 3> axis_angle_quaternion_jacobian(const AxisAngle& aa) {
    const double phi = aa.angle();
    Eigen::Matrix<double, 4, 3> j;
    double s, dsdphi_over_phi;  // s = sin(phi/2)/phi
    if (phi < 1e-6) {
        s = 0.5 - phi * phi / 48.0;
        dsdphi_over_phi = -1.0 / 24.0;
    } else {
        s = std::sin(0.5 * phi) / phi;
        dsdphi_over_phi = (0.5 * std::cos(0.5 * phi) - s) / (phi * phi);
    }
    j.row(0) = -0.5 * s * aa.v.transpose();
    j.bottomRows<3>() = s * Mat3::Identity() + dsdphi_over_phi * (aa.v * aa.v.transpose());
    return j;
}

// ---------------------------------------------------------------------------
// Camera and projection
// ---------------------------------------------------------------------------

/// Pinhole camera. pose maps world coordinates into the camera frame.
struct CameraModel {
    double fx = 1.0, fy = 1.0;
    double cx = 0.0, cy = 0.0;
    int width = 0, height = 0;
    RigidTransform pose;  // world -> camera

    /// Camera center expressed in world coordinates.
    Vec3 center() const { return pose.inverse().translation; }

    void validate() const {
        if (!(fx > 0.0) || !(fy > 0.0)) throw ConfigError("camera: fx, fy must be positive");
        if (width <= 0 || height <= 0) throw ConfigError("camera: width, height must be positive");
    }
};

/// Pinhole projection of a camera-frame point; requires positive depth.
inline Vec2 project(const CameraModel& cam, const Vec3& point_cam) {
    if (!(point_cam.z() > 0.0))
        throw std::domain_error("project: point has non-positive depth");
    return {cam.fx * point_cam.x() / point_cam.z() + cam.cx,
            cam.fy * point_cam.y() / point_cam.z() + cam.cy};
}

inline bool projects_inside_image(const CameraModel& cam, const Vec3& point_cam) {
    if (!(point_cam.z() > 0.0)) return false;
    const double u = cam.fx * point_cam.x() / point_cam.z() + cam.cx;
    const double v = cam.fy * point_cam.y() / point_cam.z() + cam.cy;
    return u >= 0.0 && u < cam.width && v >= 0.0 && v < cam.height;
}

// ---------------------------------------------------------------------------
// Meshes and point clouds
// ---------------------------------------------------------------------------

struct TriangleMesh {
    std::vector<Vec3> vertices;
    std::vector<std::array<int, 3>> faces;
    std::vector<int> part_of_vertex;  // empty or one part id per vertex

    void validate() const {
        const int v = static_cast<int>(vertices.size());
        for (const auto& f : faces) {
            for (int idx : f)
                if (idx < 0 || idx >= v) throw ConfigError("mesh: face index out of range");
            if (f[0] == f[1] && f[1] == f[2]) throw ConfigError("mesh: degenerate face (repeated indices)");
        }
        if (!part_of_vertex.empty() && part_of_vertex.size() != vertices.size())
            throw ConfigError("mesh: part_of_vertex size mismatch");
    }
};

struct PointCloud {
    std::vector<Vec3> points;
    std::vector<int> labels;     // empty, or one class id per point
    std::vector<int> instances;  // empty, or one instance id per point

    std::size_t size() const { return points.size(); }
    bool has_labels() const { return !labels.empty(); }
    bool has_instances() const { return !instances.empty(); }
};

// ---------------------------------------------------------------------------
// Ray-triangle intersection
// ---------------------------------------------------------------------------

/// Smallest positive hit distance of a unit ray against one triangle.
/// Edges are inclusive; hits closer than 1e-9 m are ignored.
inline std::optional<double> ray_triangle_hit(const Vec3& origin, const Vec3& dir,
                                              const Vec3& a, const Vec3& b, const Vec3& c) {
    if (std::abs(dir.norm() - 1.0) > 1e-9)
        throw std::invalid_argument("ray_triangle_hit: direction must be unit length");
    constexpr double kHitEps = 1e-9;   // minimum accepted distance (meters)
    constexpr double kEdgeEps = 1e-12; // inclusive-edge slack on barycentrics

    const Vec3 e1 = b - a;
    const Vec3 e2 = c - a;
    const Vec3 pvec = dir.cross(e2);
    const double det = e1.dot(pvec);
    if (std::abs(det) < 1e-14) return std::nullopt;  // parallel or degenerate

    const double inv_det = 1.0 / det;
    const Vec3 tvec = origin - a;
    const double u = tvec.dot(pvec) * inv_det;
    if (u < -kEdgeEps || u > 1.0 + kEdgeEps) return std::nullopt;

    const Vec3 qvec = tvec.cross(e1);
    const double v = dir.dot(qvec) * inv_det;
    if (v < -kEdgeEps || u + v > 1.0 + kEdgeEps) return std::nullopt;

    const double t = e2.dot(qvec) * inv_det;
    if (t <= kHitEps) return std::nullopt;
    return t;
}

/// Closest hit of a ray against a whole mesh (linear scan).
inline std::optional<double> ray_mesh_hit(const Vec3& origin, const Vec3& dir, const TriangleMesh& mesh) {
    std::optional<double> best;
    for (const auto& f : mesh.faces) {
        auto t = ray_triangle_hit(origin, dir, mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
        if (t && (!best || *t < *best)) best = t;
    }
    return best;
}

// ---------------------------------------------------------------------------
// Voxel grid geometry
// ---------------------------------------------------------------------------

/// Axis-aligned grid specification. Bounds must be commensurate with the
/// resolution: counts = round((max - min)/res) within 1e-9 per axis.
/// Cell index convention: i = floor((x - min)/res); a coordinate exactly on
/// the max boundary belongs to the last cell.
struct GridSpec {
    Vec3 min = Vec3::Zero();
    Vec3 max = Vec3::Ones();
    double resolution = 1.0;

    Eigen::Vector3i cell_counts() const {
        if (!(resolution > 0.0)) throw ConfigError("grid: resolution must be positive");
        Eigen::Vector3i n;
        for (int a = 0; a < 3; ++a) {
            const double extent = max[a] - min[a];
            if (!(extent > 0.0)) throw ConfigError("grid: max must exceed min on every axis");
            const double cells = extent / resolution;
            const double rounded = std::round(cells);
            if (std::abs(cells - rounded) > 1e-9 * std::max(1.0, rounded) || rounded < 1.0)
                throw ConfigError("grid: bounds are not commensurate with the resolution");
            n[a] = static_cast<int>(rounded);
        }
        return n;
    }

    std::optional<Eigen::Vector3i> cell_of(const Vec3& p) const {
        const Eigen::Vector3i n = cell_counts();
        Eigen::Vector3i c;
        for (int a = 0; a < 3; ++a) {
            if (p[a] < min[a] || p[a] > max[a]) return std::nullopt;
            int i = static_cast<int>(std::floor((p[a] - min[a]) / resolution));
            if (i >= n[a]) i = n[a] - 1;  // exact max boundary -> last cell
            if (i < 0) i = 0;
            c[a] = i;
        }
        return c;
    }

    std::int64_t linear_index(const Eigen::Vector3i& c) const {
        const Eigen::Vector3i n = cell_counts();
        return (static_cast<std::int64_t>(c.x()) * n.y() + c.y()) * n.z() + c.z();
    }

    Eigen::Vector3i from_linear(std::int64_t idx) const {
        const Eigen::Vector3i n = cell_counts();
        Eigen::Vector3i c;
        c.z() = static_cast<int>(idx % n.z());
        idx /= n.z();
        c.y() = static_cast<int>(idx % n.y());
        c.x() = static_cast<int>(idx / n.y());
        return c;
    }

    Vec3 cell_center(const Eigen::Vector3i& c) const {
        return min + (c.cast<double>() + Vec3::Constant(0.5)) * resolution;
    }
};

namespace detail {

/// Clip segment p + t*(q-p), t in [0,1] against the grid AABB.
inline bool clip_segment(const GridSpec& g, const Vec3& p, const Vec3& q, double& t0, double& t1) {
    t0 = 0.0;
    t1 = 1.0;
    const Vec3 d = q - p;
    for (int a = 0; a < 3; ++a) {
        if (std::abs(d[a]) < 1e-15) {
            if (p[a] < g.min[a] || p[a] > g.max[a]) return false;
            continue;
        }
        double ta = (g.min[a] - p[a]) / d[a];
        double tb = (g.max[a] - p[a]) / d[a];
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
        if (t0 > t1) return false;
    }
    return true;
}

}  // namespace detail

/// Every cell the segment [origin, end] passes through, ordered from the
/// origin, each exactly once (Amanatides-Woo traversal, clipped to bounds).
inline std::vector<Eigen::Vector3i> traverse_voxels(const Vec3& origin, const Vec3& end, const GridSpec& grid) {
    std::vector<Eigen::Vector3i> out;
    const Eigen::Vector3i n = grid.cell_counts();

    double t0, t1;
    if (!detail::clip_segment(grid, origin, end, t0, t1)) return out;

    const Vec3 d = end - origin;
    const Vec3 start = origin + t0 * d;
    const Vec3 stop = origin + t1 * d;

    auto cs = grid.cell_of(start);
    auto ce = grid.cell_of(stop);
    if (!cs || !ce) return out;  // numeric edge: clipped point drifted outside

    Eigen::Vector3i cur = *cs;
    out.push_back(cur);
    if (cur == *ce) return out;

    Eigen::Vector3i step = Eigen::Vector3i::Zero();
    Vec3 t_max = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 t_delta = Vec3::Constant(std::numeric_limits<double>::infinity());
    for (int a = 0; a < 3; ++a) {
        if (d[a] > 1e-15) {
            step[a] = 1;
            const double boundary = grid.min[a] + (cur[a] + 1) * grid.resolution;
            t_max[a] = (boundary - origin[a]) / d[a];
            t_delta[a] = grid.resolution / d[a];
        } else if (d[a] < -1e-15) {
            step[a] = -1;
            const double boundary = grid.min[a] + cur[a] * grid.resolution;
            t_max[a] = (boundary - origin[a]) / d[a];
            t_delta[a] = -grid.resolution / d[a];
        }
    }

    const std::int64_t max_steps = static_cast<std::int64_t>(n.x()) + n.y() + n.z() + 3;
    for (std::int64_t i = 0; i < max_steps; ++i) {
        int axis = 0;
        if (t_max[1] < t_max[axis]) axis = 1;
        if (t_max[2] < t_max[axis]) axis = 2;
        cur[axis] += step[axis];
        if (cur[axis] < 0 || cur[axis] >= n[axis]) break;
        t_max[axis] += t_delta[axis];
        out.push_back(cur);
        if (cur == *ce) break;
    }
    return out;
}

}  // namespace meshfuse
