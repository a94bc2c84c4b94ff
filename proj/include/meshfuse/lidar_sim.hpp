// meshfuse: LiDAR-camera human mesh fitting and semantic occupancy toolkit
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "meshfuse/geometry.hpp"

#include <cstdint>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace meshfuse {

/// Ouster-style spinning sensor description. Angles in degrees, ranges in
/// meters, range noise in millimeters (matching the published table).
struct SensorSpec {
    std::string name;
    int vertical_channels = 1;
    int horizontal_channels = 1;
    double range_noise_bias_mm = 0.0;  // the +/- magnitude
    double range_noise_std_mm = 0.0;
    double angular_noise_mean_deg = 0.0;
    double angular_noise_std_deg = 0.0;
    double range_min_m = 0.5;
    double range_max_m = 90.0;
    double dropout_prob = 0.0;
    double vfov_min_deg = -22.5;
    double vfov_max_deg = 22.5;

    void validate() const {
        if (vertical_channels < 1 || horizontal_channels < 1)
            throw ConfigError("sensor: channel counts must be >= 1");
        if (dropout_prob < 0.0 || dropout_prob >= 1.0)
            throw ConfigError("sensor: dropout probability must be in [0,1)");
        if (!(range_min_m > 0.0) || !(range_max_m > range_min_m))
            throw ConfigError("sensor: need 0 < range_min < range_max");
        if (!(vfov_max_deg > vfov_min_deg)) throw ConfigError("sensor: empty vertical FOV");
    }
};

/// The three published virtual sensors. All share the same noise levels,
/// range limits and 10% dropout; only the angular resolution differs.
inline std::vector<SensorSpec> builtin_specs() {
    SensorSpec base;
    base.range_noise_bias_mm = 25.0;
    base.range_noise_std_mm = 10.0;
    base.angular_noise_mean_deg = 0.0;
    base.angular_noise_std_deg = 0.01;
    base.range_min_m = 0.5;
    base.range_max_m = 90.0;
    base.dropout_prob = 0.10;

    std::vector<SensorSpec> specs(3, base);
    specs[0].name = "Ouster-32";
    specs[0].vertical_channels = 32;
    specs[0].horizontal_channels = 512;
    specs[1].name = "Ouster-64";
    specs[1].vertical_channels = 64;
    specs[1].horizontal_channels = 1024;
    specs[2].name = "Ouster-128";
    specs[2].vertical_channels = 128;
    specs[2].horizontal_channels = 2048;
    return specs;
}

inline SensorSpec builtin_spec(const std::string& name) {
    for (const auto& s : builtin_specs())
        if (s.name == name) return s;
    throw ConfigError("unknown sensor spec: " + name);
}

// ---------------------------------------------------------------------------
// Counter-based RNG: one independent stream per (seed, row, col), so results
// do not depend on ray iteration order or thread schedule.
// ---------------------------------------------------------------------------

class RayRng {
public:
    RayRng(std::uint64_t seed, int row, int col) {
        state_ = mix(seed ^ mix(0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(row) + 1) +
                                0xBF58476D1CE4E5B9ULL * (static_cast<std::uint64_t>(col) + 1)));
    }

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        return mix(state_);
    }

    /// Uniform in (0, 1].
    double next_uniform() {
        return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    }

    /// Standard normal via Box-Muller (consumes two uniforms).
    double next_gaussian() {
        const double u1 = next_uniform();
        const double u2 = next_uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    /// Fair coin as +/-1.
    double next_sign() { return (next_u64() & 1) ? 1.0 : -1.0; }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9E3779B97F4A7C15ULL;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// Ray lattice and sweep generation
// ---------------------------------------------------------------------------

struct Ray {
    Vec3 origin;
    Vec3 dir;  // unit
    int row = 0;
    int col = 0;
};

struct Sweep {
    PointCloud points;                          // sensor frame
    std::vector<std::pair<int, int>> beam_ids;  // (row, col) per point
};

namespace detail {

/// Beam direction in the camera frame for elevation/azimuth in radians.
/// Camera convention: x right, y down, z forward; positive elevation is up.
inline Vec3 beam_direction(double elev_rad, double az_rad) {
    const double ce = std::cos(elev_rad);
    return {std::sin(az_rad) * ce, -std::sin(elev_rad), std::cos(az_rad) * ce};
}

inline double beam_elevation_deg(const SensorSpec& spec, int row) {
    const double span = spec.vfov_max_deg - spec.vfov_min_deg;
    return spec.vfov_min_deg + (row + 0.5) * span / spec.vertical_channels;
}

inline double beam_azimuth_deg(const SensorSpec& spec, int col) {
    return -180.0 + (col + 0.5) * 360.0 / spec.horizontal_channels;
}

constexpr double kDegToRad = M_PI / 180.0;

}  // namespace detail

/// Noise-free beam lattice restricted to the camera frustum. Rays originate
/// at the camera center (world frame); ordering is row-major by (row, col).
inline std::vector<Ray> generate_rays(const SensorSpec& spec, const CameraModel& camera) {
    spec.validate();
    if (camera.width <= 0 || camera.height <= 0) return {};
    camera.validate();
    const Vec3 origin = camera.center();
    const Mat3 cam_to_world = camera.pose.rotation.transpose();

    std::vector<Ray> rays;
    for (int row = 0; row < spec.vertical_channels; ++row) {
        const double elev = detail::beam_elevation_deg(spec, row) * detail::kDegToRad;
        for (int col = 0; col < spec.horizontal_channels; ++col) {
            const double az = detail::beam_azimuth_deg(spec, col) * detail::kDegToRad;
            const Vec3 dir_cam = detail::beam_direction(elev, az);
            if (!projects_inside_image(camera, dir_cam)) continue;
            rays.push_back({origin, cam_to_world * dir_cam, row, col});
        }
    }
    return rays;
}

/// Simulate one sweep: per kept beam, perturb the pointing direction, cast
/// against the mesh, apply signed range bias plus Gaussian range noise, and
/// drop points with the configured probability. Deterministic for a fixed
/// (spec, mesh, camera, seed) regardless of thread count; points are in the
/// sensor (camera) frame, ordered by (row, col).
inline Sweep simulate_sweep(const SensorSpec& spec, const TriangleMesh& mesh,
                            const CameraModel& camera, std::uint64_t seed, int threads = 1) {
    spec.validate();
    camera.validate();
    const Vec3 origin_world = camera.center();
    const Mat3 cam_to_world = camera.pose.rotation.transpose();
    const double bias_m = spec.range_noise_bias_mm * 1e-3;
    const double std_m = spec.range_noise_std_mm * 1e-3;

    struct Hit {
        Vec3 point_sensor;
        int row, col;
    };
    std::vector<std::vector<Hit>> per_row(spec.vertical_channels);

    auto process_row = [&](int row) {
        const double elev0 = detail::beam_elevation_deg(spec, row) * detail::kDegToRad;
        auto& hits = per_row[row];
        for (int col = 0; col < spec.horizontal_channels; ++col) {
            RayRng rng(seed, row, col);
            const double d_elev =
                (spec.angular_noise_mean_deg + spec.angular_noise_std_deg * rng.next_gaussian()) *
                detail::kDegToRad;
            const double d_az =
                (spec.angular_noise_mean_deg + spec.angular_noise_std_deg * rng.next_gaussian()) *
                detail::kDegToRad;
            const double az0 = detail::beam_azimuth_deg(spec, col) * detail::kDegToRad;
            const Vec3 dir_cam = detail::beam_direction(elev0 + d_elev, az0 + d_az);
            if (!projects_inside_image(camera, dir_cam)) continue;

            const Vec3 dir_world = cam_to_world * dir_cam;
            const auto t = ray_mesh_hit(origin_world, dir_world, mesh);
            if (!t || *t < spec.range_min_m || *t > spec.range_max_m) continue;

            double range = *t;
            if (bias_m != 0.0 || std_m != 0.0) {
                range += rng.next_sign() * bias_m + std_m * rng.next_gaussian();
                range = std::clamp(range, spec.range_min_m, spec.range_max_m);
            }
            if (spec.dropout_prob > 0.0 && rng.next_uniform() <= spec.dropout_prob) continue;

            hits.push_back({range * dir_cam, row, col});
        }
    };

    if (threads > 1) {
        std::vector<std::thread> pool;
        std::size_t next_row = 0;
        std::mutex m;
        for (int t = 0; t < threads; ++t)
            pool.emplace_back([&] {
                for (;;) {
                    std::size_t row;
                    {
                        std::lock_guard<std::mutex> lock(m);
                        if (next_row >= per_row.size()) return;
                        row = next_row++;
                    }
                    process_row(static_cast<int>(row));
                }
            });
        for (auto& th : pool) th.join();
    } else {
        for (int row = 0; row < spec.vertical_channels; ++row) process_row(row);
    }

    Sweep sweep;
    for (const auto& hits : per_row) {
        for (const auto& h : hits) {
            sweep.points.points.push_back(h.point_sensor);
            sweep.beam_ids.emplace_back(h.row, h.col);
        }
    }
    return sweep;
}

}  // namespace meshfuse
