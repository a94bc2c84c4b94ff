// meshfuse: LiDAR-camera human mesh fitting and semantic occupancy toolkit
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "meshfuse/body_model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <string>

namespace meshfuse {

static_assert(std::endian::native == std::endian::little,
              "archive I/O assumes a little-endian host");

namespace detail {

class BinaryWriter {
public:
    explicit BinaryWriter(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) throw ConfigError("cannot open for writing: " + path);
    }
    template <typename T>
    void write(const T& v) {
        static_assert(std::is_trivially_copyable_v<T>);
        out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
    }
    void write_bytes(const void* p, std::size_t n) {
        out_.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
    }
    void write_f64s(const double* p, std::size_t n) { write_bytes(p, n * sizeof(double)); }
    bool good() const { return out_.good(); }

private:
    std::ofstream out_;
};

class BinaryReader {
public:
    explicit BinaryReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
        if (!in_) throw ConfigError("cannot open: " + path);
    }
    template <typename T>
    T read() {
        static_assert(std::is_trivially_copyable_v<T>);
        T v{};
        in_.read(reinterpret_cast<char*>(&v), sizeof(T));
        if (!in_) throw ConfigError("truncated file: " + path_);
        return v;
    }
    void read_bytes(void* p, std::size_t n) {
        in_.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n));
        if (!in_) throw ConfigError("truncated file: " + path_);
    }
    void read_f64s(double* p, std::size_t n) { read_bytes(p, n * sizeof(double)); }

private:
    std::ifstream in_;
    std::string path_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// BMA1 body-model archive
//
// Little-endian layout:
//   magic "BMA1" | u32 version=1 | u32 V,F,J,B,n_hinges,n_part_sets
//   f64 template[V*3] | u32 faces[F*3] | f64 shape_dirs[B][V*3]
//   f64 joint_regressor[J*V] | i32 parents[J] | f64 skinning[V*J]
//   u16 part_of_vertex[V] | u16 part_of_joint[J] | i32 keypoint_map[J]
//   n_hinges x { u32 joint, u32 axis, f64 sign }
//   n_part_sets x { u32 part, u32 count, i32 ids[count] }
// ---------------------------------------------------------------------------

inline void save_body_model(const std::string& path, const BodyModel& model) {
    model.validate();
    detail::BinaryWriter w(path);
    w.write_bytes("BMA1", 4);
    w.write<std::uint32_t>(1);
    const auto v = static_cast<std::uint32_t>(model.vertex_count());
    const auto f = static_cast<std::uint32_t>(model.faces.size());
    const auto j = static_cast<std::uint32_t>(model.joint_count());
    const auto b = static_cast<std::uint32_t>(model.shape_count());
    w.write(v);
    w.write(f);
    w.write(j);
    w.write(b);
    w.write(static_cast<std::uint32_t>(model.hinges.size()));
    w.write(static_cast<std::uint32_t>(model.part_joint_sets.size()));

    // Eigen defaults to column-major; serialize row-major explicitly.
    auto write_matrix = [&](const Eigen::MatrixXd& m) {
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) w.write<double>(m(r, c));
    };
    write_matrix(model.template_vertices);
    for (const auto& face : model.faces)
        for (int idx : face) w.write(static_cast<std::uint32_t>(idx));
    for (const auto& s : model.shape_dirs) write_matrix(s);
    write_matrix(model.joint_regressor);
    for (int p : model.kinematic_parents) w.write(static_cast<std::int32_t>(p));
    write_matrix(model.skinning_weights);
    for (int p : model.part_of_vertex) w.write(static_cast<std::uint16_t>(p));
    for (int p : model.part_of_joint) w.write(static_cast<std::uint16_t>(p));
    for (int k : model.keypoint_map) w.write(static_cast<std::int32_t>(k));
    for (const auto& h : model.hinges) {
        w.write(static_cast<std::uint32_t>(h.joint));
        w.write(static_cast<std::uint32_t>(h.axis));
        w.write<double>(h.sign);
    }
    for (const auto& [part, joints] : model.part_joint_sets) {
        w.write(static_cast<std::uint32_t>(part));
        w.write(static_cast<std::uint32_t>(joints.size()));
        for (int id : joints) w.write(static_cast<std::int32_t>(id));
    }
    if (!w.good()) throw ConfigError("write failed: " + path);
}

inline BodyModel load_body_model(const std::string& path) {
    detail::BinaryReader r(path);
    char magic[4];
    r.read_bytes(magic, 4);
    if (std::memcmp(magic, "BMA1", 4) != 0) throw ConfigError("not a BMA1 archive: " + path);
    if (r.read<std::uint32_t>() != 1) throw ConfigError("unsupported BMA1 version: " + path);

    const auto v = r.read<std::uint32_t>();
    const auto f = r.read<std::uint32_t>();
    const auto j = r.read<std::uint32_t>();
    const auto b = r.read<std::uint32_t>();
    const auto n_hinges = r.read<std::uint32_t>();
    const auto n_sets = r.read<std::uint32_t>();
    if (v == 0 || j == 0 || v > 10'000'000 || j > 10'000)
        throw ConfigError("implausible BMA1 header: " + path);

    BodyModel m;
    auto read_matrix = [&](Eigen::Index rows, Eigen::Index cols) {
        Eigen::MatrixXd mat(rows, cols);
        for (Eigen::Index rr = 0; rr < rows; ++rr)
            for (Eigen::Index cc = 0; cc < cols; ++cc) mat(rr, cc) = r.read<double>();
        return mat;
    };
    m.template_vertices = read_matrix(v, 3);
    m.faces.resize(f);
    for (auto& face : m.faces)
        for (int k = 0; k < 3; ++k) face[k] = static_cast<int>(r.read<std::uint32_t>());
    m.shape_dirs.reserve(b);
    for (std::uint32_t k = 0; k < b; ++k) m.shape_dirs.push_back(read_matrix(v, 3));
    m.joint_regressor = read_matrix(j, v);
    m.kinematic_parents.resize(j);
    for (auto& p : m.kinematic_parents) p = r.read<std::int32_t>();
    m.skinning_weights = read_matrix(v, j);
    m.part_of_vertex.resize(v);
    for (auto& p : m.part_of_vertex) p = r.read<std::uint16_t>();
    m.part_of_joint.resize(j);
    for (auto& p : m.part_of_joint) p = r.read<std::uint16_t>();
    m.keypoint_map.resize(j);
    for (auto& k : m.keypoint_map) k = r.read<std::int32_t>();
    m.hinges.resize(n_hinges);
    for (auto& h : m.hinges) {
        h.joint = static_cast<int>(r.read<std::uint32_t>());
        h.axis = static_cast<int>(r.read<std::uint32_t>());
        h.sign = r.read<double>();
    }
    for (std::uint32_t s = 0; s < n_sets; ++s) {
        const int part = static_cast<int>(r.read<std::uint32_t>());
        const auto count = r.read<std::uint32_t>();
        std::vector<int> ids(count);
        for (auto& id : ids) id = r.read<std::int32_t>();
        m.part_joint_sets[part] = std::move(ids);
    }
    m.validate();
    return m;
}

// ---------------------------------------------------------------------------
// Toy model: a blocky six-joint humanoid (64 vertices, 96 faces, 4 shape
// coefficients). Ships with tests because the production body asset is
// license-restricted.
// ---------------------------------------------------------------------------

namespace detail {

struct ToyBox {
    Vec3 center;
    Vec3 half;
    int part;
    // per-corner skinning: joint -> weight, selected by corner predicate
    std::array<std::pair<int, double>, 2> skin_lo;  // predicate false
    std::array<std::pair<int, double>, 2> skin_hi;  // predicate true
    int pred_axis;  // corner bit axis selecting skin_hi
};

}  // namespace detail

inline BodyModel make_toy_model() {
    using detail::ToyBox;
    // Joint ids: 0 pelvis (root), 1 chest, 2 head, 3 left elbow,
    // 4 right elbow, 5 knee. Parts: 0 torso, 1 head, 2 left arm,
    // 3 right arm, 4 legs.
    const std::vector<ToyBox> boxes = {
        {{0.0, 1.10, 0.0}, {0.16, 0.21, 0.09}, 0, {{{0, 0.7}, {1, 0.3}}}, {{{0, 0.3}, {1, 0.7}}}, 1},
        {{0.0, 1.62, 0.0}, {0.09, 0.11, 0.09}, 1, {{{2, 1.0}, {-1, 0.0}}}, {{{2, 1.0}, {-1, 0.0}}}, 1},
        {{0.255, 1.35, 0.0}, {0.095, 0.05, 0.05}, 2, {{{1, 1.0}, {-1, 0.0}}}, {{{1, 0.6}, {3, 0.4}}}, 0},
        {{0.485, 1.35, 0.0}, {0.135, 0.045, 0.045}, 2, {{{3, 1.0}, {-1, 0.0}}}, {{{3, 1.0}, {-1, 0.0}}}, 0},
        {{-0.255, 1.35, 0.0}, {0.095, 0.05, 0.05}, 3, {{{1, 0.6}, {4, 0.4}}}, {{{1, 1.0}, {-1, 0.0}}}, 0},
        {{-0.485, 1.35, 0.0}, {0.135, 0.045, 0.045}, 3, {{{4, 1.0}, {-1, 0.0}}}, {{{4, 1.0}, {-1, 0.0}}}, 0},
        {{0.0, 0.725, 0.0}, {0.12, 0.225, 0.08}, 4, {{{0, 0.6}, {5, 0.4}}}, {{{0, 1.0}, {-1, 0.0}}}, 1},
        {{0.0, 0.275, 0.0}, {0.10, 0.225, 0.07}, 4, {{{5, 1.0}, {-1, 0.0}}}, {{{5, 1.0}, {-1, 0.0}}}, 1},
    };
    constexpr int kJoints = 6;
    // Triangles of one box over corner ids dx*4 + dy*2 + dz, outward winding.
    static const int kBoxTris[12][3] = {{0, 1, 3}, {0, 3, 2}, {4, 6, 7}, {4, 7, 5},
                                        {0, 4, 5}, {0, 5, 1}, {2, 3, 7}, {2, 7, 6},
                                        {0, 2, 6}, {0, 6, 4}, {1, 5, 7}, {1, 7, 3}};

    const int v_count = static_cast<int>(boxes.size()) * 8;
    BodyModel m;
    m.template_vertices.resize(v_count, 3);
    m.skinning_weights.setZero(v_count, kJoints);
    m.part_of_vertex.resize(v_count);

    int vi = 0;
    for (const auto& box : boxes) {
        const int base = vi;
        for (int corner = 0; corner < 8; ++corner) {
            const int dx = (corner >> 2) & 1, dy = (corner >> 1) & 1, dz = corner & 1;
            const Vec3 sign(2 * dx - 1, 2 * dy - 1, 2 * dz - 1);
            m.template_vertices.row(vi) = box.center + sign.cwiseProduct(box.half);
            m.part_of_vertex[vi] = box.part;
            const int bit = (corner >> (2 - box.pred_axis)) & 1;
            const auto& skin = bit ? box.skin_hi : box.skin_lo;
            for (const auto& [joint, weight] : skin)
                if (joint >= 0 && weight > 0.0) m.skinning_weights(vi, joint) = weight;
            ++vi;
        }
        for (const auto& tri : kBoxTris)
            m.faces.push_back({base + tri[0], base + tri[1], base + tri[2]});
    }

    // Joint regression: uniform averages of designated corner sets.
    m.joint_regressor.setZero(kJoints, v_count);
    auto set_row = [&](int joint, int box, std::initializer_list<int> corners) {
        for (int c : corners) m.joint_regressor(joint, box * 8 + c) = 1.0 / static_cast<double>(corners.size());
    };
    set_row(0, 0, {0, 1, 4, 5});  // pelvis: torso bottom
    set_row(1, 0, {2, 3, 6, 7});  // chest: torso top
    set_row(2, 1, {0, 1, 2, 3, 4, 5, 6, 7});
    set_row(3, 3, {0, 1, 2, 3});  // left elbow: forearm inner face
    set_row(4, 5, {4, 5, 6, 7});  // right elbow
    set_row(5, 7, {2, 3, 6, 7});  // knee: lower-leg top face

    m.kinematic_parents = {-1, 0, 1, 1, 1, 0};
    m.part_of_joint = {0, 0, 1, 2, 3, 4};
    m.keypoint_map = {0, 1, 2, 3, 4, 5};
    m.part_joint_sets = {{0, {0, 1}}, {1, {2}}, {2, {3}}, {3, {4}}, {4, {5}}};
    m.hinges = {{3, 1, 1.0}, {4, 1, -1.0}, {5, 0, 1.0}};

    // Shape directions: height about the pelvis, girth, arm length, leg length.
    const double pelvis_y = 0.89;
    Eigen::MatrixXd height = Eigen::MatrixXd::Zero(v_count, 3);
    Eigen::MatrixXd girth = Eigen::MatrixXd::Zero(v_count, 3);
    Eigen::MatrixXd arms = Eigen::MatrixXd::Zero(v_count, 3);
    Eigen::MatrixXd legs = Eigen::MatrixXd::Zero(v_count, 3);
    for (int i = 0; i < v_count; ++i) {
        const Vec3 p = m.template_vertices.row(i);
        height(i, 1) = (p.y() - pelvis_y) * 0.1;
        girth(i, 0) = p.x() * 0.1;
        girth(i, 2) = p.z() * 0.1;
        if (std::abs(p.x()) > 0.16)
            arms(i, 0) = (p.x() > 0 ? 1.0 : -1.0) * (std::abs(p.x()) - 0.16) * 0.2;
        if (p.y() < 0.95) legs(i, 1) = (p.y() - 0.95) * 0.15;
    }
    m.shape_dirs = {height, girth, arms, legs};

    m.validate();
    return m;
}

}  // namespace meshfuse
