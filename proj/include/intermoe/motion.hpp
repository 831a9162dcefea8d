#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "intermoe/tensor.hpp"

namespace intermoe {

inline constexpr int kFeatureWidth = 12;  // pos(3) + vel(3) + rot6d(6) per joint

// Skeleton as a rooted tree plus a hierarchy of joint-pooling levels.
// pooling_tree[l] lists the groups of level-l joints merged into one joint each;
// group order defines the pooled joint indices of the next level.
struct SkeletonTopology {
    int joint_count = 0;
    std::vector<std::pair<int, int>> edges;          // (parent, child)
    std::vector<std::vector<int>> neighbors;         // tree-adjacent joints, excluding self
    std::vector<std::vector<std::vector<int>>> pooling_tree;

    static SkeletonTopology from_edges(int joints, std::vector<std::pair<int, int>> e,
                                       std::vector<std::vector<std::vector<int>>> tree) {
        SkeletonTopology t;
        t.joint_count = joints;
        t.edges = std::move(e);
        t.pooling_tree = std::move(tree);
        t.neighbors.assign(joints, {});
        for (auto [p, c] : t.edges) {
            if (p < 0 || p >= joints || c < 0 || c >= joints)
                throw ConfigError("skeleton: edge (" + std::to_string(p) + "," + std::to_string(c) +
                                  ") out of range");
            t.neighbors[p].push_back(c);
            t.neighbors[c].push_back(p);
        }
        for (auto& nb : t.neighbors) std::sort(nb.begin(), nb.end());
        t.validate();
        return t;
    }

    // 9-joint toy figure: root, spine, head, two 2-joint arms, two legs.
    // Pooling: 9 -> 4 (torso+head, each arm, legs) -> 1.
    static SkeletonTopology toy9() {
        return from_edges(
            9, {{0, 1}, {1, 2}, {1, 3}, {3, 4}, {1, 5}, {5, 6}, {0, 7}, {0, 8}},
            {{{0, 1, 2}, {3, 4}, {5, 6}, {7, 8}}, {{0, 1, 2, 3}}});
    }

    int level_joints(int level) const {  // joints remaining after `level` pools
        int j = joint_count;
        for (int l = 0; l < level; ++l) j = static_cast<int>(pooling_tree.at(l).size());
        return j;
    }

    void validate() const {
        if (static_cast<int>(edges.size()) != joint_count - 1)
            throw ConfigError("skeleton: tree needs exactly J-1 edges");
        // connectivity from joint 0
        std::vector<bool> seen(joint_count, false);
        std::vector<int> stack = {0};
        seen[0] = true;
        while (!stack.empty()) {
            int j = stack.back();
            stack.pop_back();
            for (int n : neighbors[j])
                if (!seen[n]) {
                    seen[n] = true;
                    stack.push_back(n);
                }
        }
        for (int j = 0; j < joint_count; ++j)
            if (!seen[j]) throw ConfigError("skeleton: joint " + std::to_string(j) + " unreachable");
        // each pooling level partitions the previous level's joints
        int prev = joint_count;
        for (size_t l = 0; l < pooling_tree.size(); ++l) {
            std::vector<int> hits(prev, 0);
            for (const auto& group : pooling_tree[l]) {
                if (group.empty()) throw ConfigError("skeleton: empty pooling group");
                for (int s : group) {
                    if (s < 0 || s >= prev) throw ConfigError("skeleton: pooling source out of range");
                    ++hits[s];
                }
            }
            for (int s = 0; s < prev; ++s)
                if (hits[s] != 1)
                    throw ConfigError("skeleton: pooling level " + std::to_string(l) +
                                      " is not a partition (joint " + std::to_string(s) + ")");
            prev = static_cast<int>(pooling_tree[l].size());
        }
    }
};

// One person's clip: features[t, j, :] = (pos xyz, vel xyz, rot6d).
struct MotionSequence {
    Tensor<float> features;  // {T, J, 12}

    MotionSequence() = default;
    explicit MotionSequence(Tensor<float> f) : features(std::move(f)) {
        if (features.ndim() != 3 || features.dim(2) != kFeatureWidth)
            throw ShapeError("MotionSequence: need TxJx12, got " +
                             shape_to_string(features.shape));
    }
    static MotionSequence zeros(int frames, int joints) {
        return MotionSequence(Tensor<float>::zeros({frames, joints, kFeatureWidth}));
    }

    int frames() const { return features.dim(0); }
    int joints() const { return features.dim(1); }
    float& at(int t, int j, int c) {
        return features[(static_cast<int64_t>(t) * joints() + j) * kFeatureWidth + c];
    }
    float at(int t, int j, int c) const {
        return features[(static_cast<int64_t>(t) * joints() + j) * kFeatureWidth + c];
    }

    // vel[t] = pos[t] - pos[t-1]; vel[0] = 0.
    void fill_velocities_from_positions() {
        for (int t = 0; t < frames(); ++t)
            for (int j = 0; j < joints(); ++j)
                for (int c = 0; c < 3; ++c)
                    at(t, j, 3 + c) = t == 0 ? 0.0f : at(t, j, c) - at(t - 1, j, c);
    }
};

// [T x J x 12] -> [T x J*12], concatenating joint features in joint order.
inline Tensor<float> flatten_joints(const MotionSequence& m) {
    return m.features.reshaped({m.frames(), m.joints() * kFeatureWidth});
}

inline MotionSequence unflatten_joints(const Tensor<float>& flat, int joints) {
    if (flat.ndim() != 2 || flat.dim(1) != joints * kFeatureWidth)
        throw ShapeError("unflatten_joints: " + shape_to_string(flat.shape) + " with J=" +
                         std::to_string(joints));
    return MotionSequence(flat.reshaped({flat.dim(0), joints, kFeatureWidth}));
}

// ----------------------------- .mot file format -----------------------------
// "MOT1" magic, little-endian u32 T, J, d, then T*J*d little-endian float32.

namespace detail {

inline void put_u32_le(std::ostream& os, uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    os.write(b, 4);
}

inline bool get_u32_le(std::istream& is, uint32_t& v) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
    v = static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
        (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
    return true;
}

}  // namespace detail

inline void write_motion_file(const MotionSequence& m, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw MissingArtifactError("cannot open for write: " + path.string());
    os.write("MOT1", 4);
    detail::put_u32_le(os, static_cast<uint32_t>(m.frames()));
    detail::put_u32_le(os, static_cast<uint32_t>(m.joints()));
    detail::put_u32_le(os, static_cast<uint32_t>(kFeatureWidth));
    for (float f : m.features.data) detail::put_u32_le(os, std::bit_cast<uint32_t>(f));
    if (!os) throw MissingArtifactError("write failed: " + path.string());
}

inline MotionSequence read_motion_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingArtifactError("cannot open: " + path.string());
    char magic[4];
    if (!is.read(magic, 4) || std::string(magic, 4) != "MOT1")
        throw MotBadMagicError(path.string() + ": bad magic");
    uint32_t t, j, d;
    if (!detail::get_u32_le(is, t) || !detail::get_u32_le(is, j) || !detail::get_u32_le(is, d))
        throw MotTruncatedError(path.string() + ": truncated header");
    if (d != kFeatureWidth || t == 0 || j == 0)
        throw MotShapeError(path.string() + ": bad header T=" + std::to_string(t) + " J=" +
                            std::to_string(j) + " d=" + std::to_string(d));
    const uint64_t n = static_cast<uint64_t>(t) * j * d;
    Tensor<float> f = Tensor<float>::zeros(
        {static_cast<int>(t), static_cast<int>(j), static_cast<int>(d)});
    for (uint64_t i = 0; i < n; ++i) {
        uint32_t bits;
        if (!detail::get_u32_le(is, bits))
            throw MotTruncatedError(path.string() + ": payload ends after " + std::to_string(i) +
                                    " of " + std::to_string(n) + " values");
        f[static_cast<int64_t>(i)] = std::bit_cast<float>(bits);
    }
    char extra;
    if (is.read(&extra, 1))
        throw MotShapeError(path.string() + ": payload larger than header shape");
    return MotionSequence(std::move(f));
}

}  // namespace intermoe
