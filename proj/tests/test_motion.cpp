#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "intermoe/corpus.hpp"
#include "intermoe/motion.hpp"
#include "intermoe/text.hpp"

using namespace intermoe;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    auto p = fs::temp_directory_path() / ("intermoe_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

MotionSequence random_motion(int T, int J, uint64_t seed) {
    auto rng = make_rng(seed);
    return MotionSequence(Tensor<float>::uniform({T, J, kFeatureWidth}, rng, -2.0f, 2.0f));
}

}  // namespace

TEST_CASE("toy skeleton is a valid tree with 9->4->1 pooling") {
    auto topo = SkeletonTopology::toy9();
    REQUIRE(topo.joint_count == 9);
    REQUIRE(topo.level_joints(0) == 9);
    REQUIRE(topo.level_joints(1) == 4);
    REQUIRE(topo.level_joints(2) == 1);
    REQUIRE(topo.neighbors[0].size() == 3);  // spine + both legs
    REQUIRE(topo.neighbors[1].size() == 4);  // root, head, both upper arms

    // non-partition pooling rejected
    REQUIRE_THROWS_AS(SkeletonTopology::from_edges(3, {{0, 1}, {1, 2}}, {{{0, 1}, {1, 2}}}),
                      ConfigError);
    // disconnected graph rejected (edge list with a self-cycle leaves joint 2 unreachable)
    REQUIRE_THROWS_AS(SkeletonTopology::from_edges(3, {{0, 1}, {0, 1}}, {}), ConfigError);
}

TEST_CASE("flatten_joints shapes and round trip") {
    REQUIRE(flatten_joints(MotionSequence::zeros(2, 3)).shape == std::vector<int>{2, 36});
    REQUIRE(flatten_joints(MotionSequence::zeros(1, 22)).shape == std::vector<int>{1, 264});

    MotionSequence m = random_motion(5, 9, 7);
    MotionSequence back = unflatten_joints(flatten_joints(m), 9);
    REQUIRE(back.features.shape == m.features.shape);
    REQUIRE(back.features.data == m.features.data);
}

TEST_CASE("motion file round trip is bit exact") {
    auto dir = temp_dir("mot_io");
    MotionSequence m = random_motion(6, 9, 11);
    write_motion_file(m, dir / "x.mot");
    MotionSequence r = read_motion_file(dir / "x.mot");
    REQUIRE(r.features.shape == m.features.shape);
    for (int64_t i = 0; i < m.features.numel(); ++i) {
        REQUIRE(std::bit_cast<uint32_t>(r.features[i]) == std::bit_cast<uint32_t>(m.features[i]));
    }
}

TEST_CASE("motion file failure modes are distinct") {
    auto dir = temp_dir("mot_err");
    MotionSequence m = random_motion(10, 5, 13);
    write_motion_file(m, dir / "good.mot");

    auto bytes = [&]() {
        std::ifstream is(dir / "good.mot", std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(is), {});
    }();

    auto write_raw = [&](const std::string& name, const std::string& content) {
        std::ofstream os(dir / name, std::ios::binary);
        os << content;
    };

    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    write_raw("magic.mot", bad_magic);
    REQUIRE_THROWS_AS(read_motion_file(dir / "magic.mot"), MotBadMagicError);

    // header claims 10 frames but only 9 are present
    const size_t frame_bytes = 5 * kFeatureWidth * 4;
    write_raw("trunc.mot", bytes.substr(0, bytes.size() - frame_bytes));
    REQUIRE_THROWS_AS(read_motion_file(dir / "trunc.mot"), MotTruncatedError);

    std::string bad_d = bytes;
    bad_d[12] = 11;  // feature width field
    write_raw("shape.mot", bad_d);
    REQUIRE_THROWS_AS(read_motion_file(dir / "shape.mot"), MotShapeError);

    write_raw("extra.mot", bytes + "!");
    REQUIRE_THROWS_AS(read_motion_file(dir / "extra.mot"), MotShapeError);

    REQUIRE_THROWS_AS(read_motion_file(dir / "absent.mot"), MissingArtifactError);
}

TEST_CASE("corpus generation is deterministic and validated") {
    auto topo = SkeletonTopology::toy9();
    auto c1 = generate_synthetic_corpus(42, 8, topo);
    auto c2 = generate_synthetic_corpus(42, 8, topo);
    REQUIRE(c1.size() == 8);
    for (size_t i = 0; i < c1.size(); ++i) {
        REQUIRE(c1[i].motion_a.features.data == c2[i].motion_a.features.data);
        REQUIRE(c1[i].motion_b.features.data == c2[i].motion_b.features.data);
        REQUIRE(c1[i].text == c2[i].text);
        REQUIRE(c1[i].tokens == c2[i].tokens);
    }
    auto c3 = generate_synthetic_corpus(43, 8, topo);
    REQUIRE(c1[0].motion_a.features.data != c3[0].motion_a.features.data);

    REQUIRE_THROWS_AS(generate_synthetic_corpus(1, 0, topo), ConfigError);
    REQUIRE_THROWS_AS(generate_synthetic_corpus(1, -3, topo), ConfigError);
}

TEST_CASE("corpus velocities, smoothness and rotation validity") {
    auto topo = SkeletonTopology::toy9();
    auto corpus = generate_synthetic_corpus(5, 12, topo);
    for (const auto& s : corpus) {
        REQUIRE(s.motion_a.frames() == s.motion_b.frames());
        for (const MotionSequence* m : {&s.motion_a, &s.motion_b}) {
            for (int t = 0; t < m->frames(); ++t) {
                for (int j = 0; j < m->joints(); ++j) {
                    // vel[t] = pos[t] - pos[t-1], vel[0] = 0
                    for (int c = 0; c < 3; ++c) {
                        const float expect =
                            t == 0 ? 0.0f : m->at(t, j, c) - m->at(t - 1, j, c);
                        REQUIRE(std::abs(m->at(t, j, 3 + c) - expect) < 1e-4f);
                    }
                    if (t > 0) {
                        const double dx = m->at(t, j, 0) - m->at(t - 1, j, 0);
                        const double dy = m->at(t, j, 1) - m->at(t - 1, j, 1);
                        const double dz = m->at(t, j, 2) - m->at(t - 1, j, 2);
                        REQUIRE(std::sqrt(dx * dx + dy * dy + dz * dz) < 0.2);
                    }
                    // 6d rotation = two orthonormal columns
                    double n0 = 0, n1 = 0, dot = 0;
                    for (int c = 0; c < 3; ++c) {
                        n0 += static_cast<double>(m->at(t, j, 6 + c)) * m->at(t, j, 6 + c);
                        n1 += static_cast<double>(m->at(t, j, 9 + c)) * m->at(t, j, 9 + c);
                        dot += static_cast<double>(m->at(t, j, 6 + c)) * m->at(t, j, 9 + c);
                    }
                    REQUIRE(std::abs(n0 - 1.0) < 1e-5);
                    REQUIRE(std::abs(n1 - 1.0) < 1e-5);
                    REQUIRE(std::abs(dot) < 1e-5);
                }
            }
        }
    }
}

TEST_CASE("approach family closes distance monotonically over first half") {
    auto topo = SkeletonTopology::toy9();
    auto corpus = generate_synthetic_corpus(17, 16, topo);
    int checked = 0;
    for (const auto& s : corpus) {
        if (s.family != "approach") continue;
        ++checked;
        const int T = s.motion_a.frames();
        double prev = 1e9;
        for (int t = 0; t <= T / 2; ++t) {
            const double dx = s.motion_a.at(t, 0, 0) - s.motion_b.at(t, 0, 0);
            const double dy = s.motion_a.at(t, 0, 1) - s.motion_b.at(t, 0, 1);
            const double d = std::sqrt(dx * dx + dy * dy);
            REQUIRE(d < prev);
            prev = d;
        }
    }
    REQUIRE(checked == 4);
}

TEST_CASE("mirror-dance partner is a plane reflection of the leader") {
    auto topo = SkeletonTopology::toy9();
    auto corpus = generate_synthetic_corpus(23, 8, topo);
    int checked = 0;
    for (const auto& s : corpus) {
        if (s.family != "mirror-dance") continue;
        ++checked;
        // recover the plane x = c from the two roots at frame 0, then verify all joints
        const double c = 0.5 * (s.motion_a.at(0, 0, 0) + s.motion_b.at(0, 0, 0));
        for (int t = 0; t < s.motion_a.frames(); ++t)
            for (int j = 0; j < s.motion_a.joints(); ++j) {
                REQUIRE(std::abs(s.motion_b.at(t, j, 0) - (2 * c - s.motion_a.at(t, j, 0))) < 1e-5);
                REQUIRE(s.motion_b.at(t, j, 1) == s.motion_a.at(t, j, 1));
                REQUIRE(s.motion_b.at(t, j, 2) == s.motion_a.at(t, j, 2));
            }
    }
    REQUIRE(checked == 2);
}

TEST_CASE("vocabulary is 64 distinct words and templates tokenize") {
    REQUIRE(vocabulary().size() == 64);
    std::set<std::string> uniq(vocabulary().begin(), vocabulary().end());
    REQUIRE(uniq.size() == 64);

    auto corpus = generate_synthetic_corpus(3, 16, SkeletonTopology::toy9());
    for (const auto& s : corpus) {
        REQUIRE_FALSE(s.tokens.empty());
        REQUIRE(detokenize(s.tokens) == s.text);
    }
    REQUIRE_THROWS_AS(tokenize("two people teleport"), ConfigError);
}

TEST_CASE("text encoder: pooling semantics") {
    TextEncoder<double> enc(16, 99);
    auto e_empty = enc.encode({});
    REQUIRE(e_empty.shape == std::vector<int>{1, 16});
    for (float v : e_empty.data) REQUIRE(v == 0.0f);

    std::vector<int> toks = {3, 11, 40, 7};
    std::vector<int> perm = {40, 7, 3, 11};
    auto e1 = enc.encode(toks);
    auto e2 = enc.encode(perm);
    for (int64_t i = 0; i < e1.numel(); ++i) REQUIRE(e1[i] == Catch::Approx(e2[i]).margin(1e-7));

    REQUIRE_THROWS_AS(enc.encode({64}), ConfigError);
    REQUIRE_THROWS_AS(enc.encode({-1}), ConfigError);

    // distinct templates embed distinctly
    auto ta = enc.encode(tokenize("two people walk toward each other and meet"));
    auto tb = enc.encode(tokenize("one person pushes forward while the other retreats"));
    double na = 0, nb = 0;
    for (int64_t i = 0; i < ta.numel(); ++i) {
        na += ta[i] * ta[i];
        nb += tb[i] * tb[i];
    }
    REQUIRE(std::abs(std::sqrt(na) - std::sqrt(nb)) > 0);
}

TEST_CASE("corpus write/read round trip with normalizer") {
    auto dir = temp_dir("corpus_io");
    auto topo = SkeletonTopology::toy9();
    Corpus c = make_corpus(77, 8, topo);
    write_corpus(c, dir);
    Corpus r = read_corpus(dir);

    REQUIRE(r.seed == c.seed);
    REQUIRE(r.frames == c.frames);
    REQUIRE(r.joint_count == c.joint_count);
    REQUIRE(r.normalizer.mean == c.normalizer.mean);
    REQUIRE(r.normalizer.stdev == c.normalizer.stdev);
    REQUIRE(r.samples.size() == c.samples.size());
    for (size_t i = 0; i < c.samples.size(); ++i) {
        REQUIRE(r.samples[i].id == c.samples[i].id);
        REQUIRE(r.samples[i].family == c.samples[i].family);
        REQUIRE(r.samples[i].text == c.samples[i].text);
        REQUIRE(r.samples[i].motion_a.features.data == c.samples[i].motion_a.features.data);
        REQUIRE(r.samples[i].motion_b.features.data == c.samples[i].motion_b.features.data);
    }
    REQUIRE_THROWS_AS(read_corpus(dir / "nowhere"), MissingArtifactError);
}

TEST_CASE("normalizer standardizes corpus channels and inverts") {
    auto topo = SkeletonTopology::toy9();
    Corpus c = make_corpus(31, 16, topo);
    const int d = topo.joint_count * kFeatureWidth;
    std::vector<double> sum(d, 0.0), sq(d, 0.0);
    int64_t rows = 0;
    for (const auto& s : c.samples) {
        for (const MotionSequence* m : {&s.motion_a, &s.motion_b}) {
            auto z = c.normalizer.apply(flatten_joints(*m));
            for (int t = 0; t < z.dim(0); ++t)
                for (int ch = 0; ch < d; ++ch) {
                    sum[ch] += z.at(t, ch);
                    sq[ch] += static_cast<double>(z.at(t, ch)) * z.at(t, ch);
                }
            rows += z.dim(0);

            auto back = c.normalizer.invert(z);
            for (int64_t i = 0; i < back.numel(); ++i)
                REQUIRE(back[i] == Catch::Approx(m->features[i]).margin(1e-3));
        }
    }
    for (int ch = 0; ch < d; ++ch) {
        const double mu = sum[ch] / static_cast<double>(rows);
        const double var = sq[ch] / static_cast<double>(rows) - mu * mu;
        REQUIRE(std::abs(mu) < 1e-3);
        // constant channels (floored std) legitimately have ~zero variance
        REQUIRE(var < 1.0 + 1e-3);
    }
}
