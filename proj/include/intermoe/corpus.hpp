#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "intermoe/motion.hpp"
#include "intermoe/text.hpp"

namespace intermoe {

struct InteractionSample {
    std::string id;
    std::string family;
    MotionSequence motion_a;
    MotionSequence motion_b;
    std::string text;
    std::vector<int> tokens;
};

inline const std::array<std::string, 4>& interaction_families() {
    static const std::array<std::string, 4> f = {"approach", "circle-around", "mirror-dance",
                                                 "push-retreat"};
    return f;
}

namespace detail {

constexpr double kPi = 3.14159265358979323846;

struct FigureFrame {
    double x, y, heading;
};

// Per-joint local offsets and sway parameters derived from the joint index, so
// any 5..24-joint tree yields a plausible articulated figure.
struct FigureShape {
    std::vector<int> parent;                  // parent[0] = -1
    std::vector<std::array<double, 3>> off;   // offset from parent, heading frame (fwd,left,up)
    std::vector<double> sway_amp, sway_phase;

    explicit FigureShape(const SkeletonTopology& topo) {
        const int J = topo.joint_count;
        parent.assign(J, -1);
        for (auto [p, c] : topo.edges) parent[c] = p;
        off.resize(J);
        sway_amp.resize(J);
        sway_phase.resize(J);
        off[0] = {0.0, 0.0, 0.95};
        sway_amp[0] = 0.0;
        sway_phase[0] = 0.0;
        for (int j = 1; j < J; ++j) {
            uint64_t h = splitmix64(0x5eedULL + static_cast<uint64_t>(j));
            auto unit = [&](int k) {
                return static_cast<double>((h >> (k * 10)) & 1023) / 1023.0;
            };
            off[j] = {0.2 * (unit(0) - 0.5), 0.5 * (unit(1) - 0.5), 0.6 * (unit(2) - 0.5)};
            sway_amp[j] = 0.02 + 0.05 * unit(3);
            sway_phase[j] = 2.0 * kPi * unit(4);
        }
    }
};

// Assemble a clip from a root trajectory: joints hang off the kinematic tree in
// the heading frame, with a small per-joint gait sway along the forward axis.
inline MotionSequence build_figure(const SkeletonTopology& topo, const FigureShape& shape,
                                   const std::vector<FigureFrame>& traj, double gait_freq,
                                   double gait_phase) {
    const int T = static_cast<int>(traj.size());
    const int J = topo.joint_count;
    MotionSequence m = MotionSequence::zeros(T, J);
    for (int t = 0; t < T; ++t) {
        const double th = traj[t].heading;
        const double fx = std::cos(th), fy = std::sin(th);   // forward
        const double lx = -std::sin(th), ly = std::cos(th);  // left
        const double gait = 2.0 * kPi * gait_freq * t + gait_phase;
        std::vector<std::array<double, 3>> pos(J);
        for (int j = 0; j < J; ++j) {
            const auto& o = shape.off[j];
            const double sway = j == 0 ? 0.0 : shape.sway_amp[j] * std::sin(gait + shape.sway_phase[j]);
            const double bx = (o[0] + sway) * fx + o[1] * lx;
            const double by = (o[0] + sway) * fy + o[1] * ly;
            if (j == 0) {
                pos[j] = {traj[t].x, traj[t].y, o[2]};
            } else {
                const auto& pp = pos[shape.parent[j]];
                pos[j] = {pp[0] + bx, pp[1] + by, pp[2] + o[2]};
            }
            m.at(t, j, 0) = static_cast<float>(pos[j][0]);
            m.at(t, j, 1) = static_cast<float>(pos[j][1]);
            m.at(t, j, 2) = static_cast<float>(pos[j][2]);
            // local rotation Rz(heading)*Ry(pitch), stored as its first two columns
            const double pitch = j == 0 ? 0.0 : 0.5 * sway;
            const double cp = std::cos(pitch), sp = std::sin(pitch);
            m.at(t, j, 6) = static_cast<float>(fx * cp);
            m.at(t, j, 7) = static_cast<float>(fy * cp);
            m.at(t, j, 8) = static_cast<float>(-sp);
            m.at(t, j, 9) = static_cast<float>(lx);
            m.at(t, j, 10) = static_cast<float>(ly);
            m.at(t, j, 11) = 0.0f;
        }
    }
    m.fill_velocities_from_positions();
    return m;
}

inline double uniform_in(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace detail

// Deterministic parametric corpus of two-person interactions. Families cycle
// round-robin; all per-sample randomness comes from derive_seed(seed, index).
inline std::vector<InteractionSample> generate_synthetic_corpus(uint64_t seed, int n_samples,
                                                                const SkeletonTopology& topo,
                                                                int frames = 32) {
    using detail::kPi;
    if (n_samples <= 0) throw ConfigError("corpus: n_samples must be positive");
    if (topo.joint_count < 5 || topo.joint_count > 24)
        throw ConfigError("corpus: joint count " + std::to_string(topo.joint_count) +
                          " outside [5, 24]");
    if (frames < 4) throw ConfigError("corpus: need at least 4 frames");

    const detail::FigureShape shape(topo);
    const int T = frames;
    std::vector<InteractionSample> out;
    out.reserve(static_cast<size_t>(n_samples));

    for (int i = 0; i < n_samples; ++i) {
        auto rng = make_rng(derive_seed(seed, static_cast<uint64_t>(i)));
        const std::string family = interaction_families()[static_cast<size_t>(i % 4)];
        std::vector<detail::FigureFrame> ta(T), tb(T);
        std::string text;

        if (family == "approach") {
            const double psi = detail::uniform_in(rng, 0, 2 * kPi);
            const double d0 = detail::uniform_in(rng, 2.6, 3.4);
            const double d1 = detail::uniform_in(rng, 0.7, 1.0);
            const double ax = std::cos(psi), ay = std::sin(psi);
            for (int t = 0; t < T; ++t) {
                const double s = 0.5 * (1.0 - std::cos(kPi * t / (T - 1)));
                const double half = 0.5 * (d0 - (d0 - d1) * s);
                ta[t] = {-half * ax, -half * ay, psi};
                tb[t] = {half * ax, half * ay, psi + kPi};
            }
            const int v = static_cast<int>(rng() % 3);
            text = v == 0   ? "two people walk toward each other and meet"
                   : v == 1 ? "two persons approach each other slowly"
                            : "one person advances toward the other";
        } else if (family == "circle-around") {
            const double rho = detail::uniform_in(rng, 1.2, 1.6);
            const double phi0 = detail::uniform_in(rng, 0, 2 * kPi);
            const double dphi = detail::uniform_in(rng, 0.7 * kPi, 0.9 * kPi);
            const double sign = (rng() & 1) ? 1.0 : -1.0;  // +1 counterclockwise
            for (int t = 0; t < T; ++t) {
                const double phi = phi0 + sign * dphi * t / (T - 1);
                tb[t] = {rho * std::cos(phi), rho * std::sin(phi), phi + kPi};
                ta[t] = {0.03 * std::sin(2 * kPi * t / T), 0.0, phi};  // tracks the orbiter
            }
            const int v = static_cast<int>(rng() % 2);
            if (v == 0) text = "one person circles around the other";
            else text = sign > 0 ? "one person moves around the other counterclockwise"
                                 : "a person orbits the partner clockwise";
        } else if (family == "mirror-dance") {
            const double plane_x = detail::uniform_in(rng, 0.0, 0.5);
            const double dx = detail::uniform_in(rng, 0.65, 0.95);
            const double amp_x = detail::uniform_in(rng, 0.25, 0.35);
            const double amp_y = detail::uniform_in(rng, 0.15, 0.25);
            const double pa = detail::uniform_in(rng, 0, 2 * kPi);
            const double base_heading = detail::uniform_in(rng, 0, 2 * kPi);
            for (int t = 0; t < T; ++t) {
                const double u = 2 * kPi * t / T;
                ta[t] = {plane_x - dx + amp_x * std::sin(u + pa), amp_y * std::sin(2 * u),
                         base_heading + 0.2 * std::sin(u)};
            }
            const int v = static_cast<int>(rng() % 3);
            text = v == 0   ? "two people dance with mirrored movements"
                   : v == 1 ? "partners sway in a symmetric mirror dance"
                            : "two persons dance together with mirrored steps";
            // motion_b is constructed by reflection below
            const double gait_freq = detail::uniform_in(rng, 0.02, 0.045);
            const double gait_phase = detail::uniform_in(rng, 0, 2 * kPi);
            MotionSequence ma = detail::build_figure(topo, shape, ta, gait_freq, gait_phase);
            MotionSequence mb = ma;
            for (int t = 0; t < T; ++t)
                for (int j = 0; j < topo.joint_count; ++j) {
                    mb.at(t, j, 0) = static_cast<float>(2.0 * plane_x) - ma.at(t, j, 0);
                    // heading pi - theta: mirror the rotation's forward/left x-components
                    mb.at(t, j, 6) = -ma.at(t, j, 6);
                    mb.at(t, j, 9) = -ma.at(t, j, 9);
                }
            mb.fill_velocities_from_positions();
            out.push_back({"s" + std::to_string(i), family, std::move(ma), std::move(mb), text,
                           tokenize(text)});
            continue;
        } else {  // push-retreat
            const double psi = detail::uniform_in(rng, 0, 2 * kPi);
            const double gap = detail::uniform_in(rng, 0.75, 0.95);
            const double push = detail::uniform_in(rng, 0.5, 0.8);
            const double retreat = push + detail::uniform_in(rng, 0.1, 0.35);
            const double ax = std::cos(psi), ay = std::sin(psi);
            const int ramp = static_cast<int>(0.6 * T);
            const int lag = static_cast<int>(0.15 * T);
            auto ease = [&](int t, int t0) {
                const double u = std::clamp(static_cast<double>(t - t0) / ramp, 0.0, 1.0);
                return 0.5 * (1.0 - std::cos(kPi * u));
            };
            for (int t = 0; t < T; ++t) {
                const double adv = push * ease(t, 0);
                const double ret = retreat * ease(t, lag);
                ta[t] = {adv * ax, adv * ay, psi};
                tb[t] = {(gap + ret) * ax, (gap + ret) * ay, psi + kPi};
            }
            const int v = static_cast<int>(rng() % 3);
            text = v == 0   ? "one person pushes forward while the other retreats"
                   : v == 1 ? "a person shoves and the partner steps back"
                            : "one person moves forward while the other steps away";
        }

        const double fa = detail::uniform_in(rng, 0.02, 0.045);
        const double fb = detail::uniform_in(rng, 0.02, 0.045);
        const double qa = detail::uniform_in(rng, 0, 2 * kPi);
        const double qb = detail::uniform_in(rng, 0, 2 * kPi);
        MotionSequence ma = detail::build_figure(topo, shape, ta, fa, qa);
        MotionSequence mb = detail::build_figure(topo, shape, tb, fb, qb);
        out.push_back({"s" + std::to_string(i), family, std::move(ma), std::move(mb), text,
                       tokenize(text)});
    }
    return out;
}

// ----------------------------- normalization -----------------------------

// Per-channel zero-mean/unit-variance statistics over the flattened features
// of both persons across the whole corpus.
struct Normalizer {
    std::vector<float> mean, stdev;  // size D_m = J*12

    Tensor<float> apply(const Tensor<float>& flat) const {
        check(flat);
        Tensor<float> out = flat;
        const int d = static_cast<int>(mean.size());
        for (int64_t i = 0; i < out.numel(); ++i) {
            const int c = static_cast<int>(i % d);
            out[i] = (out[i] - mean[c]) / stdev[c];
        }
        return out;
    }
    Tensor<float> invert(const Tensor<float>& flat) const {
        check(flat);
        Tensor<float> out = flat;
        const int d = static_cast<int>(mean.size());
        for (int64_t i = 0; i < out.numel(); ++i) {
            const int c = static_cast<int>(i % d);
            out[i] = out[i] * stdev[c] + mean[c];
        }
        return out;
    }

  private:
    void check(const Tensor<float>& flat) const {
        if (flat.ndim() != 2 || flat.dim(1) != static_cast<int>(mean.size()))
            throw ShapeError("normalizer: " + shape_to_string(flat.shape) + " vs " +
                             std::to_string(mean.size()) + " channels");
    }
};

inline Normalizer compute_normalizer(const std::vector<InteractionSample>& samples) {
    if (samples.empty()) throw ConfigError("normalizer: empty corpus");
    const int d = samples[0].motion_a.joints() * kFeatureWidth;
    std::vector<double> sum(d, 0.0), sq(d, 0.0);
    int64_t rows = 0;
    for (const auto& s : samples) {
        for (const MotionSequence* m : {&s.motion_a, &s.motion_b}) {
            const auto& f = m->features;
            for (int t = 0; t < f.dim(0); ++t)
                for (int c = 0; c < d; ++c) {
                    const double v = f[static_cast<int64_t>(t) * d + c];
                    sum[c] += v;
                    sq[c] += v * v;
                }
            rows += f.dim(0);
        }
    }
    Normalizer n;
    n.mean.resize(d);
    n.stdev.resize(d);
    for (int c = 0; c < d; ++c) {
        const double mu = sum[c] / static_cast<double>(rows);
        const double var = std::max(0.0, sq[c] / static_cast<double>(rows) - mu * mu);
        n.mean[c] = static_cast<float>(mu);
        n.stdev[c] = static_cast<float>(std::max(std::sqrt(var), 1e-4));
    }
    return n;
}

// ----------------------------- corpus on disk -----------------------------

struct Corpus {
    uint64_t seed = 0;
    int frames = 0;
    int joint_count = 0;
    std::vector<InteractionSample> samples;
    Normalizer normalizer;
};

inline Corpus make_corpus(uint64_t seed, int n_samples, const SkeletonTopology& topo,
                          int frames = 32) {
    Corpus c;
    c.seed = seed;
    c.frames = frames;
    c.joint_count = topo.joint_count;
    c.samples = generate_synthetic_corpus(seed, n_samples, topo, frames);
    c.normalizer = compute_normalizer(c.samples);
    return c;
}

inline void write_corpus(const Corpus& c, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "motions");
    nlohmann::json manifest;
    manifest["schema"] = "intermoe-corpus-v1";
    manifest["seed"] = c.seed;
    manifest["frames"] = c.frames;
    manifest["joint_count"] = c.joint_count;
    manifest["normalizer"] = {{"mean", c.normalizer.mean}, {"std", c.normalizer.stdev}};
    auto& list = manifest["samples"] = nlohmann::json::array();
    for (const auto& s : c.samples) {
        const std::string fa = "motions/" + s.id + "_a.mot";
        const std::string fb = "motions/" + s.id + "_b.mot";
        write_motion_file(s.motion_a, dir / fa);
        write_motion_file(s.motion_b, dir / fb);
        list.push_back({{"id", s.id},
                        {"family", s.family},
                        {"file_a", fa},
                        {"file_b", fb},
                        {"text", s.text},
                        {"tokens", s.tokens}});
    }
    std::ofstream os(dir / "manifest.json");
    os << manifest.dump(2) << "\n";
    if (!os) throw MissingArtifactError("cannot write manifest: " + (dir / "manifest.json").string());
}

inline Corpus read_corpus(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    std::ifstream is(manifest_path);
    if (!is) throw MissingArtifactError("missing corpus manifest: " + manifest_path.string());
    nlohmann::json manifest;
    try {
        is >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("corpus manifest parse error: " + std::string(e.what()));
    }
    Corpus c;
    try {
        c.seed = manifest.at("seed").get<uint64_t>();
        c.frames = manifest.at("frames").get<int>();
        c.joint_count = manifest.at("joint_count").get<int>();
        c.normalizer.mean = manifest.at("normalizer").at("mean").get<std::vector<float>>();
        c.normalizer.stdev = manifest.at("normalizer").at("std").get<std::vector<float>>();
        for (const auto& e : manifest.at("samples")) {
            InteractionSample s;
            s.id = e.at("id").get<std::string>();
            s.family = e.at("family").get<std::string>();
            s.text = e.at("text").get<std::string>();
            s.tokens = e.at("tokens").get<std::vector<int>>();
            s.motion_a = read_motion_file(dir / e.at("file_a").get<std::string>());
            s.motion_b = read_motion_file(dir / e.at("file_b").get<std::string>());
            c.samples.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("corpus manifest field error: " + std::string(e.what()));
    }
    return c;
}

}  // namespace intermoe
