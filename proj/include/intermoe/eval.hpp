#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "intermoe/corpus.hpp"
#include "intermoe/tensor.hpp"

namespace intermoe {

// Metric suite over a frozen toy feature space: FID, R-Precision, MM-Dist,
// Diversity, MultiModality. Everything here is a pure function of
// (features, seed); the feature extractor is a fixed-seed random projection
// standing in for pretrained evaluator networks.

namespace evald {

// row-major n x n helpers, double precision

inline std::vector<double> matmul_sq(const std::vector<double>& a, const std::vector<double>& b,
                                     int n) {
    std::vector<double> c(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k) {
            const double av = a[static_cast<size_t>(i) * n + k];
            if (av == 0.0) continue;
            for (int j = 0; j < n; ++j)
                c[static_cast<size_t>(i) * n + j] += av * b[static_cast<size_t>(k) * n + j];
        }
    return c;
}

// cyclic Jacobi eigendecomposition of a symmetric matrix; returns eigenvalues,
// fills vecs with eigenvectors in columns
inline std::vector<double> jacobi_eigh(std::vector<double> a, int n, std::vector<double>& vecs) {
    vecs.assign(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) vecs[static_cast<size_t>(i) * n + i] = 1.0;
    auto at = [&](std::vector<double>& m, int r, int c) -> double& {
        return m[static_cast<size_t>(r) * n + c];
    };
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0, scale = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = 0; q < n; ++q) {
                if (p != q) off += a[static_cast<size_t>(p) * n + q] * a[static_cast<size_t>(p) * n + q];
                else scale += std::abs(a[static_cast<size_t>(p) * n + q]);
            }
        if (off <= 1e-26 * std::max(1.0, scale * scale)) break;
        for (int p = 0; p < n - 1; ++p)
            for (int q = p + 1; q < n; ++q) {
                const double apq = at(a, p, q);
                if (apq == 0.0) continue;
                const double theta = (at(a, q, q) - at(a, p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (int i = 0; i < n; ++i) {
                    const double aip = at(a, i, p), aiq = at(a, i, q);
                    at(a, i, p) = c * aip - s * aiq;
                    at(a, i, q) = s * aip + c * aiq;
                }
                for (int i = 0; i < n; ++i) {
                    const double api = at(a, p, i), aqi = at(a, q, i);
                    at(a, p, i) = c * api - s * aqi;
                    at(a, q, i) = s * api + c * aqi;
                }
                for (int i = 0; i < n; ++i) {
                    const double vip = at(vecs, i, p), viq = at(vecs, i, q);
                    at(vecs, i, p) = c * vip - s * viq;
                    at(vecs, i, q) = s * vip + c * viq;
                }
            }
    }
    std::vector<double> evals(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) evals[static_cast<size_t>(i)] = a[static_cast<size_t>(i) * n + i];
    return evals;
}

// symmetric PSD square root via eigendecomposition, eigenvalues clamped at 0
inline std::vector<double> psd_sqrt(const std::vector<double>& m, int n) {
    std::vector<double> vecs;
    auto evals = jacobi_eigh(m, n, vecs);
    std::vector<double> out(static_cast<size_t>(n) * n, 0.0);
    for (int k = 0; k < n; ++k) {
        const double s = std::sqrt(std::max(evals[static_cast<size_t>(k)], 0.0));
        if (s == 0.0) continue;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                out[static_cast<size_t>(i) * n + j] +=
                    s * vecs[static_cast<size_t>(i) * n + k] * vecs[static_cast<size_t>(j) * n + k];
    }
    return out;
}

inline void mean_and_cov(const Tensor<double>& x, std::vector<double>& mu,
                         std::vector<double>& cov) {
    const int m = x.dim(0), d = x.dim(1);
    mu.assign(static_cast<size_t>(d), 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < d; ++j) mu[static_cast<size_t>(j)] += x.at(i, j);
    for (auto& v : mu) v /= m;
    cov.assign(static_cast<size_t>(d) * d, 0.0);
    for (int i = 0; i < m; ++i)
        for (int a = 0; a < d; ++a) {
            const double da = x.at(i, a) - mu[static_cast<size_t>(a)];
            for (int b = 0; b < d; ++b)
                cov[static_cast<size_t>(a) * d + b] += da * (x.at(i, b) - mu[static_cast<size_t>(b)]);
        }
    for (auto& v : cov) v /= (m - 1);  // unbiased
}

}  // namespace evald

// Frechet distance between Gaussian fits of two feature sets:
// ||mu_g - mu_r||^2 + Tr(S_g + S_r - 2 (S_g S_r)^{1/2}), the trace term taken
// as the eigenvalue square-root sum of S_g^{1/2} S_r S_g^{1/2}.
inline double fid(const Tensor<double>& gen, const Tensor<double>& real) {
    if (gen.ndim() != 2 || real.ndim() != 2 || gen.dim(1) != real.dim(1))
        throw ShapeError("fid: " + shape_to_string(gen.shape) + " vs " +
                         shape_to_string(real.shape));
    if (gen.dim(0) < 2 || real.dim(0) < 2)
        throw ConfigError("fid: need at least two samples per side");
    for (double v : gen.data)
        if (!std::isfinite(v)) throw NumericsError("fid: non-finite generated feature");
    for (double v : real.data)
        if (!std::isfinite(v)) throw NumericsError("fid: non-finite reference feature");

    const int d = gen.dim(1);
    std::vector<double> mu_g, cov_g, mu_r, cov_r;
    evald::mean_and_cov(gen, mu_g, cov_g);
    evald::mean_and_cov(real, mu_r, cov_r);

    double dist = 0.0, tr = 0.0;
    for (int i = 0; i < d; ++i) {
        const double dm = mu_g[static_cast<size_t>(i)] - mu_r[static_cast<size_t>(i)];
        dist += dm * dm;
        tr += cov_g[static_cast<size_t>(i) * d + i] + cov_r[static_cast<size_t>(i) * d + i];
    }
    auto half = evald::psd_sqrt(cov_g, d);
    auto prod = evald::matmul_sq(evald::matmul_sq(half, cov_r, d), half, d);
    for (int i = 0; i < d; ++i)  // symmetrize against rounding
        for (int j = i + 1; j < d; ++j) {
            const double s = 0.5 * (prod[static_cast<size_t>(i) * d + j] +
                                    prod[static_cast<size_t>(j) * d + i]);
            prod[static_cast<size_t>(i) * d + j] = prod[static_cast<size_t>(j) * d + i] = s;
        }
    std::vector<double> vecs;
    for (double ev : evald::jacobi_eigh(prod, d, vecs)) tr -= 2.0 * std::sqrt(std::max(ev, 0.0));
    return dist + tr;
}

struct RPrecision {
    double top1 = 0.0, top2 = 0.0, top3 = 0.0;
};

// For each motion: pool its true text with pool_size-1 seeded mismatched
// texts, rank by Euclidean distance, count the truth in the top k.
inline RPrecision r_precision(const Tensor<double>& motion_feats, const Tensor<double>& text_feats,
                              int pool_size, uint64_t seed) {
    if (motion_feats.shape != text_feats.shape || motion_feats.ndim() != 2)
        throw ShapeError("r_precision: " + shape_to_string(motion_feats.shape) + " vs " +
                         shape_to_string(text_feats.shape));
    const int n = motion_feats.dim(0), d = motion_feats.dim(1);
    if (pool_size < 2 || n < pool_size)
        throw ConfigError("r_precision: " + std::to_string(n) + " pairs for pool of " +
                          std::to_string(pool_size));
    auto rng = make_rng(seed);
    auto dist2 = [&](int mi, int tj) {
        double acc = 0.0;
        for (int c = 0; c < d; ++c) {
            const double dv = motion_feats.at(mi, c) - text_feats.at(tj, c);
            acc += dv * dv;
        }
        return acc;
    };
    RPrecision out;
    std::vector<int> cand(static_cast<size_t>(n) - 1);
    for (int i = 0; i < n; ++i) {
        int w = 0;
        for (int j = 0; j < n; ++j)
            if (j != i) cand[static_cast<size_t>(w++)] = j;
        const double d_true = dist2(i, i);
        int better = 0;
        for (int k = 0; k < pool_size - 1; ++k) {
            std::uniform_int_distribution<int> pick(k, n - 2);
            std::swap(cand[static_cast<size_t>(k)], cand[static_cast<size_t>(pick(rng))]);
            if (dist2(i, cand[static_cast<size_t>(k)]) < d_true) ++better;
        }
        if (better < 1) out.top1 += 1.0;
        if (better < 2) out.top2 += 1.0;
        if (better < 3) out.top3 += 1.0;
    }
    out.top1 /= n;
    out.top2 /= n;
    out.top3 /= n;
    return out;
}

// mean Euclidean distance between paired motion and text features
inline double mm_dist(const Tensor<double>& motion_feats, const Tensor<double>& text_feats) {
    if (motion_feats.shape != text_feats.shape || motion_feats.ndim() != 2)
        throw ShapeError("mm_dist: " + shape_to_string(motion_feats.shape) + " vs " +
                         shape_to_string(text_feats.shape));
    const int n = motion_feats.dim(0), d = motion_feats.dim(1);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int c = 0; c < d; ++c) {
            const double dv = motion_feats.at(i, c) - text_feats.at(i, c);
            acc += dv * dv;
        }
        sum += std::sqrt(acc);
    }
    return sum / n;
}

// mean distance over s_d feature pairs drawn without replacement: a seeded
// permutation supplies s_d disjoint (v_i, v_i') pairs
inline double diversity(const Tensor<double>& feats, int s_d, uint64_t seed) {
    if (feats.ndim() != 2) throw ShapeError("diversity: features " + shape_to_string(feats.shape));
    const int n = feats.dim(0), d = feats.dim(1);
    if (s_d < 1 || 2 * s_d > n)
        throw ConfigError("diversity: " + std::to_string(n) + " features cannot seat " +
                          std::to_string(s_d) + " disjoint pairs");
    std::vector<int> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    auto rng = make_rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    double sum = 0.0;
    for (int i = 0; i < s_d; ++i) {
        const int a = idx[static_cast<size_t>(i)], b = idx[static_cast<size_t>(s_d + i)];
        double acc = 0.0;
        for (int c = 0; c < d; ++c) {
            const double dv = feats.at(a, c) - feats.at(b, c);
            acc += dv * dv;
        }
        sum += std::sqrt(acc);
    }
    return sum / s_d;
}

// (1/(C*S_l)) sum over conditions of s_l within-condition pair distances,
// pairs drawn without replacement per condition
inline double multimodality(const std::vector<Tensor<double>>& groups, int s_l, uint64_t seed) {
    if (groups.empty()) throw ConfigError("multimodality: no condition groups");
    if (s_l < 1) throw ConfigError("multimodality: subset size must be positive");
    auto rng = make_rng(seed);
    double sum = 0.0;
    for (const auto& g : groups) {
        if (g.ndim() != 2 || 2 * s_l > g.dim(0))
            throw ConfigError("multimodality: a condition holds " +
                              std::to_string(g.ndim() == 2 ? g.dim(0) : -1) +
                              " features, need " + std::to_string(2 * s_l));
        const int d = g.dim(1);
        std::vector<int> idx(static_cast<size_t>(g.dim(0)));
        std::iota(idx.begin(), idx.end(), 0);
        std::shuffle(idx.begin(), idx.end(), rng);
        for (int i = 0; i < s_l; ++i) {
            const int a = idx[static_cast<size_t>(i)], b = idx[static_cast<size_t>(s_l + i)];
            double acc = 0.0;
            for (int c = 0; c < d; ++c) {
                const double dv = g.at(a, c) - g.at(b, c);
                acc += dv * dv;
            }
            sum += std::sqrt(acc);
        }
    }
    return sum / (static_cast<double>(groups.size()) * s_l);
}

struct EvalConfig {
    int s_d = 300;      // Diversity pairs
    int s_l = 100;      // MultiModality pairs per condition
    int r_pool = 32;    // R-Precision pool: 1 true + 31 mismatched
    int n_repeats = 20; // evaluation repeats behind the 95% intervals

    // desk-scale corpora are smaller than the reference sizes; shrink subsets
    // to what the data can seat and record the effective values
    EvalConfig effective(int n_features, int min_group) const {
        EvalConfig e = *this;
        e.s_d = std::max(1, std::min(s_d, n_features / 2));
        e.s_l = std::max(1, std::min(s_l, min_group / 2));
        e.r_pool = std::max(2, std::min(r_pool, n_features));
        return e;
    }
};

struct MetricStat {
    double mean = 0.0, ci95_low = 0.0, ci95_high = 0.0;
};

inline MetricStat ci95(const std::vector<double>& xs) {
    if (xs.empty()) throw ConfigError("ci95: no observations");
    MetricStat st;
    for (double v : xs) st.mean += v;
    st.mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double v : xs) var += (v - st.mean) * (v - st.mean);
    const double stderr_ = xs.size() > 1
                               ? std::sqrt(var / (static_cast<double>(xs.size()) - 1.0) /
                                           static_cast<double>(xs.size()))
                               : 0.0;
    st.ci95_low = st.mean - 1.96 * stderr_;
    st.ci95_high = st.mean + 1.96 * stderr_;
    return st;
}

// Frozen random-projection evaluator standing in for pretrained feature
// networks. Motions map through temporal mean/rms statistics of both persons'
// flattened features; texts map through a vocabulary histogram. Two hidden
// tanh layers, weights fixed by the seed.
class FeatureExtractor {
  public:
    static constexpr int kWidth = 32;

    FeatureExtractor(int joints, uint64_t seed) : joints_(joints) {
        if (joints < 1) throw ConfigError("feature extractor: joint count must be positive");
        auto rng = make_rng(seed);
        const int d_in = 4 * joints * kFeatureWidth;  // mean+rms, two persons
        mw1_ = proj(d_in, kHidden, rng);
        mb1_ = bias(kHidden, rng);
        mw2_ = proj(kHidden, kWidth, rng);
        const int v = static_cast<int>(vocabulary().size());
        tw1_ = proj(v, kHidden, rng);
        tb1_ = bias(kHidden, rng);
        tw2_ = proj(kHidden, kWidth, rng);
    }

    std::vector<double> motion_feature(const MotionSequence& a, const MotionSequence& b) const {
        if (a.joints() != joints_ || b.joints() != joints_)
            throw ShapeError("feature extractor: built for " + std::to_string(joints_) +
                             " joints, got " + std::to_string(a.joints()) + "/" +
                             std::to_string(b.joints()));
        std::vector<double> in;
        in.reserve(static_cast<size_t>(4) * joints_ * kFeatureWidth);
        stats(a, in);
        stats(b, in);
        return apply(in, mw1_, mb1_, mw2_);
    }

    std::vector<double> text_feature(const std::vector<int>& tokens) const {
        std::vector<double> h(vocabulary().size(), 0.0);
        for (int t : tokens) {
            if (t < 0 || t >= static_cast<int>(vocabulary().size()))
                throw ConfigError("feature extractor: token id " + std::to_string(t) +
                                  " outside vocabulary");
            h[static_cast<size_t>(t)] += 1.0;
        }
        if (!tokens.empty())
            for (auto& v : h) v /= static_cast<double>(tokens.size());
        return apply(h, tw1_, tb1_, tw2_);
    }

    Tensor<double> motion_features(const std::vector<InteractionSample>& samples) const {
        Tensor<double> out = Tensor<double>::zeros({static_cast<int>(samples.size()), kWidth});
        for (size_t i = 0; i < samples.size(); ++i) {
            auto f = motion_feature(samples[i].motion_a, samples[i].motion_b);
            for (int j = 0; j < kWidth; ++j) out.at(static_cast<int>(i), j) = f[static_cast<size_t>(j)];
        }
        return out;
    }

    Tensor<double> text_features(const std::vector<InteractionSample>& samples) const {
        Tensor<double> out = Tensor<double>::zeros({static_cast<int>(samples.size()), kWidth});
        for (size_t i = 0; i < samples.size(); ++i) {
            auto f = text_feature(samples[i].tokens);
            for (int j = 0; j < kWidth; ++j) out.at(static_cast<int>(i), j) = f[static_cast<size_t>(j)];
        }
        return out;
    }

    int joints() const { return joints_; }

  private:
    static constexpr int kHidden = 64;

    static std::vector<double> proj(int in, int out, std::mt19937_64& rng) {
        std::normal_distribution<double> nd(0.0, 1.0);
        std::vector<double> w(static_cast<size_t>(in) * out);
        const double s = 1.0 / std::sqrt(static_cast<double>(in));
        for (auto& v : w) v = nd(rng) * s;
        return w;
    }
    static std::vector<double> bias(int n, std::mt19937_64& rng) {
        std::normal_distribution<double> nd(0.0, 1.0);
        std::vector<double> b(static_cast<size_t>(n));
        for (auto& v : b) v = nd(rng) * 0.1;
        return b;
    }

    // per-channel temporal mean and rms of the flattened joint features
    void stats(const MotionSequence& m, std::vector<double>& out) const {
        const auto& f = m.features;
        const int t_len = f.dim(0), cols = joints_ * kFeatureWidth;
        for (int c = 0; c < cols; ++c) {
            double mean = 0.0, sq = 0.0;
            for (int t = 0; t < t_len; ++t) {
                const double v = f[static_cast<int64_t>(t) * cols + c];
                mean += v;
                sq += v * v;
            }
            out.push_back(mean / t_len);
            out.push_back(std::sqrt(sq / t_len));
        }
    }

    std::vector<double> apply(const std::vector<double>& in, const std::vector<double>& w1,
                              const std::vector<double>& b1, const std::vector<double>& w2) const {
        std::vector<double> h(kHidden, 0.0);
        for (size_t i = 0; i < in.size(); ++i) {
            const double v = in[i];
            if (v == 0.0) continue;
            for (int j = 0; j < kHidden; ++j) h[static_cast<size_t>(j)] += v * w1[i * kHidden + j];
        }
        for (int j = 0; j < kHidden; ++j)
            h[static_cast<size_t>(j)] = std::tanh(h[static_cast<size_t>(j)] + b1[static_cast<size_t>(j)]);
        std::vector<double> out(kWidth, 0.0);
        for (int j = 0; j < kHidden; ++j)
            for (int k = 0; k < kWidth; ++k)
                out[static_cast<size_t>(k)] += h[static_cast<size_t>(j)] * w2[static_cast<size_t>(j) * kWidth + k];
        return out;
    }

    int joints_;
    std::vector<double> mw1_, mb1_, mw2_, tw1_, tb1_, tw2_;
};

// metrics CSV: one row per (run, mode, metric) with its confidence interval
inline std::string metrics_csv_header() { return "run_id,mode,metric,mean,ci95_low,ci95_high"; }

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void append_metrics_row(std::ostream& os, const std::string& run_id,
                               const std::string& mode, const std::string& metric,
                               const MetricStat& st) {
    os << run_id << ',' << mode << ',' << metric << ',' << format_double(st.mean) << ','
       << format_double(st.ci95_low) << ',' << format_double(st.ci95_high) << '\n';
}

}  // namespace intermoe
