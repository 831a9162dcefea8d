#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "intermoe/checkpoint.hpp"
#include "intermoe/corpus.hpp"
#include "intermoe/csvae.hpp"
#include "intermoe/denoiser.hpp"
#include "intermoe/eval.hpp"
#include "intermoe/moe.hpp"

namespace intermoe {

// Property/oracle checks shared by the `verify` subcommand and the acceptance
// harness. Every check throws VerificationError (CLI exit code 4) on failure.
struct VerificationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace verify_detail {

inline void expect(bool ok, const std::string& msg) {
    if (!ok) throw VerificationError(msg);
}

inline Tensor<double> randn_t(const std::vector<int>& shape, uint64_t seed) {
    auto rng = make_rng(seed);
    return Tensor<double>::randn(shape, rng);
}

}  // namespace verify_detail

// ----------------------------- gating oracle -----------------------------

// dynamic_select + moe_dispatch against a dense evaluation of sum_e G.E with
// independently recomputed softmax/sigmoid, plus the row-stochasticity of A.
inline void check_gating_oracle(int instances = 200, uint64_t seed = 11) {
    using verify_detail::expect;
    auto rng = make_rng(seed);
    std::uniform_int_distribution<int> pick_n(1, 8), pick_s(2, 64), pick_d(2, 6);
    std::uniform_real_distribution<double> pick_b(-0.9, -0.1);
    for (int it = 0; it < instances; ++it) {
        const int n = pick_n(rng), s = pick_s(rng), d = pick_d(rng);
        std::vector<ExpertFFN<double>> experts;
        experts.reserve(static_cast<size_t>(n));
        for (int e = 0; e < n; ++e) experts.emplace_back(d, 2 * d, rng);
        ExpertBiasState bias(n);
        for (auto& b : bias.b) b = pick_b(rng);
        Tensor<double> logits = Tensor<double>::randn({s, n}, rng);
        Tensor<double> pool_t = Tensor<double>::randn({s, d}, rng);
        auto r_comb = Var<double>::constant(logits);
        auto pool = Var<double>::constant(pool_t);

        auto decision = dynamic_select(r_comb, bias);
        Tensor<double> out = moe_dispatch(pool, decision, experts).value();

        // dense oracle: full softmax, threshold mask, every expert on every row
        std::vector<Tensor<double>> dense_e;
        dense_e.reserve(static_cast<size_t>(n));
        for (int e = 0; e < n; ++e) dense_e.push_back(experts[static_cast<size_t>(e)](pool).value());
        for (int r = 0; r < s; ++r) {
            double mx = logits.at(r, 0);
            for (int e = 1; e < n; ++e) mx = std::max(mx, logits.at(r, e));
            double denom = 0.0;
            std::vector<double> a(static_cast<size_t>(n));
            for (int e = 0; e < n; ++e) {
                a[static_cast<size_t>(e)] = std::exp(logits.at(r, e) - mx);
                denom += a[static_cast<size_t>(e)];
            }
            double row_sum = 0.0;
            std::vector<double> dense_row(static_cast<size_t>(d), 0.0);
            for (int e = 0; e < n; ++e) {
                a[static_cast<size_t>(e)] /= denom;
                row_sum += a[static_cast<size_t>(e)];
                const double m =
                    1.0 / (1.0 + std::exp(-logits.at(r, e))) + bias.b[static_cast<size_t>(e)];
                if (m > 0.0)
                    for (int c = 0; c < d; ++c)
                        dense_row[static_cast<size_t>(c)] +=
                            a[static_cast<size_t>(e)] * dense_e[static_cast<size_t>(e)].at(r, c);
            }
            expect(std::abs(row_sum - 1.0) <= 1e-6,
                   "gating oracle: softmax row " + std::to_string(r) + " sums to " +
                       std::to_string(row_sum));
            for (int c = 0; c < d; ++c)
                expect(std::abs(out.at(r, c) - dense_row[static_cast<size_t>(c)]) <= 1e-6,
                       "gating oracle: instance " + std::to_string(it) + " row " +
                           std::to_string(r) + " col " + std::to_string(c) + " differs by " +
                           std::to_string(out.at(r, c) - dense_row[static_cast<size_t>(c)]));
        }
    }
}

// ----------------------------- bias convergence -----------------------------

// Stationary random logits; the sign-rule must steer every expert's selection
// count to K_exp within the tolerance, averaged over the trailing window.
// Returns the number of update steps consumed.
inline int check_bias_convergence(int n_experts = 8, int s_rows = 240, double c_exp = 1.0,
                                  int max_steps = 50000, int window = 1000, double tol = 3.0,
                                  uint64_t seed = 17) {
    using verify_detail::expect;
    const double k_exp = c_exp * s_rows / n_experts;
    ExpertBiasState bias(n_experts);
    auto rng = make_rng(seed);
    std::vector<std::vector<double>> history(static_cast<size_t>(n_experts));
    for (int step = 0; step < max_steps; ++step) {
        auto r = Var<double>::constant(Tensor<double>::randn({s_rows, n_experts}, rng));
        auto decision = dynamic_select(r, bias);
        count_and_update_bias(decision.k_select, k_exp, bias);
        for (int e = 0; e < n_experts; ++e)
            history[static_cast<size_t>(e)].push_back(
                static_cast<double>(decision.k_select[static_cast<size_t>(e)]));
        if (step + 1 >= window && (step + 1) % window == 0) {
            bool all_ok = true;
            for (int e = 0; e < n_experts && all_ok; ++e) {
                double mean = 0.0;
                const auto& h = history[static_cast<size_t>(e)];
                for (size_t i = h.size() - static_cast<size_t>(window); i < h.size(); ++i)
                    mean += h[i];
                mean /= window;
                all_ok = std::abs(mean - k_exp) <= tol;
            }
            if (all_ok) return step + 1;
        }
    }
    // report the worst expert of the final window
    double worst = 0.0;
    for (int e = 0; e < n_experts; ++e) {
        double mean = 0.0;
        const auto& h = history[static_cast<size_t>(e)];
        for (size_t i = h.size() - static_cast<size_t>(window); i < h.size(); ++i) mean += h[i];
        worst = std::max(worst, std::abs(mean / window - k_exp));
    }
    throw VerificationError("bias convergence: after " + std::to_string(max_steps) +
                            " steps the worst trailing-window deviation is " +
                            std::to_string(worst) + " (tolerance " + std::to_string(tol) + ")");
}

// ----------------------------- causality -----------------------------

// Zeroing all input frames after index tau must leave outputs attributable to
// times <= tau bitwise unchanged (64-bit). Random conv stacks compose strides;
// output t of a stack with cumulative stride S covers input times <= S(t+1)-1.
inline void check_causal_stacks(int n_stacks = 100, uint64_t seed = 5) {
    using verify_detail::expect;
    auto rng = make_rng(seed);
    std::uniform_int_distribution<int> pick_depth(1, 3), pick_k(1, 5), pick_s(1, 3),
        pick_d(1, 3), pick_c(1, 4), pick_t(12, 30);
    for (int it = 0; it < n_stacks; ++it) {
        const int depth = pick_depth(rng), t_in = pick_t(rng);
        std::vector<CausalConvLayer<double>> layers;
        int c_prev = pick_c(rng);
        const int c0 = c_prev;
        int cum_stride = 1, t_len = t_in;
        for (int l = 0; l < depth; ++l) {
            const int c_next = pick_c(rng), k = pick_k(rng), s = pick_s(rng), d = pick_d(rng);
            if ((t_len - s) / s + 1 < 1) break;  // too short for another stride
            layers.emplace_back(c_prev, c_next, k, s, d, rng);
            c_prev = c_next;
            cum_stride *= s;
            t_len = (t_len - s) / s + 1;
        }
        if (layers.empty()) continue;
        Tensor<double> x = Tensor<double>::randn({t_in, c0}, rng);
        auto run = [&](const Tensor<double>& in) {
            NoGradGuard ng;
            Var<double> h = Var<double>::constant(in);
            for (const auto& l : layers) h = silu(l(h));
            return h.value();
        };
        const Tensor<double> y0 = run(x);
        const int t_out = y0.dim(0);
        std::uniform_int_distribution<int> pick_tau(0, t_in - 1);
        const int tau = pick_tau(rng);
        Tensor<double> xz = x;
        for (int t = tau + 1; t < t_in; ++t)
            for (int c = 0; c < c0; ++c) xz.at(t, c) = 0.0;
        const Tensor<double> y1 = run(xz);
        for (int t = 0; t < t_out; ++t) {
            if (cum_stride * (t + 1) - 1 > tau) continue;  // may legitimately change
            for (int c = 0; c < y0.dim(1); ++c)
                expect(y0.at(t, c) == y1.at(t, c),
                       "causal stack " + std::to_string(it) + ": output frame " +
                           std::to_string(t) + " (covers times <= " +
                           std::to_string(cum_stride * (t + 1) - 1) +
                           ") changed when zeroing after " + std::to_string(tau));
        }
    }
}

// Full VAE encoder: latent time t covers input frames <= 4(t+1)-1.
inline void check_vae_encoder_causality(uint64_t seed = 29) {
    using verify_detail::expect;
    CsVaeConfig cfg;
    cfg.channels = 8;
    cfg.d_z = 6;
    cfg.init_seed = seed;
    CsVae<double> vae(SkeletonTopology::toy9(), cfg);
    const int frames = 32, J = 9;
    auto rng = make_rng(derive_seed(seed, 1));
    Tensor<double> x = Tensor<double>::randn({frames * J, kFeatureWidth}, rng);
    NoGradGuard ng;
    auto base = vae.encode_stats(Var<double>::constant(x), 1);
    const Tensor<double> mu0 = base.first.value(), lv0 = base.second.value();
    const int tp = frames / vae.temporal_factor(), j1 = vae.latent_joints();
    for (int tau = 3; tau < frames; tau += 4) {
        Tensor<double> xz = x;
        for (int64_t r = static_cast<int64_t>(tau + 1) * J; r < static_cast<int64_t>(frames) * J;
             ++r)
            for (int c = 0; c < kFeatureWidth; ++c) xz[r * kFeatureWidth + c] = 0.0;
        auto z = vae.encode_stats(Var<double>::constant(xz), 1);
        const Tensor<double>& mu1 = z.first.value();
        const Tensor<double>& lv1 = z.second.value();
        for (int t = 0; t < tp; ++t) {
            if (vae.temporal_factor() * (t + 1) - 1 > tau) continue;
            for (int j = 0; j < j1; ++j)
                for (int c = 0; c < cfg.d_z; ++c) {
                    const int64_t i = (static_cast<int64_t>(t) * j1 + j) * cfg.d_z + c;
                    expect(mu0[i] == mu1[i] && lv0[i] == lv1[i],
                           "vae encoder causality: latent frame " + std::to_string(t) +
                               " changed when zeroing after input frame " + std::to_string(tau));
                }
        }
    }
}

inline void check_causality(int n_stacks = 100, uint64_t seed = 5) {
    check_causal_stacks(n_stacks, seed);
    check_vae_encoder_causality(derive_seed(seed, 0xCA));
}

// ----------------------------- gradient suite -----------------------------

// Central-difference check of every entry of every listed parameter.
inline void fd_check(const std::string& what, const std::function<Var<double>()>& make_loss,
                     const std::vector<std::pair<std::string, Var<double>>>& params,
                     double eps = 1e-5, double tol = 1e-4) {
    for (const auto& [name, p] : params) const_cast<Var<double>&>(p).zero_grad();
    auto loss = make_loss();
    backward(loss);
    std::vector<Tensor<double>> grads;
    grads.reserve(params.size());
    for (const auto& [name, p] : params) grads.push_back(p.grad());
    const auto eval = [&make_loss] {
        NoGradGuard ng;
        return static_cast<double>(make_loss().value()[0]);
    };
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor<double>& v = const_cast<Var<double>&>(params[pi].second).mutable_value();
        for (int64_t i = 0; i < v.numel(); ++i) {
            const double keep = v[i];
            v[i] = keep + eps;
            const double lp = eval();
            v[i] = keep - eps;
            const double lm = eval();
            v[i] = keep;
            const double fd = (lp - lm) / (2.0 * eps);
            const double g = grads[pi][i];
            const double rel = std::abs(fd - g) / std::max({1.0, std::abs(fd), std::abs(g)});
            if (rel > tol)
                throw VerificationError(what + ": d/d " + params[pi].first + "[" +
                                        std::to_string(i) + "] analytic " + std::to_string(g) +
                                        " vs finite-difference " + std::to_string(fd));
        }
    }
}

inline void check_gradient_suite(uint64_t seed = 41) {
    using verify_detail::randn_t;
    const auto topo = SkeletonTopology::toy9();

    {  // skeletal convolution
        auto rng = make_rng(derive_seed(seed, 1));
        SkeletalConvLayer<double> layer(3, 4, rng);
        auto x = Var<double>::leaf(randn_t({2 * 9, 3}, derive_seed(seed, 2)), true);
        auto wsum = Var<double>::constant(randn_t({2 * 9, 4}, derive_seed(seed, 3)));
        auto loss_fn = [&] { return sum_all(mul(layer(x, topo.neighbors), wsum)); };
        fd_check("skeletal conv", loss_fn,
                 {{"x", x}, {"w_self", layer.w_self}, {"w_nb", layer.w_nb}, {"b", layer.b}});
    }
    {  // causal convolution with stride and dilation
        auto rng = make_rng(derive_seed(seed, 4));
        CausalConvLayer<double> layer(2, 3, 3, 2, 2, rng);
        auto x = Var<double>::leaf(randn_t({12, 2}, derive_seed(seed, 5)), true);
        auto wsum = Var<double>::constant(randn_t({6, 3}, derive_seed(seed, 6)));
        auto loss_fn = [&] { return sum_all(mul(layer(x), wsum)); };
        fd_check("causal conv", loss_fn, {{"x", x}, {"w", layer.w}, {"b", layer.b}});
    }
    {  // synergistic router (blended logits through softmax)
        RouterConfig rc;
        rc.n_experts = 4;
        rc.alpha = 0.5;
        rc.d_m = 5;
        rc.d_t = 3;
        auto rng = make_rng(derive_seed(seed, 7));
        SynergisticRouter<double> router(rc, rng);
        auto pool = Var<double>::leaf(randn_t({6, 5}, derive_seed(seed, 8)), true);
        auto text = Var<double>::leaf(randn_t({2, 3}, derive_seed(seed, 9)), true);
        auto wsum = Var<double>::constant(randn_t({6, 4}, derive_seed(seed, 10)));
        auto loss_fn = [&] {
            auto r = combine_logits(router.route_motion(pool), router.route_text(text, 3),
                                    rc.alpha);
            return sum_all(mul(softmax_lastdim(r), wsum));
        };
        fd_check("router", loss_fn,
                 {{"pool", pool},
                  {"text", text},
                  {"motion.w", router.motion.w},
                  {"motion.b", router.motion.b},
                  {"text.w", router.text.w},
                  {"text.b", router.text.b}});
    }
    {  // MoE forward through frozen selection, away from gating thresholds
        RouterConfig rc;
        rc.n_experts = 3;
        rc.alpha = 0.5;
        rc.d_m = 4;
        rc.d_t = 3;
        MoEConfig mc;
        mc.c_exp = 1.0;
        uint64_t data_seed = derive_seed(seed, 11);
        for (int attempt = 0;; ++attempt, data_seed = derive_seed(data_seed, 13)) {
            auto rng = make_rng(derive_seed(seed, 12));
            MoeLayer<double> layer(rc, mc, rng);
            layer.set_bias_tensor(Tensor<float>({3}, {-0.35f, -0.35f, -0.35f}));
            auto pool = Var<double>::leaf(randn_t({8, 4}, data_seed), true);
            auto text = Var<double>::leaf(randn_t({2, 3}, derive_seed(data_seed, 1)), true);
            auto wsum = Var<double>::constant(randn_t({8, 4}, derive_seed(data_seed, 2)));
            auto loss_fn = [&] { return sum_all(mul(layer.forward(pool, text), wsum)); };
            {  // selection margins must dwarf the FD step
                NoGradGuard ng;
                loss_fn();
            }
            const auto& m = layer.last_decision().m;
            double margin = 1e9;
            for (int64_t i = 0; i < m.numel(); ++i) margin = std::min(margin, std::abs(m[i]));
            if (margin < 2e-3) {
                if (attempt > 16)
                    throw VerificationError("moe forward: no well-margined instance found");
                continue;
            }
            std::vector<std::pair<std::string, Var<double>>> params = {{"pool", pool},
                                                                       {"text", text}};
            for (auto& [n, v] : layer.named_params()) params.emplace_back(n, v);
            fd_check("moe forward", loss_fn, params);
            break;
        }
    }
    {  // fused multi-head attention over two independent series
        auto q = Var<double>::leaf(randn_t({6, 8}, derive_seed(seed, 14)), true);
        auto k = Var<double>::leaf(randn_t({6, 8}, derive_seed(seed, 15)), true);
        auto v = Var<double>::leaf(randn_t({6, 8}, derive_seed(seed, 16)), true);
        auto wsum = Var<double>::constant(randn_t({6, 8}, derive_seed(seed, 17)));
        auto loss_fn = [&] { return sum_all(mul(attention(q, k, v, 2, 2), wsum)); };
        fd_check("attention", loss_fn, {{"q", q}, {"k", k}, {"v", v}});
    }
    {  // conditioning modulation around a sub-layer
        auto rng = make_rng(derive_seed(seed, 18));
        AdaLn<double> mod(6, rng);
        uint64_t ws = derive_seed(seed, 19);
        for (Linear<double>* l : {&mod.scale, &mod.shift, &mod.gate}) {
            l->w.set_value(randn_t({6, 6}, ws = derive_seed(ws, 1)));
            l->b.set_value(randn_t({6}, ws = derive_seed(ws, 2)));
        }
        auto x = Var<double>::leaf(randn_t({4, 6}, derive_seed(seed, 21)), true);
        auto cond = Var<double>::leaf(randn_t({2, 6}, derive_seed(seed, 22)), true);
        auto wsum = Var<double>::constant(randn_t({4, 6}, derive_seed(seed, 23)));
        const std::vector<int> idx = {0, 0, 1, 1};
        auto loss_fn = [&] {
            return sum_all(mul(mod.post(mod.pre(x, cond, idx), cond, idx), wsum));
        };
        fd_check("adaln", loss_fn,
                 {{"x", x},
                  {"cond", cond},
                  {"scale.w", mod.scale.w},
                  {"shift.w", mod.shift.w},
                  {"gate.w", mod.gate.w},
                  {"gate.b", mod.gate.b}});
    }
    {  // VAE loss, away from the L1 kinks
        auto target = Var<double>::constant(randn_t({6, kFeatureWidth}, derive_seed(seed, 24)));
        Tensor<double> off = randn_t({6, kFeatureWidth}, derive_seed(seed, 25));
        for (auto& v : off.data) v = (v >= 0 ? 1.0 : -1.0) * (0.1 + 0.2 * std::abs(v));
        Tensor<double> rec = target.value();
        for (int64_t i = 0; i < rec.numel(); ++i) rec[i] += off[i];
        auto recon = Var<double>::leaf(std::move(rec), true);
        auto mu = Var<double>::leaf(randn_t({4, 5}, derive_seed(seed, 26)), true);
        auto logvar = Var<double>::leaf(randn_t({4, 5}, derive_seed(seed, 27)), true);
        auto loss_fn = [&] { return vae_loss(target, recon, mu, logvar, {}).total; };
        fd_check("vae loss", loss_fn, {{"recon", recon}, {"mu", mu}, {"logvar", logvar}});
    }
}

// ----------------------------- padding formula -----------------------------

// Exhaustive k/s/d sweep: with left pad (k-1)d + (1-s) the output has exactly
// floor(T/s) frames and frame t taps input times in [st-p, s(t+1)-1] only.
inline void check_padding_formula() {
    using verify_detail::expect;
    auto rng = make_rng(97);
    for (int k = 1; k <= 5; ++k)
        for (int s = 1; s <= 3; ++s)
            for (int d = 1; d <= 3; ++d) {
                CausalConvLayer<double> layer(1, 1, k, s, d, rng);
                expect(layer.left_pad() == (k - 1) * d + (1 - s),
                       "padding formula: left pad mismatch");
                const int t_in = 12 * s;
                Tensor<double> x = Tensor<double>::randn({t_in, 1}, rng);
                NoGradGuard ng;
                const Tensor<double> y0 = layer(Var<double>::constant(x)).value();
                expect(y0.dim(0) == t_in / s,
                       "padding formula: k=" + std::to_string(k) + " s=" + std::to_string(s) +
                           " d=" + std::to_string(d) + " gives " + std::to_string(y0.dim(0)) +
                           " frames, want " + std::to_string(t_in / s));
                for (int tau = 0; tau < t_in; ++tau) {
                    Tensor<double> xz = x;
                    for (int t = tau + 1; t < t_in; ++t) xz.at(t, 0) = 0.0;
                    const Tensor<double> y1 = layer(Var<double>::constant(xz)).value();
                    for (int t = 0; t < y0.dim(0); ++t)
                        if (s * (t + 1) - 1 <= tau)
                            expect(y0.at(t, 0) == y1.at(t, 0),
                                   "padding formula: output " + std::to_string(t) +
                                       " looked past time " + std::to_string(tau));
                }
                // the newest tap is exactly time s(t+1)-1
                for (int t = 0; t < y0.dim(0); ++t) {
                    Tensor<double> xp = x;
                    xp.at(s * (t + 1) - 1, 0) += 1.0;
                    const Tensor<double> y1 = layer(Var<double>::constant(xp)).value();
                    expect(y1.at(t, 0) != y0.at(t, 0),
                           "padding formula: output " + std::to_string(t) +
                               " ignores its newest input frame");
                }
            }
}

// ----------------------------- metric sanity -----------------------------

inline void check_fid_identity(uint64_t seed = 53) {
    Tensor<double> x = verify_detail::randn_t({64, 8}, seed);
    const double v = fid(x, x);
    verify_detail::expect(v < 1e-6 && v > -1e-6,
                          "fid identity: FID(X, X) = " + std::to_string(v));
}

// ----------------------------- round trips -----------------------------

inline void check_flatten_round_trip(uint64_t seed = 59) {
    auto rng = make_rng(seed);
    MotionSequence m(Tensor<float>::randn({7, 9, kFeatureWidth}, rng));
    MotionSequence back = unflatten_joints(flatten_joints(m), 9);
    verify_detail::expect(back.features.shape == m.features.shape,
                          "flatten round trip: shape changed");
    for (int64_t i = 0; i < m.features.numel(); ++i)
        verify_detail::expect(back.features[i] == m.features[i],
                              "flatten round trip: value changed at " + std::to_string(i));
}

inline void check_file_round_trip(uint64_t seed = 61) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "intermoe_verify";
    fs::create_directories(dir);
    auto rng = make_rng(seed);
    {  // .mot
        MotionSequence m(Tensor<float>::randn({5, 9, kFeatureWidth}, rng));
        write_motion_file(m, dir / "roundtrip.mot");
        MotionSequence back = read_motion_file(dir / "roundtrip.mot");
        verify_detail::expect(back.features.shape == m.features.shape,
                              "mot round trip: shape changed");
        for (int64_t i = 0; i < m.features.numel(); ++i)
            verify_detail::expect(back.features[i] == m.features[i],
                                  "mot round trip: value changed at " + std::to_string(i));
    }
    {  // checkpoint
        std::vector<std::pair<std::string, Tensor<float>>> params;
        params.emplace_back("a", Tensor<float>::randn({3, 4}, rng));
        params.emplace_back("b", Tensor<float>::randn({7}, rng));
        nlohmann::json meta = {{"model", "roundtrip"}, {"value", 42}};
        save_checkpoint(dir / "roundtrip.ckpt", meta, params);
        LoadedCheckpoint lc = load_checkpoint(dir / "roundtrip.ckpt");
        verify_detail::expect(lc.meta == meta, "checkpoint round trip: meta changed");
        for (const auto& [name, t] : params) {
            const Tensor<float>& back = lc.require(name);
            verify_detail::expect(back.shape == t.shape,
                                  "checkpoint round trip: shape changed for " + name);
            for (int64_t i = 0; i < t.numel(); ++i)
                verify_detail::expect(back[i] == t[i],
                                      "checkpoint round trip: value changed in " + name);
        }
    }
}

// ----------------------------- runner -----------------------------

// Runs the full suite, writing one line per check; rethrows the first failure.
inline void run_verify_suite(std::ostream& log) {
    using clock = std::chrono::steady_clock;
    const auto timed = [&log](const char* name, const std::function<void()>& fn) {
        const auto t0 = clock::now();
        try {
            fn();
        } catch (const std::exception& e) {
            log << "FAIL " << name << ": " << e.what() << "\n";
            throw;
        }
        const auto ms =
            std::chrono::duration_cast<std::chrono::milliseconds>(clock::now() - t0).count();
        log << "ok   " << name << " (" << ms << " ms)\n";
    };
    timed("gating matches the dense oracle", [] { check_gating_oracle(); });
    timed("expert bias converges to the expected count", [] { check_bias_convergence(); });
    timed("causal stacks and vae encoder are causal", [] { check_causality(); });
    timed("analytic gradients match finite differences", [] { check_gradient_suite(); });
    timed("causal padding formula is exact", [] { check_padding_formula(); });
    timed("fid of identical feature sets is zero", [] { check_fid_identity(); });
    timed("joint flattening round-trips", [] { check_flatten_round_trip(); });
    timed("mot and checkpoint files round-trip", [] { check_file_round_trip(); });
}

}  // namespace intermoe
