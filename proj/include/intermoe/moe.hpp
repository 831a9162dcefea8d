#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "intermoe/autodiff.hpp"
#include "intermoe/layers.hpp"

namespace intermoe {

// Mixture-of-experts block with a two-signal router: per-token logits from the
// motion features blended with per-sample logits from the text condition, then
// a sigmoid-plus-bias threshold decides which experts see which tokens. All
// gating tensors are stored token-major: rows = pooled tokens (S), columns =
// experts (N).

enum class RoutingScope { batch_level, instance_level };
enum class MoeMode { dynamic_temporal_selection, token_choice, expert_choice };

inline const char* moe_mode_name(MoeMode m) {
    switch (m) {
        case MoeMode::dynamic_temporal_selection: return "dts";
        case MoeMode::token_choice: return "token_choice";
        case MoeMode::expert_choice: return "expert_choice";
    }
    throw ConfigError("unknown moe mode");
}

inline MoeMode moe_mode_from_name(const std::string& s) {
    if (s == "dts") return MoeMode::dynamic_temporal_selection;
    if (s == "token_choice") return MoeMode::token_choice;
    if (s == "expert_choice") return MoeMode::expert_choice;
    throw ConfigError("unknown moe mode: '" + s + "'");
}

inline const char* routing_scope_name(RoutingScope s) {
    return s == RoutingScope::batch_level ? "batch_level" : "instance_level";
}

inline RoutingScope routing_scope_from_name(const std::string& s) {
    if (s == "batch_level") return RoutingScope::batch_level;
    if (s == "instance_level") return RoutingScope::instance_level;
    throw ConfigError("unknown routing scope: '" + s + "'");
}

struct RouterConfig {
    int n_experts = 8;
    double alpha = 0.5;  // weight of the motion logits in the blend
    int d_m = 0;         // motion/pool feature width
    int d_t = 0;         // text embedding width
    RoutingScope routing_scope = RoutingScope::batch_level;

    void validate() const {
        if (n_experts < 1 || d_m < 1 || d_t < 1)
            throw ConfigError("router config: n_experts/d_m/d_t must be positive");
        if (alpha < 0.0 || alpha > 1.0)
            throw ConfigError("router config: alpha " + std::to_string(alpha) +
                              " outside [0,1]");
    }
};

struct MoEConfig {
    double c_exp = 1.0;  // expected experts per pooled token
    MoeMode mode = MoeMode::dynamic_temporal_selection;
    int top_k = 2;  // token-choice only

    // Expected per-expert selection count for a pool of S tokens.
    double k_expected(int s, int n_experts) const {
        return c_exp * static_cast<double>(s) / static_cast<double>(n_experts);
    }
};

// Per-expert selection bias, adjusted by a sign rule once per training step
// and constrained to the open interval (-1, 0).
struct ExpertBiasState {
    static constexpr double kEdge = 1e-6;
    std::vector<double> b;
    double sigma = 1e-4;
    std::vector<int64_t> last_k_select;

    ExpertBiasState() = default;
    explicit ExpertBiasState(int n_experts, double step = 1e-4)
        : b(static_cast<size_t>(n_experts), -0.5), sigma(step) {}

    int n_experts() const { return static_cast<int>(b.size()); }
    void clamp() {
        for (auto& v : b) v = std::clamp(v, -1.0 + kEdge, -kEdge);
    }
};

template <typename T>
struct GatingDecision {
    Var<T> r_comb;             // blended logits {S, N}
    Var<T> a;                  // softmax over experts per token {S, N}
    Var<T> g;                  // final gates {S, N}; zero where not selected
    Tensor<T> m;               // selection scores sigmoid(r)+b {S, N}; empty for baselines
    std::vector<std::vector<int>> selected;  // per expert: pool rows it processes
    std::vector<int64_t> k_select;           // per expert: selected.size()

    int pool_size() const { return a.value().dim(0); }
};

// Two-layer feed-forward expert; all experts share the block width d.
template <typename T>
struct ExpertFFN {
    Linear<T> in, out;

    ExpertFFN() = default;
    ExpertFFN(int d, int hidden, std::mt19937_64& rng)
        : in(d, hidden, rng), out(hidden, d, rng) {}
    Var<T> operator()(const Var<T>& x) const { return out(gelu(in(x))); }
};

// ----------------------------- routing -----------------------------

template <typename T>
struct SynergisticRouter {
    Linear<T> motion, text;  // {d_m, N}, {d_t, N}

    SynergisticRouter() = default;
    SynergisticRouter(const RouterConfig& cfg, std::mt19937_64& rng)
        : motion(cfg.d_m, cfg.n_experts, rng), text(cfg.d_t, cfg.n_experts, rng) {}

    // pool: {S, d_m} -> per-token logits {S, N}
    Var<T> route_motion(const Var<T>& pool) const { return motion(pool); }

    // text_embed: {B, d_t} -> per-sample logits replicated over each sample's
    // tokens_per_sample pool rows -> {S, N}
    Var<T> route_text(const Var<T>& text_embed, int tokens_per_sample) const {
        if (tokens_per_sample < 1) throw ShapeError("route_text: tokens_per_sample < 1");
        auto per_sample = text(text_embed);
        const int b = text_embed.value().dim(0);
        std::vector<int> idx(static_cast<size_t>(b) * tokens_per_sample);
        for (size_t s = 0; s < idx.size(); ++s) idx[s] = static_cast<int>(s) / tokens_per_sample;
        return take_rows(per_sample, std::move(idx));
    }
};

template <typename T>
Var<T> combine_logits(const Var<T>& r_motion, const Var<T>& r_text, double alpha) {
    if (alpha < 0.0 || alpha > 1.0)
        throw ConfigError("combine_logits: alpha " + std::to_string(alpha) + " outside [0,1]");
    if (r_motion.shape() != r_text.shape())
        throw ShapeError("combine_logits: " + shape_to_string(r_motion.shape()) + " vs " +
                         shape_to_string(r_text.shape()));
    return add(scale(r_motion, static_cast<T>(alpha)),
               scale(r_text, static_cast<T>(1.0 - alpha)));
}

// ----------------------------- selection rules -----------------------------

namespace detail {

template <typename T>
GatingDecision<T> finish_decision(Var<T> r_comb, Var<T> a, const Tensor<uint8_t>& mask,
                                  Tensor<T> m = {}) {
    const int s_rows = a.value().dim(0), n = a.value().dim(1);
    GatingDecision<T> d;
    d.r_comb = std::move(r_comb);
    // exact zero where unselected, untouched softmax value where selected
    Tensor<T> mask_t = Tensor<T>::zeros({s_rows, n});
    for (int64_t i = 0; i < mask.numel(); ++i) mask_t[i] = mask[i] ? T(1) : T(0);
    d.g = mul(a, Var<T>::constant(std::move(mask_t)));
    d.a = std::move(a);
    d.m = std::move(m);
    d.selected.assign(static_cast<size_t>(n), {});
    for (int s = 0; s < s_rows; ++s)
        for (int e = 0; e < n; ++e)
            if (mask.at(s, e)) d.selected[static_cast<size_t>(e)].push_back(s);
    d.k_select.resize(static_cast<size_t>(n));
    for (int e = 0; e < n; ++e)
        d.k_select[static_cast<size_t>(e)] = static_cast<int64_t>(d.selected[e].size());
    return d;
}

}  // namespace detail

// Dynamic temporal selection: expert e takes token s iff sigmoid(r_comb) + b_e
// is strictly positive. Gates are the per-token softmax values; the threshold
// itself carries no gradient.
template <typename T>
GatingDecision<T> dynamic_select(const Var<T>& r_comb, const ExpertBiasState& bias) {
    const auto& rv = r_comb.value();
    if (rv.ndim() != 2 || rv.dim(1) != bias.n_experts())
        throw ShapeError("dynamic_select: logits " + shape_to_string(rv.shape) + " vs " +
                         std::to_string(bias.n_experts()) + " experts");
    const int s_rows = rv.dim(0), n = rv.dim(1);
    Tensor<T> m = Tensor<T>::zeros({s_rows, n});
    Tensor<uint8_t> mask = Tensor<uint8_t>::zeros({s_rows, n});
    for (int s = 0; s < s_rows; ++s)
        for (int e = 0; e < n; ++e) {
            const double r = static_cast<double>(rv.at(s, e));
            const double score = 1.0 / (1.0 + std::exp(-r)) + bias.b[static_cast<size_t>(e)];
            m.at(s, e) = static_cast<T>(score);
            mask.at(s, e) = score > 0.0 ? 1 : 0;
        }
    return detail::finish_decision(r_comb, softmax_lastdim(r_comb), mask, std::move(m));
}

// Baseline: each token keeps its top_k experts by blended logit; kept gates are
// renormalized to sum to 1 per token. Ties break toward the lower expert index.
template <typename T>
GatingDecision<T> token_choice_select(const Var<T>& r_comb, int top_k) {
    const auto& rv = r_comb.value();
    if (rv.ndim() != 2) throw ShapeError("token_choice: need 2D logits");
    const int s_rows = rv.dim(0), n = rv.dim(1);
    if (top_k < 1 || top_k > n)
        throw ConfigError("token_choice: top_k " + std::to_string(top_k) + " outside [1," +
                          std::to_string(n) + "]");
    Tensor<uint8_t> mask = Tensor<uint8_t>::zeros({s_rows, n});
    std::vector<int> order(static_cast<size_t>(n));
    for (int s = 0; s < s_rows; ++s) {
        for (int e = 0; e < n; ++e) order[static_cast<size_t>(e)] = e;
        std::partial_sort(order.begin(), order.begin() + top_k, order.end(),
                          [&](int x, int y) {
                              const T vx = rv.at(s, x), vy = rv.at(s, y);
                              return vx > vy || (vx == vy && x < y);
                          });
        for (int i = 0; i < top_k; ++i) mask.at(s, order[static_cast<size_t>(i)]) = 1;
    }
    auto a = softmax_lastdim(r_comb);
    auto d = detail::finish_decision(r_comb, a, mask);
    d.g = div_rows(d.g, sum_lastdim(d.g));
    return d;
}

// Baseline: each expert keeps its top-capacity tokens by blended logit; gates
// stay the raw per-token softmax values. Ties break toward the lower row.
template <typename T>
GatingDecision<T> expert_choice_select(const Var<T>& r_comb, int capacity) {
    const auto& rv = r_comb.value();
    if (rv.ndim() != 2) throw ShapeError("expert_choice: need 2D logits");
    const int s_rows = rv.dim(0), n = rv.dim(1);
    if (capacity < 1 || capacity > s_rows)
        throw ConfigError("expert_choice: capacity " + std::to_string(capacity) +
                          " outside [1," + std::to_string(s_rows) + "]");
    Tensor<uint8_t> mask = Tensor<uint8_t>::zeros({s_rows, n});
    std::vector<int> order(static_cast<size_t>(s_rows));
    for (int e = 0; e < n; ++e) {
        for (int s = 0; s < s_rows; ++s) order[static_cast<size_t>(s)] = s;
        std::partial_sort(order.begin(), order.begin() + capacity, order.end(),
                          [&](int x, int y) {
                              const T vx = rv.at(x, e), vy = rv.at(y, e);
                              return vx > vy || (vx == vy && x < y);
                          });
        for (int i = 0; i < capacity; ++i) mask.at(order[static_cast<size_t>(i)], e) = 1;
    }
    return detail::finish_decision(r_comb, softmax_lastdim(r_comb), mask);
}

// ----------------------------- bias update -----------------------------

// Sign-rule step toward K_select == K_exp, once per training step. Selection
// counting is a training-only behavior; the biases are frozen at inference.
inline void count_and_update_bias(const std::vector<int64_t>& k_select, double k_exp,
                                  ExpertBiasState& state) {
    if (!grad_mode_flag())
        throw ConfigError("bias update attempted at inference (gradients disabled)");
    if (k_select.size() != state.b.size())
        throw ShapeError("bias update: " + std::to_string(k_select.size()) + " counts vs " +
                         std::to_string(state.b.size()) + " experts");
    state.last_k_select = k_select;
    for (size_t e = 0; e < state.b.size(); ++e) {
        const double diff = static_cast<double>(k_select[e]) - k_exp;
        const double step = diff > 0 ? 1.0 : diff < 0 ? -1.0 : 0.0;
        state.b[e] -= state.sigma * step;
    }
    state.clamp();
}

// ----------------------------- dispatch -----------------------------

// Gather-compute-scatter evaluation of sum_e G_{s,e} * E_e(pool_s). Experts run
// over their selected rows only and are reduced in fixed expert order; a token
// selected by nobody contributes an exact zero row.
template <typename T>
Var<T> moe_dispatch(const Var<T>& pool, const GatingDecision<T>& decision,
                    const std::vector<ExpertFFN<T>>& experts) {
    const auto& pv = pool.value();
    if (pv.ndim() != 2 || pv.dim(0) != decision.pool_size())
        throw ShapeError("moe_dispatch: pool " + shape_to_string(pv.shape) + " vs decision on " +
                         std::to_string(decision.pool_size()) + " rows");
    if (experts.size() != decision.selected.size())
        throw ShapeError("moe_dispatch: " + std::to_string(experts.size()) + " experts vs " +
                         std::to_string(decision.selected.size()) + " gate columns");
    const int s_rows = pv.dim(0), d = pv.dim(1);
    Var<T> out = Var<T>::constant(Tensor<T>::zeros({s_rows, d}));
    for (size_t e = 0; e < experts.size(); ++e) {
        const auto& sel = decision.selected[e];
        if (sel.empty()) continue;
        auto rows = take_rows(pool, sel);
        auto y = experts[e](rows);
        auto gates = take_col_rows(decision.g, static_cast<int>(e), sel);
        out = add(out, scatter_rows(s_rows, mul_colvec(y, gates), sel));
    }
    return out;
}

// ----------------------------- the full layer -----------------------------

// Router + bias state + experts for one network block. With batch_level scope
// the whole pool routes as one unit; with instance_level each sample's token
// span is routed separately and the decisions are merged for dispatch.
template <typename T>
class MoeLayer {
  public:
    MoeLayer() = default;
    MoeLayer(const RouterConfig& rcfg, const MoEConfig& mcfg, std::mt19937_64& rng,
             double sigma = 1e-4)
        : rcfg_((rcfg.validate(), rcfg)), mcfg_(mcfg), router_(rcfg, rng),
          bias_(rcfg.n_experts, sigma) {
        experts_.reserve(static_cast<size_t>(rcfg.n_experts));
        for (int e = 0; e < rcfg.n_experts; ++e)
            experts_.emplace_back(rcfg.d_m, 2 * rcfg.d_m, rng);
    }

    // pool: {S, d_m} with rows [sample][token]; text_embed: {B, d_t}.
    Var<T> forward(const Var<T>& pool, const Var<T>& text_embed) {
        const int s_rows = pool.value().dim(0);
        const int b = text_embed.value().dim(0);
        if (b < 1 || s_rows % b != 0)
            throw ShapeError("moe forward: " + std::to_string(s_rows) + " pool rows vs " +
                             std::to_string(b) + " samples");
        const int per = s_rows / b;
        auto r_comb = combine_logits(router_.route_motion(pool),
                                     router_.route_text(text_embed, per), rcfg_.alpha);
        if (rcfg_.routing_scope == RoutingScope::batch_level) {
            last_ = select(r_comb);
        } else {
            last_ = select(slice_rows(r_comb, 0, per));
            for (int i = 1; i < b; ++i) {
                auto part = select(slice_rows(r_comb, i * per, per));
                merge_into(last_, part, i * per);
            }
        }
        return moe_dispatch(pool, last_, experts_);
    }

    // Applies the sign rule using the counts of the most recent forward.
    void update_bias() {
        if (mcfg_.mode != MoeMode::dynamic_temporal_selection) return;
        if (last_.k_select.empty()) throw ConfigError("bias update before any forward");
        count_and_update_bias(last_.k_select, mcfg_.k_expected(last_.pool_size(), n_experts()),
                              bias_);
    }

    int n_experts() const { return rcfg_.n_experts; }
    const GatingDecision<T>& last_decision() const { return last_; }
    ExpertBiasState& bias_state() { return bias_; }
    const ExpertBiasState& bias_state() const { return bias_; }
    const MoEConfig& moe_config() const { return mcfg_; }

    std::vector<std::pair<std::string, Var<T>>> named_params() {
        std::vector<std::pair<std::string, Var<T>>> p;
        p.emplace_back("router.motion.w", router_.motion.w);
        p.emplace_back("router.motion.b", router_.motion.b);
        p.emplace_back("router.text.w", router_.text.w);
        p.emplace_back("router.text.b", router_.text.b);
        for (size_t e = 0; e < experts_.size(); ++e) {
            const std::string pre = "expert" + std::to_string(e);
            p.emplace_back(pre + ".w1", experts_[e].in.w);
            p.emplace_back(pre + ".b1", experts_[e].in.b);
            p.emplace_back(pre + ".w2", experts_[e].out.w);
            p.emplace_back(pre + ".b2", experts_[e].out.b);
        }
        return p;
    }

    Tensor<float> bias_tensor() const {
        Tensor<float> t = Tensor<float>::zeros({n_experts()});
        for (int e = 0; e < n_experts(); ++e) t[e] = static_cast<float>(bias_.b[static_cast<size_t>(e)]);
        return t;
    }
    void set_bias_tensor(const Tensor<float>& t) {
        if (t.numel() != n_experts())
            throw ConfigError("bias tensor: " + std::to_string(t.numel()) + " values for " +
                              std::to_string(n_experts()) + " experts");
        for (int e = 0; e < n_experts(); ++e) bias_.b[static_cast<size_t>(e)] = t[e];
        bias_.clamp();
    }

  private:
    GatingDecision<T> select(const Var<T>& r_comb) const {
        switch (mcfg_.mode) {
            case MoeMode::dynamic_temporal_selection:
                return dynamic_select(r_comb, bias_);
            case MoeMode::token_choice:
                return token_choice_select(r_comb, mcfg_.top_k);
            case MoeMode::expert_choice: {
                const int s_rows = r_comb.value().dim(0);
                const int cap = std::clamp(
                    static_cast<int>(std::llround(mcfg_.k_expected(s_rows, n_experts()))), 1,
                    s_rows);
                return expert_choice_select(r_comb, cap);
            }
        }
        throw ConfigError("moe layer: unknown mode");
    }

    // Append a per-instance decision computed on rows [base, base+len) of the
    // full pool into `into`, shifting its row indices by base.
    static void merge_into(GatingDecision<T>& into, const GatingDecision<T>& part, int base) {
        into.r_comb = concat_rows<T>({into.r_comb, part.r_comb});
        into.a = concat_rows<T>({into.a, part.a});
        into.g = concat_rows<T>({into.g, part.g});
        if (into.m.numel() > 0 && part.m.numel() > 0) {
            Tensor<T> m = Tensor<T>::zeros({into.m.dim(0) + part.m.dim(0), into.m.dim(1)});
            std::copy(into.m.data.begin(), into.m.data.end(), m.data.begin());
            std::copy(part.m.data.begin(), part.m.data.end(),
                      m.data.begin() + into.m.numel());
            into.m = std::move(m);
        }
        for (size_t e = 0; e < into.selected.size(); ++e) {
            for (int s : part.selected[e]) into.selected[e].push_back(s + base);
            into.k_select[e] += part.k_select[e];
        }
    }

    RouterConfig rcfg_;
    MoEConfig mcfg_;
    SynergisticRouter<T> router_;
    ExpertBiasState bias_;
    std::vector<ExpertFFN<T>> experts_;
    GatingDecision<T> last_;
};

// ----------------------------- telemetry -----------------------------

inline std::string routing_telemetry_header() { return "step,block,expert,k_select,k_exp,b_e"; }

inline void append_routing_telemetry(std::ostream& os, int64_t step, int block,
                                     const std::vector<int64_t>& k_select, double k_exp,
                                     const std::vector<double>& bias) {
    for (size_t e = 0; e < k_select.size(); ++e) {
        os << step << ',' << block << ',' << e << ',' << k_select[e] << ',' << k_exp << ','
           << bias[e] << '\n';
    }
}

}  // namespace intermoe
