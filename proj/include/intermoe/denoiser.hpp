#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "intermoe/autodiff.hpp"
#include "intermoe/layers.hpp"
#include "intermoe/moe.hpp"

namespace intermoe {

// Cooperative denoiser: one weight-shared transformer stack run over both
// persons' latent streams at once. Rows are laid out stream-major, all
// person-a streams then all person-b streams, each stream contributing T'
// rows; per block every stream self-attends, cross-attends into its partner's
// pre-block hidden state, and feeds a mixture-of-experts FFN whose router and
// bias statistics see both persons' tokens as a single pool.

// Cosine cumulative-signal schedule; betas clipped so alpha_bar stays
// strictly positive at the final step.
struct DiffusionSchedule {
    int train_steps = 0;
    std::vector<double> alpha_bar;  // strictly decreasing, (0, 1)

    static DiffusionSchedule cosine(int steps = 1000) {
        if (steps < 1) throw ConfigError("diffusion schedule: steps must be positive");
        constexpr double kOffset = 0.008;
        auto f = [&](int t) {
            const double u = (static_cast<double>(t) / steps + kOffset) / (1.0 + kOffset);
            const double c = std::cos(u * std::acos(-1.0) / 2.0);
            return c * c;
        };
        DiffusionSchedule out;
        out.train_steps = steps;
        out.alpha_bar.resize(static_cast<size_t>(steps));
        double cum = 1.0;
        for (int t = 0; t < steps; ++t) {
            const double beta = std::min(1.0 - f(t + 1) / f(t), 0.999);
            cum *= 1.0 - beta;
            out.alpha_bar[static_cast<size_t>(t)] = cum;
        }
        return out;
    }

    double ab(int t) const {
        if (t < 0 || t >= train_steps)
            throw ConfigError("timestep " + std::to_string(t) + " outside [0, " +
                              std::to_string(train_steps) + ")");
        return alpha_bar[static_cast<size_t>(t)];
    }
};

// Forward process: z_t = sqrt(ab_t) z_0 + sqrt(1 - ab_t) noise.
template <typename T>
Tensor<T> q_sample(const DiffusionSchedule& sched, const Tensor<T>& z0, int t,
                   const Tensor<T>& noise) {
    if (z0.shape != noise.shape)
        throw ShapeError("q_sample: z0 " + shape_to_string(z0.shape) + " vs noise " +
                         shape_to_string(noise.shape));
    const double ab = sched.ab(t);
    const T sa = static_cast<T>(std::sqrt(ab)), sn = static_cast<T>(std::sqrt(1.0 - ab));
    Tensor<T> out = z0;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = sa * z0[i] + sn * noise[i];
    return out;
}

// Classifier-free guidance blend uncond + w (cond - uncond). The difference
// form keeps equal branches exactly w-independent; w == 1 short-circuits so
// the conditional branch is returned bitwise.
template <typename T>
Tensor<T> cfg_combine(const Tensor<T>& eps_cond, const Tensor<T>& eps_uncond, double w) {
    if (eps_cond.shape != eps_uncond.shape)
        throw ShapeError("cfg_combine: " + shape_to_string(eps_cond.shape) + " vs " +
                         shape_to_string(eps_uncond.shape));
    if (w == 1.0) return eps_cond;
    Tensor<T> out = eps_uncond;
    const T tw = static_cast<T>(w);
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = eps_uncond[i] + tw * (eps_cond[i] - eps_uncond[i]);
    return out;
}

struct DenoiserConfig {
    int d_latent = 128;  // per-person latent width per frame
    int d_model = 128;
    int n_heads = 4;
    int n_blocks = 4;
    int d_text = 16;
    int train_steps = 1000;
    bool dense_ffn = false;  // ablation baseline: plain FFN instead of the MoE block
    MoeMode moe_mode = MoeMode::dynamic_temporal_selection;
    RoutingScope routing_scope = RoutingScope::batch_level;
    int n_experts = 8;
    double c_exp = 1.0;
    double alpha = 0.5;
    int top_k = 2;        // token-choice baseline
    double sigma = 1e-4;  // expert-bias adjustment step
    uint64_t init_seed = 1;

    void validate() const {
        if (d_latent < 1 || d_model < 1 || n_heads < 1 || d_text < 1)
            throw ConfigError("denoiser config: widths and heads must be positive");
        if (n_blocks < 0) throw ConfigError("denoiser config: negative depth");
        if (d_model % n_heads != 0 || d_model % 2 != 0)
            throw ConfigError("denoiser config: d_model must be even and divisible by heads");
        if (train_steps < 1) throw ConfigError("denoiser config: train_steps must be positive");
        if (!dense_ffn) {
            RouterConfig rc;
            rc.n_experts = n_experts;
            rc.alpha = alpha;
            rc.d_m = d_model;
            rc.d_t = d_text;
            rc.routing_scope = routing_scope;
            rc.validate();
        }
    }

    // "dense" | "dts" | "token_choice" | "expert_choice" — the ablation axis.
    std::string ffn_name() const { return dense_ffn ? "dense" : moe_mode_name(moe_mode); }
    void set_ffn(const std::string& name) {
        dense_ffn = name == "dense";
        if (!dense_ffn) moe_mode = moe_mode_from_name(name);
    }
};

struct SamplerConfig {
    int ddim_steps = 50;
    double cfg_weight = 3.5;
    double eta = 0.0;  // deterministic DDIM only
    uint64_t seed = 0;

    void validate(int train_steps) const {
        if (ddim_steps < 1 || ddim_steps > train_steps)
            throw ConfigError("sampler: ddim_steps " + std::to_string(ddim_steps) +
                              " outside [1, " + std::to_string(train_steps) + "]");
        if (eta != 0.0) throw ConfigError("sampler: only deterministic DDIM (eta=0) supported");
    }
};

// Conditioning-derived modulation around one sub-layer: layer-norm the input,
// scale and shift it, and gate the sub-layer output before the residual add.
// Zero-initialized projections give plain layer norm and a unit gate at init.
template <typename T>
struct AdaLn {
    Linear<T> scale, shift, gate;

    AdaLn() = default;
    AdaLn(int d, std::mt19937_64& rng)
        : scale(d, d, rng, 0.0), shift(d, d, rng, 0.0), gate(d, d, rng, 0.0) {}

    // x: {S, d} tokens; cond: {n_streams, d}; idx maps token row -> stream.
    Var<T> pre(const Var<T>& x, const Var<T>& cond, const std::vector<int>& idx) const {
        auto sc = take_rows(scale(cond), idx);
        auto sh = take_rows(shift(cond), idx);
        return add(mul(layer_norm_lastdim(x), add_scalar(sc, T(1))), sh);
    }
    Var<T> post(const Var<T>& y, const Var<T>& cond, const std::vector<int>& idx) const {
        return mul(add_scalar(take_rows(gate(cond), idx), T(1)), y);
    }

    void collect(const std::string& pre_name, std::vector<std::pair<std::string, Var<T>>>& p) {
        p.emplace_back(pre_name + ".scale.w", scale.w);
        p.emplace_back(pre_name + ".scale.b", scale.b);
        p.emplace_back(pre_name + ".shift.w", shift.w);
        p.emplace_back(pre_name + ".shift.b", shift.b);
        p.emplace_back(pre_name + ".gate.w", gate.w);
        p.emplace_back(pre_name + ".gate.b", gate.b);
    }
};

template <typename T>
struct AttentionLayer {
    Linear<T> q, k, v, o;

    AttentionLayer() = default;
    AttentionLayer(int d, std::mt19937_64& rng)
        : q(d, d, rng), k(d, d, rng), v(d, d, rng), o(d, d, rng) {}

    void collect(const std::string& pre_name, std::vector<std::pair<std::string, Var<T>>>& p) {
        p.emplace_back(pre_name + ".q.w", q.w);
        p.emplace_back(pre_name + ".q.b", q.b);
        p.emplace_back(pre_name + ".k.w", k.w);
        p.emplace_back(pre_name + ".k.b", k.b);
        p.emplace_back(pre_name + ".v.w", v.w);
        p.emplace_back(pre_name + ".v.b", v.b);
        p.emplace_back(pre_name + ".o.w", o.w);
        p.emplace_back(pre_name + ".o.b", o.b);
    }
};

template <typename T>
struct DenoiserBlock {
    AdaLn<T> mod_self, mod_cross, mod_ffn;
    AttentionLayer<T> self_attn, cross_attn;
    bool dense = false;
    MoeLayer<T> moe;
    Linear<T> ffn_in, ffn_out;  // dense baseline, hidden 4 d_model

    DenoiserBlock(const DenoiserConfig& cfg, std::mt19937_64& rng)
        : mod_self(cfg.d_model, rng), mod_cross(cfg.d_model, rng), mod_ffn(cfg.d_model, rng),
          self_attn(cfg.d_model, rng), cross_attn(cfg.d_model, rng), dense(cfg.dense_ffn) {
        if (dense) {
            ffn_in = Linear<T>(cfg.d_model, 4 * cfg.d_model, rng);
            ffn_out = Linear<T>(4 * cfg.d_model, cfg.d_model, rng);
        } else {
            RouterConfig rc;
            rc.n_experts = cfg.n_experts;
            rc.alpha = cfg.alpha;
            rc.d_m = cfg.d_model;
            rc.d_t = cfg.d_text;
            rc.routing_scope = cfg.routing_scope;
            MoEConfig mc;
            mc.c_exp = cfg.c_exp;
            mc.mode = cfg.moe_mode;
            mc.top_k = cfg.top_k;
            moe = MoeLayer<T>(rc, mc, rng, cfg.sigma);
        }
    }
};

template <typename T>
class Denoiser {
  public:
    explicit Denoiser(const DenoiserConfig& cfg)
        : cfg_((cfg.validate(), cfg)), sched_(DiffusionSchedule::cosine(cfg.train_steps)) {
        auto rng = make_rng(cfg.init_seed);
        in_proj_ = Linear<T>(cfg.d_latent, cfg.d_model, rng);
        t_mlp1_ = Linear<T>(cfg.d_model, cfg.d_model, rng);
        t_mlp2_ = Linear<T>(cfg.d_model, cfg.d_model, rng);
        text_proj_ = Linear<T>(cfg.d_text, cfg.d_model, rng);
        Tensor<T> ne = Tensor<T>::randn({1, cfg.d_text}, rng);
        for (auto& v : ne.data) v *= static_cast<T>(0.02);
        null_embed_ = Var<T>::leaf(std::move(ne), true);
        blocks_.reserve(static_cast<size_t>(cfg.n_blocks));
        for (int i = 0; i < cfg.n_blocks; ++i) blocks_.emplace_back(cfg, rng);
        // zero-init output so the noise prediction starts at zero
        out_proj_ = Linear<T>(cfg.d_model, cfg.d_latent, rng, 0.0);
    }

    // z: {2B T', d_latent}, person-a streams then person-b streams; ts: one
    // timestep per sample (shared by its two streams); text: {B, d_text}.
    // Returns predicted noise in the same layout.
    Var<T> forward(const Var<T>& z, const std::vector<int>& ts, const Var<T>& text) {
        const int b = static_cast<int>(ts.size());
        const auto& zv = z.value();
        const auto& tv = text.value();
        if (zv.ndim() != 2 || zv.dim(1) != cfg_.d_latent)
            throw ShapeError("denoiser: latents " + shape_to_string(zv.shape) + ", want width " +
                             std::to_string(cfg_.d_latent));
        if (b < 1 || zv.dim(0) % (2 * b) != 0)
            throw ShapeError("denoiser: " + std::to_string(zv.dim(0)) + " latent rows for " +
                             std::to_string(b) + " samples (two streams each)");
        if (tv.ndim() != 2 || tv.dim(0) != b || tv.dim(1) != cfg_.d_text)
            throw ShapeError("denoiser: text " + shape_to_string(tv.shape) + ", want {" +
                             std::to_string(b) + ", " + std::to_string(cfg_.d_text) + "}");
        for (int t : ts) sched_.ab(t);
        ++forward_calls_;

        const int tp = zv.dim(0) / (2 * b), n_streams = 2 * b;
        if (tp < 1) throw ShapeError("denoiser: empty latent streams");
        std::vector<int> dup(static_cast<size_t>(n_streams));
        for (int i = 0; i < n_streams; ++i) dup[static_cast<size_t>(i)] = i % b;
        std::vector<int> stream_of(static_cast<size_t>(n_streams) * tp);
        std::vector<int> partner(stream_of.size());
        for (size_t r = 0; r < stream_of.size(); ++r) {
            stream_of[r] = static_cast<int>(r) / tp;
            partner[r] = static_cast<int>((r + static_cast<size_t>(b) * tp) % stream_of.size());
        }

        auto cond = silu(add(t_mlp2_(silu(t_mlp1_(Var<T>::constant(timestep_features(ts))))),
                             text_proj_(text)));
        auto cond2 = take_rows(cond, dup);    // one row per stream
        auto text2 = take_rows(text, dup);    // per-stream text for the routers

        auto h = in_proj_(z);
        for (auto& blk : blocks_) {
            auto xs = blk.mod_self.pre(h, cond2, stream_of);
            auto sa = blk.self_attn.o(attention(blk.self_attn.q(xs), blk.self_attn.k(xs),
                                                blk.self_attn.v(xs), cfg_.n_heads, n_streams));
            h = add(h, blk.mod_self.post(sa, cond2, stream_of));

            auto xc = blk.mod_cross.pre(h, cond2, stream_of);
            auto px = take_rows(xc, partner);
            auto ca = blk.cross_attn.o(attention(blk.cross_attn.q(xc), blk.cross_attn.k(px),
                                                 blk.cross_attn.v(px), cfg_.n_heads, n_streams));
            h = add(h, blk.mod_cross.post(ca, cond2, stream_of));

            auto xf = blk.mod_ffn.pre(h, cond2, stream_of);
            auto f = blk.dense ? blk.ffn_out(gelu(blk.ffn_in(xf))) : blk.moe.forward(xf, text2);
            h = add(h, blk.mod_ffn.post(f, cond2, stream_of));
        }
        auto out = out_proj_(h);
        if (observer_) observer_();
        return out;
    }

    // Single-sample convenience: z_a/z_b are {T', d_latent}.
    std::pair<Var<T>, Var<T>> denoise_pair(const Var<T>& z_a, const Var<T>& z_b, int t,
                                           const Var<T>& text) {
        if (z_a.shape() != z_b.shape())
            throw ShapeError("denoise_pair: person latents " + shape_to_string(z_a.shape()) +
                             " vs " + shape_to_string(z_b.shape()));
        auto out = forward(concat_rows<T>({z_a, z_b}), {t}, text);
        const int tp = z_a.value().dim(0);
        return {slice_rows(out, 0, tp), slice_rows(out, tp, tp)};
    }

    // One training objective evaluation: per sample draw a timestep and noise,
    // noise both streams, drop the text row to the learned null embedding with
    // probability cond_dropout, and score the noise prediction (MSE over both
    // persons). rng drives draws in order: timesteps, noise, dropout flags.
    Var<T> training_loss(const Tensor<T>& z0, const Var<T>& text, std::mt19937_64& rng,
                         double cond_dropout = 0.1) {
        const int b = text.value().dim(0);
        if (z0.ndim() != 2 || b < 1 || z0.dim(0) % (2 * b) != 0 || z0.dim(1) != cfg_.d_latent)
            throw ShapeError("training_loss: latents " + shape_to_string(z0.shape) + " for " +
                             std::to_string(b) + " samples");
        const int tp = z0.dim(0) / (2 * b);
        std::uniform_int_distribution<int> pick_t(0, cfg_.train_steps - 1);
        std::vector<int> ts(static_cast<size_t>(b));
        for (auto& t : ts) t = pick_t(rng);
        Tensor<T> noise = Tensor<T>::randn(z0.shape, rng);
        Tensor<T> zt = z0;
        for (int s = 0; s < 2 * b; ++s) {
            const double ab = sched_.ab(ts[static_cast<size_t>(s % b)]);
            const T sa = static_cast<T>(std::sqrt(ab)), sn = static_cast<T>(std::sqrt(1.0 - ab));
            for (int64_t i = static_cast<int64_t>(s) * tp * cfg_.d_latent,
                         end = i + static_cast<int64_t>(tp) * cfg_.d_latent;
                 i < end; ++i)
                zt[i] = sa * z0[i] + sn * noise[i];
        }
        std::bernoulli_distribution drop(cond_dropout);
        std::vector<Var<T>> rows;
        rows.reserve(static_cast<size_t>(b));
        for (int i = 0; i < b; ++i)
            rows.push_back(drop(rng) ? null_embed_ : slice_rows(text, i, 1));
        auto eps_hat = forward(Var<T>::constant(std::move(zt)), ts, concat_rows<T>(rows));
        return mean_all(square(sub(eps_hat, Var<T>::constant(std::move(noise)))));
    }

    // Deterministic DDIM trajectory under classifier-free guidance; text gives
    // the conditional rows {B, d_text}. Returns latents in forward() layout.
    Tensor<T> ddim_sample(const SamplerConfig& sc, const Tensor<T>& text, int tp) {
        sc.validate(cfg_.train_steps);
        if (text.ndim() != 2 || text.dim(1) != cfg_.d_text)
            throw ShapeError("ddim_sample: text " + shape_to_string(text.shape));
        if (tp < 1) throw ConfigError("ddim_sample: latent length must be positive");
        const int b = text.dim(0);
        NoGradGuard ng;
        auto rng = make_rng(sc.seed);
        Tensor<T> z = Tensor<T>::randn({2 * b * tp, cfg_.d_latent}, rng);
        auto text_c = Var<T>::constant(text);
        auto text_u = take_rows(null_embed_, std::vector<int>(static_cast<size_t>(b), 0));
        for (int k = sc.ddim_steps; k >= 1; --k) {
            const int t = k * cfg_.train_steps / sc.ddim_steps - 1;
            const int t_prev = (k - 1) * cfg_.train_steps / sc.ddim_steps - 1;
            const std::vector<int> ts(static_cast<size_t>(b), t);
            auto zc = Var<T>::constant(z);
            Tensor<T> eps_c = forward(zc, ts, text_c).value();  // conditional branch first, so
            Tensor<T> eps_u = forward(zc, ts, text_u).value();  // observers can tell them apart
            Tensor<T> eps = cfg_combine(eps_c, eps_u, sc.cfg_weight);
            const double ab_t = sched_.ab(t);
            const double ab_p = t_prev < 0 ? 1.0 : sched_.ab(t_prev);
            const T sa = static_cast<T>(std::sqrt(ab_t)), sn = static_cast<T>(std::sqrt(1.0 - ab_t));
            const T pa = static_cast<T>(std::sqrt(ab_p)), pn = static_cast<T>(std::sqrt(1.0 - ab_p));
            for (int64_t i = 0; i < z.numel(); ++i) {
                const T x0 = (z[i] - sn * eps[i]) / sa;
                z[i] = pa * x0 + pn * eps[i];
            }
        }
        return z;
    }

    // Sign-rule bias adjustment on every MoE block (no-op for baselines).
    void update_biases() {
        for (auto& blk : blocks_)
            if (!blk.dense) blk.moe.update_bias();
    }

    std::vector<std::pair<std::string, Var<T>>> named_params() {
        std::vector<std::pair<std::string, Var<T>>> p;
        p.emplace_back("in_proj.w", in_proj_.w);
        p.emplace_back("in_proj.b", in_proj_.b);
        p.emplace_back("t_mlp1.w", t_mlp1_.w);
        p.emplace_back("t_mlp1.b", t_mlp1_.b);
        p.emplace_back("t_mlp2.w", t_mlp2_.w);
        p.emplace_back("t_mlp2.b", t_mlp2_.b);
        p.emplace_back("text_proj.w", text_proj_.w);
        p.emplace_back("text_proj.b", text_proj_.b);
        p.emplace_back("null_embed", null_embed_);
        for (size_t i = 0; i < blocks_.size(); ++i) {
            const std::string pre = "block" + std::to_string(i) + ".";
            auto& blk = blocks_[i];
            blk.mod_self.collect(pre + "mod_self", p);
            blk.mod_cross.collect(pre + "mod_cross", p);
            blk.mod_ffn.collect(pre + "mod_ffn", p);
            blk.self_attn.collect(pre + "self", p);
            blk.cross_attn.collect(pre + "cross", p);
            if (blk.dense) {
                p.emplace_back(pre + "ffn.w1", blk.ffn_in.w);
                p.emplace_back(pre + "ffn.b1", blk.ffn_in.b);
                p.emplace_back(pre + "ffn.w2", blk.ffn_out.w);
                p.emplace_back(pre + "ffn.b2", blk.ffn_out.b);
            } else {
                for (auto& [name, v] : blk.moe.named_params())
                    p.emplace_back(pre + "moe." + name, v);
            }
        }
        p.emplace_back("out_proj.w", out_proj_.w);
        p.emplace_back("out_proj.b", out_proj_.b);
        return p;
    }

    // Non-gradient state that must survive a checkpoint round trip.
    std::vector<std::pair<std::string, Tensor<float>>> named_buffers() const {
        std::vector<std::pair<std::string, Tensor<float>>> out;
        for (size_t i = 0; i < blocks_.size(); ++i)
            if (!blocks_[i].dense)
                out.emplace_back("block" + std::to_string(i) + ".moe.bias",
                                 blocks_[i].moe.bias_tensor());
        return out;
    }
    void set_named_buffers(const std::map<std::string, Tensor<float>>& bufs) {
        for (size_t i = 0; i < blocks_.size(); ++i) {
            if (blocks_[i].dense) continue;
            const std::string name = "block" + std::to_string(i) + ".moe.bias";
            auto it = bufs.find(name);
            if (it == bufs.end()) throw MissingArtifactError("checkpoint missing buffer: " + name);
            blocks_[i].moe.set_bias_tensor(it->second);
        }
    }

    nlohmann::json config_json() const {
        nlohmann::json j;
        j["d_latent"] = cfg_.d_latent;
        j["d_model"] = cfg_.d_model;
        j["n_heads"] = cfg_.n_heads;
        j["n_blocks"] = cfg_.n_blocks;
        j["d_text"] = cfg_.d_text;
        j["train_steps"] = cfg_.train_steps;
        j["ffn"] = cfg_.ffn_name();
        j["routing_scope"] = routing_scope_name(cfg_.routing_scope);
        j["n_experts"] = cfg_.n_experts;
        j["c_exp"] = cfg_.c_exp;
        j["alpha"] = cfg_.alpha;
        j["top_k"] = cfg_.top_k;
        j["sigma"] = cfg_.sigma;
        j["init_seed"] = cfg_.init_seed;
        return j;
    }

    static Denoiser<T> from_config_json(const nlohmann::json& j) {
        DenoiserConfig cfg;
        cfg.d_latent = j.at("d_latent").get<int>();
        cfg.d_model = j.at("d_model").get<int>();
        cfg.n_heads = j.at("n_heads").get<int>();
        cfg.n_blocks = j.at("n_blocks").get<int>();
        cfg.d_text = j.at("d_text").get<int>();
        cfg.train_steps = j.at("train_steps").get<int>();
        cfg.set_ffn(j.at("ffn").get<std::string>());
        cfg.routing_scope = routing_scope_from_name(j.at("routing_scope").get<std::string>());
        cfg.n_experts = j.at("n_experts").get<int>();
        cfg.c_exp = j.at("c_exp").get<double>();
        cfg.alpha = j.at("alpha").get<double>();
        cfg.top_k = j.at("top_k").get<int>();
        cfg.sigma = j.at("sigma").get<double>();
        cfg.init_seed = j.at("init_seed").get<uint64_t>();
        return Denoiser<T>(cfg);
    }

    const DenoiserConfig& config() const { return cfg_; }
    const DiffusionSchedule& schedule() const { return sched_; }
    std::vector<DenoiserBlock<T>>& blocks() { return blocks_; }
    Var<T>& null_embedding() { return null_embed_; }
    Linear<T>& input_projection() { return in_proj_; }
    Linear<T>& output_projection() { return out_proj_; }
    int64_t forward_calls() const { return forward_calls_; }
    void reset_forward_calls() { forward_calls_ = 0; }
    // Invoked after every forward pass while blocks still hold that pass's
    // routing decisions; drives the routing telemetry.
    void set_forward_observer(std::function<void()> fn) { observer_ = std::move(fn); }

  private:
    // standard sinusoidal features of the integer timestep, one row per sample
    Tensor<T> timestep_features(const std::vector<int>& ts) const {
        const int half = cfg_.d_model / 2;
        Tensor<T> f = Tensor<T>::zeros({static_cast<int>(ts.size()), cfg_.d_model});
        for (size_t r = 0; r < ts.size(); ++r)
            for (int j = 0; j < half; ++j) {
                const double ang = ts[r] * std::exp(-std::log(10000.0) * j / half);
                f.at(static_cast<int>(r), 2 * j) = static_cast<T>(std::sin(ang));
                f.at(static_cast<int>(r), 2 * j + 1) = static_cast<T>(std::cos(ang));
            }
        return f;
    }

    DenoiserConfig cfg_;
    DiffusionSchedule sched_;
    Linear<T> in_proj_, t_mlp1_, t_mlp2_, text_proj_, out_proj_;
    Var<T> null_embed_;  // {1, d_text}, used for dropped/unconditional text
    std::vector<DenoiserBlock<T>> blocks_;
    int64_t forward_calls_ = 0;
    std::function<void()> observer_;
};

}  // namespace intermoe
