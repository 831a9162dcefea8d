#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "intermoe/csvae.hpp"
#include "intermoe/denoiser.hpp"
#include "intermoe/eval.hpp"

namespace intermoe {

// One document drives every stage. Flags override keys by dotted path; the
// effective config is re-emitted beside outputs and its hash is embedded in
// every artifact the run produces.
struct RunConfig {
    // run
    std::string out_dir = "runs/default";
    uint64_t seed = 7;
    std::string precision = "f32";  // f32 | f64

    // corpus
    uint64_t corpus_seed = 2024;
    int corpus_samples = 512;
    int frames = 32;
    int holdout = 64;  // trailing samples reserved for evaluation

    // vae
    CsVaeConfig vae;
    VaeLossWeights vae_loss_w;
    int vae_steps = 2000;
    int vae_batch = 16;
    double vae_lr = 1e-3;

    // denoiser (d_latent is pinned by the trained vae at runtime)
    DenoiserConfig denoiser;
    int denoiser_steps = 10000;
    int denoiser_batch = 16;
    double denoiser_lr = 3e-4;
    double cond_dropout = 0.1;

    // sampler
    SamplerConfig sampler;

    // eval
    EvalConfig eval;
    uint64_t eval_seed = 99;
    int eval_generated = 128;     // generated-set size for gen-vs-real metrics
    int mm_per_condition = 8;     // generations per text condition (MultiModality)

    // ablate: reduced budgets applied identically to every grid point
    int ablate_steps = 800;
    int ablate_batch = 8;
    int ablate_samples = 128;
    int ablate_d_model = 64;
    int ablate_blocks = 2;
    int ablate_generated = 64;

    void validate() const {
        if (precision != "f32" && precision != "f64")
            throw ConfigError("config: precision '" + precision + "' (want f32 or f64)");
        if (corpus_samples < 2 || frames < 4)
            throw ConfigError("config: corpus needs >= 2 samples and >= 4 frames");
        if (holdout < 2 || holdout >= corpus_samples)
            throw ConfigError("config: holdout " + std::to_string(holdout) + " outside [2, " +
                              std::to_string(corpus_samples) + ")");
        if (vae_steps < 1 || vae_batch < 1 || vae_lr <= 0)
            throw ConfigError("config: bad vae budget");
        if (denoiser_steps < 1 || denoiser_batch < 1 || denoiser_lr <= 0)
            throw ConfigError("config: bad denoiser budget");
        if (cond_dropout < 0.0 || cond_dropout > 1.0)
            throw ConfigError("config: cond_dropout outside [0,1]");
        if (eval_generated < 4 || mm_per_condition < 2)
            throw ConfigError("config: eval set sizes too small");
        if (ablate_steps < 1 || ablate_batch < 1 || ablate_samples < 8 || ablate_d_model < 2 ||
            ablate_blocks < 0 || ablate_generated < 4)
            throw ConfigError("config: bad ablate budget");
        vae_loss_w.validate();
        denoiser.validate();
        sampler.validate(denoiser.train_steps);
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["run"] = {{"out_dir", out_dir}, {"seed", seed}, {"precision", precision}};
        j["corpus"] = {{"seed", corpus_seed},
                       {"samples", corpus_samples},
                       {"frames", frames},
                       {"holdout", holdout}};
        j["vae"] = {{"channels", vae.channels},
                    {"d_z", vae.d_z},
                    {"kernel", vae.kernel},
                    {"init_seed", vae.init_seed},
                    {"lambda_pos", vae_loss_w.lambda_pos},
                    {"lambda_vel", vae_loss_w.lambda_vel},
                    {"lambda_kl", vae_loss_w.lambda_kl},
                    {"steps", vae_steps},
                    {"batch", vae_batch},
                    {"lr", vae_lr}};
        j["denoiser"] = {{"d_model", denoiser.d_model},
                         {"n_heads", denoiser.n_heads},
                         {"n_blocks", denoiser.n_blocks},
                         {"d_text", denoiser.d_text},
                         {"diffusion_steps", denoiser.train_steps},
                         {"ffn", denoiser.ffn_name()},
                         {"routing_scope", routing_scope_name(denoiser.routing_scope)},
                         {"n_experts", denoiser.n_experts},
                         {"c_exp", denoiser.c_exp},
                         {"alpha", denoiser.alpha},
                         {"top_k", denoiser.top_k},
                         {"sigma", denoiser.sigma},
                         {"init_seed", denoiser.init_seed},
                         {"steps", denoiser_steps},
                         {"batch", denoiser_batch},
                         {"lr", denoiser_lr},
                         {"cond_dropout", cond_dropout}};
        j["sampler"] = {{"ddim_steps", sampler.ddim_steps},
                        {"cfg_weight", sampler.cfg_weight},
                        {"eta", sampler.eta},
                        {"seed", sampler.seed}};
        j["eval"] = {{"s_d", eval.s_d},
                     {"s_l", eval.s_l},
                     {"r_pool", eval.r_pool},
                     {"n_repeats", eval.n_repeats},
                     {"seed", eval_seed},
                     {"generated", eval_generated},
                     {"mm_per_condition", mm_per_condition}};
        j["ablate"] = {{"steps", ablate_steps},
                       {"batch", ablate_batch},
                       {"samples", ablate_samples},
                       {"d_model", ablate_d_model},
                       {"blocks", ablate_blocks},
                       {"generated", ablate_generated}};
        return j;
    }

    static RunConfig from_json(const nlohmann::json& j) {
        RunConfig c;
        try {
            // config_hash appears in re-emitted effective configs; accept and ignore it
            check_keys(j, {"run", "corpus", "vae", "denoiser", "sampler", "eval", "ablate",
                           "config_hash"},
                       "");
            if (j.contains("run")) {
                const auto& r = j.at("run");
                check_keys(r, {"out_dir", "seed", "precision"}, "run.");
                get_to(r, "out_dir", c.out_dir);
                get_to(r, "seed", c.seed);
                get_to(r, "precision", c.precision);
            }
            if (j.contains("corpus")) {
                const auto& r = j.at("corpus");
                check_keys(r, {"seed", "samples", "frames", "holdout"}, "corpus.");
                get_to(r, "seed", c.corpus_seed);
                get_to(r, "samples", c.corpus_samples);
                get_to(r, "frames", c.frames);
                get_to(r, "holdout", c.holdout);
            }
            if (j.contains("vae")) {
                const auto& r = j.at("vae");
                check_keys(r,
                           {"channels", "d_z", "kernel", "init_seed", "lambda_pos", "lambda_vel",
                            "lambda_kl", "steps", "batch", "lr"},
                           "vae.");
                get_to(r, "channels", c.vae.channels);
                get_to(r, "d_z", c.vae.d_z);
                get_to(r, "kernel", c.vae.kernel);
                get_to(r, "init_seed", c.vae.init_seed);
                get_to(r, "lambda_pos", c.vae_loss_w.lambda_pos);
                get_to(r, "lambda_vel", c.vae_loss_w.lambda_vel);
                get_to(r, "lambda_kl", c.vae_loss_w.lambda_kl);
                get_to(r, "steps", c.vae_steps);
                get_to(r, "batch", c.vae_batch);
                get_to(r, "lr", c.vae_lr);
            }
            if (j.contains("denoiser")) {
                const auto& r = j.at("denoiser");
                check_keys(r,
                           {"d_model", "n_heads", "n_blocks", "d_text", "diffusion_steps", "ffn",
                            "routing_scope", "n_experts", "c_exp", "alpha", "top_k", "sigma",
                            "init_seed", "steps", "batch", "lr", "cond_dropout"},
                           "denoiser.");
                get_to(r, "d_model", c.denoiser.d_model);
                get_to(r, "n_heads", c.denoiser.n_heads);
                get_to(r, "n_blocks", c.denoiser.n_blocks);
                get_to(r, "d_text", c.denoiser.d_text);
                get_to(r, "diffusion_steps", c.denoiser.train_steps);
                if (r.contains("ffn")) c.denoiser.set_ffn(r.at("ffn").get<std::string>());
                if (r.contains("routing_scope"))
                    c.denoiser.routing_scope =
                        routing_scope_from_name(r.at("routing_scope").get<std::string>());
                get_to(r, "n_experts", c.denoiser.n_experts);
                get_to(r, "c_exp", c.denoiser.c_exp);
                get_to(r, "alpha", c.denoiser.alpha);
                get_to(r, "top_k", c.denoiser.top_k);
                get_to(r, "sigma", c.denoiser.sigma);
                get_to(r, "init_seed", c.denoiser.init_seed);
                get_to(r, "steps", c.denoiser_steps);
                get_to(r, "batch", c.denoiser_batch);
                get_to(r, "lr", c.denoiser_lr);
                get_to(r, "cond_dropout", c.cond_dropout);
            }
            if (j.contains("sampler")) {
                const auto& r = j.at("sampler");
                check_keys(r, {"ddim_steps", "cfg_weight", "eta", "seed"}, "sampler.");
                get_to(r, "ddim_steps", c.sampler.ddim_steps);
                get_to(r, "cfg_weight", c.sampler.cfg_weight);
                get_to(r, "eta", c.sampler.eta);
                get_to(r, "seed", c.sampler.seed);
            }
            if (j.contains("eval")) {
                const auto& r = j.at("eval");
                check_keys(r, {"s_d", "s_l", "r_pool", "n_repeats", "seed", "generated",
                               "mm_per_condition"},
                           "eval.");
                get_to(r, "s_d", c.eval.s_d);
                get_to(r, "s_l", c.eval.s_l);
                get_to(r, "r_pool", c.eval.r_pool);
                get_to(r, "n_repeats", c.eval.n_repeats);
                get_to(r, "seed", c.eval_seed);
                get_to(r, "generated", c.eval_generated);
                get_to(r, "mm_per_condition", c.mm_per_condition);
            }
            if (j.contains("ablate")) {
                const auto& r = j.at("ablate");
                check_keys(r, {"steps", "batch", "samples", "d_model", "blocks", "generated"},
                           "ablate.");
                get_to(r, "steps", c.ablate_steps);
                get_to(r, "batch", c.ablate_batch);
                get_to(r, "samples", c.ablate_samples);
                get_to(r, "d_model", c.ablate_d_model);
                get_to(r, "blocks", c.ablate_blocks);
                get_to(r, "generated", c.ablate_generated);
            }
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config field error: " + std::string(e.what()));
        }
        c.validate();
        return c;
    }

    // canonical hash: nlohmann objects serialize with sorted keys
    std::string hash() const { return fnv1a64_hex(to_json().dump()); }

    // output root, honoring the INTERMOE_OUT environment variable
    std::filesystem::path root() const {
        std::filesystem::path p(out_dir);
        if (const char* env = std::getenv("INTERMOE_OUT"); env && *env && p.is_relative())
            return std::filesystem::path(env) / p;
        return p;
    }

  private:
    template <typename V>
    static void get_to(const nlohmann::json& j, const char* key, V& out) {
        if (j.contains(key)) j.at(key).get_to(out);
    }
    static void check_keys(const nlohmann::json& j, std::initializer_list<const char*> known,
                           const std::string& prefix) {
        if (!j.is_object()) throw ConfigError("config: '" + prefix + "' section is not an object");
        for (const auto& [key, val] : j.items()) {
            bool ok = false;
            for (const char* k : known) ok = ok || key == k;
            if (!ok) throw ConfigError("config: unknown key '" + prefix + key + "'");
        }
    }
};

// Dotted-path override: "denoiser.n_experts=16". Values parse as JSON when
// possible, otherwise as strings.
inline void apply_override(nlohmann::json& doc, const std::string& spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override '" + spec + "' is not key.path=value");
    std::string path = spec.substr(0, eq), value = spec.substr(eq + 1);
    std::string ptr = "/";
    for (char ch : path) ptr += (ch == '.') ? '/' : ch;
    nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
    if (parsed.is_discarded()) parsed = value;
    try {
        doc[nlohmann::json::json_pointer(ptr)] = parsed;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("override '" + spec + "': " + e.what());
    }
}

inline nlohmann::json load_config_document(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw MissingArtifactError("missing config file: " + path.string());
    try {
        nlohmann::json j;
        is >> j;
        return j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config parse error in " + path.string() + ": " + e.what());
    }
}

inline void write_effective_config(const RunConfig& cfg, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream os(dir / "config.json");
    nlohmann::json j = cfg.to_json();
    j["config_hash"] = cfg.hash();
    os << j.dump(2) << "\n";
    if (!os)
        throw MissingArtifactError("cannot write effective config: " +
                                   (dir / "config.json").string());
}

}  // namespace intermoe
