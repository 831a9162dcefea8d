#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "intermoe/checkpoint.hpp"
#include "intermoe/config.hpp"
#include "intermoe/corpus.hpp"
#include "intermoe/csvae.hpp"
#include "intermoe/denoiser.hpp"
#include "intermoe/eval.hpp"
#include "intermoe/optim.hpp"
#include "intermoe/text.hpp"

namespace intermoe {

// The operator-facing stages. Every stage writes into its own subdirectory of
// the run root, re-emits the effective config there, and stamps artifacts with
// the config hash so outputs are traceable to (config, seed) alone.

struct RunPaths {
    std::filesystem::path root;

    std::filesystem::path corpus_dir() const { return root / "corpus"; }
    std::filesystem::path vae_dir() const { return root / "vae"; }
    std::filesystem::path vae_ckpt() const { return vae_dir() / "vae.ckpt"; }
    std::filesystem::path denoiser_dir() const { return root / "denoiser"; }
    std::filesystem::path denoiser_ckpt() const { return denoiser_dir() / "denoiser.ckpt"; }
    std::filesystem::path samples_dir() const { return root / "samples"; }
    std::filesystem::path eval_dir() const { return root / "eval"; }
    std::filesystem::path ablate_dir() const { return root / "ablate"; }
};

inline RunPaths run_paths(const RunConfig& cfg) { return RunPaths{cfg.root()}; }

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream os(path);
    os << j.dump(2) << "\n";
    if (!os) throw MissingArtifactError("cannot write: " + path.string());
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw MissingArtifactError("missing file: " + path.string());
    try {
        nlohmann::json j;
        is >> j;
        return j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("json parse error in " + path.string() + ": " + e.what());
    }
}

// ----------------------------- telemetry -----------------------------

inline std::string sample_telemetry_header() {
    return "batch,step,branch,block,pool_size,k_total";
}

template <typename T>
void append_train_telemetry(std::ostream& os, int64_t step, Denoiser<T>& den) {
    auto& blocks = den.blocks();
    for (size_t i = 0; i < blocks.size(); ++i) {
        if (blocks[i].dense) continue;
        const auto& dec = blocks[i].moe.last_decision();
        const double k_exp =
            blocks[i].moe.moe_config().k_expected(dec.pool_size(), blocks[i].moe.n_experts());
        append_routing_telemetry(os, step, static_cast<int>(i), dec.k_select, k_exp,
                                 blocks[i].moe.bias_state().b);
    }
}

// ----------------------------- gen-corpus -----------------------------

inline Corpus require_corpus(const RunPaths& paths) { return read_corpus(paths.corpus_dir()); }

inline void run_gen_corpus(const RunConfig& cfg) {
    const auto paths = run_paths(cfg);
    Corpus c = make_corpus(cfg.corpus_seed, cfg.corpus_samples, SkeletonTopology::toy9(),
                           cfg.frames);
    write_corpus(c, paths.corpus_dir());
    write_effective_config(cfg, paths.corpus_dir());
}

// ----------------------------- train-vae -----------------------------

// One person-clip as normalized encoder rows {T*J, 12}.
inline Tensor<float> clip_rows(const MotionSequence& m, const Normalizer& norm) {
    Tensor<float> flat = norm.apply(flatten_joints(m));
    return flat.reshaped({flat.dim(0) * m.joints(), kFeatureWidth});
}

template <typename T>
void train_vae_impl(const RunConfig& cfg) {
    const auto paths = run_paths(cfg);
    Corpus corpus = require_corpus(paths);
    if (corpus.joint_count != SkeletonTopology::toy9().joint_count)
        throw ConfigError("train-vae: corpus has " + std::to_string(corpus.joint_count) +
                          " joints, expected the 9-joint toy skeleton");
    const int n_train = static_cast<int>(corpus.samples.size()) - cfg.holdout;
    if (n_train < 1) throw ConfigError("train-vae: no training samples left after holdout");

    CsVae<T> vae(SkeletonTopology::toy9(), cfg.vae);
    auto named = vae.named_params();
    std::vector<Var<T>> params;
    params.reserve(named.size());
    for (auto& [name, v] : named) params.push_back(v);
    AdamW<T> opt(params, {},
                 LrSchedule{.lr_max = cfg.vae_lr, .lr_min = cfg.vae_lr / 30.0,
                            .warmup_steps = std::min(100, cfg.vae_steps / 10),
                            .total_steps = cfg.vae_steps});

    std::filesystem::create_directories(paths.vae_dir());
    std::ofstream loss_csv(paths.vae_dir() / "vae_loss.csv");
    loss_csv << "step,lr,total,rec,pos,vel,kl\n";

    const int clips = 2 * n_train;
    auto rng = make_rng(derive_seed(cfg.seed, 0x7AE));
    std::uniform_int_distribution<int> pick(0, clips - 1);
    const int J = corpus.joint_count, frames = corpus.frames;
    for (int step = 0; step < cfg.vae_steps; ++step) {
        Tensor<T> x = Tensor<T>::zeros({cfg.vae_batch * frames * J, kFeatureWidth});
        int64_t cursor = 0;
        for (int b = 0; b < cfg.vae_batch; ++b) {
            const int c = pick(rng);
            const auto& s = corpus.samples[static_cast<size_t>(c / 2)];
            Tensor<float> rows = clip_rows(c % 2 ? s.motion_b : s.motion_a, corpus.normalizer);
            for (int64_t i = 0; i < rows.numel(); ++i) x[cursor++] = static_cast<T>(rows[i]);
        }
        auto xv = Var<T>::constant(std::move(x));
        opt.zero_grad();
        auto [mu, lv] = vae.encode_stats(xv, cfg.vae_batch);
        auto z = vae.reparameterize(mu, lv, rng);
        auto recon = vae.decode_rows(z, cfg.vae_batch);
        auto terms = vae_loss(xv, recon, mu, lv, cfg.vae_loss_w);
        backward(terms.total);
        const double lr = opt.current_lr();
        opt.step();
        loss_csv << step << ',' << format_double(lr) << ','
                 << format_double(static_cast<double>(terms.total.value()[0])) << ','
                 << format_double(terms.l_m) << ',' << format_double(terms.l_pos) << ','
                 << format_double(terms.l_vel) << ',' << format_double(terms.l_kl) << '\n';
    }
    if (!loss_csv) throw MissingArtifactError("cannot write vae loss csv");

    nlohmann::json meta;
    meta["model"] = "csvae";
    meta["config"] = vae.config_json();
    meta["normalizer"] = {{"mean", corpus.normalizer.mean}, {"std", corpus.normalizer.stdev}};
    meta["corpus"] = {{"seed", corpus.seed},
                      {"frames", corpus.frames},
                      {"joint_count", corpus.joint_count},
                      {"samples", corpus.samples.size()}};
    meta["config_hash"] = cfg.hash();
    meta["precision"] = cfg.precision;
    save_checkpoint(paths.vae_ckpt(), meta, snapshot_params(vae.named_params()));
    write_effective_config(cfg, paths.vae_dir());
}

inline void run_train_vae(const RunConfig& cfg) {
    cfg.precision == "f64" ? train_vae_impl<double>(cfg) : train_vae_impl<float>(cfg);
}

// ----------------------------- train-denoiser -----------------------------

template <typename T>
CsVae<T> vae_from_checkpoint(const LoadedCheckpoint& lc) {
    CsVae<T> vae = CsVae<T>::from_config_json(lc.meta.at("config"));
    auto named = vae.named_params();
    assign_params(named, lc);
    return vae;
}

inline Normalizer normalizer_from_meta(const nlohmann::json& meta) {
    Normalizer n;
    n.mean = meta.at("normalizer").at("mean").get<std::vector<float>>();
    n.stdev = meta.at("normalizer").at("std").get<std::vector<float>>();
    return n;
}

// Per-sample frozen-posterior means, one {T', j1*d_z} block per person-stream.
template <typename T>
struct SampleLatents {
    Tensor<T> a, b;
};

template <typename T>
std::vector<SampleLatents<T>> encode_corpus_latents(const CsVae<T>& vae, const Corpus& corpus,
                                                    int n_samples) {
    NoGradGuard ng;
    const int J = corpus.joint_count, frames = corpus.frames;
    const int tp = frames / vae.temporal_factor();
    const int width = vae.latent_width_flat();
    std::vector<SampleLatents<T>> out;
    out.reserve(static_cast<size_t>(n_samples));
    const int chunk = 32;  // streams per encoder pass
    std::vector<Tensor<T>> streams;
    streams.reserve(static_cast<size_t>(2 * n_samples));
    for (int base = 0; base < 2 * n_samples; base += chunk) {
        const int n = std::min(chunk, 2 * n_samples - base);
        Tensor<T> x = Tensor<T>::zeros({n * frames * J, kFeatureWidth});
        int64_t cursor = 0;
        for (int s = 0; s < n; ++s) {
            const int idx = base + s;
            const auto& rec = corpus.samples[static_cast<size_t>(idx / 2)];
            Tensor<float> rows =
                clip_rows(idx % 2 ? rec.motion_b : rec.motion_a, corpus.normalizer);
            for (int64_t i = 0; i < rows.numel(); ++i) x[cursor++] = static_cast<T>(rows[i]);
        }
        auto stats = vae.encode_stats(Var<T>::constant(std::move(x)), n);
        const Tensor<T>& mv = stats.first.value();
        const int64_t per = static_cast<int64_t>(tp) * width;
        for (int s = 0; s < n; ++s) {
            Tensor<T> z = Tensor<T>::zeros({tp, width});
            for (int64_t i = 0; i < per; ++i) z[i] = mv[s * per + i];
            streams.push_back(std::move(z));
        }
    }
    for (int i = 0; i < n_samples; ++i)
        out.push_back({std::move(streams[static_cast<size_t>(2 * i)]),
                       std::move(streams[static_cast<size_t>(2 * i + 1)])});
    return out;
}

template <typename T>
double latent_rms(const std::vector<SampleLatents<T>>& lats) {
    double sq = 0.0;
    int64_t n = 0;
    for (const auto& l : lats) {
        for (int64_t i = 0; i < l.a.numel(); ++i) sq += static_cast<double>(l.a[i]) * l.a[i];
        for (int64_t i = 0; i < l.b.numel(); ++i) sq += static_cast<double>(l.b[i]) * l.b[i];
        n += l.a.numel() + l.b.numel();
    }
    const double rms = std::sqrt(sq / static_cast<double>(std::max<int64_t>(1, n)));
    return rms > 1e-8 ? rms : 1.0;
}

// Assemble a denoiser minibatch {2B*T', width} from per-sample latents, all
// a-streams then all b-streams, scaled to unit-RMS latent space.
template <typename T>
Tensor<T> latent_batch(const std::vector<SampleLatents<T>>& lats, const std::vector<int>& idx,
                       double scale) {
    const int tp = lats.front().a.dim(0), width = lats.front().a.dim(1);
    const int b = static_cast<int>(idx.size());
    Tensor<T> z = Tensor<T>::zeros({2 * b * tp, width});
    const int64_t per = static_cast<int64_t>(tp) * width;
    const T inv = static_cast<T>(1.0 / scale);
    for (int k = 0; k < b; ++k) {
        const auto& l = lats[static_cast<size_t>(idx[static_cast<size_t>(k)])];
        for (int64_t i = 0; i < per; ++i) {
            z[k * per + i] = l.a[i] * inv;
            z[(b + k) * per + i] = l.b[i] * inv;
        }
    }
    return z;
}

template <typename T>
struct DenoiserTrainingResult {
    Denoiser<T> den;
    TextEncoder<T> tenc;
    double latent_scale;
    std::vector<double> losses;
};

// Shared by the train-denoiser stage and the ablation grid points.
template <typename T>
DenoiserTrainingResult<T> train_denoiser_core(const RunConfig& cfg, DenoiserConfig dcfg,
                                              const CsVae<T>& vae, const Corpus& corpus,
                                              int n_train, int steps, int batch,
                                              std::ostream* loss_csv, std::ostream* telemetry) {
    if (n_train < batch)
        throw ConfigError("train-denoiser: " + std::to_string(n_train) +
                          " training samples for batch " + std::to_string(batch));
    auto lats = encode_corpus_latents(vae, corpus, n_train);
    const double scale = latent_rms(lats);
    dcfg.d_latent = vae.latent_width_flat();

    Denoiser<T> den(dcfg);
    TextEncoder<T> tenc(dcfg.d_text, derive_seed(dcfg.init_seed, 0x7E27));
    std::vector<Var<T>> params;
    for (auto& [name, v] : den.named_params()) params.push_back(v);
    params.push_back(tenc.table);
    AdamW<T> opt(params, {},
                 LrSchedule{.lr_max = cfg.denoiser_lr, .lr_min = cfg.denoiser_lr / 30.0,
                            .warmup_steps = std::min(200, steps / 10), .total_steps = steps});

    DenoiserTrainingResult<T> result{std::move(den), std::move(tenc), scale, {}};
    result.losses.reserve(static_cast<size_t>(steps));
    auto rng = make_rng(derive_seed(cfg.seed, 0xDE101));
    std::uniform_int_distribution<int> pick(0, n_train - 1);
    for (int step = 0; step < steps; ++step) {
        std::vector<int> idx(static_cast<size_t>(batch));
        for (auto& i : idx) i = pick(rng);
        std::vector<Var<T>> text_rows;
        text_rows.reserve(idx.size());
        for (int i : idx)
            text_rows.push_back(result.tenc.encode_var(corpus.samples[static_cast<size_t>(i)].tokens));
        auto text = concat_rows<T>(text_rows);
        opt.zero_grad();
        auto loss = result.den.training_loss(latent_batch(lats, idx, scale), text, rng,
                                             cfg.cond_dropout);
        backward(loss);
        const double lr = opt.current_lr();
        opt.step();
        result.den.update_biases();
        const double lv = static_cast<double>(loss.value()[0]);
        result.losses.push_back(lv);
        if (loss_csv)
            *loss_csv << step << ',' << format_double(lr) << ',' << format_double(lv) << '\n';
        if (telemetry) append_train_telemetry(*telemetry, step, result.den);
    }
    return result;
}

template <typename T>
void train_denoiser_impl(const RunConfig& cfg) {
    const auto paths = run_paths(cfg);
    Corpus corpus = require_corpus(paths);
    LoadedCheckpoint vck = load_checkpoint(paths.vae_ckpt());
    CsVae<T> vae = vae_from_checkpoint<T>(vck);
    if (corpus.frames % vae.temporal_factor() != 0)
        throw ConfigError("train-denoiser: " + std::to_string(corpus.frames) +
                          " frames not divisible by the temporal factor " +
                          std::to_string(vae.temporal_factor()));
    const int n_train = static_cast<int>(corpus.samples.size()) - cfg.holdout;

    std::filesystem::create_directories(paths.denoiser_dir());
    std::ofstream loss_csv(paths.denoiser_dir() / "denoiser_loss.csv");
    loss_csv << "step,lr,loss\n";
    std::ofstream telemetry(paths.denoiser_dir() / "routing_telemetry.csv");
    telemetry << routing_telemetry_header() << '\n';

    auto result = train_denoiser_core(cfg, cfg.denoiser, vae, corpus, n_train,
                                      cfg.denoiser_steps, cfg.denoiser_batch, &loss_csv,
                                      &telemetry);
    if (!loss_csv || !telemetry) throw MissingArtifactError("cannot write denoiser csv logs");

    nlohmann::json meta;
    meta["model"] = "denoiser";
    meta["config"] = result.den.config_json();
    meta["latent_scale"] = result.latent_scale;
    meta["frames"] = corpus.frames;
    meta["config_hash"] = cfg.hash();
    meta["precision"] = cfg.precision;
    auto blob = snapshot_params(result.den.named_params());
    blob.emplace_back("text.table", result.tenc.table.value().template cast<float>());
    for (auto& [name, t] : result.den.named_buffers()) blob.emplace_back(name, t);
    save_checkpoint(paths.denoiser_ckpt(), meta, blob);
    write_effective_config(cfg, paths.denoiser_dir());
}

inline void run_train_denoiser(const RunConfig& cfg) {
    cfg.precision == "f64" ? train_denoiser_impl<double>(cfg) : train_denoiser_impl<float>(cfg);
}

// ----------------------------- generation -----------------------------

// Everything needed to turn text prompts into denormalized motion pairs.
template <typename T>
struct GenerationContext {
    CsVae<T> vae;
    Denoiser<T> den;
    TextEncoder<T> tenc;
    Normalizer norm;
    double latent_scale = 1.0;
    int frames = 32;

    int latent_len() const { return frames / vae.temporal_factor(); }

    // One DDIM batch; prompts give one token list per requested pair.
    std::vector<std::pair<MotionSequence, MotionSequence>> generate_batch(
        const std::vector<std::vector<int>>& prompts, const SamplerConfig& sc) {
        NoGradGuard ng;
        const int b = static_cast<int>(prompts.size());
        const int tp = latent_len(), width = vae.latent_width_flat();
        Tensor<T> text = Tensor<T>::zeros({b, den.config().d_text});
        for (int i = 0; i < b; ++i) {
            Tensor<float> row = tenc.encode(prompts[static_cast<size_t>(i)]);
            for (int j = 0; j < den.config().d_text; ++j)
                text.at(i, j) = static_cast<T>(row[j]);
        }
        Tensor<T> z = den.ddim_sample(sc, text, tp);
        for (auto& v : z.data) v *= static_cast<T>(latent_scale);
        auto rows = vae.decode_rows(
            Var<T>::constant(z.reshaped({2 * b * tp * vae.latent_joints(), vae.config().d_z})),
            2 * b);
        const int J = vae.topology().joint_count;
        Tensor<float> flat =
            rows.value().template cast<float>().reshaped({2 * b * frames, J * kFeatureWidth});
        flat = norm.invert(flat);
        std::vector<std::pair<MotionSequence, MotionSequence>> out;
        out.reserve(static_cast<size_t>(b));
        auto stream = [&](int s) {
            Tensor<float> part = Tensor<float>::zeros({frames, J * kFeatureWidth});
            const int64_t per = part.numel();
            for (int64_t i = 0; i < per; ++i) part[i] = flat[s * per + i];
            return unflatten_joints(part, J);
        };
        for (int i = 0; i < b; ++i) out.emplace_back(stream(i), stream(b + i));
        return out;
    }

    // Chunked generation: pair k uses prompts[k % prompts.size()]; chunk c of
    // the DDIM sampler runs with seed derive_seed(sc.seed, c).
    std::vector<std::pair<MotionSequence, MotionSequence>> generate(
        const std::vector<std::vector<int>>& prompts, int count, const SamplerConfig& sc,
        int batch_limit) {
        if (prompts.empty()) throw ConfigError("generate: no prompts");
        if (count < 1) throw ConfigError("generate: count must be positive");
        std::vector<std::pair<MotionSequence, MotionSequence>> out;
        out.reserve(static_cast<size_t>(count));
        for (int base = 0, chunk = 0; base < count; base += batch_limit, ++chunk) {
            const int n = std::min(batch_limit, count - base);
            std::vector<std::vector<int>> batch_prompts;
            batch_prompts.reserve(static_cast<size_t>(n));
            for (int i = 0; i < n; ++i)
                batch_prompts.push_back(prompts[static_cast<size_t>(base + i) % prompts.size()]);
            SamplerConfig sc2 = sc;
            sc2.seed = derive_seed(sc.seed, static_cast<uint64_t>(chunk));
            auto pairs = generate_batch(batch_prompts, sc2);
            for (auto& p : pairs) out.push_back(std::move(p));
        }
        return out;
    }
};

template <typename T>
GenerationContext<T> load_generation_context(const RunConfig& cfg) {
    const auto paths = run_paths(cfg);
    LoadedCheckpoint vck = load_checkpoint(paths.vae_ckpt());
    LoadedCheckpoint dck = load_checkpoint(paths.denoiser_ckpt());
    CsVae<T> vae = vae_from_checkpoint<T>(vck);
    Denoiser<T> den = Denoiser<T>::from_config_json(dck.meta.at("config"));
    auto named = den.named_params();
    assign_params(named, dck);
    den.set_named_buffers(dck.params);
    TextEncoder<T> tenc(den.config().d_text, 0);
    tenc.table.set_value(dck.require("text.table").cast<T>());
    return GenerationContext<T>{std::move(vae), std::move(den), std::move(tenc),
                                normalizer_from_meta(vck.meta),
                                dck.meta.at("latent_scale").get<double>(),
                                dck.meta.at("frames").get<int>()};
}

inline std::vector<std::string> default_prompts() {
    return {"two people walk toward each other", "two people circle around each other",
            "two people dance with mirrored movements",
            "one person pushes forward while the other retreats"};
}

template <typename T>
void run_sample_impl(const RunConfig& cfg, std::vector<std::string> prompts, int count) {
    const auto paths = run_paths(cfg);
    if (prompts.empty()) prompts = default_prompts();
    if (count < 1) throw ConfigError("sample: count must be positive");
    std::vector<std::vector<int>> tokens;
    tokens.reserve(prompts.size());
    for (const auto& p : prompts) tokens.push_back(tokenize(p));

    auto ctx = load_generation_context<T>(cfg);
    std::filesystem::create_directories(paths.samples_dir());
    std::ofstream telemetry(paths.samples_dir() / "routing_telemetry.csv");
    telemetry << sample_telemetry_header() << '\n';
    int64_t call = 0;
    ctx.den.set_forward_observer([&telemetry, &ctx, &call, &cfg] {
        const int64_t per_chunk = 2LL * cfg.sampler.ddim_steps;
        const int64_t batch = call / per_chunk;
        const int64_t step = (call % per_chunk) / 2;
        const char* branch = call % 2 == 0 ? "cond" : "uncond";
        auto& blocks = ctx.den.blocks();
        for (size_t i = 0; i < blocks.size(); ++i) {
            if (blocks[i].dense) continue;
            const auto& dec = blocks[i].moe.last_decision();
            int64_t k_total = 0;
            for (int64_t k : dec.k_select) k_total += k;
            telemetry << batch << ',' << step << ',' << branch << ',' << i << ','
                      << dec.pool_size() << ',' << k_total << '\n';
        }
        ++call;
    });
    auto pairs = ctx.generate(tokens, count, cfg.sampler, cfg.denoiser_batch);
    ctx.den.set_forward_observer({});
    if (!telemetry) throw MissingArtifactError("cannot write sampling telemetry");

    nlohmann::json record;
    record["schema"] = "intermoe-run-record-v1";
    record["seed"] = cfg.sampler.seed;
    record["config_hash"] = cfg.hash();
    record["telemetry"] = "routing_telemetry.csv";
    record["prompts"] = prompts;
    record["count"] = count;
    auto& files = record["outputs"] = nlohmann::json::array();
    for (size_t i = 0; i < pairs.size(); ++i) {
        char stem[32];
        std::snprintf(stem, sizeof stem, "pair_%04zu", i);
        const std::string fa = std::string(stem) + "_a.mot", fb = std::string(stem) + "_b.mot";
        write_motion_file(pairs[i].first, paths.samples_dir() / fa);
        write_motion_file(pairs[i].second, paths.samples_dir() / fb);
        files.push_back({{"a", fa},
                         {"b", fb},
                         {"prompt", prompts[i % prompts.size()]}});
    }
    write_json_file(paths.samples_dir() / "run_record.json", record);
    write_effective_config(cfg, paths.samples_dir());
}

inline void run_sample(const RunConfig& cfg, const std::vector<std::string>& prompts, int count) {
    cfg.precision == "f64" ? run_sample_impl<double>(cfg, prompts, count)
                           : run_sample_impl<float>(cfg, prompts, count);
}

// ----------------------------- eval -----------------------------

inline Tensor<double> feature_rows(const Tensor<double>& f, const std::vector<int>& idx) {
    const int d = f.dim(1);
    Tensor<double> out = Tensor<double>::zeros({static_cast<int>(idx.size()), d});
    for (size_t i = 0; i < idx.size(); ++i)
        for (int j = 0; j < d; ++j) out.at(static_cast<int>(i), j) = f.at(idx[i], j);
    return out;
}

inline std::vector<int> subset_indices(int n, int m, std::mt19937_64& rng) {
    std::vector<int> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<size_t>(m));
    return idx;
}

struct MetricRow {
    std::string metric;
    MetricStat stat;
};

// Repeat the metric suite n_repeats times on seeded 80% subsets of both
// feature sets; the spread of the repeats gives the 95% intervals. Group
// features (MultiModality) stay whole; only the pair sampler seed varies.
inline std::vector<MetricRow> compute_metric_rows(
    const Tensor<double>& gen_motion, const Tensor<double>& gen_text,
    const Tensor<double>& real_motion, const std::vector<Tensor<double>>& groups,
    const Tensor<double>* noise_motion, const EvalConfig& ecfg, uint64_t seed) {
    const int n_gen = gen_motion.dim(0), n_real = real_motion.dim(0);
    const int m_gen = std::max(2, n_gen - n_gen / 5), m_real = std::max(2, n_real - n_real / 5);
    int min_group = groups.empty() ? 0 : groups.front().dim(0);
    for (const auto& g : groups) min_group = std::min(min_group, g.dim(0));
    const EvalConfig eff = ecfg.effective(m_gen, min_group);

    std::vector<std::string> names = {"fid",      "r_precision_top1", "r_precision_top2",
                                      "r_precision_top3", "mm_dist",  "diversity",
                                      "multimodality"};
    if (noise_motion) names.push_back("fid_noise");
    std::vector<std::vector<double>> obs(names.size());
    for (int r = 0; r < eff.n_repeats; ++r) {
        const uint64_t sr = derive_seed(seed, static_cast<uint64_t>(r));
        auto rng = make_rng(derive_seed(sr, 0x5B5));
        auto gi = subset_indices(n_gen, m_gen, rng);
        auto ri = subset_indices(n_real, m_real, rng);
        Tensor<double> gm = feature_rows(gen_motion, gi);
        Tensor<double> gt = feature_rows(gen_text, gi);
        Tensor<double> rm = feature_rows(real_motion, ri);
        obs[0].push_back(fid(gm, rm));
        auto rp = r_precision(gm, gt, eff.r_pool, derive_seed(sr, 0x5250));
        obs[1].push_back(rp.top1);
        obs[2].push_back(rp.top2);
        obs[3].push_back(rp.top3);
        obs[4].push_back(mm_dist(gm, gt));
        obs[5].push_back(diversity(gm, eff.s_d, derive_seed(sr, 0xD1)));
        obs[6].push_back(multimodality(groups, eff.s_l, derive_seed(sr, 0x3333)));
        if (noise_motion) {
            auto ni = subset_indices(noise_motion->dim(0), m_gen, rng);
            obs[7].push_back(fid(feature_rows(*noise_motion, ni), rm));
        }
    }
    std::vector<MetricRow> rows;
    rows.reserve(names.size());
    for (size_t i = 0; i < names.size(); ++i) rows.push_back({names[i], ci95(obs[i])});
    return rows;
}

// Parse "step,...,value" CSV, returning (first column, last column) pairs
// thinned to at most `cap` points for plotting.
inline std::vector<std::pair<int, double>> read_curve_csv(const std::filesystem::path& path,
                                                          int cap = 400) {
    std::ifstream is(path);
    if (!is) return {};
    std::vector<std::pair<int, double>> all;
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
        const auto first_comma = line.find(',');
        const auto last_comma = line.rfind(',');
        if (first_comma == std::string::npos) continue;
        all.emplace_back(std::stoi(line.substr(0, first_comma)),
                         std::stod(line.substr(last_comma + 1)));
    }
    if (static_cast<int>(all.size()) <= cap) return all;
    std::vector<std::pair<int, double>> thin;
    const int stride = (static_cast<int>(all.size()) + cap - 1) / cap;
    for (size_t i = 0; i < all.size(); i += static_cast<size_t>(stride)) thin.push_back(all[i]);
    return thin;
}

template <typename T>
void run_eval_impl(const RunConfig& cfg) {
    const auto paths = run_paths(cfg);
    Corpus corpus = require_corpus(paths);
    auto ctx = load_generation_context<T>(cfg);
    const int n = static_cast<int>(corpus.samples.size());
    if (cfg.holdout >= n) throw ConfigError("eval: holdout exceeds corpus");
    std::vector<InteractionSample> held(corpus.samples.begin() + (n - cfg.holdout),
                                        corpus.samples.end());

    FeatureExtractor fx(corpus.joint_count, derive_seed(cfg.eval_seed, 0xFE));
    Tensor<double> real_motion = fx.motion_features(held);

    // generation conditions cycle over the held-out prompts
    std::vector<std::vector<int>> prompts;
    prompts.reserve(held.size());
    for (const auto& s : held) prompts.push_back(s.tokens);
    auto pairs = ctx.generate(prompts, cfg.eval_generated, cfg.sampler, cfg.denoiser_batch);
    Tensor<double> gen_motion = Tensor<double>::zeros({cfg.eval_generated, FeatureExtractor::kWidth});
    Tensor<double> gen_text = Tensor<double>::zeros({cfg.eval_generated, FeatureExtractor::kWidth});
    for (int i = 0; i < cfg.eval_generated; ++i) {
        auto mf = fx.motion_feature(pairs[static_cast<size_t>(i)].first,
                                    pairs[static_cast<size_t>(i)].second);
        auto tf = fx.text_feature(prompts[static_cast<size_t>(i) % prompts.size()]);
        for (int j = 0; j < FeatureExtractor::kWidth; ++j) {
            gen_motion.at(i, j) = mf[static_cast<size_t>(j)];
            gen_text.at(i, j) = tf[static_cast<size_t>(j)];
        }
    }

    // per-condition groups for MultiModality: distinct held-out prompts
    std::vector<std::vector<int>> distinct;
    {
        std::vector<std::string> seen;
        for (const auto& s : held) {
            if (std::find(seen.begin(), seen.end(), s.text) != seen.end()) continue;
            seen.push_back(s.text);
            distinct.push_back(s.tokens);
        }
    }
    const int n_cond = std::min<int>(static_cast<int>(distinct.size()),
                                     std::max(2, cfg.eval_generated / cfg.mm_per_condition));
    if (n_cond < 1) throw ConfigError("eval: no text conditions available");
    std::vector<Tensor<double>> groups;
    groups.reserve(static_cast<size_t>(n_cond));
    for (int c = 0; c < n_cond; ++c) {
        SamplerConfig sc = cfg.sampler;
        sc.seed = derive_seed(cfg.sampler.seed, 0x99000u + static_cast<uint64_t>(c));
        std::vector<std::vector<int>> rep(static_cast<size_t>(cfg.mm_per_condition),
                                          distinct[static_cast<size_t>(c)]);
        auto gp = ctx.generate_batch(rep, sc);
        Tensor<double> gf =
            Tensor<double>::zeros({cfg.mm_per_condition, FeatureExtractor::kWidth});
        for (int i = 0; i < cfg.mm_per_condition; ++i) {
            auto f = fx.motion_feature(gp[static_cast<size_t>(i)].first,
                                       gp[static_cast<size_t>(i)].second);
            for (int j = 0; j < FeatureExtractor::kWidth; ++j)
                gf.at(i, j) = f[static_cast<size_t>(j)];
        }
        groups.push_back(std::move(gf));
    }

    // pure-noise baseline: decode unit Gaussians through the same VAE
    Tensor<double> noise_motion =
        Tensor<double>::zeros({cfg.eval_generated, FeatureExtractor::kWidth});
    {
        NoGradGuard ng;
        auto rng = make_rng(derive_seed(cfg.eval_seed, 0xBA5E));
        const int tp = ctx.latent_len(), width = ctx.vae.latent_width_flat();
        const int J = corpus.joint_count;
        for (int i = 0; i < cfg.eval_generated; ++i) {
            Tensor<T> z = Tensor<T>::randn({2 * tp, width}, rng);
            for (auto& v : z.data) v *= static_cast<T>(ctx.latent_scale);
            auto rows = ctx.vae.decode_rows(
                Var<T>::constant(
                    z.reshaped({2 * tp * ctx.vae.latent_joints(), ctx.vae.config().d_z})),
                2);
            Tensor<float> flat = rows.value().template cast<float>().reshaped(
                {2 * ctx.frames, J * kFeatureWidth});
            flat = ctx.norm.invert(flat);
            Tensor<float> fa = Tensor<float>::zeros({ctx.frames, J * kFeatureWidth});
            Tensor<float> fb = fa;
            for (int64_t k = 0; k < fa.numel(); ++k) {
                fa[k] = flat[k];
                fb[k] = flat[fa.numel() + k];
            }
            auto f = fx.motion_feature(unflatten_joints(fa, J), unflatten_joints(fb, J));
            for (int j = 0; j < FeatureExtractor::kWidth; ++j)
                noise_motion.at(i, j) = f[static_cast<size_t>(j)];
        }
    }

    auto rows = compute_metric_rows(gen_motion, gen_text, real_motion, groups, &noise_motion,
                                    cfg.eval, cfg.eval_seed);

    std::filesystem::create_directories(paths.eval_dir());
    const std::string run_id = cfg.hash().substr(0, 12);
    const std::string mode = cfg.denoiser.ffn_name();
    std::ofstream csv(paths.eval_dir() / "metrics.csv");
    csv << metrics_csv_header() << '\n';
    for (const auto& row : rows) append_metrics_row(csv, run_id, mode, row.metric, row.stat);
    if (!csv) throw MissingArtifactError("cannot write metrics csv");

    nlohmann::json plot;
    plot["run_id"] = run_id;
    plot["mode"] = mode;
    const int m_gen = std::max(2, cfg.eval_generated - cfg.eval_generated / 5);
    int min_group = cfg.mm_per_condition;
    const EvalConfig eff = cfg.eval.effective(m_gen, min_group);
    plot["effective"] = {{"s_d", eff.s_d},
                         {"s_l", eff.s_l},
                         {"r_pool", eff.r_pool},
                         {"n_repeats", eff.n_repeats},
                         {"generated", cfg.eval_generated},
                         {"held_out", cfg.holdout},
                         {"conditions", n_cond}};
    auto curve_json = [](const std::vector<std::pair<int, double>>& c) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& [s, v] : c) a.push_back({s, v});
        return a;
    };
    plot["curves"] = {
        {"vae_loss", curve_json(read_curve_csv(paths.vae_dir() / "vae_loss.csv"))},
        {"denoiser_loss", curve_json(read_curve_csv(paths.denoiser_dir() / "denoiser_loss.csv"))}};
    auto& pm = plot["metrics"] = nlohmann::json::object();
    for (const auto& row : rows)
        pm[row.metric] = {{"mean", row.stat.mean},
                          {"ci95_low", row.stat.ci95_low},
                          {"ci95_high", row.stat.ci95_high}};
    write_json_file(paths.eval_dir() / "plot_data.json", plot);
    write_effective_config(cfg, paths.eval_dir());
}

inline void run_eval(const RunConfig& cfg) {
    cfg.precision == "f64" ? run_eval_impl<double>(cfg) : run_eval_impl<float>(cfg);
}

// ----------------------------- ablate -----------------------------

struct AblateRow {
    std::string run_id, mode, metric;
    MetricStat stat;
};

// One grid point: train a reduced denoiser on the shared corpus/VAE/latents,
// generate, and score. Seeds, data, and budgets are identical across points.
template <typename T>
std::vector<AblateRow> ablate_point(const RunConfig& cfg, const std::string& run_id,
                                    DenoiserConfig dcfg, const CsVae<T>& vae,
                                    const Corpus& corpus, int n_train,
                                    const Tensor<double>& real_motion,
                                    const std::vector<InteractionSample>& held,
                                    const FeatureExtractor& fx) {
    auto trained = train_denoiser_core(cfg, dcfg, vae, corpus, n_train, cfg.ablate_steps,
                                       cfg.ablate_batch, nullptr, nullptr);
    GenerationContext<T> ctx{vae, std::move(trained.den), std::move(trained.tenc),
                             corpus.normalizer, trained.latent_scale, corpus.frames};

    std::vector<std::vector<int>> prompts;
    prompts.reserve(held.size());
    for (const auto& s : held) prompts.push_back(s.tokens);
    auto pairs = ctx.generate(prompts, cfg.ablate_generated, cfg.sampler, cfg.denoiser_batch);
    Tensor<double> gen_motion =
        Tensor<double>::zeros({cfg.ablate_generated, FeatureExtractor::kWidth});
    Tensor<double> gen_text =
        Tensor<double>::zeros({cfg.ablate_generated, FeatureExtractor::kWidth});
    for (int i = 0; i < cfg.ablate_generated; ++i) {
        auto mf = fx.motion_feature(pairs[static_cast<size_t>(i)].first,
                                    pairs[static_cast<size_t>(i)].second);
        auto tf = fx.text_feature(prompts[static_cast<size_t>(i) % prompts.size()]);
        for (int j = 0; j < FeatureExtractor::kWidth; ++j) {
            gen_motion.at(i, j) = mf[static_cast<size_t>(j)];
            gen_text.at(i, j) = tf[static_cast<size_t>(j)];
        }
    }
    const int n_cond = 4, per_cond = 4;
    std::vector<Tensor<double>> groups;
    for (int c = 0; c < n_cond; ++c) {
        SamplerConfig sc = cfg.sampler;
        sc.seed = derive_seed(cfg.sampler.seed, 0xAB000u + static_cast<uint64_t>(c));
        std::vector<std::vector<int>> rep(
            static_cast<size_t>(per_cond),
            prompts[static_cast<size_t>(c) % prompts.size()]);
        auto gp = ctx.generate_batch(rep, sc);
        Tensor<double> gf = Tensor<double>::zeros({per_cond, FeatureExtractor::kWidth});
        for (int i = 0; i < per_cond; ++i) {
            auto f = fx.motion_feature(gp[static_cast<size_t>(i)].first,
                                       gp[static_cast<size_t>(i)].second);
            for (int j = 0; j < FeatureExtractor::kWidth; ++j)
                gf.at(i, j) = f[static_cast<size_t>(j)];
        }
        groups.push_back(std::move(gf));
    }
    auto metric_rows = compute_metric_rows(gen_motion, gen_text, real_motion, groups, nullptr,
                                           cfg.eval, cfg.eval_seed);
    std::vector<AblateRow> rows;
    rows.reserve(metric_rows.size());
    for (auto& r : metric_rows) rows.push_back({run_id, dcfg.ffn_name(), r.metric, r.stat});
    return rows;
}

// One ablation axis; an empty value list means the axis's default grid.
struct AblateGrid {
    std::string name;  // modes | experts | cexp
    std::vector<std::string> values;
};

// "experts" or "experts=4,8,16" -> AblateGrid
inline AblateGrid parse_grid_spec(const std::string& spec) {
    AblateGrid g;
    const auto eq = spec.find('=');
    g.name = spec.substr(0, eq);
    if (eq != std::string::npos) {
        const std::string rest = spec.substr(eq + 1);
        size_t pos = 0;
        while (pos < rest.size()) {
            auto comma = rest.find(',', pos);
            if (comma == std::string::npos) comma = rest.size();
            if (comma > pos) g.values.push_back(rest.substr(pos, comma - pos));
            pos = comma + 1;
        }
        if (g.values.empty()) throw ConfigError("ablate: grid '" + spec + "' lists no values");
    }
    return g;
}

template <typename T>
std::vector<AblateRow> run_ablate_impl(const RunConfig& cfg,
                                       const std::vector<AblateGrid>& grids) {
    const auto paths = run_paths(cfg);
    for (const auto& g : grids)
        if (g.name != "modes" && g.name != "experts" && g.name != "cexp")
            throw ConfigError("ablate: unknown grid '" + g.name + "' (want modes|experts|cexp)");

    // shared reduced corpus, VAE, and feature extractor for every grid point
    Corpus corpus = make_corpus(derive_seed(cfg.corpus_seed, 0xAB), cfg.ablate_samples,
                                SkeletonTopology::toy9(), cfg.frames);
    const int holdout = std::min(cfg.holdout, cfg.ablate_samples / 4);
    const int n_train = cfg.ablate_samples - holdout;
    std::vector<InteractionSample> held(corpus.samples.begin() + n_train, corpus.samples.end());
    FeatureExtractor fx(corpus.joint_count, derive_seed(cfg.eval_seed, 0xFE));
    Tensor<double> real_motion = fx.motion_features(held);

    CsVae<T> vae(SkeletonTopology::toy9(), cfg.vae);
    {
        auto named = vae.named_params();
        std::vector<Var<T>> params;
        for (auto& [name, v] : named) params.push_back(v);
        AdamW<T> opt(params, {},
                     LrSchedule{.lr_max = cfg.vae_lr, .lr_min = cfg.vae_lr / 30.0,
                                .warmup_steps = std::min(100, cfg.ablate_steps / 10),
                                .total_steps = cfg.ablate_steps});
        auto rng = make_rng(derive_seed(cfg.seed, 0x7AE));
        std::uniform_int_distribution<int> pick(0, 2 * n_train - 1);
        const int J = corpus.joint_count;
        for (int step = 0; step < cfg.ablate_steps; ++step) {
            Tensor<T> x = Tensor<T>::zeros({cfg.ablate_batch * corpus.frames * J, kFeatureWidth});
            int64_t cursor = 0;
            for (int b = 0; b < cfg.ablate_batch; ++b) {
                const int c = pick(rng);
                const auto& s = corpus.samples[static_cast<size_t>(c / 2)];
                Tensor<float> rows = clip_rows(c % 2 ? s.motion_b : s.motion_a, corpus.normalizer);
                for (int64_t i = 0; i < rows.numel(); ++i) x[cursor++] = static_cast<T>(rows[i]);
            }
            auto xv = Var<T>::constant(std::move(x));
            opt.zero_grad();
            auto [mu, lv] = vae.encode_stats(xv, cfg.ablate_batch);
            auto z = vae.reparameterize(mu, lv, rng);
            auto terms = vae_loss(xv, vae.decode_rows(z, cfg.ablate_batch), mu, lv, cfg.vae_loss_w);
            backward(terms.total);
            opt.step();
        }
    }

    // baseline reduced denoiser config shared by every point
    DenoiserConfig base = cfg.denoiser;
    base.d_model = cfg.ablate_d_model;
    base.n_blocks = cfg.ablate_blocks;
    base.n_experts = 8;
    base.c_exp = 1.0;

    struct Point {
        std::string grid, run_id;
        DenoiserConfig dcfg;
    };
    std::vector<Point> points;
    const auto axis = [](const AblateGrid& g, std::vector<std::string> defaults) {
        return g.values.empty() ? std::move(defaults) : g.values;
    };
    for (const auto& g : grids) {
        if (g.name == "modes")
            for (const auto& m : axis(g, {"dense", "token_choice", "expert_choice", "dts"})) {
                DenoiserConfig d = base;
                d.set_ffn(m);  // rejects unknown mode names
                points.push_back({g.name, "modes:" + m, d});
            }
        if (g.name == "experts")
            for (const auto& v : axis(g, {"4", "8", "16"})) {
                DenoiserConfig d = base;
                try {
                    d.n_experts = std::stoi(v);
                } catch (const std::exception&) {
                    throw ConfigError("ablate: expert count '" + v + "' is not an integer");
                }
                points.push_back({g.name, "experts:" + v, d});
            }
        if (g.name == "cexp")
            for (const auto& v : axis(g, {"0.8", "1", "2"})) {
                DenoiserConfig d = base;
                try {
                    d.c_exp = std::stod(v);
                } catch (const std::exception&) {
                    throw ConfigError("ablate: capacity factor '" + v + "' is not a number");
                }
                points.push_back({g.name, "cexp:" + v, d});
            }
    }

    std::filesystem::create_directories(paths.ablate_dir());
    std::map<std::string, std::ofstream> csvs;
    for (const auto& g : grids) {
        csvs[g.name].open(paths.ablate_dir() / (g.name + ".csv"));
        csvs[g.name] << metrics_csv_header() << '\n';
    }
    std::vector<AblateRow> all_rows;
    nlohmann::json summary;
    for (const auto& pt : points) {
        auto rows = ablate_point(cfg, pt.run_id, pt.dcfg, vae, corpus, n_train, real_motion,
                                 held, fx);
        for (const auto& r : rows) {
            append_metrics_row(csvs[pt.grid], r.run_id, r.mode, r.metric, r.stat);
            if (r.metric == "fid")
                summary["fid"][pt.grid][pt.run_id] = {{"mean", r.stat.mean},
                                                      {"ci95_low", r.stat.ci95_low},
                                                      {"ci95_high", r.stat.ci95_high}};
            all_rows.push_back(r);
        }
    }
    for (auto& [g, os] : csvs)
        if (!os) throw MissingArtifactError("cannot write ablate csv for grid " + g);

    // record the observed toy-FID mode ordering
    if (summary.contains("fid") && summary["fid"].contains("modes")) {
        std::vector<std::pair<double, std::string>> order;
        for (const auto& [rid, v] : summary["fid"]["modes"].items())
            order.emplace_back(v.at("mean").template get<double>(), rid);
        std::sort(order.begin(), order.end());
        auto& arr = summary["mode_ordering_by_fid"] = nlohmann::json::array();
        for (const auto& [v, rid] : order) arr.push_back(rid);
    }
    summary["config_hash"] = cfg.hash();
    write_json_file(paths.ablate_dir() / "summary.json", summary);
    write_effective_config(cfg, paths.ablate_dir());
    return all_rows;
}

inline std::vector<AblateRow> run_ablate(const RunConfig& cfg,
                                         const std::vector<AblateGrid>& grids) {
    return cfg.precision == "f64" ? run_ablate_impl<double>(cfg, grids)
                                  : run_ablate_impl<float>(cfg, grids);
}

}  // namespace intermoe
