#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "intermoe/config.hpp"
#include "intermoe/pipeline.hpp"

using namespace intermoe;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    auto p = fs::temp_directory_path() / ("intermoe_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is.good());
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

// budgets small enough for a test-suite run, large enough to exercise every stage
RunConfig tiny_cfg(const fs::path& out) {
    RunConfig c;
    c.out_dir = out.string();
    c.corpus_seed = 11;
    c.corpus_samples = 24;
    c.holdout = 8;
    c.frames = 16;
    c.vae.channels = 8;
    c.vae.d_z = 4;
    c.vae_steps = 40;
    c.vae_batch = 4;
    c.denoiser.d_model = 32;
    c.denoiser.n_blocks = 2;
    c.denoiser.n_experts = 4;
    c.denoiser.d_text = 8;
    c.denoiser.train_steps = 100;
    c.denoiser_steps = 30;
    c.denoiser_batch = 4;
    c.sampler.ddim_steps = 8;
    c.sampler.seed = 3;
    c.eval.n_repeats = 5;
    c.eval_generated = 8;
    c.mm_per_condition = 2;
    c.validate();
    return c;
}

}  // namespace

TEST_CASE("run config round-trips through json with a stable hash") {
    RunConfig a;
    const std::string h = a.hash();
    REQUIRE(h.size() == 16);
    RunConfig b = RunConfig::from_json(a.to_json());
    REQUIRE(b.hash() == h);
    REQUIRE(b.out_dir == a.out_dir);
    REQUIRE(b.denoiser.n_experts == a.denoiser.n_experts);
    REQUIRE(RunConfig().hash() == h);  // hash depends only on content
}

TEST_CASE("dotted overrides reach nested keys and change the hash") {
    nlohmann::json doc = nlohmann::json::object();
    apply_override(doc, "denoiser.n_experts=16");
    apply_override(doc, "vae.lr=0.002");
    apply_override(doc, "run.out_dir=elsewhere");
    apply_override(doc, "denoiser.ffn=expert_choice");
    RunConfig c = RunConfig::from_json(doc);
    REQUIRE(c.denoiser.n_experts == 16);
    REQUIRE(c.vae_lr == Catch::Approx(0.002));
    REQUIRE(c.out_dir == "elsewhere");
    REQUIRE(c.denoiser.ffn_name() == "expert_choice");
    REQUIRE(c.hash() != RunConfig().hash());

    REQUIRE_THROWS_AS(apply_override(doc, "no-equals-sign"), ConfigError);
    REQUIRE_THROWS_AS(apply_override(doc, "=5"), ConfigError);
}

TEST_CASE("unknown config keys are rejected, emitted configs reload") {
    REQUIRE_THROWS_AS(RunConfig::from_json({{"vae", {{"nope", 1}}}}), ConfigError);
    REQUIRE_THROWS_AS(RunConfig::from_json({{"mystery", 1}}), ConfigError);
    REQUIRE_THROWS_AS(RunConfig::from_json({{"run", {{"precision", "f16"}}}}), ConfigError);

    const auto dir = temp_dir("pipeline_cfg");
    RunConfig c;
    c.denoiser.n_experts = 4;
    write_effective_config(c, dir);
    RunConfig back = RunConfig::from_json(load_config_document(dir / "config.json"));
    REQUIRE(back.hash() == c.hash());
    REQUIRE(back.denoiser.n_experts == 4);
}

TEST_CASE("output root honors the environment override for relative dirs") {
    RunConfig c;
    c.out_dir = "rel/run";
    setenv("INTERMOE_OUT", "/tmp/intermoe_test_envroot", 1);
    REQUIRE(c.root() == fs::path("/tmp/intermoe_test_envroot/rel/run"));
    c.out_dir = "/abs/run";
    REQUIRE(c.root() == fs::path("/abs/run"));
    unsetenv("INTERMOE_OUT");
    c.out_dir = "rel/run";
    REQUIRE(c.root() == fs::path("rel/run"));
}

TEST_CASE("grid specs parse names and value lists") {
    auto g = parse_grid_spec("experts=4,8,16");
    REQUIRE(g.name == "experts");
    REQUIRE(g.values == std::vector<std::string>{"4", "8", "16"});
    auto bare = parse_grid_spec("modes");
    REQUIRE(bare.name == "modes");
    REQUIRE(bare.values.empty());
    REQUIRE_THROWS_AS(parse_grid_spec("experts="), ConfigError);

    RunConfig c = tiny_cfg(temp_dir("pipeline_badgrid"));
    REQUIRE_THROWS_AS(run_ablate(c, {{"depth", {}}}), ConfigError);
}

TEST_CASE("pipeline stages produce a reloadable deterministic run end to end") {
    const auto out = temp_dir("pipeline_e2e");
    RunConfig cfg = tiny_cfg(out);
    const auto paths = run_paths(cfg);

    run_gen_corpus(cfg);
    REQUIRE(fs::exists(paths.corpus_dir() / "manifest.json"));
    Corpus corpus = read_corpus(paths.corpus_dir());
    REQUIRE(static_cast<int>(corpus.samples.size()) == cfg.corpus_samples);

    run_train_vae(cfg);
    REQUIRE(fs::exists(paths.vae_ckpt()));
    // loss csv has a header plus one row per step
    {
        std::ifstream is(paths.vae_dir() / "vae_loss.csv");
        std::string line;
        int rows = 0;
        while (std::getline(is, line)) ++rows;
        REQUIRE(rows == cfg.vae_steps + 1);
    }

    run_train_denoiser(cfg);
    REQUIRE(fs::exists(paths.denoiser_ckpt()));
    LoadedCheckpoint dck = load_checkpoint(paths.denoiser_ckpt());
    REQUIRE(dck.meta.at("config_hash").get<std::string>() == cfg.hash());
    REQUIRE(dck.meta.at("latent_scale").get<double>() > 0.0);

    // two independent sampling invocations reload from disk and must agree bytewise
    run_sample(cfg, {"two people walk toward each other"}, 3);
    std::vector<std::string> first;
    for (int i = 0; i < 3; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "pair_%04d_a.mot", i);
        first.push_back(slurp(paths.samples_dir() / name));
        name[10] = 'b';
        first.push_back(slurp(paths.samples_dir() / name));
    }
    run_sample(cfg, {"two people walk toward each other"}, 3);
    size_t k = 0;
    for (int i = 0; i < 3; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "pair_%04d_a.mot", i);
        REQUIRE(slurp(paths.samples_dir() / name) == first[k++]);
        name[10] = 'b';
        REQUIRE(slurp(paths.samples_dir() / name) == first[k++]);
    }
    // generated clips carry the corpus shape
    MotionSequence m = read_motion_file(paths.samples_dir() / "pair_0000_a.mot");
    REQUIRE(m.frames() == cfg.frames);
    REQUIRE(m.joints() == corpus.joint_count);

    nlohmann::json record = read_json_file(paths.samples_dir() / "run_record.json");
    REQUIRE(record.at("config_hash").get<std::string>() == cfg.hash());
    REQUIRE(record.at("outputs").size() == 3);

    run_eval(cfg);
    const std::string csv = slurp(paths.eval_dir() / "metrics.csv");
    for (const char* metric : {"fid", "r_precision_top1", "r_precision_top2",
                               "r_precision_top3", "mm_dist", "diversity", "multimodality",
                               "fid_noise"})
        REQUIRE(csv.find("," + std::string(metric) + ",") != std::string::npos);
    REQUIRE(fs::exists(paths.eval_dir() / "plot_data.json"));

    // eval re-run is byte-identical (metric pipeline fully seeded)
    run_eval(cfg);
    REQUIRE(slurp(paths.eval_dir() / "metrics.csv") == csv);
}

TEST_CASE("sampling rejects prompts outside the corpus vocabulary") {
    const auto out = temp_dir("pipeline_vocab");
    RunConfig cfg = tiny_cfg(out);
    run_gen_corpus(cfg);
    run_train_vae(cfg);
    run_train_denoiser(cfg);
    REQUIRE_THROWS_AS(run_sample(cfg, {"entirely florble gibberish"}, 1), ConfigError);
}

TEST_CASE("missing upstream artifacts are reported distinctly") {
    RunConfig cfg = tiny_cfg(temp_dir("pipeline_missing"));
    REQUIRE_THROWS_AS(run_train_vae(cfg), MissingArtifactError);       // no corpus
    run_gen_corpus(cfg);
    REQUIRE_THROWS_AS(run_train_denoiser(cfg), MissingArtifactError);  // no vae ckpt
    REQUIRE_THROWS_AS(run_eval(cfg), MissingArtifactError);            // no checkpoints
}

TEST_CASE("ablate emits a complete csv per grid with shared-format rows") {
    RunConfig cfg = tiny_cfg(temp_dir("pipeline_ablate"));
    cfg.ablate_steps = 20;
    cfg.ablate_batch = 4;
    cfg.ablate_samples = 16;
    cfg.ablate_d_model = 16;
    cfg.ablate_blocks = 1;
    cfg.ablate_generated = 8;

    auto rows = run_ablate(cfg, {{"experts", {"4", "8"}}});
    std::set<std::string> ids;
    for (const auto& r : rows) ids.insert(r.run_id);
    REQUIRE(ids == std::set<std::string>{"experts:4", "experts:8"});

    const auto paths = run_paths(cfg);
    const std::string csv = slurp(paths.ablate_dir() / "experts.csv");
    REQUIRE(csv.rfind(metrics_csv_header(), 0) == 0);
    // 7 metrics per point (no noise baseline in ablation scoring)
    size_t lines = static_cast<size_t>(std::count(csv.begin(), csv.end(), '\n'));
    REQUIRE(lines == 1 + 2 * 7);
    nlohmann::json summary = read_json_file(paths.ablate_dir() / "summary.json");
    REQUIRE(summary.at("fid").at("experts").size() == 2);
}
