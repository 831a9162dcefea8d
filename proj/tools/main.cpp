#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "intermoe/config.hpp"
#include "intermoe/pipeline.hpp"
#include "intermoe/verify.hpp"

namespace {

constexpr const char* kUsage =
    R"(usage: intermoe <command> [options] [key.path=value ...]

commands:
  gen-corpus      write the synthetic two-person interaction corpus
  train-vae       train the motion VAE on the corpus
  train-denoiser  train the latent diffusion denoiser (needs vae.ckpt)
  sample          generate paired motion clips (needs both checkpoints)
  eval            score generated motion against the held-out split
  ablate          run the routing ablation grids
  verify          run the oracle/causality/gradient property suite

options:
  --config FILE   JSON config document; omitted keys keep their defaults
  --seed N        stage seed shorthand (sampler.seed for sample, corpus.seed
                  for gen-corpus, eval.seed for eval, run.seed otherwise)
  --out DIR       shorthand for run.out_dir=DIR
  --text STR      sample: prompt text (repeatable)
  --count N       sample: number of generated pairs (default 8)
  --grid SPEC     ablate: modes | experts | cexp | all, or name=v1,v2,...
                  (repeatable; default all)

Any bare key.path=value argument overrides that config key; the effective
config is re-emitted next to each stage's outputs. Exit codes: 0 ok,
2 config error, 3 missing artifact, 4 verification failure.
)";

long long parse_ll(const std::string& flag, const std::string& v) {
    try {
        size_t used = 0;
        const long long n = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return n;
    } catch (const std::exception&) {
        throw intermoe::ConfigError(flag + ": '" + v + "' is not an integer");
    }
}

int run(int argc, char** argv) {
    using namespace intermoe;
    if (argc < 2) {
        std::fputs(kUsage, stderr);
        return 2;
    }
    const std::string cmd = argv[1];
    if (cmd == "help" || cmd == "--help" || cmd == "-h") {
        std::fputs(kUsage, stdout);
        return 0;
    }
    const bool known =
        cmd == "gen-corpus" || cmd == "train-vae" || cmd == "train-denoiser" ||
        cmd == "sample" || cmd == "eval" || cmd == "ablate" || cmd == "verify";
    if (!known) throw ConfigError("unknown command '" + cmd + "' (try --help)");

    std::string config_path;
    std::vector<std::string> overrides, prompts, grid_specs;
    long long count = 8;
    bool have_seed = false;
    long long seed = 0;
    for (int i = 2; i < argc; ++i) {
        const std::string a = argv[i];
        const auto need = [&](const char* flag) {
            if (i + 1 >= argc) throw ConfigError(std::string(flag) + " needs a value");
            return std::string(argv[++i]);
        };
        if (a == "--config") {
            config_path = need("--config");
        } else if (a == "--seed") {
            seed = parse_ll("--seed", need("--seed"));
            have_seed = true;
        } else if (a == "--out") {
            overrides.push_back("run.out_dir=" + need("--out"));
        } else if (a == "--text") {
            prompts.push_back(need("--text"));
        } else if (a == "--count") {
            count = parse_ll("--count", need("--count"));
        } else if (a == "--grid") {
            grid_specs.push_back(need("--grid"));
        } else if (a.find('=') != std::string::npos) {
            // key.path=value, with or without a leading --
            overrides.push_back(a.rfind("--", 0) == 0 ? a.substr(2) : a);
        } else {
            throw ConfigError("unknown argument '" + a + "' (try --help)");
        }
    }

    nlohmann::json doc =
        config_path.empty() ? nlohmann::json::object() : load_config_document(config_path);
    for (const auto& o : overrides) apply_override(doc, o);
    if (have_seed) {
        const char* path = cmd == "sample"       ? "sampler.seed"
                           : cmd == "gen-corpus" ? "corpus.seed"
                           : cmd == "eval"       ? "eval.seed"
                                                 : "run.seed";
        apply_override(doc, std::string(path) + "=" + std::to_string(seed));
    }
    const RunConfig cfg = RunConfig::from_json(doc);
    const RunPaths paths = run_paths(cfg);

    if (cmd == "gen-corpus") {
        run_gen_corpus(cfg);
        std::cout << "corpus: " << paths.corpus_dir().string() << " (" << cfg.corpus_samples
                  << " pairs)\n";
    } else if (cmd == "train-vae") {
        run_train_vae(cfg);
        std::cout << "vae checkpoint: " << paths.vae_ckpt().string() << "\n";
    } else if (cmd == "train-denoiser") {
        run_train_denoiser(cfg);
        std::cout << "denoiser checkpoint: " << paths.denoiser_ckpt().string() << "\n";
    } else if (cmd == "sample") {
        if (count < 1) throw ConfigError("--count must be positive");
        run_sample(cfg, prompts, static_cast<int>(count));
        std::cout << "samples: " << paths.samples_dir().string() << " (" << count
                  << " pairs)\n";
    } else if (cmd == "eval") {
        run_eval(cfg);
        std::cout << "metrics: " << (paths.eval_dir() / "metrics.csv").string() << "\n";
    } else if (cmd == "ablate") {
        std::vector<AblateGrid> grids;
        bool all = grid_specs.empty();
        for (const auto& s : grid_specs) {
            if (s == "all") {
                all = true;
                continue;
            }
            grids.push_back(parse_grid_spec(s));
        }
        if (all) grids = {{"modes", {}}, {"experts", {}}, {"cexp", {}}};
        for (size_t i = 0; i < grids.size(); ++i)
            for (size_t j = i + 1; j < grids.size(); ++j)
                if (grids[i].name == grids[j].name)
                    throw ConfigError("ablate: grid '" + grids[i].name + "' given twice");
        run_ablate(cfg, grids);
        std::cout << "ablation grids: " << paths.ablate_dir().string() << "\n";
    } else {  // verify
        run_verify_suite(std::cout);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const intermoe::VerificationError& e) {
        std::fprintf(stderr, "verification failed: %s\n", e.what());
        return 4;
    } catch (const intermoe::MissingArtifactError& e) {
        std::fprintf(stderr, "missing artifact: %s\n", e.what());
        return 3;
    } catch (const intermoe::MotFormatError& e) {
        std::fprintf(stderr, "artifact error: %s\n", e.what());
        return 3;
    } catch (const intermoe::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const intermoe::ShapeError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
