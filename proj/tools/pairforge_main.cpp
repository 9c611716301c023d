#include "pairforge/pipeline.hpp"

#include "CLI11.hpp"

#include <cstdint>
#include <iostream>
#include <string>

namespace {

// Exit codes: 0 ok, 2 config/validation problem, 3 stage failure.
constexpr int kOk = 0;
constexpr int kBadConfig = 2;
constexpr int kStageFailed = 3;

struct CliArgs {
    std::string config;
    std::string out_dir;
    std::uint64_t seed = 0;
    int workers = 0;
    bool has_seed = false;
    bool has_out_dir = false;
    bool has_workers = false;
};

void add_common(CLI::App* sub, CliArgs& args) {
    sub->add_option("-c,--config", args.config, "run configuration (JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--out-dir", args.out_dir, "override the configured output directory");
    sub->add_option("--seed", args.seed, "override the configured seed");
    sub->add_option("--workers", args.workers, "override the configured worker count");
}

int dispatch(const std::string& command, const pairforge::RunConfig& cfg) {
    using namespace pairforge;
    if (command == "synth" || command == "ingest") {
        stage_corpus(cfg);
    } else if (command == "index") {
        stage_index(cfg);
    } else if (command == "mine") {
        stage_mine(cfg);
    } else if (command == "annotate") {
        stage_annotate(cfg);
    } else if (command == "train") {
        stage_train(cfg);
    } else if (command == "eval") {
        std::cout << render_metric_table(stage_eval(cfg));
    } else if (command == "pipeline") {
        std::cout << render_metric_table(run_pipeline(cfg));
    } else if (command == "ablate") {
        std::cout << run_ablation(cfg).table;
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pairforge: triplet mining, annotation and adapter training"};
    app.set_version_flag("--version", "0.1.0");
    app.require_subcommand(1);

    CliArgs args;
    const struct {
        const char* name;
        const char* help;
    } commands[] = {
        {"synth", "generate the configured synthetic corpus"},
        {"ingest", "normalize and re-emit an on-disk corpus"},
        {"index", "build the per-space similarity indices"},
        {"mine", "mine banded pairs and the held-out eval pairs"},
        {"annotate", "write instructions for every mined pair"},
        {"train", "fit the linear adapters on annotated triplets"},
        {"eval", "score the trained adapters on the held-out task"},
        {"pipeline", "run every stage end to end"},
        {"ablate", "run the mining-space x negative-strategy grid"},
    };
    for (const auto& cmd : commands) add_common(app.add_subcommand(cmd.name, cmd.help), args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kBadConfig;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    const CLI::App* sub = app.get_subcommands().front();

    pairforge::RunConfig cfg;
    try {
        cfg = pairforge::load_run_config(args.config);
        if (sub->count("--out-dir")) cfg.out_dir = args.out_dir;
        if (sub->count("--seed")) cfg.seed = args.seed;
        if (sub->count("--workers")) cfg.workers = args.workers;
        pairforge::validate_config(cfg);
        if (command == "synth" && !cfg.corpus.synthetic) {
            pairforge::fail(pairforge::Errc::InvalidParam,
                            "synth needs a synthetic corpus source");
        }
        if (command == "ingest" && cfg.corpus.synthetic) {
            pairforge::fail(pairforge::Errc::InvalidParam,
                            "ingest needs an on-disk corpus source");
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kBadConfig;
    }

    try {
        return dispatch(command, cfg);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kStageFailed;
    }
}
