// kgcot: command-line entry point for every pipeline stage.
//
// Exit codes: 0 success, 1 input/config error, 2 provider failure.

#include "kgcot/common.hpp"
#include "kgcot/pipeline.hpp"
#include "kgcot/study_server.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <csignal>
#include <cstdlib>
#include <iostream>
#include <pthread.h>
#include <thread>

namespace fs = std::filesystem;
using namespace kgcot;

namespace {

struct CommonOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
    cmd->add_option("--config", o.config, "pipeline config (JSON)")->required();
    cmd->add_option("--seed", o.seed, "override parameters.seed");
    cmd->add_option("--out", o.out, "override the output directory");
}

PipelineConfig resolve_config(const CommonOptions& o) {
    ConfigOverrides overrides;
    overrides.seed = o.seed;
    if (o.out) overrides.out_dir = fs::path(*o.out);
    return load_config(o.config, overrides);
}

int serve_study(Pipeline& pipeline, std::optional<int> port, std::optional<std::string> host) {
    const auto& cfg = pipeline.config();
    auto study = pipeline.prepare_study();
    StudyState state(std::move(study), pipeline.layout().study_dir() / "preferences.jsonl");
    StudyServerOptions options;
    options.host = host.value_or(cfg.study.host);
    options.port = port.value_or(cfg.study.port);
    options.static_dir = cfg.study.static_dir;
    if (const char* token = std::getenv(cfg.study.admin_token_env.c_str())) options.admin_token = token;
    if (options.admin_token.empty())
        spdlog::warn("{} is unset; /api/study/report is disabled", cfg.study.admin_token_env);

    // SIGINT/SIGTERM are taken by a waiter thread so shutdown runs outside a handler.
    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);

    StudyServer server(state, options);
    const int bound = server.bind();
    std::cout << "listening on http://" << options.host << ":" << bound << std::endl;
    std::thread waiter([&] {
        int sig = 0;
        sigwait(&signals, &sig);
        spdlog::info("signal {} received; stopping", sig);
        server.stop();
    });
    pipeline.write_audit();
    server.serve();
    // serve() can also return without a signal; wake the waiter.
    pthread_kill(waiter.native_handle(), SIGTERM);
    waiter.join();
    spdlog::info("preference log holds {} records", state.log_lines());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Knowledge-graph-guided chain-of-thought pipeline"};
    app.require_subcommand(1);
    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "debug logging");

    CommonOptions common;
    auto* map_cmd = app.add_subcommand("map-entities", "align vocabulary codes and disease targets to graph nodes");
    auto* cohort_cmd = app.add_subcommand("build-cohort", "build index cases and train/dev/test splits");
    auto* evidence_cmd = app.add_subcommand("mine-evidence", "select relevance nodes and pruned paths per disease");
    auto* cot_cmd = app.add_subcommand("gen-cot", "generate and filter chain-of-thought supervision");
    auto* eval_cmd = app.add_subcommand("evaluate", "score a predictions file");
    auto* serve_cmd = app.add_subcommand("serve-study", "serve the blinded pairwise preference study");
    auto* all_cmd = app.add_subcommand("run-all", "map-entities, build-cohort, mine-evidence, gen-cot, evaluate");
    for (auto* cmd : {map_cmd, cohort_cmd, evidence_cmd, cot_cmd, eval_cmd, serve_cmd, all_cmd}) add_common(cmd, common);

    std::optional<std::string> predictions;
    eval_cmd->add_option("--predictions", predictions, "predictions.jsonl (default: paths.predictions)");
    std::optional<int> port;
    std::optional<std::string> host;
    serve_cmd->add_option("--port", port, "listen port (default: study.port)");
    serve_cmd->add_option("--host", host, "listen address (default: study.host)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);
    spdlog::set_pattern("[%H:%M:%S] %^%l%$ %v");

    std::optional<Pipeline> pipeline;
    try {
        pipeline.emplace(resolve_config(common));
        if (serve_cmd->parsed()) return serve_study(*pipeline, port, host);
        if (map_cmd->parsed()) pipeline->map_entities();
        else if (cohort_cmd->parsed()) pipeline->build_cohort();
        else if (evidence_cmd->parsed()) pipeline->mine_evidence();
        else if (cot_cmd->parsed()) pipeline->gen_cot();
        else if (eval_cmd->parsed()) pipeline->evaluate(predictions ? std::optional<fs::path>(*predictions) : std::nullopt);
        else if (all_cmd->parsed()) pipeline->run_all();
        pipeline->write_audit();
        return 0;
    } catch (const InputError& e) {
        spdlog::error("{}", e.what());
        if (pipeline) {
            try {
                pipeline->write_audit();
            } catch (const std::exception&) {
            }
        }
        return 1;
    } catch (const ProviderError& e) {
        spdlog::error("provider failure: {}", e.what());
        if (pipeline) {
            try {
                pipeline->write_audit();
            } catch (const std::exception&) {
            }
        }
        return 2;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
}
