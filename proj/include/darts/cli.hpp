#pragma once

#include <optional>
#include <string>
#include <vector>

#include "darts/trainer.hpp"

namespace darts::cli {

// Fully resolved run configuration: preset defaults overlaid with the config
// document and command-line overrides. Unknown keys are rejected.
struct RunConfig {
    std::string preset = "desk";
    std::uint64_t seed = 1;
    std::string out;
    ModelConfig model;
    OptimizerConfig optim;
    TrainOptions train;
    double plateau_factor = 0.2;
    int plateau_patience = 3;
    std::string conv_backend = "fast";

    struct TaskRef {
        std::string id;
        std::string path;
        std::size_t vocab_size = 11;
    };
    std::vector<TaskRef> tasks;

    struct AdaptRef {
        std::string checkpoint;
        std::string mode = "arch-param";
        std::optional<TaskRef> target;
    };
    std::optional<AdaptRef> adapt;

    std::vector<SyntheticTaskConfig> data_tasks;

    std::string resolved_json() const;
};

struct CliOverrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::string> preset;
    std::optional<std::string> mode;
};

RunConfig load_run_config(const std::string& path, const CliOverrides& overrides);
RunConfig run_config_from_json(const std::string& json_text, const CliOverrides& overrides);

TaskSpec load_task(const RunConfig::TaskRef& ref);

// Subcommand bodies. Each writes its artifacts under cfg.out and prints a
// JSON summary on stdout; diagnostics go to stderr.
void cmd_gen_data(const RunConfig& cfg);
void cmd_search(const RunConfig& cfg, bool csv);
void cmd_pretrain(const RunConfig& cfg, bool csv);
void cmd_adapt(const RunConfig& cfg, bool csv);
void cmd_derive(const std::string& checkpoint_path, const std::string& format,
                const std::string& out_path);
// Returns false when any primitive fails its finite-difference check.
bool cmd_gradcheck(std::ostream& os);
void cmd_eval(const std::string& checkpoint_path, const std::string& task_id,
              const std::string& data_path, const std::string& split, std::size_t vocab_size,
              const std::string& out_path);

// Exit codes: 0 success, 1 usage/config error, 2 runtime/numerical failure.
int run_cli(int argc, char** argv);

}  // namespace darts::cli
