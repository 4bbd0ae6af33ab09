// fsm: config-driven experiments in one-/K-shot speech-image matching.
// Subcommands cover the pipeline end to end: prepare -> mine-pairs -> train
// -> eval. All behaviour comes from the config file; --seed, --threads, and
// --out override their config keys, and FSM_THREADS stands in for --threads
// when the flag is absent.

#include <cstdlib>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "fsm/commands.hpp"
#include "fsm/config.hpp"

namespace {

struct CommonFlags {
    std::string config_path;
    uint64_t seed = 0;
    int threads = 0;
    std::string out;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* threads_opt = nullptr;
    CLI::Option* out_opt = nullptr;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config_path, "experiment config file")
        ->required()
        ->check(CLI::ExistingFile);
    f.seed_opt = cmd->add_option("--seed", f.seed, "master seed (overrides run.seed)");
    f.threads_opt =
        cmd->add_option("--threads", f.threads, "worker thread cap (overrides run.threads)");
    f.out_opt = cmd->add_option("--out", f.out, "output directory (overrides run.out)");
}

fsm::ExperimentConfig load_config(const CommonFlags& f) {
    fsm::KeyValues kv = fsm::parse_config_file(f.config_path);
    fsm::ExperimentConfig cfg = fsm::config_from(kv);
    if (f.seed_opt->count()) cfg.seed = f.seed;
    if (f.out_opt->count()) cfg.out = f.out;
    if (f.threads_opt->count()) {
        cfg.threads = f.threads;
    } else if (const char* env = std::getenv("FSM_THREADS")) {
        try {
            cfg.threads = std::stoi(env);
        } catch (const std::exception&) {
            throw fsm::ConfigError("config: FSM_THREADS='" + std::string(env) +
                                   "' is not an integer");
        }
    }
    if (cfg.threads < 0) throw fsm::ConfigError("config: thread cap must not be negative");
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"one-/K-shot speech-image matching experiments"};
    app.require_subcommand(1);

    CommonFlags prepare_f, mine_f, train_f, eval_f;
    CLI::App* prepare = app.add_subcommand("prepare", "materialize and validate datasets");
    add_common(prepare, prepare_f);
    CLI::App* mine = app.add_subcommand("mine-pairs", "mine same-class pair candidates");
    add_common(mine, mine_f);
    CLI::App* train = app.add_subcommand("train", "train encoder checkpoints");
    add_common(train, train_f);
    CLI::App* eval = app.add_subcommand("eval", "run the episodic benchmark");
    add_common(eval, eval_f);
    std::string baseline;
    eval->add_option("--baseline", baseline,
                     "evaluate raw features instead of checkpoints (dtw+pixels)");
    std::string task_override;
    eval->add_option("--task", task_override,
                     "episode task: unimodal-speech, unimodal-vision, or multimodal "
                     "(overrides eval.task)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);  // prints help or the usage error
        return code == 0 ? 0 : 2;
    }

    return fsm::exit_code_of([&] {
        if (prepare->parsed()) {
            fsm::run_prepare(load_config(prepare_f));
        } else if (mine->parsed()) {
            fsm::run_mine_pairs(load_config(mine_f));
        } else if (train->parsed()) {
            fsm::run_train(load_config(train_f));
        } else {
            fsm::ExperimentConfig cfg = load_config(eval_f);
            if (!task_override.empty()) cfg.eval_task = task_override;
            fsm::run_eval(cfg, baseline);
        }
    });
}
