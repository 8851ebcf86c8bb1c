/*
   Copyright 2026 The cfbsde Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License.
*/

#include "cfbsde/app.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

namespace app = cfbsde::app;

namespace {

// CFBSDE_VERBOSITY: 0 silent, 1 periodic progress (default), 2 every iteration.
int verbosity() {
    const char* v = std::getenv("CFBSDE_VERBOSITY");
    if (!v || !*v) return 1;
    const int n = std::atoi(v);
    return n < 0 ? 0 : n;
}

template <typename F>
int guarded(F&& body) {
    try {
        return body();
    } catch (const cfbsde::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return app::kUsage;
    } catch (const cfbsde::TrainingAborted& e) {
        std::cerr << "training aborted: " << e.what() << '\n';
        return app::kDiverged;
    } catch (const cfbsde::CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << '\n';
        return app::kCheckpoint;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return app::kIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return app::kInternal;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App cli{"State-constrained deep FBSDE controller"};
    cli.require_subcommand(1);

    // train
    auto* train = cli.add_subcommand("train", "Train a controller");
    std::string train_config;
    app::TrainOptions topt;
    std::uint64_t train_seed = 0;
    std::int64_t train_iters = 0;
    double fixed_k = 0.0;
    std::string resume;
    train->add_option("--config", train_config, "Config file or preset name");
    train->add_option("--out", topt.out, "Output directory")->required();
    auto* seed_opt = train->add_option("--seed", train_seed, "Override trainer.seed");
    auto* iter_opt = train->add_option("--iterations", train_iters, "Override trainer.iterations")->check(CLI::NonNegativeNumber);
    auto* k_opt = train->add_option("--fixed-k", fixed_k, "Pin the penalty steepness and disable the schedule")
                      ->check(CLI::PositiveNumber);
    auto* resume_opt = train->add_option("--resume", resume, "Checkpoint to continue from");
    bool dry_run = false;
    train->add_flag("--dry-run", dry_run, "Validate and write the resolved config.json without training");

    // eval
    auto* eval = cli.add_subcommand("eval", "Evaluate a checkpoint over independent trials");
    app::EvalOptions eopt;
    std::string eval_config;
    cfbsde::Index trials = 0;
    std::uint64_t eval_seed = 0;
    bool no_traj = false;
    eval->add_option("--checkpoint", eopt.checkpoint, "Checkpoint file")->required();
    auto* econf_opt = eval->add_option("--config", eval_config, "Config (default: the one stored in the checkpoint)");
    auto* trials_opt = eval->add_option("--trials", trials, "Number of trials (default 256)")->check(CLI::PositiveNumber);
    auto* eseed_opt = eval->add_option("--seed", eval_seed, "Evaluation noise seed");
    eval->add_option("--out", eopt.out, "Output directory")->required();
    eval->add_option("--margin", eopt.margin, "Relative bound margin for the second violation figure");
    eval->add_flag("--no-trajectories", no_traj, "Skip trajectories.csv");

    // penalty-curve
    auto* curve = cli.add_subcommand("penalty-curve", "Tabulate the penalty wall for several steepness values");
    app::PenaltyCurveOptions copt;
    std::string curve_out;
    curve->add_option("--k", copt.ks, "Steepness values")->delimiter(',');
    curve->add_option("--lower", copt.lower, "Lower bound");
    curve->add_option("--upper", copt.upper, "Upper bound");
    curve->add_option("--ceiling", copt.ceiling, "Penalty ceiling L");
    curve->add_option("--x-min", copt.x_min, "Grid start");
    curve->add_option("--x-max", copt.x_max, "Grid end");
    curve->add_option("--points", copt.points, "Grid size");
    curve->add_option("--out", curve_out, "Output CSV (default: stdout)");

    // inspect-checkpoint
    auto* inspect = cli.add_subcommand("inspect-checkpoint", "Print a checkpoint summary as JSON");
    std::string inspect_path;
    inspect->add_option("checkpoint", inspect_path, "Checkpoint file")->required();

    try {
        cli.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = cli.exit(e);
        return code == 0 ? 0 : app::kUsage;
    }

    if (*train) {
        return guarded([&] {
            if (*seed_opt) topt.seed = train_seed;
            if (*iter_opt) topt.iterations = train_iters;
            if (*k_opt) topt.fixed_k = fixed_k;
            if (*resume_opt) topt.resume = resume;
            topt.verbosity = verbosity();
            cfbsde::ExperimentConfig cfg;
            if (!train_config.empty()) {
                cfg = app::load_config(train_config);
            } else if (topt.resume) {
                cfg = cfbsde::load_checkpoint(*topt.resume).config;
            } else {
                throw cfbsde::ConfigError("--config: required unless --resume is given");
            }
            if (dry_run) {
                app::apply_overrides(cfg, topt);
                std::filesystem::create_directories(topt.out);
                cfbsde::write_file_atomic(topt.out / app::kConfigFile, cfbsde::to_json(cfg).dump(2) + "\n");
                return static_cast<int>(app::kOk);
            }
            const app::TrainSummary s = app::train(cfg, topt);
            if (topt.verbosity > 0)
                std::cerr << "done: " << s.iterations << " iterations, final k " << s.final_k << ", "
                          << s.divergences << " divergences\n";
            return static_cast<int>(app::kOk);
        });
    }
    if (*eval) {
        return guarded([&] {
            if (*econf_opt) eopt.config = eval_config;
            if (*trials_opt) eopt.trials = trials;
            if (*eseed_opt) eopt.seed = eval_seed;
            eopt.trajectories = !no_traj;
            const app::EvalSummary s = app::evaluate(eopt);
            if (verbosity() > 0) std::cout << s.json.dump(2) << '\n';
            return static_cast<int>(app::kOk);
        });
    }
    if (*curve) {
        return guarded([&] {
            const std::string csv = app::penalty_curve(copt);
            if (curve_out.empty())
                std::cout << csv;
            else
                cfbsde::write_file_atomic(curve_out, csv);
            return static_cast<int>(app::kOk);
        });
    }
    return guarded([&] {
        std::cout << app::inspect(inspect_path).dump(2) << '\n';
        return static_cast<int>(app::kOk);
    });
}
