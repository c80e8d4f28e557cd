// Command-line entry point for the whole pipeline: phase 1 RL training,
// phase 2 distillation, baseline training, evaluation scenarios, figure-data
// export and PID tuning. Exit codes: 0 success, 2 configuration error,
// 3 runtime fault.

#include <CLI11.hpp>
#include <iostream>

#include "omniquad/distill.hpp"
#include "omniquad/evalharness.hpp"
#include "omniquad/train.hpp"

namespace {

using namespace omniquad;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct CommonArgs {
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out_dir = ".";
  long steps_override = -1;

  Config load() const {
    Config cfg = config_path.empty() ? Config{} : Config::load(config_path);
    // CLI flag beats config file beats built-in default.
    if (steps_override >= 0) {
      cfg.ppo.total_steps = steps_override;
      cfg.distill.total_steps = steps_override;
    }
    return cfg;
  }
};

void add_common(CLI::App* cmd, CommonArgs& args, bool with_steps = true) {
  cmd->add_option("--config", args.config_path, "TOML config file (defaults are built in)");
  cmd->add_option("--seed", args.seed, "master seed")->required();
  cmd->add_option("--out", args.out_dir, "output directory")->required();
  if (with_steps) cmd->add_option("--steps", args.steps_override, "override total training steps");
}

int run_train_phase1(const CommonArgs& args, const std::string& variant_name, bool resume) {
  const Config cfg = args.load();
  PolicyVariant variant = PolicyVariant::Rma;
  if (variant_name == "robust")
    variant = PolicyVariant::Robust;
  else if (variant_name == "ltf")
    variant = PolicyVariant::Ltf;
  else if (variant_name == "sysid")
    variant = PolicyVariant::Sysid;
  else if (variant_name != "rma")
    throw ConfigError("unknown baseline '" + variant_name + "'; available: robust ltf sysid");
  const TrainPhase1Result r = train_phase1(cfg, args.seed, variant, args.out_dir, resume);
  std::cout << "final checkpoint: " << r.final_checkpoint.string() << "\n";
  return kExitOk;
}

int run_train_phase2(const CommonArgs& args, const std::string& teacher) {
  const Config cfg = args.load();
  if (teacher.empty()) throw ConfigError("train-phase2 requires --teacher <phase1 checkpoint>");
  const TrainPhase2Result r = train_phase2(cfg, args.seed, teacher, args.out_dir);
  std::cout << "final checkpoint: " << r.final_checkpoint.string() << "\n";
  std::cout << "distillation loss " << r.first_loss << " -> " << r.last_loss << ", holdout EV "
            << r.holdout_ev << "\n";
  return kExitOk;
}

int run_eval(const CommonArgs& args, const std::string& controllers_arg,
             const std::string& checkpoints_arg, const std::string& scenario_arg, int episodes,
             const std::string& pid_gains_path) {
  const Config cfg = args.load();
  fs::create_directories(args.out_dir);
  write_run_manifest(args.out_dir, "eval:" + controllers_arg + ":" + scenario_arg, cfg, args.seed);

  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) out.push_back(item);
    return out;
  };
  const std::vector<std::string> names = split(controllers_arg);
  std::vector<std::string> checkpoints = split(checkpoints_arg);
  checkpoints.resize(names.size());

  PidGains pid_gains;
  if (!pid_gains_path.empty()) {
    std::ifstream in(pid_gains_path);
    if (!in) throw ConfigError("cannot open PID gains file: " + pid_gains_path);
    nlohmann::json j;
    in >> j;
    pid_gains.kp_pos = j.at("kp_pos").get<double>();
    pid_gains.kd_pos = j.at("kd_pos").get<double>();
    pid_gains.ki_pos = j.at("ki_pos").get<double>();
    pid_gains.att_tau = j.at("att_tau").get<double>();
    pid_gains.k_rate = j.at("k_rate").get<double>();
  }

  ScenarioSpec spec;
  spec.kind = scenario_from_name(scenario_arg);
  spec.regime = Config::regime_of(cfg.eval.regime);
  spec.episodes = episodes > 0 ? episodes : cfg.eval.episodes;
  spec.seed = args.seed;

  ThreadPool pool(resolve_workers(cfg.eval.workers));

  if (spec.kind == ScenarioKind::PayloadStep) {
    if (names.size() != 1 || checkpoints[0].empty())
      throw ConfigError("payload-step needs exactly one adaptive controller with --checkpoint");
    const PolicyBundle bundle = PolicyBundle::from_checkpoint(Checkpoint::load(checkpoints[0]));
    const PayloadRunResult run = run_payload_step(bundle, cfg, args.seed);
    const fs::path log_path = fs::path(args.out_dir) / ("payload_log_" + names[0] + ".csv");
    write_payload_log_csv(log_path.string(), run, cfg.hash());
    const AdaptationCheck check = check_adaptation_recovery(run, cfg.eval.goal_height, cfg.sim.dt);
    nlohmann::json j;
    j["controller"] = names[0];
    j["scenario"] = "payload-step";
    j["config_hash"] = cfg.hash();
    j["fault"] = run.fault;
    j["recovered_all"] = check.ok;
    auto& steps = j["steps"] = nlohmann::json::array();
    for (const auto& s : check.steps)
      steps.push_back({{"t_step", s.t_step},
                       {"baseline", s.baseline},
                       {"recovered", s.recovered},
                       {"recovery_time", s.recovery_time},
                       {"height_err_at_deadline", s.height_err_at_deadline}});
    std::ofstream out(fs::path(args.out_dir) / "summary.json", std::ios::trunc);
    out << j.dump(2) << "\n";
    std::cout << j.dump(2) << "\n";
    return kExitOk;
  }

  std::vector<std::pair<std::string, ControllerFactory>> controllers;
  for (std::size_t i = 0; i < names.size(); ++i)
    controllers.emplace_back(names[i],
                             make_controller_factory(names[i], checkpoints[i], cfg, pid_gains));

  const auto entries = compare_controllers(controllers, spec, cfg, pool);

  nlohmann::json summary = nlohmann::json::array();
  for (const auto& e : entries) {
    summary.push_back(metrics_json(e.controller, spec, e.metrics));
    const fs::path csv_path = fs::path(args.out_dir) / ("episodes_" + e.controller + ".csv");
    write_episode_csv(csv_path.string(), e.metrics, cfg.hash());
  }
  nlohmann::json doc;
  doc["config_hash"] = cfg.hash();
  doc["seed"] = args.seed;
  doc["scenario"] = scenario_name(spec.kind);
  doc["episodes"] = spec.episodes;
  doc["results"] = summary;
  std::ofstream out(fs::path(args.out_dir) / "summary.json", std::ios::trunc);
  out << doc.dump(2) << "\n";

  std::cout << format_table(entries);
  return kExitOk;
}

int run_export_figure_data(const std::string& run_log, const std::string& out_path) {
  std::ifstream in(run_log);
  if (!in) throw ConfigError("missing payload run log: " + run_log);
  std::string line;
  std::getline(in, line);  // config hash comment
  const std::string hash_line = line;
  std::getline(in, line);  // header
  if (line.rfind("t,zhat0", 0) != 0)
    throw ConfigError("not a payload run log (unexpected header): " + run_log);

  std::ofstream out(out_path, std::ios::trunc);
  out << hash_line << "\n";
  out << "time,series,component,value\n";
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 2 + 2 * kIntrinsicsDim) throw ConfigError("malformed log row: " + line);
    const std::string& t = cells[0];
    for (int k = 0; k < kIntrinsicsDim; ++k)
      out << t << ",zhat," << k << "," << cells[static_cast<std::size_t>(1 + k)] << "\n";
    for (int k = 0; k < kIntrinsicsDim; ++k)
      out << t << ",z," << k << "," << cells[static_cast<std::size_t>(1 + kIntrinsicsDim + k)]
          << "\n";
    out << t << ",height,0," << cells.back() << "\n";
  }
  return kExitOk;
}

int run_tune_pid(const CommonArgs& args, const std::string& platform_arg) {
  const Config cfg = args.load();
  fs::create_directories(args.out_dir);
  QuadParams platform;
  if (platform_arg == "nominal") {
    platform = nominal_params(cfg.ranges, Regime::Test);
  } else {
    platform = sample_params(std::stoull(platform_arg), cfg.ranges, Regime::Test);
  }
  const PidGains g = tune_pid_gains(platform, cfg, args.seed);
  nlohmann::json j = {{"kp_pos", g.kp_pos},   {"kd_pos", g.kd_pos}, {"ki_pos", g.ki_pos},
                      {"att_tau", g.att_tau}, {"k_rate", g.k_rate}, {"config_hash", cfg.hash()}};
  const fs::path path = fs::path(args.out_dir) / "pid_gains.json";
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << "\n";
  std::cout << j.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"omniquad: universal adaptive quadrotor controller laboratory"};
  app.require_subcommand(1);

  CommonArgs p1_args, p2_args, bl_args, eval_args, tune_args;
  std::string baseline_id, teacher, controllers_arg, checkpoints_arg, pid_gains_path;
  std::string scenario_arg = "stabilization";
  std::string run_log, export_out, platform_arg = "nominal";
  int episodes = -1;
  bool resume_p1 = false, resume_bl = false;

  CLI::App* p1 = app.add_subcommand("train-phase1", "PPO training of the privileged expert");
  add_common(p1, p1_args);
  p1->add_flag("--resume", resume_p1, "resume from the latest train state");

  CLI::App* p2 =
      app.add_subcommand("train-phase2", "supervised distillation of the adaptation module");
  add_common(p2, p2_args);
  p2->add_option("--teacher", teacher, "phase1 checkpoint to distill from")->required();

  CLI::App* bl = app.add_subcommand("train-baseline", "train a learned baseline (robust|ltf|sysid)");
  bl->add_option("baseline", baseline_id, "baseline id")->required();
  add_common(bl, bl_args);
  bl->add_flag("--resume", resume_bl, "resume from the latest train state");

  CLI::App* ev = app.add_subcommand("eval", "run an evaluation scenario");
  add_common(ev, eval_args, false);
  ev->add_option("--controller", controllers_arg, "controller id or comma list")->required();
  ev->add_option("--checkpoint,--checkpoints", checkpoints_arg,
                 "checkpoint path(s), comma list matching --controller");
  ev->add_option("--scenario", scenario_arg,
                 "stabilization|ood-forces|ood-motor|payload-step|moving-goal");
  ev->add_option("--episodes", episodes, "episode count (default from config)");
  ev->add_option("--pid-gains", pid_gains_path, "JSON gains from tune-pid");

  CLI::App* ex = app.add_subcommand("export-figure-data", "payload log to long-format CSV");
  ex->add_option("--run-log", run_log, "payload_log_*.csv from a payload-step eval")->required();
  ex->add_option("--out", export_out, "output CSV path")->required();

  CLI::App* tp = app.add_subcommand("tune-pid", "grid-search PID gains for a platform");
  add_common(tp, tune_args, false);
  tp->add_option("--platform", platform_arg, "'nominal' or a numeric platform seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (p1->parsed()) return run_train_phase1(p1_args, "rma", resume_p1);
    if (p2->parsed()) return run_train_phase2(p2_args, teacher);
    if (bl->parsed()) return run_train_phase1(bl_args, baseline_id, resume_bl);
    if (ev->parsed())
      return run_eval(eval_args, controllers_arg, checkpoints_arg, scenario_arg, episodes,
                      pid_gains_path);
    if (ex->parsed()) return run_export_figure_data(run_log, export_out);
    if (tp->parsed()) return run_tune_pid(tune_args, platform_arg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const CheckpointError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::runtime_error& e) {
    const std::string what = e.what();
    if (what.find("unknown controller") != std::string::npos ||
        what.find("unknown scenario") != std::string::npos ||
        what.find("--checkpoint") != std::string::npos) {
      std::cerr << "config error: " << what << "\n";
      return kExitConfig;
    }
    std::cerr << "runtime fault: " << what << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "runtime fault: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}
