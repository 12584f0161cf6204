// Command-line entry point: data generation, training, evaluation, gradient
// checks and plots. Exit codes: 0 ok, 1 gradient check failed, 2 config
// error, 3 data error, 4 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "diffstack/gradsuite.hpp"
#include "diffstack/plot.hpp"
#include "diffstack/report.hpp"

namespace fs = std::filesystem;
using namespace diffstack;

namespace {

struct Global {
  std::string out_dir;
};

/// Relative output paths land under --out-dir (default $DIFFSTACK_OUT_DIR).
std::string output_path(const Global& g, const std::string& path) {
  fs::path p(path);
  if (p.is_relative() && !g.out_dir.empty()) p = fs::path(g.out_dir) / p;
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  return p.string();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write '" + path + "'");
  f << text;
}

/// The resolved options of `cmd` in the format --config reads back.
void write_snapshot(const std::string& out, const CLI::App& cmd, const Global& g) {
  std::string text = "# resolved configuration\nout-dir=\"" + g.out_dir + "\"\n[" + cmd.get_name() + "]\n";
  text += cmd.config_to_str(true, false);
  write_text(out + ".config.ini", text);
}

std::vector<Scenario> select_split(const std::vector<Scenario>& all, const std::string& which, double fraction) {
  if (which == "all") return all;
  auto [tr, va] = scenario::split(all, fraction, 0);
  if (which == "train") return tr;
  if (which == "val") return va;
  throw ConfigError("--split must be train, val or all");
}

std::vector<training::Checkpoint> load_checkpoints(const std::vector<std::string>& paths) {
  std::vector<training::Checkpoint> out;
  for (const auto& p : paths) {
    std::ifstream f(p);
    if (!f) throw DataError("cannot read checkpoint '" + p + "'");
    nlohmann::json j;
    try {
      f >> j;
    } catch (const nlohmann::json::exception& e) {
      throw DataError("checkpoint '" + p + "': " + e.what());
    }
    out.push_back(training::checkpoint_from_json(j));
  }
  return out;
}

// ---------------------------------------------------------------------------

struct GenData {
  ScenarioConfig cfg;
  bool no_certify = false;
  std::string out = "scenarios.jsonl";

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("gen-data", "Generate a synthetic scenario file");
    c->add_option("--family", cfg.family, "lane_follow, lead_brake, crossing, cut_in, lane_change or interactive")
        ->capture_default_str();
    c->add_option("--count", cfg.count)->capture_default_str();
    c->add_option("--seed", cfg.seed)->capture_default_str();
    c->add_option("--dt", cfg.dt)->capture_default_str();
    c->add_option("--noise", cfg.noise, "Scale of the agents' control noise")->capture_default_str();
    c->add_option("--past-seconds", cfg.past_seconds)->capture_default_str();
    c->add_option("--horizon-seconds", cfg.horizon_seconds)->capture_default_str();
    c->add_option("--future-seconds", cfg.future_seconds, "Logged future; 13 for closed-loop logs")
        ->capture_default_str();
    c->add_flag("--no-certify", no_certify, "Keep interactive draws the predicted agent does not affect")
        ->capture_default_str();
    c->add_option("--out", out)->capture_default_str();
    c->callback([this, c] { pending = c; });
  }
  CLI::App* pending = nullptr;

  int run(const Global& g) {
    cfg.validate();
    std::vector<Scenario> s;
    stack::GenerationReport rep;
    if (!no_certify)
      s = stack::generate_certified(cfg, &rep);
    else
      s = scenario::generate(cfg);
    const std::string path = output_path(g, out);
    scenario::save(path, s);
    write_snapshot(path, *pending, g);
    std::cerr << "wrote " << s.size() << " scenarios to " << path;
    if (!no_certify)
      std::cerr << " (regenerated " << rep.regenerated << ", uncertified " << rep.uncertified << ", rejected "
                << rep.rejected << ")";
    std::cerr << "\n";
    return 0;
  }
};

struct Train {
  std::string data, mode = "standard", setting = "rl", label, init_checkpoint, out = "checkpoint.json";
  std::vector<double> alphas;
  double perturb = 0.5;
  bool no_planner = false, no_controller = false;
  TrainConfig tc;
  CLI::App* pending = nullptr;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("train", "Train a predictor (or cost weights) and write a checkpoint");
    c->add_option("--data", data, "Scenario file")->required();
    c->add_option("--mode", mode,
                  "standard, distance_weighted, gradcost_weighted, diffstack, diffstack_no_pred or cost_tuning")
        ->capture_default_str();
    c->add_option("--setting", setting, "rl or il")->capture_default_str();
    c->add_option("--alphas", alphas, "a1,a2,a3 (default depends on mode and setting)")->delimiter(',')->expected(3);
    c->add_option("--bias-offset", tc.bias_offset, "Metres added to prediction targets along the ego heading")
        ->capture_default_str();
    c->add_option("--seed", tc.seed)->capture_default_str();
    c->add_option("--epochs", tc.epochs)->capture_default_str();
    c->add_option("--batch-size", tc.batch_size)->capture_default_str();
    c->add_option("--lr", tc.learning_rate)->capture_default_str();
    c->add_option("--clip-norm", tc.clip_norm)->capture_default_str();
    c->add_option("--train-fraction", tc.train_fraction)->capture_default_str();
    c->add_option("--perturb", perturb, "cost_tuning: start from hand-tuned weights moved by +-this fraction")
        ->capture_default_str();
    c->add_option("--init-checkpoint", init_checkpoint, "Start from this checkpoint's parameters");
    c->add_flag("--no-planner", no_planner, "Controller-only stack")->capture_default_str();
    c->add_flag("--no-controller", no_controller, "Planner-only stack")->capture_default_str();
    c->add_option("--label", label, "Method name in reports (default: the mode)");
    c->add_option("--out", out)->capture_default_str();
    c->callback([this, c] { pending = c; });
  }

  int run(const Global& g) {
    tc.mode = parse_train_mode(mode);
    const Setting s = parse_setting(setting);
    LossConfig loss = mode_loss_defaults(tc.mode, s);
    if (!alphas.empty()) {
      loss.alpha1 = alphas[0];
      loss.alpha2 = alphas[1];
      loss.alpha3 = alphas[2];
    }
    // the snapshot records the alphas actually used
    auto* a = pending->get_option("--alphas");
    a->clear();
    for (double x : {loss.alpha1, loss.alpha2, loss.alpha3}) a->add_result(report::num(x));
    if (label.find_first_of(",\"\r\n") != std::string::npos)
      throw ConfigError("train: --label cannot contain commas, quotes or newlines");
    tc.stack.use_planner = !no_planner;
    tc.stack.use_controller = !no_controller;
    tc.stack.validate();
    tc.validate();
    loss.validate();

    const auto all = scenario::load(data);
    if (all.empty()) throw DataError("train: '" + data + "' holds no scenarios");
    auto [tr, va] = scenario::split(all, tc.train_fraction, 0);
    if (tr.empty()) throw DataError("train: the training split is empty");

    StackParams init = training::initial_params(predictor_config_for(tr.front()), tc.seed);
    if (!init_checkpoint.empty()) init = load_checkpoints({init_checkpoint}).front().params;
    if (tc.mode == TrainMode::kCostTuning) init.weights = training::perturbed_weights(perturb, tc.seed);

    const std::string path = output_path(g, out);
    std::ofstream log(path + ".log.jsonl", std::ios::binary);
    if (!log) throw DataError("cannot write '" + path + ".log.jsonl'");
    const auto res = training::train(tr, va, init, tc, loss, [&](const training::EpochStats& e) {
      log << e.to_json().dump() << "\n";
      std::cerr << "epoch " << e.epoch << " train " << e.train_loss << " val " << e.val_total << "\n";
    });

    training::Checkpoint ck;
    ck.params = res.params;
    ck.label = label.empty() ? mode : label;
    ck.train = tc;
    ck.loss = loss;
    write_text(path, training::to_json(ck).dump(1) + "\n");
    write_snapshot(path, *pending, g);
    std::cerr << "wrote " << path << "\n";
    return 0;
  }
};

struct EvalOpenLoop {
  std::string data, setting, split = "val", out = "open_loop.csv";
  std::vector<std::string> checkpoints;
  double fraction = 0.75;
  CLI::App* pending = nullptr;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("eval-open-loop", "Open-loop metrics relative to No-prediction");
    c->add_option("--data", data, "Scenario file")->required();
    c->add_option("--checkpoints", checkpoints, "Checkpoint files; equal labels are seeds of one method");
    c->add_option("--setting", setting, "rl or il (default: the checkpoints' setting)");
    c->add_option("--split", split, "val, train or all")->capture_default_str();
    c->add_option("--train-fraction", fraction)->capture_default_str();
    c->add_option("--out", out)->capture_default_str();
    c->callback([this, c] { pending = c; });
  }

  int run(const Global& g) {
    const auto cks = load_checkpoints(checkpoints);
    Setting s = Setting::kRL;
    if (!setting.empty())
      s = parse_setting(setting);
    else if (!cks.empty())
      s = cks.front().loss.setting;
    const auto set = select_split(scenario::load(data), split, fraction);
    const std::string path = output_path(g, out);
    report::open_loop(set, cks, s).save(path);
    write_snapshot(path, *pending, g);
    std::cerr << "wrote " << path << "\n";
    return 0;
  }
};

struct EvalClosedLoop {
  std::string data, split = "all", out = "closed_loop.csv";
  std::vector<std::string> checkpoints;
  double fraction = 0.75;
  SimConfig cfg;
  CLI::App* pending = nullptr;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("eval-closed-loop", "Closed-loop log-replay metrics");
    c->add_option("--data", data, "Scenario file with long logs (--future-seconds 13)")->required();
    c->add_option("--checkpoints", checkpoints, "Checkpoint files; equal labels are seeds of one method");
    c->add_option("--tsim", cfg.t_sim, "Simulated seconds")->capture_default_str();
    c->add_option("--replan", cfg.replan_interval, "Seconds between replans")->capture_default_str();
    c->add_option("--split", split, "val, train or all")->capture_default_str();
    c->add_option("--train-fraction", fraction)->capture_default_str();
    c->add_option("--out", out)->capture_default_str();
    c->callback([this, c] { pending = c; });
  }

  int run(const Global& g) {
    const auto cks = load_checkpoints(checkpoints);
    const auto set = select_split(scenario::load(data), split, fraction);
    if (!set.empty()) cfg.validate(set.front().dt);
    const std::string path = output_path(g, out);
    report::closed_loop(set, cks, cfg).save(path);
    write_snapshot(path, *pending, g);
    std::cerr << "wrote " << path << "\n";
    return 0;
  }
};

struct GradCheck {
  std::string target = "all", out = "grad_check.json";
  std::uint64_t seed = 1;
  int instances = 100;
  CLI::App* pending = nullptr;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("grad-check", "Analytic gradients against central finite differences");
    c->add_option("--target", target, "all, dynamics, cost, planner, predictor, controller or end-to-end")
        ->capture_default_str();
    c->add_option("--seed", seed)->capture_default_str();
    c->add_option("--instances", instances)->capture_default_str();
    c->add_option("--out", out)->capture_default_str();
    c->callback([this, c] { pending = c; });
  }

  int run(const Global& g) {
    if (instances < 1) throw ConfigError("grad-check: --instances must be positive");
    std::vector<std::string> targets = target == "all" ? gradsuite::targets() : std::vector<std::string>{target};
    nlohmann::json reports = nlohmann::json::array();
    bool ok = true;
    for (const auto& t : targets) {
      const auto r = gradsuite::run(t, instances, seed);
      std::cout << (r.ok(instances) ? "PASS " : "FAIL ") << t << ": " << r.passed << "/" << r.instances
                << " within " << r.tolerance << ", max relative error " << r.max_relative_error << ", skipped "
                << r.skipped << "\n";
      ok = ok && r.ok(instances);
      reports.push_back(r.to_json());
    }
    const std::string path = output_path(g, out);
    write_text(path, nlohmann::json{{"seed", seed}, {"instances", instances}, {"passed", ok}, {"reports", reports}}
                             .dump(1) + "\n");
    write_snapshot(path, *pending, g);
    return ok ? 0 : 1;
  }
};

struct Plot {
  std::string csv, out = "metrics.svg";
  CLI::App* pending = nullptr;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("plot", "SVG bar charts of a metrics CSV's relative columns");
    c->add_option("--metrics-csv", csv)->required();
    c->add_option("--out", out)->capture_default_str();
    c->callback([this, c] { pending = c; });
  }

  int run(const Global& g) {
    const std::string path = output_path(g, out);
    write_text(path, plot::relative_bars(report::Table::load(csv)));
    write_snapshot(path, *pending, g);
    return 0;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"diffstack: differentiable prediction-planning-control stack"};
  app.require_subcommand(1);
  app.fallthrough();
  Global g;
  if (const char* env = std::getenv("DIFFSTACK_OUT_DIR")) g.out_dir = env;
  app.add_option("--out-dir", g.out_dir, "Directory for relative output paths (default $DIFFSTACK_OUT_DIR)");
  app.set_config("--config", "", "Key-value config file: `[command]` sections or `command.key=value`");

  GenData gen;
  Train train;
  EvalOpenLoop eol;
  EvalClosedLoop ecl;
  GradCheck gc;
  Plot pl;
  gen.add(app);
  train.add(app);
  eol.add(app);
  ecl.add(app);
  gc.add(app);
  pl.add(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen.pending) return gen.run(g);
    if (train.pending) return train.run(g);
    if (eol.pending) return eol.run(g);
    if (ecl.pending) return ecl.run(g);
    if (gc.pending) return gc.run(g);
    if (pl.pending) return pl.run(g);
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
}
