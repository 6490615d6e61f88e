// normssl: run, grid and verify front end.
//
// Exit codes: 0 success, 2 configuration error, 3 divergence, 4 verification failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "normssl/checkpoint.hpp"
#include "normssl/grid.hpp"
#include "normssl/verify.hpp"

namespace fs = std::filesystem;
using namespace normssl;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitVerify = 4;
constexpr const char* kOutputRootEnv = "NORMSSL_OUTPUT_ROOT";

fs::path output_root() {
  const char* env = std::getenv(kOutputRootEnv);
  return env && *env ? fs::path(env) : fs::path("runs");
}

std::string metrics_header() {
  return "epoch,step,loss,positive,negative,lr,feature_std,pairwise_cosine,probe_acc";
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string metrics_line(const EpochMetrics& m) {
  std::ostringstream os;
  os << m.epoch << ',' << m.step << ',' << fmt(m.loss) << ',' << (m.positive ? fmt(*m.positive) : "") << ','
     << (m.negative ? fmt(*m.negative) : "") << ',' << fmt(m.lr) << ',' << fmt(m.feature_std) << ','
     << fmt(m.pairwise_cosine) << ',' << (m.probe_acc ? fmt(*m.probe_acc) : "");
  return os.str();
}

// Keeps the header and rows up to `epoch`; used when resuming into an existing directory.
std::vector<std::string> metrics_prefix(const fs::path& path, std::size_t epoch) {
  std::vector<std::string> lines;
  std::ifstream in(path);
  std::string line;
  if (!std::getline(in, line) || line != metrics_header()) return {};
  lines.push_back(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (std::stoull(line.substr(0, line.find(','))) > epoch) break;
    lines.push_back(line);
  }
  return lines;
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    out << text;
  }
  fs::rename(tmp, path);
}

struct RunOptions {
  std::string preset_name;
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::string out;
  std::size_t threads = 1;
  bool deterministic = false;
  std::string resume;
  std::size_t checkpoint_every = 0;
};

ExperimentConfig resolve_config(const RunOptions& o) {
  if (!o.preset_name.empty() && !o.config_path.empty()) throw ConfigError("give either --preset or --config");
  ExperimentConfig c = !o.config_path.empty() ? load_config(o.config_path)
                       : !o.preset_name.empty() ? preset(o.preset_name)
                                                : ExperimentConfig{};
  for (const auto& s : o.overrides) apply_override(c, s);
  if (o.seed) c.seed = *o.seed;
  if (o.epochs) c.epochs = *o.epochs;
  validate(c);
  return c;
}

int cmd_run(const RunOptions& o) {
  std::optional<TrainerState> resumed;
  ExperimentConfig config;
  if (!o.resume.empty()) {
    if (!o.preset_name.empty() || !o.config_path.empty() || !o.overrides.empty() || o.seed || o.epochs) {
      throw ConfigError("--resume takes the configuration from the checkpoint; drop other config flags");
    }
    resumed = load_checkpoint(o.resume);
    config = resumed->config;
  } else {
    config = resolve_config(o);
  }
  const fs::path dir = !o.out.empty() ? fs::path(o.out) : output_root() / (config_hash(config) + "-s" + std::to_string(config.seed));
  fs::create_directories(dir);

  DataSplits data = load_data(config);
  Trainer trainer = resumed ? Trainer(std::move(*resumed), std::move(data)) : Trainer(config, std::move(data));
  write_text(dir / "config.txt", canonical_text(config));

  const fs::path metrics_path = dir / "metrics.csv";
  std::vector<std::string> lines;
  if (!o.resume.empty()) lines = metrics_prefix(metrics_path, trainer.state().epoch);
  if (lines.empty()) lines.push_back(metrics_header());
  {
    std::ofstream out(metrics_path, std::ios::trunc);
    for (const auto& l : lines) out << l << '\n';
  }
  std::ofstream metrics(metrics_path, std::ios::app);

  int status = kExitOk;
  std::string message;
  try {
    while (!trainer.finished()) {
      const EpochMetrics m = trainer.run_epoch();
      metrics << metrics_line(m) << '\n' << std::flush;
      std::cerr << "epoch " << m.epoch << "/" << config.epochs << " loss " << m.loss << " std " << m.feature_std
                << " cos " << m.pairwise_cosine << "\n";
      if (o.checkpoint_every && m.epoch % o.checkpoint_every == 0 && !trainer.finished()) {
        char name[64];
        std::snprintf(name, sizeof name, "checkpoint-epoch%04zu.bin", m.epoch);
        save_checkpoint(dir / name, trainer.state());
      }
    }
  } catch (const DivergenceError& e) {
    status = kExitDivergence;
    message = e.what();
  }
  save_checkpoint(dir / "checkpoint.bin", trainer.state());

  nlohmann::json summary;
  summary["config_hash"] = config_hash(config);
  summary["seed"] = config.seed;
  summary["epochs_completed"] = trainer.state().epoch;
  summary["steps"] = trainer.state().step;
  summary["uses_batch_statistics"] = trainer.state().online.uses_batch_statistics();
  if (status == kExitOk) {
    const CollapseReport c = trainer.collapse_report();
    const ProbeResult p = trainer.probe();
    summary["status"] = "ok";
    summary["collapse"] = {{"verdict", c.collapsed ? "collapsed" : "healthy"},
                           {"feature_std", c.feature_std},
                           {"relative_std", c.relative_std},
                           {"effective_rank", c.effective_rank},
                           {"pairwise_cosine", c.pairwise_cosine}};
    summary["probe"] = {{"train_accuracy", p.train_accuracy},
                        {"test_accuracy", p.test_accuracy},
                        {"chance", p.chance},
                        {"chance_std_err", p.chance_std_err}};
  } else {
    summary["status"] = "diverged";
    summary["message"] = message;
    std::cerr << "divergence: " << message << "\n";
  }
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  std::cout << dir.string() << "\n";
  return status;
}

struct GridOptions {
  std::string spec;
  std::vector<std::string> overrides;
  std::vector<std::uint64_t> seeds;
  std::string out;
  std::size_t threads = 1;
  bool deterministic = false;
};

int cmd_grid(const GridOptions& o) {
  std::string text;
  if (o.spec == "table1" || o.spec == "table2") {
    text = "include = " + o.spec + "\n";
  } else {
    std::ifstream in(o.spec);
    if (!in) throw ConfigError("cannot read grid file '" + o.spec + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  for (const auto& s : o.overrides) text += "set = " + s + "\n";
  if (!o.seeds.empty()) {
    text += "seeds = ";
    for (std::size_t i = 0; i < o.seeds.size(); ++i) text += (i ? "," : "") + std::to_string(o.seeds[i]);
    text += "\n";
  }
  const AblationGrid grid = parse_grid(text);  // throws before anything is written
  check_unique(grid);

  const fs::path dir = !o.out.empty() ? fs::path(o.out) : output_root() / ("grid-" + fs::path(o.spec).stem().string());
  fs::create_directories(dir);
  write_text(dir / "grid_spec.txt", text);
  std::ofstream wide(dir / "grid.csv", std::ios::trunc);
  std::ofstream tall(dir / "grid_long.csv", std::ios::trunc);
  wide << grid_csv_header() << '\n';
  tall << grid_long_csv_header() << '\n';
  const std::size_t threads = o.deterministic ? 1 : std::max<std::size_t>(1, o.threads);
  // With several workers rows arrive in completion order; they are rewritten
  // in grid order at the end.
  const auto rows = run_grid(grid, threads, [&](const GridRow& r) {
    wide << grid_csv_line(r) << '\n' << std::flush;
    std::cerr << "cell " << r.label << " seed " << r.config.seed << ": " << r.status << "\n";
  });
  wide.close();
  tall.close();
  std::string sorted = grid_csv_header() + "\n", long_text = grid_long_csv_header() + "\n";
  bool any_diverged = false;
  for (const auto& r : rows) {
    sorted += grid_csv_line(r) + "\n";
    for (const auto& l : grid_long_csv_lines(r)) long_text += l + "\n";
    any_diverged = any_diverged || r.status == "diverged";
  }
  write_text(dir / "grid.csv", sorted);
  write_text(dir / "grid_long.csv", long_text);
  std::cout << (dir / "grid.csv").string() << "\n";
  (void)any_diverged;  // divergence is row content for grids
  return kExitOk;
}

int cmd_verify(const std::string& fault, std::size_t cases) {
  VerifyOptions opt;
  opt.grad_cases = cases;
  if (fault == "none") {
    opt.fault = InjectedFault::none;
  } else if (fault == "norm-backward") {
    opt.fault = InjectedFault::norm_backward;
  } else if (fault == "conv-backward") {
    opt.fault = InjectedFault::conv_backward;
  } else {
    throw ConfigError("unknown fault '" + fault + "' (none|norm-backward|conv-backward)");
  }
  const VerifyReport report = run_verify(opt);
  std::cout << report.text();
  std::cout << (report.passed() ? "verify: all properties hold\n" : "verify: FAILED\n");
  return report.passed() ? kExitOk : kExitVerify;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Normalization ablations for self-supervised learning (BYOL / SimCLR)"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "warning | info")->check(CLI::IsMember({"warning", "info"}));

  RunOptions run;
  auto* run_cmd = app.add_subcommand("run", "train and evaluate one configuration");
  run_cmd->add_option("--preset", run.preset_name, "vanilla-bn | no-bn | modified-init | gn-ws");
  run_cmd->add_option("--config", run.config_path, "key = value config file");
  run_cmd->add_option("--set", run.overrides, "override key=value (repeatable)");
  run_cmd->add_option("--seed", run.seed, "random seed");
  run_cmd->add_option("--epochs", run.epochs, "training epochs");
  run_cmd->add_option("--out", run.out, std::string("artifact directory (default $") + kOutputRootEnv + "/<hash>-s<seed>)");
  run_cmd->add_option("--threads", run.threads, "worker threads (kernels are single-threaded)");
  run_cmd->add_flag("--deterministic", run.deterministic, "single-threaded, reproducible execution");
  run_cmd->add_option("--resume", run.resume, "continue from a checkpoint file");
  run_cmd->add_option("--checkpoint-every", run.checkpoint_every, "also checkpoint every N epochs");

  GridOptions grid;
  auto* grid_cmd = app.add_subcommand("grid", "run an ablation grid");
  grid_cmd->add_option("spec", grid.spec, "table1 | table2 | grid spec file")->required();
  grid_cmd->add_option("--set", grid.overrides, "override applied to every cell (repeatable)");
  grid_cmd->add_option("--seeds", grid.seeds, "seeds per cell")->delimiter(',');
  grid_cmd->add_option("--out", grid.out, "output directory");
  grid_cmd->add_option("--threads", grid.threads, "parallel cells");
  grid_cmd->add_flag("--deterministic", grid.deterministic, "run cells one at a time");

  std::string fault = "none";
  std::size_t cases = 10;
  auto* verify_cmd = app.add_subcommand("verify", "run the invariant suite");
  verify_cmd->add_option("--inject-fault", fault, "none | norm-backward | conv-backward");
  verify_cmd->add_option("--cases", cases, "random cases per gradient check");

  auto* config_cmd = app.add_subcommand("config", "print the canonical form and hash of a configuration");
  config_cmd->add_option("--preset", run.preset_name);
  config_cmd->add_option("--config", run.config_path);
  config_cmd->add_option("--set", run.overrides);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }
  if (log_level == "warning") set_log_level(LogLevel::warning);

  try {
    if (*run_cmd) return cmd_run(run);
    if (*grid_cmd) return cmd_grid(grid);
    if (*verify_cmd) return cmd_verify(fault, cases);
    if (*config_cmd) {
      const ExperimentConfig c = resolve_config(run);
      std::cout << canonical_text(c) << "hash = " << config_hash(c) << "\n";
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}
