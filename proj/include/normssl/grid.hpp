#pragma once
//
// Ablation grids: the per-component normalization table, the summary
// variants, grid spec files, and a parallel runner with one result writer.
//
// Grid spec file (flat, `#` comments):
//   include = table1 | table2     add a built-in cell set
//   set = key=value               override applied to every cell (repeatable)
//   seeds = 1,2,3                 seeds each cell is run with (default: config seed)
//   cell = label: key=value ...   one extra cell, keys applied on top of `set`
//

#include <array>
#include <atomic>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "normssl/training.hpp"

namespace normssl {

struct GridCell {
  std::string label;
  ExperimentConfig config;  // seed included
};

struct AblationGrid {
  std::vector<GridCell> cells;
};

namespace detail {

inline std::string norm_label(NormKind k) {
  switch (k) {
    case NormKind::batch: return "BN";
    case NormKind::layer: return "LN";
    case NormKind::group: return "GN";
    case NormKind::instance: return "IN";
    case NormKind::none: return "-";
  }
  return "?";
}

}  // namespace detail

// The per-component table: 15 BYOL columns (encoder, projector, predictor)
// and 7 SimCLR columns (encoder, projector).
inline AblationGrid table1_grid(const ExperimentConfig& base = {}) {
  using K = NormKind;
  constexpr K B = K::batch, L = K::layer, N = K::none;
  const std::vector<std::array<K, 3>> byol{
      {B, B, B}, {B, B, N}, {B, N, B}, {B, N, N}, {L, L, L}, {L, L, N}, {L, N, L}, {L, N, N},
      {N, B, B}, {N, B, N}, {N, L, L}, {N, L, N}, {N, N, B}, {N, N, L}, {N, N, N}};
  const std::vector<std::array<K, 2>> simclr{{B, B}, {B, N}, {L, L}, {L, N}, {N, B}, {N, L}, {N, N}};
  AblationGrid g;
  for (const auto& [e, p, q] : byol) {
    ExperimentConfig c = base;
    c.objective = Objective::byol;
    c.encoder_norm = e;
    c.projector_norm = p;
    c.predictor_norm = q;
    c.ws = false;
    c.init = InitMode::standard;
    g.cells.push_back({"byol " + detail::norm_label(e) + "/" + detail::norm_label(p) + "/" +
                           detail::norm_label(q),
                       c});
  }
  for (const auto& [e, p] : simclr) {
    ExperimentConfig c = base;
    c.objective = Objective::simclr;
    c.encoder_norm = e;
    c.projector_norm = p;
    c.predictor_norm = K::none;  // no predictor in SimCLR
    c.ws = false;
    c.init = InitMode::standard;
    g.cells.push_back({"simclr " + detail::norm_label(e) + "/" + detail::norm_label(p), c});
  }
  return g;
}

// The four summary variants, each from its preset with `overrides` applied.
inline AblationGrid table2_grid(const std::vector<std::string>& overrides = {}) {
  AblationGrid g;
  for (const std::string& name : preset_names()) {
    ExperimentConfig c = preset(name);
    for (const auto& o : overrides) apply_override(c, o);
    g.cells.push_back({name, c});
  }
  return g;
}

// Throws ConfigError when two cells describe the same run.
inline void check_unique(const AblationGrid& g) {
  std::set<std::string> seen;
  for (const auto& cell : g.cells) {
    if (!seen.insert(config_hash(cell.config)).second) {
      throw ConfigError("grid cell '" + cell.label + "' duplicates another cell");
    }
  }
}

inline AblationGrid parse_grid(std::string_view text) {
  std::vector<std::string> overrides;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> includes;
  std::vector<std::pair<std::string, std::vector<std::string>>> extra;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("grid line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string value = detail::trim(t.substr(eq + 1));
    if (key == "include") {
      if (value != "table1" && value != "table2") throw ConfigError("grid: unknown built-in '" + value + "'");
      includes.push_back(value);
    } else if (key == "set") {
      overrides.push_back(value);
    } else if (key == "seeds") {
      std::stringstream ss(value);
      std::string item;
      while (std::getline(ss, item, ',')) seeds.push_back(detail::parse_uint("seeds", detail::trim(item)));
    } else if (key == "cell") {
      const auto colon = value.find(':');
      if (colon == std::string::npos) throw ConfigError("grid line " + std::to_string(lineno) + ": cell needs 'label: key=value ...'");
      std::vector<std::string> assignments;
      std::istringstream words(value.substr(colon + 1));
      std::string w;
      while (words >> w) assignments.push_back(w);
      extra.emplace_back(detail::trim(value.substr(0, colon)), std::move(assignments));
    } else {
      throw ConfigError("grid line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
  }
  ExperimentConfig base;
  for (const auto& o : overrides) apply_override(base, o);
  AblationGrid cells;
  // Runs shared by both tables (BYOL with BN everywhere, and with no norm) are kept once.
  std::map<std::string, std::size_t> by_hash;
  for (const auto& inc : includes) {
    const AblationGrid g = inc == "table1" ? table1_grid(base) : table2_grid(overrides);
    for (const auto& cell : g.cells) {
      const auto [it, fresh] = by_hash.emplace(config_hash(cell.config), cells.cells.size());
      if (fresh) {
        cells.cells.push_back(cell);
      } else if (cells.cells[it->second].label != cell.label) {
        cells.cells[it->second].label += " = " + cell.label;
      }
    }
  }
  for (const auto& [label, assignments] : extra) {
    ExperimentConfig c = base;
    for (const auto& a : assignments) apply_override(c, a);
    cells.cells.push_back({label, c});
  }
  if (cells.cells.empty()) throw ConfigError("grid spec defines no cells");
  if (seeds.empty()) return cells;
  AblationGrid out;
  for (const auto& cell : cells.cells) {
    for (std::uint64_t s : seeds) {
      GridCell c = cell;
      c.config.seed = s;
      out.cells.push_back(std::move(c));
    }
  }
  return out;
}

inline AblationGrid load_grid(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read grid file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_grid(ss.str());
}

struct GridRow {
  std::string label;
  std::string config_hash;
  ExperimentConfig config;
  std::string status = "ok";  // ok | diverged | error
  std::string message;
  bool uses_batch_statistics = false;   // static inspection
  bool batch_dependent = false;         // swap-one-sample test on the initial assembly
  std::optional<CollapseReport> collapse;
  std::optional<ProbeResult> probe;
  std::vector<EpochMetrics> metrics;
};

inline constexpr double kBatchDependenceTolerance = 1e-9;

// Trains and evaluates one cell. Failures become row content.
inline GridRow run_cell(const GridCell& cell) {
  GridRow row;
  row.label = cell.label;
  row.config = cell.config;
  row.config_hash = config_hash(cell.config);
  try {
    const DataSplits data = load_data(cell.config);
    Trainer trainer(cell.config, data);
    NetworkAssembly& net = trainer.state().online;
    row.uses_batch_statistics = net.uses_batch_statistics();
    {
      const std::vector<std::size_t> idx{0, 1, 2, 3};
      const std::vector<std::size_t> other{4};
      row.batch_dependent = batch_dependence(net, make_batch(data.train, idx), make_batch(data.train, other)) >
                            kBatchDependenceTolerance;
    }
    TrainResult result = detail::run_training(trainer, {});
    row.metrics = std::move(result.metrics);
    row.collapse = result.collapse;
    row.probe = result.probe;
  } catch (const DivergenceError& e) {
    row.status = "diverged";
    row.message = e.what();
  } catch (const std::exception& e) {
    row.status = "error";
    row.message = e.what();
  }
  return row;
}

inline std::string grid_csv_header() {
  return "label,config_hash,seed,objective,encoder_norm,projector_norm,predictor_norm,ws,init,"
         "probe_acc,chance,chance_std_err,verdict,feature_std,relative_std,effective_rank,"
         "pairwise_cosine,uses_batch_stats,batch_dependent,status,message";
}

namespace detail {

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

}  // namespace detail

inline std::string grid_csv_line(const GridRow& r) {
  const ExperimentConfig& c = r.config;
  std::ostringstream os;
  os << detail::csv_escape(r.label) << ',' << r.config_hash << ',' << c.seed << ','
     << get_field(c, "objective") << ',' << get_field(c, "encoder_norm") << ','
     << get_field(c, "projector_norm") << ',' << get_field(c, "predictor_norm") << ','
     << (c.ws ? "true" : "false") << ',' << get_field(c, "init") << ',';
  if (r.probe) {
    os << detail::fmt(r.probe->test_accuracy) << ',' << detail::fmt(r.probe->chance) << ','
       << detail::fmt(r.probe->chance_std_err) << ',';
  } else {
    os << ",,,";
  }
  if (r.collapse) {
    os << (r.collapse->collapsed ? "collapsed" : "healthy") << ',' << detail::fmt(r.collapse->feature_std) << ','
       << detail::fmt(r.collapse->relative_std) << ',' << detail::fmt(r.collapse->effective_rank) << ','
       << detail::fmt(r.collapse->pairwise_cosine) << ',';
  } else {
    os << ",,,,,";
  }
  os << (r.uses_batch_statistics ? "yes" : "no") << ',' << (r.batch_dependent ? "yes" : "no") << ','
     << r.status << ',' << detail::csv_escape(r.message);
  return os.str();
}

// Long format: one row per (cell, epoch, metric).
inline std::string grid_long_csv_header() { return "label,config_hash,seed,epoch,metric,value"; }

inline std::vector<std::string> grid_long_csv_lines(const GridRow& r) {
  std::vector<std::string> out;
  const std::string prefix =
      detail::csv_escape(r.label) + "," + r.config_hash + "," + std::to_string(r.config.seed) + ",";
  for (const auto& m : r.metrics) {
    const std::string e = std::to_string(m.epoch) + ",";
    out.push_back(prefix + e + "loss," + detail::fmt(m.loss));
    out.push_back(prefix + e + "feature_std," + detail::fmt(m.feature_std));
    out.push_back(prefix + e + "pairwise_cosine," + detail::fmt(m.pairwise_cosine));
    if (m.probe_acc) out.push_back(prefix + e + "probe_acc," + detail::fmt(*m.probe_acc));
  }
  return out;
}

// Runs every cell on up to `threads` workers. `on_row` is called once per
// finished cell, serialized under one lock, so it can be the single writer.
inline std::vector<GridRow> run_grid(const AblationGrid& grid, std::size_t threads = 1,
                                     const std::function<void(const GridRow&)>& on_row = {}) {
  if (grid.cells.empty()) throw ConfigError("grid has no cells");
  check_unique(grid);
  std::vector<GridRow> rows(grid.cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex writer;
  auto worker = [&] {
    for (std::size_t i = next++; i < grid.cells.size(); i = next++) {
      rows[i] = run_cell(grid.cells[i]);
      if (on_row) {
        std::lock_guard lock(writer);
        on_row(rows[i]);
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(threads, grid.cells.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
  }
  return rows;
}

}  // namespace normssl
