// Acceptance run: one PASS/FAIL line per criterion, exit status = failures.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "normssl/checkpoint.hpp"
#include "normssl/verify.hpp"

using namespace normssl;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  bool pass = true;
  std::ostringstream detail;
};

void require(Verdict& v, bool ok, const std::string& what) {
  if (!ok) {
    v.pass = false;
    v.detail << " [failed: " << what << "]";
  }
}

std::string sci(double x) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << x;
  return os.str();
}

// Toy-scale training setup shared by the collapse and contrast cells. The
// synthetic colours are uniform over RGB, so hue is jittered over the whole
// circle and half the views are grayscale; otherwise colour alone matches views.
ExperimentConfig cell_config(const std::string& name) {
  ExperimentConfig c = preset(name);
  c.image_size = 16;
  c.train_size = 512;
  c.test_size = 1024;
  c.batch_size = 64;
  c.epochs = 50;
  c.trust_coeff = 0.02;
  c.hue = 0.5;
  c.grayscale_prob = 0.5;
  return c;
}

struct CellOutcome {
  std::string label;
  TrainResult result;
  double seconds = 0.0;
  std::string error;
};

CellOutcome run_cell_timed(const std::string& label, const ExperimentConfig& c) {
  CellOutcome out;
  out.label = label;
  const auto t0 = Clock::now();
  try {
    out.result = train(c, load_data(c));
  } catch (const std::exception& e) {
    out.error = e.what();
  }
  out.seconds = seconds_since(t0);
  const ProbeResult& p = out.result.probe;
  std::cerr << "  cell " << label << " seed " << c.seed << ": "
            << (out.error.empty() ? "" : "error " + out.error + " ") << "probe " << p.test_accuracy
            << " (chance " << p.chance << ", se " << p.chance_std_err << ") "
            << (out.result.collapse.collapsed ? "collapsed" : "healthy") << " rel_std "
            << out.result.collapse.relative_std << " cos " << out.result.collapse.pairwise_cosine << " "
            << static_cast<long>(out.seconds + 0.5) << "s\n";
  return out;
}

void fold(Verdict& v, const std::vector<PropertyResult>& results) {
  for (const auto& r : results) {
    v.detail << " " << r.name << "=" << sci(r.measured);
    require(v, r.passed, r.name + (r.note.empty() ? "" : " (" + r.note + ")"));
  }
}

Verdict gradient_criterion() {
  Verdict v;
  const auto t0 = Clock::now();
  const auto results = gradient_suite(100, 101);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  for (const auto& r : results) {
    worst = std::max(worst, r.measured);
    require(v, r.passed, r.name);
  }
  v.detail << results.size() << " checks x 100 cases, worst rel err " << sci(worst) << ", " << std::fixed
           << std::setprecision(1) << secs << "s";
  for (const std::string need : {"conv2d input", "conv2d weight", "linear input", "linear weight", "batch_norm (train)",
                                 "layer_norm", "group_norm", "instance_norm", "ws conv2d weight", "ws linear weight",
                                 "cosine_similarity", "byol_loss", "infonce_loss"}) {
    const bool found = std::any_of(results.begin(), results.end(), [&](const auto& r) { return r.name == need; });
    require(v, found, "no check for " + need);
  }
  require(v, secs < 300.0, "runtime < 5 min");
  return v;
}

Verdict equivalence_criterion() {
  Verdict v;
  fold(v, equivalence_suite(1000, 202));
  fold(v, batch_independence_suite(203));
  return v;
}

Verdict ws_criterion() {
  Verdict v;
  fold(v, ws_suite(303, 1e-4));
  return v;
}

Verdict init_criterion() {
  Verdict v;
  const auto t0 = Clock::now();
  // Small test network plus one acceptance-sized network.
  fold(v, init_protocol_suite(404));
  ExperimentConfig c = cell_config("modified-init");
  std::mt19937_64 rng(405);
  const InitEquivalence eq =
      init_equivalence(c, detail::random_tensor({c.batch_size, c.image_size, c.image_size, 3}, rng));
  v.detail << " full-size first=" << sci(eq.first_site) << " end-to-end=" << sci(eq.end_to_end);
  require(v, eq.first_site <= 1e-10, "full-size first site");
  require(v, eq.end_to_end <= 1e-4, "full-size end to end");
  const double secs = seconds_since(t0);
  v.detail << ", " << std::fixed << std::setprecision(1) << secs << "s";
  require(v, secs < 60.0, "runtime < 1 min");
  return v;
}

Verdict collapse_criterion() {
  Verdict v;
  {
    // Context only: the same probe on an untrained encoder.
    ExperimentConfig c = cell_config("vanilla-bn");
    const DataSplits data = load_data(c);
    NetworkAssembly net = build(c);
    refresh_running_stats(net, data.train);
    v.detail << "untrained encoder probe " << probe_encoder(net, data, probe_config(c)).test_accuracy << "; ";
  }
  const CellOutcome none = run_cell_timed("no-bn", cell_config("no-bn"));
  {
    const ProbeResult& p = none.result.probe;
    const bool near_chance = std::abs(p.test_accuracy - p.chance) <= 3.0 * p.chance_std_err;
    v.detail << "(a) no-bn probe " << p.test_accuracy << " "
             << (none.result.collapse.collapsed ? "collapsed" : "healthy") << ";";
    require(v, none.error.empty(), "no-bn: " + none.error);
    require(v, none.result.collapse.collapsed || near_chance, "no-bn neither collapsed nor near chance");
    require(v, none.seconds <= 1800.0, "no-bn cell over 30 min");
  }
  v.detail << " (b)";
  for (const std::string name : {"vanilla-bn", "gn-ws", "modified-init"}) {
    const CellOutcome cell = run_cell_timed(name, cell_config(name));
    const ProbeResult& p = cell.result.probe;
    v.detail << " " << name << " probe " << p.test_accuracy << " "
             << (cell.result.collapse.collapsed ? "collapsed" : "healthy") << ";";
    require(v, cell.error.empty(), name + ": " + cell.error);
    require(v, !cell.result.collapse.collapsed, name + " collapsed");
    require(v, p.test_accuracy >= 1.5 * p.chance, name + " probe below 1.5x chance");
    require(v, cell.seconds <= 1800.0, name + " cell over 30 min");
    if (name != "vanilla-bn") {
      require(v, !cell.result.uses_batch_statistics, name + " uses batch statistics");
    }
  }
  // (c) static inspection of the assemblies the trainer actually optimizes.
  for (const std::string name : {"gn-ws", "modified-init"}) {
    ExperimentConfig c = cell_config(name);
    Trainer t(c, load_data(c));
    const bool uses = t.state().online.uses_batch_statistics() ||
                      (t.state().target && t.state().target->uses_batch_statistics());
    require(v, !uses, name + " online/target assembly has batch-statistics sites");
  }
  v.detail << " (c) gn-ws, modified-init: no batch statistics";
  return v;
}

Verdict contrast_criterion() {
  Verdict v;
  double simclr_sum = 0.0, byol_sum = 0.0, chance = 0.0;
  std::vector<double> simclr_acc, byol_acc;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    ExperimentConfig s = cell_config("vanilla-bn");
    s.objective = Objective::simclr;
    s.encoder_norm = s.projector_norm = NormKind::layer;
    s.predictor_norm = NormKind::none;
    s.seed = seed;
    ExperimentConfig b = cell_config("vanilla-bn");
    b.encoder_norm = b.projector_norm = b.predictor_norm = NormKind::layer;
    b.seed = seed;
    const CellOutcome cs = run_cell_timed("simclr LN/LN", s);
    const CellOutcome cb = run_cell_timed("byol LN/LN/LN", b);
    require(v, cs.error.empty(), "simclr: " + cs.error);
    require(v, cb.error.empty(), "byol: " + cb.error);
    simclr_acc.push_back(cs.result.probe.test_accuracy);
    byol_acc.push_back(cb.result.probe.test_accuracy);
    simclr_sum += simclr_acc.back();
    byol_sum += byol_acc.back();
    chance = cs.result.probe.chance;
  }
  const double simclr_mean = simclr_sum / 3.0, byol_mean = byol_sum / 3.0;
  v.detail << "simclr LN probe";
  for (double a : simclr_acc) v.detail << " " << a;
  v.detail << " (mean " << simclr_mean << "); byol LN probe";
  for (double a : byol_acc) v.detail << " " << a;
  v.detail << " (mean " << byol_mean << "); threshold " << 1.5 * chance;
  require(v, simclr_mean >= 1.5 * chance, "simclr LN mean probe below 1.5x chance");
  if (byol_mean >= 1.5 * chance) {
    v.detail << "; toy-scale direction disagrees with the expected one: BYOL with LN everywhere learned instead of staying below the bar";
  }
  require(v, byol_mean < 1.5 * chance, "byol LN mean probe reached 1.5x chance");
  return v;
}

// Brute-force InfoNCE over the candidate set of every anchor, plus the two
// wrong candidate sets, which must be distinguishable from the implementation.
Verdict infonce_criterion() {
  Verdict v;
  const PropertyResult r = infonce_property(707);
  v.detail << "oracle max |diff| " << sci(r.measured) << " over B=1..4";
  require(v, r.passed, "loop oracle");
  enum class Set { partner_not_self, with_self, without_partner };
  auto oracle = [](const Tensor& z, const Tensor& zp, double tau, Set set) {
    const std::size_t b = z.dim(0), d = z.dim(1);
    auto row = [&](std::size_t k) {
      const Tensor& src = k < b ? z : zp;
      const std::size_t i = k % b;
      return std::vector<long double>(src.data().begin() + static_cast<std::ptrdiff_t>(i * d),
                                      src.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
    };
    auto cos = [](const std::vector<long double>& a, const std::vector<long double>& c) {
      long double ac = 0, aa = 0, cc = 0;
      for (std::size_t k = 0; k < a.size(); ++k) ac += a[k] * c[k], aa += a[k] * a[k], cc += c[k] * c[k];
      return ac / std::sqrt(aa * cc);
    };
    long double total = 0;
    for (std::size_t a = 0; a < 2 * b; ++a) {
      const std::size_t partner = (a + b) % (2 * b);
      long double denom = 0;
      for (std::size_t k = 0; k < 2 * b; ++k) {
        if (k == a && set != Set::with_self) continue;
        if (k == partner && set == Set::without_partner) continue;
        denom += std::exp(cos(row(a), row(k)) / tau);
      }
      total += -cos(row(a), row(partner)) / tau + std::log(denom);
    }
    return static_cast<double>(total / static_cast<long double>(2 * b));
  };
  std::mt19937_64 rng(708);
  double exact = 0.0, self_gap = INFINITY, partner_gap = INFINITY;
  for (std::size_t b = 2; b <= 4; ++b) {
    for (int t = 0; t < 20; ++t) {
      const Tensor z = detail::random_tensor({b, 5}, rng), zp = detail::random_tensor({b, 5}, rng);
      const double got = infonce_loss(z, zp, 0.2).loss.item();
      exact = std::max(exact, std::abs(got - oracle(z, zp, 0.2, Set::partner_not_self)));
      self_gap = std::min(self_gap, std::abs(got - oracle(z, zp, 0.2, Set::with_self)));
      partner_gap = std::min(partner_gap, std::abs(got - oracle(z, zp, 0.2, Set::without_partner)));
    }
  }
  v.detail << "; candidates {z', others} max |diff| " << sci(exact) << ", min gap to sets with z " << sci(self_gap)
           << " / without z' " << sci(partner_gap);
  require(v, exact <= 1e-8, "membership oracle");
  require(v, self_gap > 1e-6 && partner_gap > 1e-6, "membership not distinguishable");
  return v;
}

Verdict ema_criterion() {
  Verdict v;
  fold(v, ema_suite(808));
  // Trainer-level replay: the target after 10 optimizer steps equals the
  // recurrence applied to the recorded online weights.
  ExperimentConfig c = small_test_config();
  c.epochs = 5;
  Trainer t(c, load_data(c));
  const double rate = ema_rate(c);
  std::vector<std::vector<double>> xi;
  for (std::size_t i = 0; i < t.state().target->params.size(); ++i) xi.push_back(t.state().target->params[i].values());
  std::mt19937_64 rng(809);
  for (int step = 0; step < 10; ++step) {
    std::vector<std::size_t> idx(c.batch_size);
    for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = (step * 3 + k) % c.train_size;
    t.train_step(make_views(t.data().train, idx, augmentation_policy(c), rng), 0.05);
    for (std::size_t i = 0; i < xi.size(); ++i) {
      const auto theta = t.state().online.params[i].data();
      for (std::size_t j = 0; j < xi[i].size(); ++j) xi[i][j] = (1.0 - rate) * xi[i][j] + rate * theta[j];
    }
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < xi.size(); ++i) worst = std::max(worst, max_abs_diff(xi[i], t.state().target->params[i].data()));
  v.detail << " trainer 10-step replay=" << sci(worst);
  require(v, worst == 0.0, "trainer replay");
  return v;
}

int run_process(const std::string& cmd) {
  const int raw = std::system((cmd + " >/dev/null 2>&1").c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Verdict determinism_criterion() {
  Verdict v;
  const fs::path root = fs::temp_directory_path() / "normssl_acceptance_determinism";
  fs::remove_all(root);
  const std::string tiny =
      " --set image_size=8 --set stem_width=4 --set stage_widths=4,8 --set blocks_per_stage=1"
      " --set proj_hidden=16 --set proj_out=8 --set gn_groups=2 --set batch_size=8"
      " --set train_size=32 --set test_size=16 --set probe_iterations=20";
#ifdef NORMSSL_CLI_PATH
  const std::string cli = NORMSSL_CLI_PATH;
  for (const std::string name : {"vanilla-bn", "gn-ws", "modified-init"}) {
    const fs::path a = root / (name + "-a"), b = root / (name + "-b");
    const std::string base = cli + " run --preset " + name + " --epochs 3 --seed 5 --deterministic" + tiny;
    require(v, run_process(base + " --out " + a.string()) == 0, name + " run a");
    require(v, run_process(base + " --out " + b.string()) == 0, name + " run b");
    const std::string ma = slurp(a / "metrics.csv");
    require(v, !ma.empty() && ma == slurp(b / "metrics.csv"), name + " metrics.csv differs");
  }
  v.detail << "metrics.csv byte-identical for 3 presets;";
#else
  v.detail << "(CLI not built, CSV check skipped);";
  require(v, false, "CLI unavailable");
#endif
  // Resume: stop after epoch 2, restore from the serialized bytes, finish.
  for (const std::string name : {"vanilla-bn", "modified-init"}) {
    ExperimentConfig c = small_test_config();
    const ExperimentConfig p = preset(name);
    c.init = p.init;
    c.warmup_epochs = p.warmup_epochs;
    c.epochs = 5;
    c.probe_iterations = 20;
    const DataSplits data = load_data(c);
    Trainer straight(c, data);
    std::vector<double> expected;
    while (!straight.finished()) expected.push_back(straight.run_epoch().loss);
    Trainer first(c, data);
    first.run_epoch();
    first.run_epoch();
    std::stringstream bytes;
    write_checkpoint(bytes, snapshot(first.state()));
    Trainer resumed(restore(read_checkpoint(bytes)), data);
    bool same = true;
    for (std::size_t e = 2; e < expected.size(); ++e) same = same && resumed.run_epoch().loss == expected[e];
    same = same && parameter_hash(resumed.state().online.params) == parameter_hash(straight.state().online.params);
    same = same && parameter_hash(resumed.state().target->params) == parameter_hash(straight.state().target->params);
    require(v, same, name + " resume diverged from the uninterrupted run");
  }
  v.detail << " resume trajectory-identical (vanilla-bn, modified-init)";
  fs::remove_all(root);
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  set_log_level(LogLevel::warning);
  // Arguments: criterion numbers to run (default all); --known-failure N marks a
  // criterion whose failure is documented, so it is still printed as FAIL but
  // does not count toward the exit status. --report FILE copies the verdict lines.
  std::set<int> only, known;
  std::ofstream report;
  for (int i = 1; i < argc; ++i) {
    if (std::string(argv[i]) == "--known-failure" && i + 1 < argc) {
      known.insert(std::atoi(argv[++i]));
    } else if (std::string(argv[i]) == "--report" && i + 1 < argc) {
      report.open(argv[++i], std::ios::trunc);
    } else {
      only.insert(std::atoi(argv[i]));
    }
  }
  const std::vector<std::pair<std::string, Verdict (*)()>> criteria{
      {"gradient suite", gradient_criterion},
      {"normalization equivalences", equivalence_criterion},
      {"weight standardization invariants", ws_criterion},
      {"init-protocol equivalence", init_criterion},
      {"collapse dichotomy", collapse_criterion},
      {"simclr contrast", contrast_criterion},
      {"infonce oracle", infonce_criterion},
      {"ema replay", ema_criterion},
      {"determinism", determinism_criterion},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.contains(id)) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail << "exception: " << e.what();
    }
    const bool excused = !v.pass && known.contains(id);
    failures += v.pass || excused ? 0 : 1;
    std::ostringstream line;
    line << (v.pass ? "PASS" : "FAIL") << " " << id << " " << criteria[i].first << ": " << v.detail.str()
         << (excused ? " [known failure, not counted]" : "");
    std::cout << line.str() << std::endl;
    if (report.is_open()) report << line.str() << std::endl;
  }
  return failures;
}
