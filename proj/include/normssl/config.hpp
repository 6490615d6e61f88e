#pragma once
//
// ExperimentConfig: the full declarative description of one run, its flat
// key = value text form, named presets, and the canonical hash.
//
// Text format: one `key = value` per line, `#` starts a comment. A line
// `preset = NAME` loads that preset first; later keys override it.
//

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "normssl/model.hpp"

namespace normssl {

class ConfigError : public Error {
 public:
  using Error::Error;
};

enum class Objective { byol, simclr };
enum class InitMode { standard, bn_capture_reinit };
enum class OptimizerKind { lars, sgd };
// conventional: xi <- decay * xi + (1 - decay) * theta
// literal:      xi <- (1 - rate) * xi + rate * theta, rate = target_decay
enum class EmaConvention { conventional, literal };

struct ExperimentConfig {
  Objective objective = Objective::byol;
  NormKind encoder_norm = NormKind::batch;
  NormKind projector_norm = NormKind::batch;
  NormKind predictor_norm = NormKind::batch;
  bool ws = false;
  InitMode init = InitMode::standard;

  OptimizerKind optimizer = OptimizerKind::lars;
  double lr = 0.2;
  double weight_decay = 1.5e-6;
  double momentum = 0.9;
  double trust_coeff = 1e-3;
  double temperature = 0.1;
  double target_decay = 0.996;
  EmaConvention ema = EmaConvention::conventional;
  // Warmup is stated against a reference schedule length and keeps its
  // fraction when `epochs` is shortened.
  double warmup_epochs = 10.0;
  double reference_epochs = 1000.0;
  std::size_t epochs = 1000;
  std::size_t batch_size = 64;

  std::size_t gn_groups = 16;
  double bn_eps = 1e-5;
  double bn_momentum = 0.9;
  double norm_eps = 1e-5;
  double ws_eps = 1e-4;
  double stat_floor = 1e-3;

  std::uint64_t seed = 1;
  std::uint64_t data_seed = 2020;
  std::string dataset = "synthetic";
  std::size_t train_size = 512;
  std::size_t test_size = 512;
  std::size_t image_size = 32;
  std::size_t num_classes = 10;

  std::size_t stem_width = 16;
  std::vector<std::size_t> stage_widths{16, 32, 64};
  std::size_t blocks_per_stage = 2;
  std::size_t proj_hidden = 128;
  std::size_t proj_out = 64;

  double crop_min_scale = 0.3;
  double flip_prob = 0.5;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.2;
  double hue = 0.1;
  double grayscale_prob = 0.2;

  std::size_t probe_iterations = 500;
  double probe_l2 = 1e-4;
  std::size_t metrics_sample = 256;
  double collapse_std = 1e-3;
  double collapse_cosine = 0.99;

  double warmup_fraction() const { return warmup_epochs / reference_epochs; }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline double parse_double(const std::string& key, std::string_view text) {
  double v = 0.0;
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size()) {
    throw ConfigError(key + ": expected a number, got '" + std::string(text) + "'");
  }
  return v;
}

inline std::uint64_t parse_uint(const std::string& key, std::string_view text) {
  std::uint64_t v = 0;
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + std::string(text) + "'");
  }
  return v;
}

inline bool parse_bool(const std::string& key, std::string_view text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError(key + ": expected true|false, got '" + std::string(text) + "'");
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

struct ConfigField {
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <class T>
ConfigField double_field(T ExperimentConfig::*member) {
  return {[member](const ExperimentConfig& c) { return format_double(c.*member); },
          [member](ExperimentConfig& c, const std::string& v) { c.*member = parse_double("value", v); }};
}

template <class T>
ConfigField uint_field(T ExperimentConfig::*member) {
  return {[member](const ExperimentConfig& c) { return std::to_string(c.*member); },
          [member](ExperimentConfig& c, const std::string& v) {
            c.*member = static_cast<T>(parse_uint("value", v));
          }};
}

template <class E>
ConfigField enum_field(E ExperimentConfig::*member, std::vector<std::pair<E, std::string>> names) {
  return {[member, names](const ExperimentConfig& c) {
            for (const auto& [e, n] : names)
              if (e == c.*member) return n;
            return std::string("?");
          },
          [member, names](ExperimentConfig& c, const std::string& v) {
            for (const auto& [e, n] : names) {
              if (n == v) {
                c.*member = e;
                return;
              }
            }
            std::string allowed;
            for (const auto& [e, n] : names) allowed += (allowed.empty() ? "" : "|") + n;
            throw ConfigError("expected one of " + allowed + ", got '" + v + "'");
          }};
}

inline ConfigField norm_field(NormKind ExperimentConfig::*member) {
  return {[member](const ExperimentConfig& c) { return std::string(to_string(c.*member)); },
          [member](ExperimentConfig& c, const std::string& v) {
            try {
              c.*member = parse_norm_kind(v);
            } catch (const Error& e) {
              throw ConfigError(e.what());
            }
          }};
}

// Every semantically meaningful field, keyed by its text name (sorted).
inline const std::map<std::string, ConfigField>& config_fields() {
  using C = ExperimentConfig;
  static const std::map<std::string, ConfigField> fields = [] {
    std::map<std::string, ConfigField> f;
    f["objective"] = enum_field(&C::objective, {{Objective::byol, "byol"}, {Objective::simclr, "simclr"}});
    f["encoder_norm"] = norm_field(&C::encoder_norm);
    f["projector_norm"] = norm_field(&C::projector_norm);
    f["predictor_norm"] = norm_field(&C::predictor_norm);
    f["ws"] = {[](const C& c) { return std::string(c.ws ? "true" : "false"); },
               [](C& c, const std::string& v) { c.ws = parse_bool("ws", v); }};
    f["init"] = enum_field(&C::init, {{InitMode::standard, "standard"},
                                      {InitMode::bn_capture_reinit, "bn-capture-reinit"}});
    f["optimizer"] = enum_field(&C::optimizer, {{OptimizerKind::lars, "lars"}, {OptimizerKind::sgd, "sgd"}});
    f["lr"] = double_field(&C::lr);
    f["weight_decay"] = double_field(&C::weight_decay);
    f["momentum"] = double_field(&C::momentum);
    f["trust_coeff"] = double_field(&C::trust_coeff);
    f["temperature"] = double_field(&C::temperature);
    f["target_decay"] = double_field(&C::target_decay);
    f["ema_convention"] = enum_field(&C::ema, {{EmaConvention::conventional, "conventional"},
                                               {EmaConvention::literal, "literal"}});
    f["warmup_epochs"] = double_field(&C::warmup_epochs);
    f["reference_epochs"] = double_field(&C::reference_epochs);
    f["epochs"] = uint_field(&C::epochs);
    f["batch_size"] = uint_field(&C::batch_size);
    f["gn_groups"] = uint_field(&C::gn_groups);
    f["bn_eps"] = double_field(&C::bn_eps);
    f["bn_momentum"] = double_field(&C::bn_momentum);
    f["norm_eps"] = double_field(&C::norm_eps);
    f["ws_eps"] = double_field(&C::ws_eps);
    f["stat_floor"] = double_field(&C::stat_floor);
    f["seed"] = uint_field(&C::seed);
    f["data_seed"] = uint_field(&C::data_seed);
    f["dataset"] = {[](const C& c) { return c.dataset; },
                    [](C& c, const std::string& v) { c.dataset = v; }};
    f["train_size"] = uint_field(&C::train_size);
    f["test_size"] = uint_field(&C::test_size);
    f["image_size"] = uint_field(&C::image_size);
    f["num_classes"] = uint_field(&C::num_classes);
    f["stem_width"] = uint_field(&C::stem_width);
    f["stage_widths"] = {[](const C& c) {
                           std::string s;
                           for (std::size_t w : c.stage_widths) s += (s.empty() ? "" : ",") + std::to_string(w);
                           return s;
                         },
                         [](C& c, const std::string& v) {
                           c.stage_widths.clear();
                           std::stringstream ss(v);
                           std::string item;
                           while (std::getline(ss, item, ','))
                             c.stage_widths.push_back(parse_uint("stage_widths", trim(item)));
                         }};
    f["blocks_per_stage"] = uint_field(&C::blocks_per_stage);
    f["proj_hidden"] = uint_field(&C::proj_hidden);
    f["proj_out"] = uint_field(&C::proj_out);
    f["crop_min_scale"] = double_field(&C::crop_min_scale);
    f["flip_prob"] = double_field(&C::flip_prob);
    f["brightness"] = double_field(&C::brightness);
    f["contrast"] = double_field(&C::contrast);
    f["saturation"] = double_field(&C::saturation);
    f["hue"] = double_field(&C::hue);
    f["grayscale_prob"] = double_field(&C::grayscale_prob);
    f["probe_iterations"] = uint_field(&C::probe_iterations);
    f["probe_l2"] = double_field(&C::probe_l2);
    f["metrics_sample"] = uint_field(&C::metrics_sample);
    f["collapse_std"] = double_field(&C::collapse_std);
    f["collapse_cosine"] = double_field(&C::collapse_cosine);
    return f;
  }();
  return fields;
}

}  // namespace detail

inline std::vector<std::string> preset_names() {
  return {"vanilla-bn", "no-bn", "modified-init", "gn-ws"};
}

// Presets mirror the four summary variants: BN baseline, BN removed, BN
// removed with the statistics-based re-initialization, and GN + WS.
inline ExperimentConfig preset(std::string_view name) {
  ExperimentConfig c;  // defaults are the BN baseline
  if (name == "vanilla-bn") return c;
  if (name == "no-bn") {
    c.encoder_norm = c.projector_norm = c.predictor_norm = NormKind::none;
    return c;
  }
  if (name == "modified-init") {
    c.init = InitMode::bn_capture_reinit;
    c.warmup_epochs = 50.0;
    return c;
  }
  if (name == "gn-ws") {
    c.encoder_norm = c.projector_norm = c.predictor_norm = NormKind::group;
    c.ws = true;
    c.lr = 0.24;
    c.weight_decay = 3e-8;
    c.target_decay = 0.999;
    c.gn_groups = 16;
    return c;
  }
  throw ConfigError("unknown preset '" + std::string(name) + "'");
}

inline void set_field(ExperimentConfig& config, const std::string& key, const std::string& value) {
  const auto& fields = detail::config_fields();
  const auto it = fields.find(key);
  if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'");
  try {
    it->second.set(config, value);
  } catch (const ConfigError& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

inline std::string get_field(const ExperimentConfig& config, const std::string& key) {
  const auto& fields = detail::config_fields();
  const auto it = fields.find(key);
  if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second.get(config);
}

// Applies one `key=value` override.
inline void apply_override(ExperimentConfig& config, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  }
  set_field(config, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

// Range checks that do not depend on the dataset.
inline void validate(const ExperimentConfig& c) {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (c.epochs == 0) fail("epochs must be positive");
  if (c.batch_size < 2) fail("batch_size must be at least 2");
  if (c.train_size < c.batch_size) fail("train_size must be at least batch_size");
  if (!(c.lr >= 0.0)) fail("lr must be non-negative");
  if (!(c.weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) fail("momentum must lie in [0, 1)");
  if (!(c.temperature > 0.0)) fail("temperature must be positive");
  if (!(c.target_decay >= 0.0 && c.target_decay <= 1.0)) fail("target_decay must lie in [0, 1]");
  if (!(c.reference_epochs > 0.0)) fail("reference_epochs must be positive");
  if (!(c.warmup_epochs >= 0.0 && c.warmup_epochs < c.reference_epochs))
    fail("warmup_epochs must lie in [0, reference_epochs)");
  if (c.gn_groups == 0) fail("gn_groups must be positive");
  if (!(c.bn_eps > 0.0 && c.norm_eps > 0.0 && c.ws_eps > 0.0)) fail("eps values must be positive");
  if (!(c.stat_floor > 0.0)) fail("stat_floor must be positive");
  if (c.image_size < 4) fail("image_size must be at least 4");
  if (c.num_classes < 2) fail("num_classes must be at least 2");
  if (c.stage_widths.empty()) fail("stage_widths must not be empty");
  if (!(c.crop_min_scale > 0.0 && c.crop_min_scale <= 1.0)) fail("crop_min_scale must lie in (0, 1]");
  if (!(c.flip_prob >= 0.0 && c.flip_prob <= 1.0)) fail("flip_prob must lie in [0, 1]");
  if (!(c.saturation >= 0.0 && c.saturation <= 1.0)) fail("saturation must lie in [0, 1]");
  if (!(c.hue >= 0.0 && c.hue <= 0.5)) fail("hue must lie in [0, 0.5]");
  if (!(c.grayscale_prob >= 0.0 && c.grayscale_prob <= 1.0)) fail("grayscale_prob must lie in [0, 1]");
  if (c.init == InitMode::bn_capture_reinit &&
      (c.encoder_norm != NormKind::batch || c.projector_norm != NormKind::batch ||
       (c.objective == Objective::byol && c.predictor_norm != NormKind::batch))) {
    fail("init bn-capture-reinit needs batch norm in every component");
  }
}

// Sorted `key = value` lines covering every field; the identity of a run.
inline std::string canonical_text(const ExperimentConfig& config) {
  std::string out;
  for (const auto& [key, field] : detail::config_fields()) out += key + " = " + field.get(config) + "\n";
  return out;
}

// 64-bit FNV-1a of the canonical text, as 16 hex digits.
inline std::string config_hash(const ExperimentConfig& config) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : canonical_text(config)) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig config;
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    }
    entries.emplace_back(detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
  }
  for (const auto& [key, value] : entries) {
    if (key == "preset") config = preset(value);
  }
  for (const auto& [key, value] : entries) {
    if (key != "preset") set_field(config, key, value);
  }
  return config;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline NormSpec norm_spec(const ExperimentConfig& c, NormKind kind) {
  NormSpec spec;
  spec.kind = kind;
  spec.groups = c.gn_groups;
  spec.eps = kind == NormKind::batch ? c.bn_eps : c.norm_eps;
  spec.momentum = c.bn_momentum;
  spec.affine = true;
  return spec;
}

inline ModelSpec model_spec(const ExperimentConfig& c, std::size_t in_channels = 3) {
  ModelSpec m;
  m.in_channels = in_channels;
  m.stem_width = c.stem_width;
  m.stage_widths = c.stage_widths;
  m.blocks_per_stage = c.blocks_per_stage;
  m.proj_hidden = c.proj_hidden;
  m.proj_out = c.proj_out;
  m.pred_hidden = c.proj_hidden;
  m.with_predictor = c.objective == Objective::byol;
  m.encoder_norm = norm_spec(c, c.encoder_norm);
  m.projector_norm = norm_spec(c, c.projector_norm);
  m.predictor_norm = norm_spec(c, c.predictor_norm);
  m.weight_standardization = c.ws;
  m.ws_eps = c.ws_eps;
  m.seed = c.seed;
  return m;
}

// The assembly described by a config, before any re-initialization.
inline NetworkAssembly build(const ExperimentConfig& config, std::size_t in_channels = 3) {
  try {
    return build_assembly(model_spec(config, in_channels));
  } catch (const ShapeError& e) {
    throw ConfigError(e.what());
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace normssl
