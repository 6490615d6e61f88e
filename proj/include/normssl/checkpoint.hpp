#pragma once
//
// Binary checkpoints of a training run.
//
// Layout (all integers little-endian):
//   magic "NSSLCKPT" | u32 version
//   str config canonical text | str config hash | str rng state
//   u64 step | u64 epoch | u32 flags (bit 0 target present, bit 1 captured stats present)
//   u32 record count, then per record:
//     u32 name length | name bytes | u32 rank | u64 extents[rank] | f64 payload[prod(extents)]
// where str is a u32 length followed by the bytes.
//
// Record names: online/<param>, target/<param>, slot/<param>,
// running_mean/<site>, running_var/<site>, running_populated/<site>,
// captured_mean/<site>, captured_std/<site>, captured_final/<site>.
//

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "normssl/training.hpp"

namespace normssl {

class CheckpointError : public Error {
 public:
  using Error::Error;
};

inline constexpr std::array<char, 8> kCheckpointMagic{'N', 'S', 'S', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  Shape shape;
  std::vector<double> values;
};

struct CheckpointData {
  std::uint32_t version = kCheckpointVersion;
  std::string config_text;
  std::string config_hash;
  std::string rng_state;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  bool has_target = false;
  bool has_captured = false;
  std::map<std::string, TensorRecord> records;

  const TensorRecord& at(const std::string& name) const {
    const auto it = records.find(name);
    if (it == records.end()) throw CheckpointError("checkpoint: missing record '" + name + "'");
    return it->second;
  }
};

namespace detail {

class LeWriter {
 public:
  explicit LeWriter(std::ostream& out) : out_(out) {}
  void u32(std::uint32_t v) { uint(v, 4); }
  void u64(std::uint64_t v) { uint(v, 8); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void raw(const char* p, std::size_t n) { out_.write(p, static_cast<std::streamsize>(n)); }

 private:
  void uint(std::uint64_t v, int bytes) {
    char buf[8];
    for (int i = 0; i < bytes; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out_.write(buf, bytes);
  }
  std::ostream& out_;
};

class LeReader {
 public:
  explicit LeReader(std::istream& in) : in_(in) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::size_t limit = std::size_t{1} << 26) {
    const std::uint32_t n = u32();
    if (n > limit) throw CheckpointError("checkpoint: implausible string length");
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  void raw(char* p, std::size_t n) {
    if (!in_.read(p, static_cast<std::streamsize>(n))) throw CheckpointError("checkpoint: truncated file");
  }

 private:
  std::uint64_t uint(int bytes) {
    unsigned char buf[8];
    raw(reinterpret_cast<char*>(buf), static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
  }
  std::istream& in_;
};

inline void put(CheckpointData& d, const std::string& name, Shape shape, std::vector<double> values) {
  d.records[name] = {std::move(shape), std::move(values)};
}

inline std::vector<double> to_vector(std::span<const double> s) { return {s.begin(), s.end()}; }

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const CheckpointData& d) {
  detail::LeWriter w(out);
  w.raw(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.u32(d.version);
  w.str(d.config_text);
  w.str(d.config_hash);
  w.str(d.rng_state);
  w.u64(d.step);
  w.u64(d.epoch);
  w.u32((d.has_target ? 1u : 0u) | (d.has_captured ? 2u : 0u));
  w.u32(static_cast<std::uint32_t>(d.records.size()));
  for (const auto& [name, rec] : d.records) {
    if (numel_of(rec.shape) != rec.values.size()) {
      throw CheckpointError("checkpoint: record '" + name + "' payload does not match its shape");
    }
    w.str(name);
    w.u32(static_cast<std::uint32_t>(rec.shape.size()));
    for (std::size_t e : rec.shape) w.u64(e);
    for (double v : rec.values) w.f64(v);
  }
  if (!out) throw CheckpointError("checkpoint: write failed");
}

inline CheckpointData read_checkpoint(std::istream& in) {
  detail::LeReader r(in);
  std::array<char, 8> magic{};
  r.raw(magic.data(), magic.size());
  if (magic != kCheckpointMagic) throw CheckpointError("checkpoint: bad magic (not a checkpoint file)");
  CheckpointData d;
  d.version = r.u32();
  if (d.version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported format version " + std::to_string(d.version) +
                          " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  d.config_text = r.str();
  d.config_hash = r.str();
  d.rng_state = r.str();
  d.step = r.u64();
  d.epoch = r.u64();
  const std::uint32_t flags = r.u32();
  d.has_target = flags & 1u;
  d.has_captured = flags & 2u;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(4096);
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw CheckpointError("checkpoint: implausible rank for '" + name + "'");
    TensorRecord rec;
    for (std::uint32_t k = 0; k < rank; ++k) rec.shape.push_back(r.u64());
    const std::size_t n = numel_of(rec.shape);
    if (n > (std::size_t{1} << 32)) throw CheckpointError("checkpoint: implausible size for '" + name + "'");
    rec.values.resize(n);
    for (double& v : rec.values) v = r.f64();
    d.records.emplace(std::move(name), std::move(rec));
  }
  return d;
}

// Everything needed to continue a run.
inline CheckpointData snapshot(const TrainerState& s) {
  CheckpointData d;
  d.config_text = canonical_text(s.config);
  d.config_hash = config_hash(s.config);
  std::ostringstream rng;
  rng << s.rng;
  d.rng_state = rng.str();
  d.step = s.step;
  d.epoch = s.epoch;
  d.has_target = s.target.has_value();
  d.has_captured = s.captured.has_value();
  const ParameterStore& p = s.online.params;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const std::string& name = p.info(i).name;
    detail::put(d, "online/" + name, p[i].shape(), detail::to_vector(p[i].data()));
    if (s.target) {
      const Tensor& t = s.target->params[i];
      detail::put(d, "target/" + name, t.shape(), detail::to_vector(t.data()));
    }
    if (i < s.slots.momentum.size()) detail::put(d, "slot/" + name, p[i].shape(), s.slots.momentum[i]);
  }
  auto put_running = [&](const std::string& prefix, const NetworkAssembly& net) {
    for (const auto& site : net.sites) {
      if (site.running.mean.empty() && !site.running.populated) continue;
      detail::put(d, prefix + "running_mean/" + site.name, {site.running.mean.size()}, site.running.mean);
      detail::put(d, prefix + "running_var/" + site.name, {site.running.var.size()}, site.running.var);
      detail::put(d, prefix + "running_populated/" + site.name, {1}, {site.running.populated ? 1.0 : 0.0});
    }
  };
  put_running("", s.online);
  if (s.target) put_running("target/", *s.target);
  if (s.captured) {
    for (const auto& st : s.captured->sites) {
      detail::put(d, "captured_mean/" + st.site, {st.mean.size()}, st.mean);
      detail::put(d, "captured_std/" + st.site, {st.std.size()}, st.std);
      detail::put(d, "captured_final/" + st.site, {1}, {st.final_in_block ? 1.0 : 0.0});
    }
  }
  return d;
}

namespace detail {

inline void load_params(ParameterStore& store, const CheckpointData& d, const std::string& prefix) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    const TensorRecord& rec = d.at(prefix + store.info(i).name);
    if (rec.shape != store[i].shape()) {
      throw CheckpointError("checkpoint: shape mismatch for '" + prefix + store.info(i).name + "'");
    }
    auto dst = store[i].mutable_data();
    std::copy(rec.values.begin(), rec.values.end(), dst.begin());
  }
}

inline void load_running(NetworkAssembly& net, const CheckpointData& d, const std::string& prefix) {
  for (auto& site : net.sites) {
    const auto it = d.records.find(prefix + "running_mean/" + site.name);
    if (it == d.records.end()) continue;
    site.running.mean = it->second.values;
    site.running.var = d.at(prefix + "running_var/" + site.name).values;
    site.running.populated = d.at(prefix + "running_populated/" + site.name).values.at(0) != 0.0;
  }
}

}  // namespace detail

// Rebuilds a TrainerState; parameters, slots, running statistics and the RNG
// are restored bit for bit.
inline TrainerState restore(const CheckpointData& d, std::size_t in_channels = 3) {
  TrainerState s;
  s.config = parse_config(d.config_text);
  if (config_hash(s.config) != d.config_hash) {
    throw CheckpointError("checkpoint: config hash does not match its config text");
  }
  s.online = build(s.config, in_channels);
  if (d.has_captured) {
    CapturedStats stats;
    for (const auto& site : s.online.sites) {
      if (!d.records.contains("captured_mean/" + site.name)) continue;
      SiteStats st;
      st.site = site.name;
      st.mean = d.at("captured_mean/" + site.name).values;
      st.std = d.at("captured_std/" + site.name).values;
      st.final_in_block = d.at("captured_final/" + site.name).values.at(0) != 0.0;
      stats.sites.push_back(std::move(st));
    }
    s.online = reinit_affine(s.online, stats);
    s.captured = std::move(stats);
  }
  detail::load_params(s.online.params, d, "online/");
  detail::load_running(s.online, d, "");
  const bool has_slots = d.records.contains("slot/" + s.online.params.info(0).name);
  if (has_slots) {
    for (std::size_t i = 0; i < s.online.params.size(); ++i) {
      s.slots.momentum.push_back(d.at("slot/" + s.online.params.info(i).name).values);
    }
  }
  if (d.has_target) {
    s.target = s.online.deep_copy();
    for (auto& site : s.target->sites) site.running = {};
    detail::load_params(s.target->params, d, "target/");
    detail::load_running(*s.target, d, "target/");
    s.target->params.set_trainable(false);
  }
  std::istringstream rng(d.rng_state);
  rng >> s.rng;
  if (!rng) throw CheckpointError("checkpoint: unreadable rng state");
  s.step = d.step;
  s.epoch = d.epoch;
  return s;
}

// Written to a temporary sibling and renamed into place.
inline void save_checkpoint(const std::filesystem::path& path, const TrainerState& s) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint '" + tmp.string() + "'");
    write_checkpoint(out, snapshot(s));
  }
  std::filesystem::rename(tmp, path);
}

inline CheckpointData load_checkpoint_data(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  return read_checkpoint(in);
}

inline TrainerState load_checkpoint(const std::filesystem::path& path, std::size_t in_channels = 3) {
  return restore(load_checkpoint_data(path), in_channels);
}

}  // namespace normssl
