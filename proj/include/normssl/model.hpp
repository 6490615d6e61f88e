#pragma once
//
// Network assembly: residual encoder f, MLP projector g and (BYOL only) MLP
// predictor q, each with its own normalization scheme.
//

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "normssl/log.hpp"
#include "normssl/normalization.hpp"
#include "normssl/ops.hpp"

namespace normssl {

enum class Component { encoder, projector, predictor };

inline std::string_view to_string(Component c) {
  switch (c) {
    case Component::encoder: return "encoder";
    case Component::projector: return "projector";
    case Component::predictor: return "predictor";
  }
  return "encoder";
}

// Weight decay and LARS adaptation apply to `weight` only.
enum class ParamRole { weight, norm_affine, bias };

struct ParamInfo {
  std::string name;
  Component component;
  ParamRole role;
};

// Owns every trainable tensor of an assembly. Layers refer to entries by index,
// so copying a store together with its layers yields an independent network.
class ParameterStore {
 public:
  std::size_t add(std::string name, Component component, ParamRole role, Tensor value) {
    value.set_requires_grad(true);
    tensors_.push_back(std::move(value));
    info_.push_back({std::move(name), component, role});
    return tensors_.size() - 1;
  }

  std::size_t size() const { return tensors_.size(); }
  Tensor& operator[](std::size_t i) { return tensors_.at(i); }
  const Tensor& operator[](std::size_t i) const { return tensors_.at(i); }
  const ParamInfo& info(std::size_t i) const { return info_.at(i); }

  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t i = 0; i < info_.size(); ++i) {
      if (info_[i].name == name) return i;
    }
    return std::nullopt;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
  }

  ParameterStore deep_copy() const {
    ParameterStore copy;
    copy.info_ = info_;
    copy.tensors_.reserve(tensors_.size());
    for (const auto& t : tensors_) copy.tensors_.push_back(t.clone());
    return copy;
  }

  void zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
  }

  void set_trainable(bool flag) {
    for (auto& t : tensors_) t.set_requires_grad(flag);
  }

 private:
  std::vector<Tensor> tensors_;
  std::vector<ParamInfo> info_;
};

struct ConvLayer {
  std::size_t weight = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool standardize = false;
  double ws_eps = 1e-4;

  Tensor effective_weight(const ParameterStore& store) const {
    return standardize ? weight_standardize(store[weight], ws_eps) : store[weight];
  }
  Tensor forward(const Tensor& x, const ParameterStore& store) const {
    return conv2d(x, effective_weight(store), stride, padding);
  }
};

struct LinearLayer {
  std::size_t weight = 0;
  std::optional<std::size_t> bias;
  bool standardize = false;
  double ws_eps = 1e-4;

  Tensor effective_weight(const ParameterStore& store) const {
    return standardize ? weight_standardize(store[weight], ws_eps) : store[weight];
  }
  Tensor forward(const Tensor& x, const ParameterStore& store) const {
    const Tensor w = effective_weight(store);
    return bias ? linear(x, w, &store[*bias]) : linear(x, w);
  }
};

// One normalization site: scheme, trainable affine, and batch-norm state.
struct NormSite {
  std::string name;
  Component component = Component::encoder;
  NormSpec spec;
  bool final_in_block = false;  // last norm of a residual branch
  std::size_t channels = 0;
  std::size_t gamma = 0;
  std::size_t beta = 0;
  RunningStats running;
  std::optional<SliceStats> last_batch;  // batch statistics of the latest train-mode pass

  Tensor forward(const Tensor& x, const ParameterStore& store, NormMode mode) {
    if (x.shape().back() != channels) {
      throw ShapeError("norm site " + name + ": expected " + std::to_string(channels) +
                       " channels, got " + to_string(x.shape()));
    }
    SliceStats batch;
    Tensor y = normalize(x, spec, mode, &running, &batch);
    if (spec.kind == NormKind::batch && mode == NormMode::train) last_batch = std::move(batch);
    return spec.affine ? channel_affine(y, store[gamma], store[beta]) : y;
  }
};

struct ResidualBlock {
  ConvLayer conv1;
  std::size_t norm1 = 0;
  ConvLayer conv2;
  std::size_t norm2 = 0;  // final-in-block
  std::optional<ConvLayer> shortcut;
  std::optional<std::size_t> shortcut_norm;
};

struct ResidualEncoder {
  ConvLayer stem;
  std::size_t stem_norm = 0;
  std::vector<ResidualBlock> blocks;
  std::size_t output_width = 0;
};

struct MLPHead {
  LinearLayer first;
  std::size_t norm = 0;
  LinearLayer second;
  std::size_t input_width = 0, hidden_width = 0, output_width = 0;
};

// Architecture and normalization choices needed to build an assembly.
struct ModelSpec {
  std::size_t in_channels = 3;
  std::size_t stem_width = 16;
  std::vector<std::size_t> stage_widths{16, 32, 64};
  std::size_t blocks_per_stage = 2;
  std::size_t proj_hidden = 128;
  std::size_t proj_out = 64;
  std::size_t pred_hidden = 128;
  bool with_predictor = true;
  NormSpec encoder_norm;
  NormSpec projector_norm;
  NormSpec predictor_norm;
  bool weight_standardization = false;
  double ws_eps = 1e-4;
  std::uint64_t seed = 1;
};

struct ViewOutputs {
  Tensor z, z_prime;
  Tensor q, q_prime;  // undefined without a predictor
};

class NetworkAssembly {
 public:
  ParameterStore params;
  std::vector<NormSite> sites;  // in forward execution order
  ResidualEncoder encoder;
  MLPHead projector;
  std::optional<MLPHead> predictor;
  bool ws_enabled = false;
  NormMode mode = NormMode::train;
  // Called with each norm site's output (post-affine) during forward passes.
  std::function<void(const NormSite&, const Tensor&)> site_observer;

  // y = f(v): (N,H,W,C) -> (N, D_repr)
  Tensor encode(const Tensor& v) {
    if (v.rank() != 4) throw ShapeError("encode: expects NHWC input, got " + to_string(v.shape()));
    Tensor h = relu(site(encoder.stem_norm, encoder.stem.forward(v, params)));
    for (const auto& block : encoder.blocks) {
      Tensor branch = relu(site(block.norm1, block.conv1.forward(h, params)));
      branch = site(block.norm2, block.conv2.forward(branch, params));
      Tensor skip = h;
      if (block.shortcut) skip = site(*block.shortcut_norm, block.shortcut->forward(h, params));
      h = relu(add(branch, skip));
    }
    return global_avg_pool(h);
  }

  Tensor project(const Tensor& y) { return head(projector, y); }

  Tensor predict(const Tensor& z) {
    if (!predictor) throw Error("predict: assembly has no predictor");
    return head(*predictor, z);
  }

  ViewOutputs forward_views(const Tensor& v, const Tensor& v_prime) {
    if (v.shape() != v_prime.shape()) throw ShapeError("forward_views: views differ in shape");
    ViewOutputs out;
    out.z = project(encode(v));
    out.z_prime = project(encode(v_prime));
    if (predictor) {
      out.q = predict(out.z);
      out.q_prime = predict(out.z_prime);
    }
    return out;
  }

  // Static inspection: does any site normalize with batch statistics?
  bool uses_batch_statistics() const {
    for (const auto& s : sites) {
      if (::normssl::uses_batch_statistics(s.spec)) return true;
    }
    return false;
  }

  std::size_t parameter_count() const { return params.scalar_count(); }

  // Independent copy (parameters, running stats, site schemes).
  NetworkAssembly deep_copy() const {
    NetworkAssembly copy = *this;
    copy.params = params.deep_copy();
    return copy;
  }

 private:
  Tensor site(std::size_t index, const Tensor& x) {
    Tensor y = sites[index].forward(x, params, mode);
    if (site_observer) site_observer(sites[index], y);
    return y;
  }

  Tensor head(const MLPHead& h, const Tensor& x) {
    Tensor hidden = relu(site(h.norm, h.first.forward(x, params)));
    return h.second.forward(hidden, params);
  }
};

namespace detail {

class AssemblyBuilder {
 public:
  explicit AssemblyBuilder(const ModelSpec& spec) : spec_(spec), rng_(spec.seed) {}

  NetworkAssembly build() {
    out_.ws_enabled = spec_.weight_standardization;
    build_encoder();
    out_.projector =
        build_head("projector", Component::projector, spec_.projector_norm,
                   out_.encoder.output_width, spec_.proj_hidden, spec_.proj_out);
    if (spec_.with_predictor) {
      out_.predictor = build_head("predictor", Component::predictor, spec_.predictor_norm,
                                  spec_.proj_out, spec_.pred_hidden, spec_.proj_out);
    }
    return std::move(out_);
  }

 private:
  Tensor gaussian(Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> values(numel_of(shape));
    for (double& v : values) v = dist(rng_);
    return Tensor::from(std::move(shape), std::move(values));
  }

  ConvLayer conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                 std::size_t stride) {
    const double fan_in = static_cast<double>(k * k * cin);
    ConvLayer layer;
    layer.weight = out_.params.add(name + ".weight", Component::encoder, ParamRole::weight,
                                   gaussian({cout, k, k, cin}, std::sqrt(2.0 / fan_in)));
    layer.stride = stride;
    layer.padding = k / 2;
    layer.standardize = spec_.weight_standardization;
    layer.ws_eps = spec_.ws_eps;
    return layer;
  }

  LinearLayer dense(const std::string& name, Component component, std::size_t in, std::size_t out,
                    bool with_bias, double gain) {
    LinearLayer layer;
    layer.weight = out_.params.add(name + ".weight", component, ParamRole::weight,
                                   gaussian({out, in}, std::sqrt(gain / static_cast<double>(in))));
    if (with_bias) {
      layer.bias = out_.params.add(name + ".bias", component, ParamRole::bias, Tensor::zeros({out}));
    }
    layer.standardize = spec_.weight_standardization;
    layer.ws_eps = spec_.ws_eps;
    return layer;
  }

  std::size_t norm(const std::string& name, Component component, NormSpec spec,
                   std::size_t channels, bool final_in_block = false) {
    if (spec.kind == NormKind::group) {
      if (channels < spec.groups) {
        log_warning(name + ": " + std::to_string(channels) + " channels < " +
                    std::to_string(spec.groups) + " groups, clamping groups to channel count");
        spec.groups = channels;
      }
      if (channels % spec.groups != 0) {
        throw Error(name + ": group count " + std::to_string(spec.groups) + " does not divide " +
                    std::to_string(channels) + " channels");
      }
    }
    NormSite site;
    site.name = name;
    site.component = component;
    site.spec = spec;
    site.final_in_block = final_in_block;
    site.channels = channels;
    site.gamma = out_.params.add(name + ".gamma", component, ParamRole::norm_affine,
                                 Tensor::full({channels}, 1.0));
    site.beta = out_.params.add(name + ".beta", component, ParamRole::norm_affine,
                                Tensor::zeros({channels}));
    out_.sites.push_back(std::move(site));
    return out_.sites.size() - 1;
  }

  void build_encoder() {
    if (spec_.stage_widths.empty() || spec_.blocks_per_stage == 0 || spec_.stem_width == 0) {
      throw Error("encoder needs at least one stage with one block");
    }
    auto& enc = out_.encoder;
    const NormSpec& ns = spec_.encoder_norm;
    enc.stem = conv("encoder.stem.conv", spec_.in_channels, spec_.stem_width, 3, 1);
    enc.stem_norm = norm("encoder.stem.norm", Component::encoder, ns, spec_.stem_width);
    std::size_t width = spec_.stem_width;
    for (std::size_t s = 0; s < spec_.stage_widths.size(); ++s) {
      const std::size_t out = spec_.stage_widths[s];
      for (std::size_t b = 0; b < spec_.blocks_per_stage; ++b) {
        const std::string name = "encoder.stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
        const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
        ResidualBlock block;
        block.conv1 = conv(name + ".conv1", width, out, 3, stride);
        block.norm1 = norm(name + ".norm1", Component::encoder, ns, out);
        block.conv2 = conv(name + ".conv2", out, out, 3, 1);
        block.norm2 = norm(name + ".norm2", Component::encoder, ns, out, /*final_in_block=*/true);
        if (stride != 1 || width != out) {
          block.shortcut = conv(name + ".shortcut.conv", width, out, 1, stride);
          block.shortcut_norm = norm(name + ".shortcut.norm", Component::encoder, ns, out);
        }
        enc.blocks.push_back(std::move(block));
        width = out;
      }
    }
    enc.output_width = width;
  }

  MLPHead build_head(const std::string& name, Component component, const NormSpec& ns,
                     std::size_t in, std::size_t hidden, std::size_t out) {
    MLPHead head;
    head.input_width = in;
    head.hidden_width = hidden;
    head.output_width = out;
    // The first linear feeds a norm with affine, so it carries no bias.
    head.first = dense(name + ".linear1", component, in, hidden, false, 2.0);
    head.norm = norm(name + ".norm", component, ns, hidden);
    head.second = dense(name + ".linear2", component, hidden, out, true, 1.0);
    return head;
  }

  const ModelSpec& spec_;
  std::mt19937_64 rng_;
  NetworkAssembly out_;
};

}  // namespace detail

inline NetworkAssembly build_assembly(const ModelSpec& spec) {
  return detail::AssemblyBuilder(spec).build();
}

}  // namespace normssl
