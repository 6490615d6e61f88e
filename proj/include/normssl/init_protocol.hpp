#pragma once
//
// Batch-norm removal with statistics-based re-initialization.
//
// One train-mode forward pass of the BN network over an augmented batch
// records, for every BN site k, the per-channel batch mean mu_k and
// sigma_k = sqrt(var_k + eps_bn) (floored at `stat_floor`). Each BN site is
// then replaced by an affine-only site with
//   gamma_k = gamma0_k / sigma_k,   beta_k = -mu_k * gamma_k,
// where gamma0_k = 0 for the last norm of a residual branch and 1 otherwise.
// On the captured batch the norm-free network reproduces the BN network whose
// affines are (gamma0_k, 0).
//

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "normssl/model.hpp"

namespace normssl {

struct SiteStats {
  std::string site;
  std::vector<double> mean;
  std::vector<double> std;
  bool final_in_block = false;
};

struct CapturedStats {
  std::vector<SiteStats> sites;  // forward order

  const SiteStats* find(const std::string& name) const {
    for (const auto& s : sites) {
      if (s.site == name) return &s;
    }
    return nullptr;
  }
};

inline double initial_gamma(const NormSite& site) { return site.final_in_block ? 0.0 : 1.0; }

// Sets every BN site's affine to (gamma0, 0), the state the captured
// statistics are meant to be composed with.
inline void set_reference_affines(NetworkAssembly& net) {
  for (auto& site : net.sites) {
    if (site.spec.kind != NormKind::batch) continue;
    auto gamma = net.params[site.gamma].mutable_data();
    auto beta = net.params[site.beta].mutable_data();
    std::fill(gamma.begin(), gamma.end(), initial_gamma(site));
    std::fill(beta.begin(), beta.end(), 0.0);
  }
}

// Full forward (encoder, projector, predictor when present) in train mode.
// Running statistics are left untouched.
inline CapturedStats capture_stats(NetworkAssembly& net, const Tensor& batch,
                                   double stat_floor = 1e-3) {
  if (batch.rank() != 4 || batch.dim(0) < 2) {
    throw Error("capture_stats: need an NHWC batch of at least 2 images");
  }
  bool any = false;
  for (const auto& s : net.sites) any = any || s.spec.kind == NormKind::batch;
  if (!any) throw Error("capture_stats: assembly has no batch-norm sites");

  std::vector<RunningStats> saved;
  for (auto& s : net.sites) {
    saved.push_back(s.running);
    s.last_batch.reset();
  }
  const NormMode saved_mode = net.mode;
  net.mode = NormMode::train;
  {
    NoGradGuard no_grad;
    Tensor z = net.project(net.encode(batch));
    if (net.predictor) net.predict(z);
  }
  net.mode = saved_mode;

  CapturedStats out;
  for (std::size_t i = 0; i < net.sites.size(); ++i) {
    auto& s = net.sites[i];
    s.running = saved[i];
    if (s.spec.kind != NormKind::batch) continue;
    if (!s.last_batch) throw Error("capture_stats: site " + s.name + " was not reached");
    SiteStats st;
    st.site = s.name;
    st.final_in_block = s.final_in_block;
    st.mean = s.last_batch->mean;
    st.std.resize(st.mean.size());
    for (std::size_t c = 0; c < st.std.size(); ++c) {
      const double sigma = std::sqrt(s.last_batch->var[c] + s.spec.eps);
      if (!std::isfinite(sigma) || !std::isfinite(st.mean[c])) {
        throw NonFiniteError("capture_stats: non-finite statistics at " + s.name);
      }
      st.std[c] = std::max(sigma, stat_floor);
    }
    s.last_batch.reset();
    out.sites.push_back(std::move(st));
  }
  return out;
}

// Norm-free copy of `net`: every BN site becomes an affine-only site
// initialized from the captured statistics.
inline NetworkAssembly reinit_affine(const NetworkAssembly& net, const CapturedStats& stats) {
  NetworkAssembly out = net.deep_copy();
  for (auto& site : out.sites) {
    if (site.spec.kind != NormKind::batch) continue;
    const SiteStats* st = stats.find(site.name);
    if (!st) throw Error("reinit_affine: no captured statistics for site " + site.name);
    if (st->mean.size() != site.channels) throw Error("reinit_affine: channel mismatch at " + site.name);
    const double gamma0 = initial_gamma(site);
    auto gamma = out.params[site.gamma].mutable_data();
    auto beta = out.params[site.beta].mutable_data();
    for (std::size_t c = 0; c < site.channels; ++c) {
      gamma[c] = gamma0 / st->std[c];
      beta[c] = -st->mean[c] * gamma[c];
    }
    site.spec.kind = NormKind::none;
    site.spec.affine = true;
    site.running = {};
    site.last_batch.reset();
  }
  return out;
}

// Convenience: reference affines, capture, re-initialize.
struct ReinitResult {
  NetworkAssembly network;
  CapturedStats stats;
};

inline ReinitResult apply_bn_capture_reinit(NetworkAssembly net, const Tensor& batch,
                                            double stat_floor = 1e-3) {
  set_reference_affines(net);
  CapturedStats stats = capture_stats(net, batch, stat_floor);
  NetworkAssembly reinit = reinit_affine(net, stats);
  return {std::move(reinit), std::move(stats)};
}

}  // namespace normssl
