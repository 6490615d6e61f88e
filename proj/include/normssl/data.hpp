#pragma once
//
// Datasets and view augmentation.
//
// Images are stored HWC with values in [0, 1]; batches are standardized
// ((x - 0.5) / 0.25) when they are turned into NHWC tensors.
//

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "normssl/tensor.hpp"

namespace normssl {

struct Dataset {
  std::size_t side = 0;
  std::size_t channels = 3;
  std::size_t num_classes = 0;
  std::vector<double> pixels;  // count * side * side * channels
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_numel() const { return side * side * channels; }
  std::span<const double> image(std::size_t i) const {
    return std::span<const double>(pixels).subspan(i * image_numel(), image_numel());
  }
};

struct DataSplits {
  Dataset train;
  Dataset test;
};

inline constexpr std::size_t kShapeClasses = 10;

namespace detail {

// Membership of a point (u, v) in shape `cls`, in shape-local coordinates
// where the shape spans roughly [-1, 1].
inline bool shape_contains(std::size_t cls, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  const double r = std::hypot(u, v);
  switch (cls) {
    case 0: return r <= 1.0;                                   // disk
    case 1: return au <= 0.85 && av <= 0.85;                   // square
    case 2: return v <= 0.8 && v >= -0.9 && au <= (0.8 - v) * 0.55;  // triangle
    case 3: return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);  // plus
    case 4: return r <= 1.0 && r >= 0.55;                      // ring
    case 5: return au <= 1.0 && av <= 0.3;                     // horizontal bar
    case 6: return av <= 1.0 && au <= 0.3;                     // vertical bar
    case 7: return au + av <= 1.0;                             // diamond
    case 8: return (std::abs(u - v) <= 0.35 || std::abs(u + v) <= 0.35) && r <= 1.2;  // X
    case 9: return std::max(au, av) <= 0.9 && std::max(au, av) >= 0.55;  // frame
    default: return false;
  }
}

inline std::array<double, 3> random_color(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return {u(rng), u(rng), u(rng)};
}

inline double luminance(const std::array<double, 3>& c) {
  return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
}

}  // namespace detail

// Procedural shapes: label = shape class; position, size, rotation and
// colors are random nuisance factors. 2x2 supersampling, additive noise.
inline Dataset make_synthetic_shapes(std::size_t count, std::size_t side, std::size_t num_classes,
                                     std::uint64_t seed) {
  if (num_classes < 2 || num_classes > kShapeClasses) {
    throw Error("synthetic shapes support 2.." + std::to_string(kShapeClasses) + " classes");
  }
  Dataset ds;
  ds.side = side;
  ds.channels = 3;
  ds.num_classes = num_classes;
  ds.pixels.resize(count * side * side * 3);
  ds.labels.resize(count);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.04);
  const double s = static_cast<double>(side);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t cls = i % num_classes;
    ds.labels[i] = static_cast<int>(cls);
    const double cx = s * (0.35 + 0.3 * unit(rng));
    const double cy = s * (0.35 + 0.3 * unit(rng));
    const double radius = s * (0.2 + 0.12 * unit(rng));
    const double angle = (unit(rng) - 0.5) * std::numbers::pi / 6.0;
    auto fg = detail::random_color(rng);
    auto bg = detail::random_color(rng);
    while (std::abs(detail::luminance(fg) - detail::luminance(bg)) < 0.25) bg = detail::random_color(rng);
    const double ca = std::cos(angle), sa = std::sin(angle);
    double* img = ds.pixels.data() + i * side * side * 3;
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        double cover = 0.0;
        for (int sy = 0; sy < 2; ++sy) {
          for (int sx = 0; sx < 2; ++sx) {
            const double px = static_cast<double>(x) + 0.25 + 0.5 * sx - cx;
            const double py = static_cast<double>(y) + 0.25 + 0.5 * sy - cy;
            const double u = (ca * px + sa * py) / radius;
            const double v = (-sa * px + ca * py) / radius;
            cover += detail::shape_contains(cls, u, v) ? 0.25 : 0.0;
          }
        }
        for (std::size_t c = 0; c < 3; ++c) {
          const double value = cover * fg[c] + (1.0 - cover) * bg[c] + noise(rng);
          img[(y * side + x) * 3 + c] = std::clamp(value, 0.0, 1.0);
        }
      }
    }
  }
  return ds;
}

inline DataSplits make_synthetic_splits(std::size_t train, std::size_t test, std::size_t side,
                                        std::size_t num_classes, std::uint64_t seed) {
  return {make_synthetic_shapes(train, side, num_classes, seed),
          make_synthetic_shapes(test, side, num_classes, seed ^ 0x9e3779b97f4a7c15ULL)};
}

// Reads the 32x32 RGB binary record format (one label byte followed by 3072
// bytes in channel-planar order, R then G then B). Reads at most `limit`
// records (0 = all).
inline Dataset load_binary_images(const std::string& path, std::size_t limit = 0,
                                  std::size_t num_classes = 10) {
  constexpr std::size_t kSide = 32, kPlane = kSide * kSide, kRecord = 1 + 3 * kPlane;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open image file '" + path + "'");
  Dataset ds;
  ds.side = kSide;
  ds.channels = 3;
  ds.num_classes = num_classes;
  std::vector<unsigned char> record(kRecord);
  while ((limit == 0 || ds.size() < limit) &&
         in.read(reinterpret_cast<char*>(record.data()), static_cast<std::streamsize>(kRecord))) {
    if (record[0] >= num_classes) throw Error("image file: label out of range");
    ds.labels.push_back(record[0]);
    for (std::size_t p = 0; p < kPlane; ++p)
      for (std::size_t c = 0; c < 3; ++c)
        ds.pixels.push_back(static_cast<double>(record[1 + c * kPlane + p]) / 255.0);
  }
  if (in.gcount() != 0 && in.gcount() != static_cast<std::streamsize>(kRecord)) {
    throw Error("image file: truncated record");
  }
  if (ds.size() == 0) throw Error("image file '" + path + "' holds no records");
  return ds;
}

inline constexpr double kPixelMean = 0.5;
inline constexpr double kPixelScale = 0.25;

// Standardized NHWC batch of the given images without augmentation.
inline Tensor make_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  std::vector<double> values;
  values.reserve(indices.size() * ds.image_numel());
  for (std::size_t idx : indices) {
    for (double p : ds.image(idx)) values.push_back((p - kPixelMean) / kPixelScale);
  }
  return Tensor::from({indices.size(), ds.side, ds.side, ds.channels}, std::move(values));
}

struct AugmentationPolicy {
  double crop_min_scale = 0.3;  // minimum crop area fraction
  double flip_prob = 0.5;
  double brightness = 0.4;  // additive shift drawn from [-b, b]
  double contrast = 0.4;    // contrast factor drawn from [1 - c, 1 + c]
  double saturation = 0.2;  // chroma factor drawn from [1 - s, 1 + s]
  double hue = 0.1;         // chroma rotation drawn from [-h, h] turns
  double grayscale_prob = 0.2;
};

// One sampled transformation t ~ T.
struct Transform {
  double crop_size = 1.0;  // side fraction
  double crop_x = 0.0, crop_y = 0.0;
  bool flip = false;
  double brightness = 0.0;
  double contrast = 1.0;
  double saturation = 1.0;
  double hue = 0.0;  // turns
  bool grayscale = false;
};

inline Transform sample_transform(const AugmentationPolicy& policy, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Transform t;
  const double area = policy.crop_min_scale + (1.0 - policy.crop_min_scale) * unit(rng);
  t.crop_size = std::sqrt(area);
  t.crop_x = (1.0 - t.crop_size) * unit(rng);
  t.crop_y = (1.0 - t.crop_size) * unit(rng);
  t.flip = unit(rng) < policy.flip_prob;
  t.brightness = policy.brightness * (2.0 * unit(rng) - 1.0);
  t.contrast = 1.0 + policy.contrast * (2.0 * unit(rng) - 1.0);
  t.saturation = 1.0 + policy.saturation * (2.0 * unit(rng) - 1.0);
  t.hue = policy.hue * (2.0 * unit(rng) - 1.0);
  t.grayscale = unit(rng) < policy.grayscale_prob;
  return t;
}

namespace detail {

// Grayscale replaces each channel by luma; saturation blends toward luma; hue
// rotates the pixel about the gray axis (Rodrigues), which keeps the channel mean.
inline void adjust_color(double* px, double saturation, double hue, bool grayscale) {
  const double luma = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
  double v[3];
  for (int c = 0; c < 3; ++c) v[c] = grayscale ? luma : luma + saturation * (px[c] - luma);
  const double a = 2.0 * std::numbers::pi * hue;
  const double k = 1.0 / std::sqrt(3.0), ca = std::cos(a), sa = std::sin(a);
  const double kv = k * (v[0] + v[1] + v[2]);
  const double cross[3] = {k * (v[2] - v[1]), k * (v[0] - v[2]), k * (v[1] - v[0])};
  for (int c = 0; c < 3; ++c) px[c] = std::clamp(v[c] * ca + cross[c] * sa + k * kv * (1.0 - ca), 0.0, 1.0);
}

}  // namespace detail

// Crop (bilinear resample to full size), flip, brightness/contrast, then
// saturation/hue/grayscale (RGB images only); output in [0, 1].
inline void apply_transform(const Transform& t, std::span<const double> src, std::size_t side,
                            std::size_t channels, std::span<double> dst) {
  const double s = static_cast<double>(side);
  const double scale = t.crop_size;
  std::vector<double> mean(channels, 0.0);
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const double ox = t.flip ? (s - 1.0 - static_cast<double>(x)) : static_cast<double>(x);
      const double sx = std::clamp((t.crop_x * s) + (ox + 0.5) * scale - 0.5, 0.0, s - 1.0);
      const double sy = std::clamp((t.crop_y * s) + (static_cast<double>(y) + 0.5) * scale - 0.5, 0.0, s - 1.0);
      const auto x0 = static_cast<std::size_t>(sx), y0 = static_cast<std::size_t>(sy);
      const std::size_t x1 = std::min(x0 + 1, side - 1), y1 = std::min(y0 + 1, side - 1);
      const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
      for (std::size_t c = 0; c < channels; ++c) {
        auto at = [&](std::size_t yy, std::size_t xx) { return src[(yy * side + xx) * channels + c]; };
        const double v = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
                         fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
        dst[(y * side + x) * channels + c] = v;
        mean[c] += v;
      }
    }
  }
  for (double& m : mean) m /= s * s;
  for (std::size_t i = 0; i < side * side * channels; ++i) {
    const double m = mean[i % channels];
    dst[i] = std::clamp((dst[i] - m) * t.contrast + m + t.brightness, 0.0, 1.0);
  }
  if (channels != 3 || (t.saturation == 1.0 && t.hue == 0.0 && !t.grayscale)) return;
  for (std::size_t p = 0; p < side * side; ++p) detail::adjust_color(&dst[p * 3], t.saturation, t.hue, t.grayscale);
}

struct ViewPair {
  Tensor v, v_prime;
};

// Two independently augmented, standardized views of each indexed image. The
// transforms for each image are drawn t then t' from the same stream.
inline ViewPair make_views(const Dataset& ds, std::span<const std::size_t> indices,
                           const AugmentationPolicy& policy, std::mt19937_64& rng) {
  const std::size_t n = ds.image_numel();
  std::vector<double> a(indices.size() * n), b(indices.size() * n);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Transform t = sample_transform(policy, rng);
    const Transform t_prime = sample_transform(policy, rng);
    apply_transform(t, ds.image(indices[k]), ds.side, ds.channels, std::span(a).subspan(k * n, n));
    apply_transform(t_prime, ds.image(indices[k]), ds.side, ds.channels,
                    std::span(b).subspan(k * n, n));
  }
  for (double& p : a) p = (p - kPixelMean) / kPixelScale;
  for (double& p : b) p = (p - kPixelMean) / kPixelScale;
  const Shape shape{indices.size(), ds.side, ds.side, ds.channels};
  return {Tensor::from(shape, std::move(a)), Tensor::from(shape, std::move(b))};
}

}  // namespace normssl
