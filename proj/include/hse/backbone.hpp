#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "hse/ops.hpp"
#include "hse/rng.hpp"
#include "hse/tensor.hpp"

namespace hse {

// Small frozen CNN standing in for a pretrained extractor. Three conv blocks
// reach the mid-level map, one more reaches the high-level map; strides are
// derived from the configured downsample factors.
struct BackboneConfig {
  int in_channels = 3;
  int mid_channels = 32;
  int high_channels = 32;
  int mid_factor = 4;   // image -> mid map downsample
  int high_factor = 8;  // image -> high map downsample

  void validate() const {
    if (in_channels < 1 || mid_channels < 1 || high_channels < 1)
      throw ConfigError("backbone channel counts must be positive");
    auto pow2 = [](int v) { return v >= 1 && (v & (v - 1)) == 0; };
    if (!pow2(mid_factor) || !pow2(high_factor))
      throw ConfigError("backbone downsample factors must be powers of two");
    if (high_factor < mid_factor || high_factor % mid_factor != 0)
      throw ConfigError("high_factor must be a multiple of mid_factor");
    if (mid_factor > 8) throw ConfigError("mid_factor above 8 needs more than 3 blocks");
  }

  std::vector<int> mid_strides() const {
    int twos = 0;
    for (int f = mid_factor; f > 1; f /= 2) ++twos;
    std::vector<int> s(std::max(3, twos), 1);
    for (int i = 0; i < twos; ++i) s[static_cast<std::size_t>(i)] = 2;
    return s;
  }
  std::vector<int> high_strides() const {
    int twos = 0;
    for (int f = high_factor / mid_factor; f > 1; f /= 2) ++twos;
    std::vector<int> s(std::max(1, twos), 1);
    for (int i = 0; i < twos; ++i) s[static_cast<std::size_t>(i)] = 2;
    return s;
  }
};

template <typename T>
struct ConvLayer {
  Tensor<T> w;  // [C_out, C_in, k, k]
  Tensor<T> b;  // [C_out]
};

template <typename T>
struct BackboneParams {
  BackboneConfig cfg;
  std::vector<ConvLayer<T>> mid_blocks;
  std::vector<ConvLayer<T>> high_blocks;
};

// Mid- and high-level features from one pass over one image.
template <typename T>
struct FeaturePair {
  Tensor<T> mid;   // [C, H0/mid_factor, W0/mid_factor]
  Tensor<T> high;  // [C_h, H0/high_factor, W0/high_factor]
};

// Per-tensor deterministic init: the stream is keyed on (seed, tensor name),
// so a given tensor's values do not depend on construction order.
template <typename T>
Tensor<T> scaled_uniform_init(std::vector<int> shape, int fan_in, int fan_out, std::uint64_t seed,
                              const std::string& name) {
  Rng rng(hash_combine(seed, fnv1a64(name)));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(-limit, limit));
  return t;
}

template <typename T>
ConvLayer<T> make_conv_layer(int cout, int cin, int k, std::uint64_t seed, const std::string& name) {
  ConvLayer<T> l;
  l.w = scaled_uniform_init<T>({cout, cin, k, k}, cin * k * k, cout * k * k, seed, name + ".w");
  l.b = Tensor<T>::zeros({cout});
  return l;
}

template <typename T>
BackboneParams<T> build_backbone(const BackboneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  BackboneParams<T> bp;
  bp.cfg = cfg;
  int cin = cfg.in_channels;
  const auto ms = cfg.mid_strides();
  for (std::size_t i = 0; i < ms.size(); ++i) {
    bp.mid_blocks.push_back(make_conv_layer<T>(cfg.mid_channels, cin, 3, seed, "backbone.mid" + std::to_string(i)));
    cin = cfg.mid_channels;
  }
  const auto hs = cfg.high_strides();
  for (std::size_t i = 0; i < hs.size(); ++i) {
    bp.high_blocks.push_back(
        make_conv_layer<T>(cfg.high_channels, cin, 3, seed, "backbone.high" + std::to_string(i)));
    cin = cfg.high_channels;
  }
  return bp;
}

template <typename T>
Tensor<T> conv_block(Tape<T>* tape, const ConvLayer<T>& l, const Tensor<T>& x, int stride) {
  return relu(tape, add(tape, conv2d(tape, x, l.w, stride, 1), l.b));
}

// One pass producing both feature levels. With an untracked parameter set this
// is a pure function; nothing is recorded on the tape.
template <typename T>
FeaturePair<T> extract_features(Tape<T>* tape, const BackboneParams<T>& bp, const Tensor<T>& image) {
  const BackboneConfig& cfg = bp.cfg;
  if (image.rank() != 3 || image.shape[0] != cfg.in_channels)
    throw DimensionError("extract_features expects [" + std::to_string(cfg.in_channels) + ",H,W], got " +
                         shape_str(image.shape));
  const int h0 = image.shape[1], w0 = image.shape[2];
  if (h0 % cfg.high_factor != 0 || w0 % cfg.high_factor != 0 || h0 % cfg.mid_factor != 0 ||
      w0 % cfg.mid_factor != 0)
    throw DimensionError("image extent " + std::to_string(h0) + "x" + std::to_string(w0) +
                         " not divisible by downsample factors " + std::to_string(cfg.mid_factor) + "/" +
                         std::to_string(cfg.high_factor));
  if (h0 / cfg.mid_factor < 2 || w0 / cfg.mid_factor < 2)
    throw DimensionError("mid feature map would be smaller than 2x2");

  FeaturePair<T> out;
  Tensor<T> x = image;
  const auto ms = cfg.mid_strides();
  for (std::size_t i = 0; i < bp.mid_blocks.size(); ++i) x = conv_block(tape, bp.mid_blocks[i], x, ms[i]);
  out.mid = x;
  const auto hs = cfg.high_strides();
  for (std::size_t i = 0; i < bp.high_blocks.size(); ++i) x = conv_block(tape, bp.high_blocks[i], x, hs[i]);
  out.high = x;
  return out;
}

}  // namespace hse
