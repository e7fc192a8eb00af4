#pragma once

// VGG-19 convolutional prefix (conv1_1 .. conv5_1): weight file I/O, forward
// evaluation and the input gradient of losses defined on its activations.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "painterly/errors.hpp"
#include "painterly/tensor.hpp"

namespace painterly {

inline constexpr std::array<std::string_view, 13> kVgg19Layers = {
    "conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1", "conv3_2", "conv3_3", "conv3_4",
    "conv4_1", "conv4_2", "conv4_3", "conv4_4", "conv5_1"};

/// Position of `name` in the VGG-19 prefix, or nullopt.
inline std::optional<std::size_t> vgg_layer_rank(std::string_view name) {
  for (std::size_t i = 0; i < kVgg19Layers.size(); ++i) {
    if (kVgg19Layers[i] == name) return i;
  }
  return std::nullopt;
}

/// Block number of a conv{block}_{index} name (1-based).
inline int layer_block(std::string_view name) {
  if (!vgg_layer_rank(name)) throw ConfigError("unknown layer name '" + std::string(name) + "'");
  return name[4] - '0';
}

/// Spatial reduction factor of a layer relative to the input image.
inline int layer_downsample(std::string_view name) { return 1 << (layer_block(name) - 1); }

struct ConvLayer {
  std::string name;
  int out_channels = 0;
  int in_channels = 0;
  int kernel_h = 3;
  int kernel_w = 3;
  std::vector<float> weights;  // out, in, kh, kw
  std::vector<float> bias;

  friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

struct WeightBank {
  std::array<float, 3> channel_mean{};
  std::vector<ConvLayer> layers;

  const ConvLayer* find(std::string_view name) const {
    for (const auto& layer : layers) {
      if (layer.name == name) return &layer;
    }
    return nullptr;
  }

  bool has(std::string_view name) const { return find(name) != nullptr; }

  /// Throws ConfigError naming the offending layer.
  void validate() const {
    std::optional<std::size_t> previous_rank;
    int previous_channels = 3;
    for (const auto& layer : layers) {
      const auto rank = vgg_layer_rank(layer.name);
      if (!rank) throw ConfigError("layer '" + layer.name + "': not a VGG-19 conv layer up to conv5_1");
      if (previous_rank && *rank <= *previous_rank) {
        throw ConfigError("layer '" + layer.name + "': out of VGG-19 order");
      }
      if (layer.kernel_h != 3 || layer.kernel_w != 3) {
        throw ConfigError("layer '" + layer.name + "': kernel must be 3x3");
      }
      if (layer.out_channels <= 0 || layer.in_channels <= 0) {
        throw ConfigError("layer '" + layer.name + "': channel counts must be positive");
      }
      if (layer.in_channels != previous_channels) {
        throw ConfigError("layer '" + layer.name + "': in_channels " + std::to_string(layer.in_channels) +
                          " does not chain from previous output " + std::to_string(previous_channels));
      }
      const auto expected = static_cast<std::size_t>(layer.out_channels) * layer.in_channels * 9;
      if (layer.weights.size() != expected) {
        throw ConfigError("layer '" + layer.name + "': weights length mismatch");
      }
      if (layer.bias.size() != static_cast<std::size_t>(layer.out_channels)) {
        throw ConfigError("layer '" + layer.name + "': bias length != out_channels");
      }
      previous_rank = rank;
      previous_channels = layer.out_channels;
    }
  }

  friend bool operator==(const WeightBank&, const WeightBank&) = default;
};

// ---------------------------------------------------------------------------
// Weight file: little-endian "NPHW" container.

namespace detail {

class ByteWriter {
 public:
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  void put(std::uint32_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}

  std::size_t offset() const { return pos_; }
  void set_context(std::string ctx) { context_ = std::move(ctx); }

  std::uint16_t u16() { return static_cast<std::uint16_t>(take(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(take(4)); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) {
      throw FormatError("weight file truncated at byte offset " + std::to_string(pos_) +
                        (context_.empty() ? "" : " (" + context_ + ")"));
    }
  }
  bool at_end() const { return pos_ == in_.size(); }

 private:
  std::uint64_t take(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
  std::string context_;
};

}  // namespace detail

inline constexpr std::string_view kWeightMagic = "NPHW";
inline constexpr std::uint32_t kWeightVersion = 1;

inline std::vector<std::uint8_t> serialize_weights(const WeightBank& bank) {
  detail::ByteWriter w;
  w.bytes(kWeightMagic);
  w.u32(kWeightVersion);
  for (float m : bank.channel_mean) w.f32(m);
  w.u32(static_cast<std::uint32_t>(bank.layers.size()));
  for (const auto& layer : bank.layers) {
    w.u16(static_cast<std::uint16_t>(layer.name.size()));
    w.bytes(layer.name);
    w.u32(static_cast<std::uint32_t>(layer.out_channels));
    w.u32(static_cast<std::uint32_t>(layer.in_channels));
    w.u32(static_cast<std::uint32_t>(layer.kernel_h));
    w.u32(static_cast<std::uint32_t>(layer.kernel_w));
    for (float v : layer.weights) w.f32(v);
    for (float v : layer.bias) w.f32(v);
  }
  return w.take();
}

/// Parses a complete weight file image. Nothing is returned on error.
inline WeightBank parse_weights(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  r.set_context("header");
  if (r.str(4) != kWeightMagic) throw FormatError("bad magic at byte offset 0: expected NPHW");
  const std::size_t version_offset = r.offset();
  if (const auto version = r.u32(); version != kWeightVersion) {
    throw FormatError("unsupported version " + std::to_string(version) + " at byte offset " +
                      std::to_string(version_offset));
  }
  WeightBank bank;
  for (float& m : bank.channel_mean) m = r.f32();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t layer_offset = r.offset();
    r.set_context("layer #" + std::to_string(i));
    ConvLayer layer;
    layer.name = r.str(r.u16());
    r.set_context("layer '" + layer.name + "'");
    layer.out_channels = static_cast<int>(r.u32());
    layer.in_channels = static_cast<int>(r.u32());
    layer.kernel_h = static_cast<int>(r.u32());
    layer.kernel_w = static_cast<int>(r.u32());
    const auto where = " (layer '" + layer.name + "' at byte offset " + std::to_string(layer_offset) + ")";
    if (layer.kernel_h != 3 || layer.kernel_w != 3) throw FormatError("kernel must be 3x3" + where);
    if (layer.out_channels <= 0 || layer.in_channels <= 0 || layer.out_channels > (1 << 16) ||
        layer.in_channels > (1 << 16)) {
      throw FormatError("implausible channel counts" + where);
    }
    const auto n = static_cast<std::size_t>(layer.out_channels) * layer.in_channels * 9;
    r.need(n * 4);
    layer.weights.resize(n);
    for (float& v : layer.weights) v = r.f32();
    r.need(static_cast<std::size_t>(layer.out_channels) * 4);
    layer.bias.resize(static_cast<std::size_t>(layer.out_channels));
    for (float& v : layer.bias) v = r.f32();
    bank.layers.push_back(std::move(layer));
  }
  if (!r.at_end()) {
    const std::string last = bank.layers.empty() ? "header" : "layer '" + bank.layers.back().name + "'";
    throw FormatError("trailing bytes after " + last + " at byte offset " + std::to_string(r.offset()) +
                      " (bias or weight length disagrees with the declared shape)");
  }
  try {
    bank.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invariant violation: ") + e.what());
  }
  return bank;
}

inline WeightBank load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open weight file '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_weights(bytes);
}

inline void save_weights(const WeightBank& bank, const std::string& path) {
  const auto bytes = serialize_weights(bank);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write weight file '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path + "'");
}

/// Random He-initialized bank over the given (layer name, out_channels) list.
/// Uses only mt19937 bit output so the result is identical on every platform.
inline WeightBank random_bank(const std::vector<std::pair<std::string, int>>& spec, std::uint32_t seed,
                              std::array<float, 3> mean = {123.68f, 116.779f, 103.939f}) {
  std::mt19937 gen(seed);
  auto uniform = [&gen] { return static_cast<double>(gen() >> 8) / 16777216.0; };
  WeightBank bank;
  bank.channel_mean = mean;
  int in_channels = 3;
  for (const auto& [name, out_channels] : spec) {
    ConvLayer layer{name, out_channels, in_channels, 3, 3, {}, {}};
    // uniform on [-a, a] with variance 2 / fan_in
    const double a = std::sqrt(6.0 / (9.0 * in_channels));
    layer.weights.resize(static_cast<std::size_t>(out_channels) * in_channels * 9);
    for (float& v : layer.weights) v = static_cast<float>((2.0 * uniform() - 1.0) * a);
    layer.bias.resize(static_cast<std::size_t>(out_channels));
    for (float& v : layer.bias) v = static_cast<float>((2.0 * uniform() - 1.0) * 0.5);
    bank.layers.push_back(std::move(layer));
    in_channels = out_channels;
  }
  bank.validate();
  return bank;
}

// ---------------------------------------------------------------------------
// Layer primitives.

/// Stride-1 zero-padded cross-correlation plus bias.
template <typename Real, typename W>
Tensor<Real> conv2d(const Tensor<Real>& input, int out_channels, int in_channels, int kernel_h, int kernel_w,
                    std::span<const W> weights, std::span<const W> bias, int padding = 1) {
  if (input.channels() != in_channels) {
    throw ConfigError("conv2d: input has " + std::to_string(input.channels()) + " channels, layer expects " +
                      std::to_string(in_channels));
  }
  const int h = input.height(), w = input.width();
  const int oh = h + 2 * padding - kernel_h + 1;
  const int ow = w + 2 * padding - kernel_w + 1;
  if (oh <= 0 || ow <= 0) throw ConfigError("conv2d: input smaller than kernel");
  Tensor<Real> out(out_channels, oh, ow);
  for (int oc = 0; oc < out_channels; ++oc) {
    auto dst = out.plane(oc);
    std::fill(dst.begin(), dst.end(), static_cast<Real>(bias[static_cast<std::size_t>(oc)]));
    for (int ic = 0; ic < in_channels; ++ic) {
      const auto src = input.plane(ic);
      for (int ky = 0; ky < kernel_h; ++ky) {
        for (int kx = 0; kx < kernel_w; ++kx) {
          const Real k = static_cast<Real>(
              weights[((static_cast<std::size_t>(oc) * in_channels + ic) * kernel_h + ky) * kernel_w + kx]);
          const int dy = ky - padding, dx = kx - padding;
          const int y0 = std::max(0, -dy), y1 = std::min(oh, h - dy);
          const int x0 = std::max(0, -dx), x1 = std::min(ow, w - dx);
          for (int y = y0; y < y1; ++y) {
            Real* o = dst.data() + static_cast<std::size_t>(y) * ow;
            const Real* s = src.data() + static_cast<std::size_t>(y + dy) * w + dx;
            for (int x = x0; x < x1; ++x) o[x] += k * s[x];
          }
        }
      }
    }
  }
  return out;
}

template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& input, const ConvLayer& layer, int padding = 1) {
  return conv2d<Real, float>(input, layer.out_channels, layer.in_channels, layer.kernel_h, layer.kernel_w,
                             layer.weights, layer.bias, padding);
}

/// Gradient of conv2d (padding 1, same size) with respect to its input.
template <typename Real>
Tensor<Real> conv2d_input_grad(const Tensor<Real>& grad_out, int in_channels, int kernel_h, int kernel_w,
                               std::span<const Real> weights, int padding = 1) {
  const int out_channels = grad_out.channels();
  const int oh = grad_out.height(), ow = grad_out.width();
  const int h = oh - 2 * padding + kernel_h - 1;
  const int w = ow - 2 * padding + kernel_w - 1;
  Tensor<Real> grad_in(in_channels, h, w);
  for (int ic = 0; ic < in_channels; ++ic) {
    auto dst = grad_in.plane(ic);
    for (int oc = 0; oc < out_channels; ++oc) {
      const auto g = grad_out.plane(oc);
      for (int ky = 0; ky < kernel_h; ++ky) {
        for (int kx = 0; kx < kernel_w; ++kx) {
          const Real k = weights[((static_cast<std::size_t>(oc) * in_channels + ic) * kernel_h + ky) * kernel_w + kx];
          const int dy = ky - padding, dx = kx - padding;
          const int y0 = std::max(0, -dy), y1 = std::min(oh, h - dy);
          const int x0 = std::max(0, -dx), x1 = std::min(ow, w - dx);
          for (int y = y0; y < y1; ++y) {
            Real* d = dst.data() + static_cast<std::size_t>(y + dy) * w + dx;
            const Real* s = g.data() + static_cast<std::size_t>(y) * ow;
            for (int x = x0; x < x1; ++x) d[x] += k * s[x];
          }
        }
      }
    }
  }
  return grad_in;
}

/// 2x2 stride-2 max pooling with floor sizing. `argmax` receives, per output
/// cell, the flat index of the winning input element (first in row-major order
/// on ties).
template <typename Real>
Tensor<Real> max_pool(const Tensor<Real>& in, Tensor<std::int32_t>& argmax) {
  const int h = in.height() / 2, w = in.width() / 2;
  Tensor<Real> out(in.channels(), h, w);
  argmax = Tensor<std::int32_t>(in.channels(), h, w);
  for (int c = 0; c < in.channels(); ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        int best_y = 2 * y, best_x = 2 * x;
        Real best = in(c, best_y, best_x);
        for (int k = 1; k < 4; ++k) {
          const int yy = 2 * y + k / 2, xx = 2 * x + k % 2;
          if (in(c, yy, xx) > best) {
            best = in(c, yy, xx);
            best_y = yy;
            best_x = xx;
          }
        }
        out(c, y, x) = best;
        argmax(c, y, x) = best_y * in.width() + best_x;
      }
    }
  }
  return out;
}

template <typename Real>
Tensor<Real> max_unpool(const Tensor<Real>& grad_out, const Tensor<std::int32_t>& argmax, int in_h, int in_w) {
  Tensor<Real> grad_in(grad_out.channels(), in_h, in_w);
  for (int c = 0; c < grad_out.channels(); ++c) {
    auto dst = grad_in.plane(c);
    for (int y = 0; y < grad_out.height(); ++y) {
      for (int x = 0; x < grad_out.width(); ++x) dst[argmax(c, y, x)] += grad_out(c, y, x);
    }
  }
  return grad_in;
}

// ---------------------------------------------------------------------------
// Network evaluation.

/// Post-ReLU activations keyed by layer name (map order == VGG order).
template <typename Real>
using FeatureStack = std::map<std::string, Tensor<Real>>;

template <typename Real>
using LayerGrads = std::map<std::string, Tensor<Real>>;

/// Everything backward() needs from a forward pass.
template <typename Real>
struct ForwardTrace {
  struct Step {
    std::size_t layer = 0;
    std::vector<Tensor<std::int32_t>> pool_argmax;  // pools applied before this conv
    std::vector<std::pair<int, int>> pool_input_sizes;
    Tensor<Real> activation;
  };
  int image_height = 0;
  int image_width = 0;
  std::vector<Step> steps;
  FeatureStack<Real> features;
};

/// Weight bank converted to the working precision.
template <typename Real = float>
class Backbone {
 public:
  explicit Backbone(WeightBank bank) : bank_(std::move(bank)) {
    bank_.validate();
    for (const auto& layer : bank_.layers) {
      weights_.emplace_back(layer.weights.begin(), layer.weights.end());
      biases_.emplace_back(layer.bias.begin(), layer.bias.end());
    }
  }

  const WeightBank& bank() const { return bank_; }

  /// Spatial size of `layer` for an input of the given size.
  static std::pair<int, int> layer_size(std::string_view layer, int height, int width) {
    const int f = layer_downsample(layer);
    return {height / f, width / f};
  }

  ForwardTrace<Real> trace(const Image& image, const std::set<std::string>& wanted) const {
    if (image.empty() || image.channels() != 3) throw ConfigError("forward: expected non-empty 3-channel image");
    ForwardTrace<Real> out;
    out.image_height = image.height();
    out.image_width = image.width();
    std::size_t last = 0;
    bool any = false;
    for (const auto& name : wanted) {
      const ConvLayer* layer = bank_.find(name);
      if (!layer) throw ConfigError("forward: layer '" + name + "' not in weight bank");
      const auto [h, w] = layer_size(name, image.height(), image.width());
      if (h < 3 || w < 3) {
        throw ConfigError("forward: image " + std::to_string(image.height()) + "x" + std::to_string(image.width()) +
                          " too small for layer '" + name + "'");
      }
      last = std::max(last, static_cast<std::size_t>(layer - bank_.layers.data()));
      any = true;
    }
    if (!any) return out;

    Tensor<Real> x(3, image.height(), image.width());
    for (int c = 0; c < 3; ++c) {
      const auto src = image.plane(c);
      auto dst = x.plane(c);
      for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i] = static_cast<Real>(src[i] * 255.0 - static_cast<double>(bank_.channel_mean[c]));
      }
    }
    int block = 1;
    for (std::size_t li = 0; li <= last; ++li) {
      const ConvLayer& layer = bank_.layers[li];
      typename ForwardTrace<Real>::Step step;
      step.layer = li;
      for (const int target = layer_block(layer.name); block < target; ++block) {
        Tensor<std::int32_t> argmax;
        step.pool_input_sizes.emplace_back(x.height(), x.width());
        x = max_pool(x, argmax);
        step.pool_argmax.push_back(std::move(argmax));
      }
      x = conv2d<Real, Real>(x, layer.out_channels, layer.in_channels, 3, 3, weights_[li], biases_[li]);
      for (Real& v : x.data()) v = v > Real(0) ? v : Real(0);
      if (wanted.count(layer.name)) out.features.emplace(layer.name, x);
      step.activation = x;
      out.steps.push_back(std::move(step));
    }
    return out;
  }

  FeatureStack<Real> forward(const Image& image, const std::set<std::string>& wanted) const {
    return trace(image, wanted).features;
  }

  /// dLoss/dImage given dLoss/dActivation at some traced layers.
  Image backward(const ForwardTrace<Real>& tr, const LayerGrads<Real>& grads) const {
    for (const auto& [name, g] : grads) {
      const auto it = tr.features.find(name);
      if (it == tr.features.end()) throw ConfigError("backward: no forward activation for layer '" + name + "'");
      if (!g.same_shape(it->second)) throw ConfigError("backward: gradient shape mismatch at layer '" + name + "'");
    }
    Image out(3, tr.image_height, tr.image_width);
    if (tr.steps.empty()) return out;

    Tensor<Real> g;  // gradient w.r.t. the activation of the current step
    for (auto step = tr.steps.rbegin(); step != tr.steps.rend(); ++step) {
      const ConvLayer& layer = bank_.layers[step->layer];
      if (g.empty()) g = Tensor<Real>(step->activation.channels(), step->activation.height(), step->activation.width());
      if (const auto it = grads.find(layer.name); it != grads.end()) {
        auto& gd = g.data();
        const auto& add = it->second.data();
        for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += add[i];
      }
      const auto& act = step->activation.data();
      auto& gd = g.data();
      for (std::size_t i = 0; i < gd.size(); ++i) {
        if (!(act[i] > Real(0))) gd[i] = Real(0);
      }
      g = conv2d_input_grad<Real>(g, layer.in_channels, 3, 3, weights_[step->layer]);
      for (std::size_t k = step->pool_argmax.size(); k-- > 0;) {
        const auto [ph, pw] = step->pool_input_sizes[k];
        g = max_unpool(g, step->pool_argmax[k], ph, pw);
      }
    }
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = 255.0 * static_cast<double>(g.data()[i]);
    return out;
  }

 private:
  WeightBank bank_;
  std::vector<std::vector<Real>> weights_;
  std::vector<std::vector<Real>> biases_;
};

template <typename Real = float>
FeatureStack<Real> forward(const Image& image, const WeightBank& bank, const std::set<std::string>& wanted) {
  return Backbone<Real>(bank).forward(image, wanted);
}

template <typename Real = float>
Image backward(const Image& image, const WeightBank& bank, const LayerGrads<Real>& grads) {
  Backbone<Real> net(bank);
  std::set<std::string> wanted;
  for (const auto& [name, g] : grads) wanted.insert(name);
  return net.backward(net.trace(image, wanted), grads);
}

}  // namespace painterly
