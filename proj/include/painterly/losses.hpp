#pragma once

// Reconstruction losses on backbone activations and their gradients: content,
// Gram style (all or unique mapped vectors), histogram and total variation.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "painterly/backbone.hpp"
#include "painterly/errors.hpp"
#include "painterly/mapping.hpp"
#include "painterly/tensor.hpp"

namespace painterly {

using LayerWeights = std::map<std::string, double>;

struct LossConfig {
  LayerWeights content;    // alpha per layer
  LayerWeights style;      // beta per layer
  LayerWeights histogram;  // gamma per layer
  double style_weight = 1.0;
  double histogram_weight = 0.0;
  double tv_weight = 0.0;
  double tau = 1.0;  // estimator output the weights were derived from
  /// Divide Gram matrices by their vector count (in-mask count for the output,
  /// gathered count for the target).
  bool normalize_gram = true;

  void validate() const {
    for (const auto* m : {&content, &style, &histogram}) {
      for (const auto& [name, w] : *m) {
        if (!(w >= 0.0)) throw ConfigError("negative layer weight on '" + name + "'");
        layer_block(name);
      }
    }
    if (!(style_weight >= 0.0 && histogram_weight >= 0.0 && tv_weight >= 0.0)) {
      throw ConfigError("loss weights must be non-negative");
    }
  }

  std::set<std::string> layers() const {
    std::set<std::string> out;
    for (const auto* m : {&content, &style, &histogram}) {
      for (const auto& [name, w] : *m) out.insert(name);
    }
    return out;
  }
};

enum class TargetMode { all, unique };

/// Row-major N x N product F * F^T of a row-major N x D matrix.
template <typename Real>
std::vector<double> gram(std::span<const Real> f, int n, int d) {
  std::vector<double> g(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) {
    const Real* fi = f.data() + static_cast<std::size_t>(i) * d;
    for (int j = i; j < n; ++j) {
      const Real* fj = f.data() + static_cast<std::size_t>(j) * d;
      double s = 0.0;
      for (int k = 0; k < d; ++k) s += static_cast<double>(fi[k]) * static_cast<double>(fj[k]);
      g[static_cast<std::size_t>(i) * n + j] = s;
      g[static_cast<std::size_t>(j) * n + i] = s;
    }
  }
  return g;
}

/// Activation vectors at the in-mask locations, as an N x D' row-major matrix.
template <typename Real>
std::vector<double> gather_masked(const Tensor<Real>& f, const Mask& mask) {
  std::vector<int> positions;
  for (std::size_t p = 0; p < mask.size(); ++p) {
    if (mask.data()[p]) positions.push_back(static_cast<int>(p));
  }
  std::vector<double> out(static_cast<std::size_t>(f.channels()) * positions.size());
  for (int c = 0; c < f.channels(); ++c) {
    const auto plane = f.plane(c);
    for (std::size_t k = 0; k < positions.size(); ++k) {
      out[c * positions.size() + k] = static_cast<double>(plane[static_cast<std::size_t>(positions[k])]);
    }
  }
  return out;
}

struct GramTarget {
  int channels = 0;
  std::size_t count = 0;
  std::vector<double> gram;  // N x N, already divided by count when normalized
};

struct HistogramTarget {
  std::vector<std::vector<double>> sorted;  // per channel, ascending
};

/// Statistics gathered from the mapped style activations.
struct StyleTargets {
  std::map<std::string, GramTarget> gram;
  std::map<std::string, HistogramTarget> histogram;
};

/// Gram targets use every mapped style vector (mode all) or each distinct
/// style index once, first occurrence in patch order (mode unique). Histogram
/// targets always use the full mapped multiset.
template <typename Real>
StyleTargets build_style_targets(const FeatureStack<Real>& style, const MappingField& mapping, TargetMode mode,
                                 bool normalize = true) {
  StyleTargets out;
  for (const auto& [name, m] : mapping.layers) {
    const auto it = style.find(name);
    if (it == style.end()) throw ConfigError("build_style_targets: style features lack layer '" + name + "'");
    const Tensor<Real>& f = it->second;
    if (grid_of(f) != m.style) throw ConfigError("build_style_targets: style grid mismatch at '" + name + "'");

    std::vector<int> all, chosen;
    std::vector<char> seen(f.plane_size(), 0);
    for (auto q : m.target) {
      if (q == kUnmapped) continue;
      all.push_back(q);
      if (mode == TargetMode::all || !seen[static_cast<std::size_t>(q)]) chosen.push_back(q);
      seen[static_cast<std::size_t>(q)] = 1;
    }
    const int n = f.channels();
    const auto d = static_cast<int>(chosen.size());
    std::vector<double> vectors(static_cast<std::size_t>(n) * chosen.size());
    for (int c = 0; c < n; ++c) {
      const auto plane = f.plane(c);
      for (int k = 0; k < d; ++k) vectors[static_cast<std::size_t>(c) * d + k] = plane[static_cast<std::size_t>(chosen[k])];
    }
    GramTarget g{n, chosen.size(), gram<double>(vectors, n, d)};
    if (normalize && g.count > 0) {
      for (double& v : g.gram) v /= static_cast<double>(g.count);
    }
    out.gram.emplace(name, std::move(g));

    HistogramTarget h;
    h.sorted.resize(static_cast<std::size_t>(n));
    for (int c = 0; c < n; ++c) {
      const auto plane = f.plane(c);
      auto& values = h.sorted[static_cast<std::size_t>(c)];
      values.reserve(all.size());
      for (int q : all) values.push_back(static_cast<double>(plane[static_cast<std::size_t>(q)]));
      std::sort(values.begin(), values.end());
    }
    out.histogram.emplace(name, std::move(h));
  }
  return out;
}

/// CDF matching: each value v becomes the style order statistic at quantile
/// #{values <= v} / n.
inline std::vector<double> histmatch(std::span<const double> values, std::span<const double> style_sorted) {
  if (values.empty() || style_sorted.empty()) throw ConfigError("histmatch: empty value list");
  const std::size_t n = values.size(), m = style_sorted.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> out(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && values[order[j]] == values[order[i]]) ++j;
    // j values are <= this one
    const std::size_t rank = (j * m + n - 1) / n - 1;
    for (std::size_t k = i; k < j; ++k) out[order[k]] = style_sorted[rank];
    i = j;
  }
  return out;
}

inline std::vector<double> histmatch(std::span<const double> values, std::vector<double> style_values) {
  std::sort(style_values.begin(), style_values.end());
  return histmatch(values, std::span<const double>(style_values));
}

template <typename Real>
struct LossTerm {
  double value = 0.0;
  LayerGrads<Real> grads;
};

namespace detail {

template <typename Real>
const Mask& layer_mask(const std::map<std::string, Mask>& masks, const std::string& name, const Tensor<Real>& f) {
  const auto it = masks.find(name);
  if (it == masks.end()) throw ConfigError("no mask for layer '" + name + "'");
  if (it->second.height() != f.height() || it->second.width() != f.width()) {
    throw ConfigError("mask shape mismatch at layer '" + name + "'");
  }
  return it->second;
}

template <typename Real>
const Tensor<Real>& layer_features(const FeatureStack<Real>& f, const std::string& name) {
  const auto it = f.find(name);
  if (it == f.end()) throw ConfigError("no activations for layer '" + name + "'");
  return it->second;
}

template <typename Real>
Tensor<Real>& grad_slot(LayerGrads<Real>& grads, const std::string& name, const Tensor<Real>& like) {
  auto it = grads.find(name);
  if (it == grads.end()) it = grads.emplace(name, Tensor<Real>(like.channels(), like.height(), like.width())).first;
  return it->second;
}

}  // namespace detail

/// sum_l alpha_l / (2 N_l D'_l) * sum_in-mask (F[O] - F[I])^2
template <typename Real>
LossTerm<Real> content_loss_and_grad(const FeatureStack<Real>& output, const FeatureStack<Real>& target,
                                     const LayerWeights& alpha, const std::map<std::string, Mask>& masks) {
  LossTerm<Real> out;
  for (const auto& [name, a] : alpha) {
    if (a == 0.0) continue;
    const auto& fo = detail::layer_features(output, name);
    const auto& fi = detail::layer_features(target, name);
    if (!fo.same_shape(fi)) throw ConfigError("content loss: shape mismatch at '" + name + "'");
    const Mask& mask = detail::layer_mask(masks, name, fo);
    const std::size_t inside = mask_count(mask);
    if (inside == 0) throw ConfigError("content loss: empty mask at layer '" + name + "'");
    const double scale = a / (static_cast<double>(fo.channels()) * static_cast<double>(inside));
    auto& g = detail::grad_slot(out.grads, name, fo);
    double sum = 0.0;
    for (int c = 0; c < fo.channels(); ++c) {
      const auto o = fo.plane(c);
      const auto t = fi.plane(c);
      auto gp = g.plane(c);
      for (std::size_t p = 0; p < o.size(); ++p) {
        if (!mask.data()[p]) continue;
        const double diff = static_cast<double>(o[p]) - static_cast<double>(t[p]);
        sum += diff * diff;
        gp[p] += static_cast<Real>(scale * diff);
      }
    }
    out.value += 0.5 * scale * sum;
  }
  return out;
}

/// sum_l beta_l / (2 N_l^2) * ||G_l[O] - G_target||_F^2 with G_l[O] built from
/// the in-mask output activations.
template <typename Real>
LossTerm<Real> style_loss_gram(const FeatureStack<Real>& output, const std::map<std::string, GramTarget>& targets,
                               const LayerWeights& beta, const std::map<std::string, Mask>& masks,
                               bool normalize = true) {
  LossTerm<Real> out;
  for (const auto& [name, b] : beta) {
    if (b == 0.0) continue;
    const auto& fo = detail::layer_features(output, name);
    const auto it = targets.find(name);
    if (it == targets.end()) throw ConfigError("style loss: no target for layer '" + name + "'");
    const GramTarget& target = it->second;
    const int n = fo.channels();
    if (target.channels != n) throw ConfigError("style loss: channel mismatch at '" + name + "'");
    if (target.count == 0) throw ConfigError("style loss: empty style target at '" + name + "'");
    const Mask& mask = detail::layer_mask(masks, name, fo);
    const auto inside = static_cast<int>(mask_count(mask));
    if (inside == 0) throw ConfigError("style loss: empty mask at layer '" + name + "'");

    const auto f = gather_masked(fo, mask);
    auto g = gram<double>(f, n, inside);
    const double norm = normalize ? static_cast<double>(inside) : 1.0;
    double sum = 0.0;
    for (std::size_t k = 0; k < g.size(); ++k) {
      g[k] = g[k] / norm - target.gram[k];  // g now holds the residual
      sum += g[k] * g[k];
    }
    const double nn = static_cast<double>(n) * n;
    out.value += b / (2.0 * nn) * sum;

    // dL/dF = 2 beta / (N^2 norm) * (G - T) F
    const double scale = 2.0 * b / (nn * norm);
    auto& grad = detail::grad_slot(out.grads, name, fo);
    std::vector<double> row(static_cast<std::size_t>(inside));
    for (int i = 0; i < n; ++i) {
      std::fill(row.begin(), row.end(), 0.0);
      for (int j = 0; j < n; ++j) {
        const double r = g[static_cast<std::size_t>(i) * n + j];
        if (r == 0.0) continue;
        const double* fj = f.data() + static_cast<std::size_t>(j) * inside;
        for (int k = 0; k < inside; ++k) row[static_cast<std::size_t>(k)] += r * fj[k];
      }
      auto gp = grad.plane(i);
      int k = 0;
      for (std::size_t p = 0; p < mask.size(); ++p) {
        if (mask.data()[p]) gp[p] += static_cast<Real>(scale * row[static_cast<std::size_t>(k++)]);
      }
    }
  }
  return out;
}

/// sum_l gamma_l * sum_in-mask (F[O] - R[O])^2 with the remap R held fixed for
/// the gradient.
template <typename Real>
LossTerm<Real> histogram_loss_and_grad(const FeatureStack<Real>& output,
                                       const std::map<std::string, HistogramTarget>& targets,
                                       const LayerWeights& gamma, const std::map<std::string, Mask>& masks) {
  LossTerm<Real> out;
  for (const auto& [name, w] : gamma) {
    if (w == 0.0) continue;
    const auto& fo = detail::layer_features(output, name);
    const auto it = targets.find(name);
    if (it == targets.end()) throw ConfigError("histogram loss: no target for layer '" + name + "'");
    if (static_cast<int>(it->second.sorted.size()) != fo.channels()) {
      throw ConfigError("histogram loss: channel mismatch at '" + name + "'");
    }
    const Mask& mask = detail::layer_mask(masks, name, fo);
    if (mask_count(mask) == 0) throw ConfigError("histogram loss: empty mask at layer '" + name + "'");
    auto& grad = detail::grad_slot(out.grads, name, fo);
    std::vector<double> values;
    for (int c = 0; c < fo.channels(); ++c) {
      const auto plane = fo.plane(c);
      values.clear();
      for (std::size_t p = 0; p < plane.size(); ++p) {
        if (mask.data()[p]) values.push_back(static_cast<double>(plane[p]));
      }
      const auto remap = histmatch(values, std::span<const double>(it->second.sorted[static_cast<std::size_t>(c)]));
      auto gp = grad.plane(c);
      std::size_t k = 0;
      for (std::size_t p = 0; p < plane.size(); ++p) {
        if (!mask.data()[p]) continue;
        const double diff = values[k] - remap[k];
        out.value += w * diff * diff;
        gp[p] += static_cast<Real>(2.0 * w * diff);
        ++k;
      }
    }
  }
  return out;
}

/// Squared differences between vertical and horizontal neighbour pairs whose
/// two pixels both lie in `region`, summed over channels.
inline double tv_loss_and_grad(const Image& image, const Mask& region, Image* grad = nullptr) {
  if (region.height() != image.height() || region.width() != image.width()) {
    throw ConfigError("tv loss: region shape mismatch");
  }
  if (grad) *grad = Image(image.channels(), image.height(), image.width());
  const int h = image.height(), w = image.width();
  double sum = 0.0;
  for (int c = 0; c < image.channels(); ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (!region(0, y, x)) continue;
        const double v = image(c, y, x);
        if (y > 0 && region(0, y - 1, x)) {
          const double d = v - image(c, y - 1, x);
          sum += d * d;
          if (grad) {
            (*grad)(c, y, x) += 2.0 * d;
            (*grad)(c, y - 1, x) -= 2.0 * d;
          }
        }
        if (x > 0 && region(0, y, x - 1)) {
          const double d = v - image(c, y, x - 1);
          sum += d * d;
          if (grad) {
            (*grad)(c, y, x) += 2.0 * d;
            (*grad)(c, y, x - 1) -= 2.0 * d;
          }
        }
      }
    }
  }
  return sum;
}

// ---------------------------------------------------------------------------
// Composed objective.

/// Everything a pass's loss compares the output against.
template <typename Real>
struct ReconstructionTargets {
  std::map<std::string, Mask> masks;  // resized element mask per layer
  FeatureStack<Real> content;         // F[I]
  StyleTargets style;
};

enum class Pass { first = 1, second = 2 };

struct LossBreakdown {
  double content = 0.0;
  double style = 0.0;
  double histogram = 0.0;
  double tv = 0.0;
  double total = 0.0;
};

/// Pass 1: L_c + w_s L_s. Pass 2: L_c + w_s L_s1 + w_hist L_hist + w_tv L_tv.
/// The style term's flavour is decided by how the targets were built.
template <typename Real>
LossBreakdown total_loss(const Image& output, Pass pass, const ReconstructionTargets<Real>& targets,
                         const LossConfig& config, const Backbone<Real>& net, const Mask& tv_region,
                         Image* grad = nullptr) {
  std::set<std::string> wanted;
  for (const auto& [name, a] : config.content) wanted.insert(name);
  for (const auto& [name, b] : config.style) wanted.insert(name);
  if (pass == Pass::second) {
    for (const auto& [name, g] : config.histogram) wanted.insert(name);
  }
  const auto trace = net.trace(output, wanted);
  const auto& fo = trace.features;

  LossBreakdown out;
  LayerGrads<Real> grads;
  const auto accumulate = [&grads](LayerGrads<Real>&& g, double weight) {
    for (auto& [name, t] : g) {
      auto& slot = detail::grad_slot(grads, name, t);
      for (std::size_t i = 0; i < t.size(); ++i) slot.data()[i] += static_cast<Real>(weight) * t.data()[i];
    }
  };

  auto content = content_loss_and_grad(fo, targets.content, config.content, targets.masks);
  out.content = content.value;
  accumulate(std::move(content.grads), 1.0);

  if (config.style_weight != 0.0) {
    auto style = style_loss_gram(fo, targets.style.gram, config.style, targets.masks, config.normalize_gram);
    out.style = style.value;
    accumulate(std::move(style.grads), config.style_weight);
  }
  Image tv_grad;
  if (pass == Pass::second) {
    if (config.histogram_weight != 0.0) {
      auto hist = histogram_loss_and_grad(fo, targets.style.histogram, config.histogram, targets.masks);
      out.histogram = hist.value;
      accumulate(std::move(hist.grads), config.histogram_weight);
    }
    if (config.tv_weight != 0.0) out.tv = tv_loss_and_grad(output, tv_region, grad ? &tv_grad : nullptr);
  }
  out.total = out.content + config.style_weight * out.style;
  if (pass == Pass::second) out.total += config.histogram_weight * out.histogram + config.tv_weight * out.tv;

  if (grad) {
    *grad = net.backward(trace, grads);
    if (!tv_grad.empty()) {
      for (std::size_t i = 0; i < grad->size(); ++i) grad->data()[i] += config.tv_weight * tv_grad.data()[i];
    }
  }
  return out;
}

}  // namespace painterly
