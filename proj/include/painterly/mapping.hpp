#pragma once

// Input-to-style correspondence fields over neural patches: per-layer
// independent nearest neighbours (first pass) and the reference-layer,
// spatially cleaned, cross-layer propagated variant (second pass).

#include <array>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "painterly/backbone.hpp"
#include "painterly/errors.hpp"
#include "painterly/tensor.hpp"

namespace painterly {

/// Width/height of one layer's spatial grid.
struct Grid {
  int height = 0;
  int width = 0;

  int size() const { return height * width; }
  int index(int x, int y) const { return y * width + x; }
  int x_of(int p) const { return p % width; }
  int y_of(int p) const { return p / width; }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
  friend bool operator==(const Grid&, const Grid&) = default;
};

template <typename T>
Grid grid_of(const Tensor<T>& t) {
  return {t.height(), t.width()};
}

inline constexpr std::int32_t kUnmapped = -1;

/// One layer of P: input patch index -> style patch index, kUnmapped outside
/// the resized mask.
struct LayerMapping {
  Grid input;
  Grid style;
  std::vector<std::int32_t> target;

  bool mapped(int p) const { return target[static_cast<std::size_t>(p)] != kUnmapped; }
  std::size_t mapped_count() const {
    std::size_t n = 0;
    for (auto t : target) n += t != kUnmapped;
    return n;
  }
  friend bool operator==(const LayerMapping&, const LayerMapping&) = default;
};

struct MappingField {
  std::map<std::string, LayerMapping> layers;
  std::string reference_layer;

  const LayerMapping& at(const std::string& layer) const {
    const auto it = layers.find(layer);
    if (it == layers.end()) throw ConfigError("mapping has no layer '" + layer + "'");
    return it->second;
  }
  friend bool operator==(const MappingField&, const MappingField&) = default;
};

/// Mask at a layer grid of size floor(H/f) x floor(W/f): a cell is inside when
/// at least half of its f x f pixels are.
inline Mask resize_mask(const Mask& mask, int downsample) {
  if (downsample < 1) throw ConfigError("resize_mask: downsample must be >= 1");
  const int h = mask.height() / downsample, w = mask.width() / downsample;
  Mask out = make_mask(h, w);
  const int cell = downsample * downsample;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int covered = 0;
      for (int dy = 0; dy < downsample; ++dy) {
        for (int dx = 0; dx < downsample; ++dx) covered += mask(0, y * downsample + dy, x * downsample + dx) != 0;
      }
      out(0, y, x) = 2 * covered >= cell ? 1 : 0;
    }
  }
  return out;
}

inline Mask resize_mask(const Mask& mask, std::string_view layer) {
  return resize_mask(mask, layer_downsample(layer));
}

/// Row p holds the zero-padded 3x3 neighbourhood of location p across all
/// filters, laid out as [(dy, dx) row-major][filter].
template <typename Real>
struct PatchMatrix {
  int rows = 0;
  int dim = 0;
  std::vector<Real> data;

  std::span<const Real> row(int p) const {
    return {data.data() + static_cast<std::size_t>(p) * dim, static_cast<std::size_t>(dim)};
  }
};

template <typename Real>
PatchMatrix<Real> extract_patches(const Tensor<Real>& features) {
  const int n = features.channels(), h = features.height(), w = features.width();
  PatchMatrix<Real> m;
  m.rows = h * w;
  m.dim = 9 * n;
  m.data.assign(static_cast<std::size_t>(m.rows) * m.dim, Real(0));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      Real* row = m.data.data() + static_cast<std::size_t>(y * w + x) * m.dim;
      for (int k = 0; k < 9; ++k) {
        const int yy = y + k / 3 - 1, xx = x + k % 3 - 1;
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
        for (int c = 0; c < n; ++c) row[k * n + c] = features(c, yy, xx);
      }
    }
  }
  return m;
}

struct Neighbor {
  int index = -1;
  double distance = 0.0;
};

/// Exhaustive squared-L2 search; lowest index wins ties.
template <typename Real>
Neighbor nearest_neighbor(std::span<const Real> query, const PatchMatrix<Real>& candidates) {
  if (candidates.rows == 0) throw ConfigError("nearest_neighbor: empty candidate set");
  if (static_cast<int>(query.size()) != candidates.dim) throw ConfigError("nearest_neighbor: dimension mismatch");
  Neighbor best{-1, std::numeric_limits<double>::infinity()};
  for (int i = 0; i < candidates.rows; ++i) {
    const auto row = candidates.row(i);
    double d = 0.0;
    for (int k = 0; k < candidates.dim && d < best.distance; ++k) {
      const double diff = static_cast<double>(query[static_cast<std::size_t>(k)]) - static_cast<double>(row[static_cast<std::size_t>(k)]);
      d += diff * diff;
    }
    if (d < best.distance) best = {i, d};
  }
  return best;
}

namespace detail {

template <typename Real>
LayerMapping match_layer(const std::string& layer, const Tensor<Real>& input, const Mask& mask,
                         const Tensor<Real>& style) {
  if (input.channels() != style.channels()) throw ConfigError("mapping: channel mismatch at layer '" + layer + "'");
  if (style.plane_size() == 0) throw ConfigError("mapping: no style patches at layer '" + layer + "'");
  const Mask inside = resize_mask(mask, layer);
  if (inside.height() != input.height() || inside.width() != input.width()) {
    throw ConfigError("mapping: mask does not match input features at layer '" + layer + "'");
  }
  const auto in_patches = extract_patches(input);
  const auto style_patches = extract_patches(style);
  LayerMapping out{grid_of(input), grid_of(style), std::vector<std::int32_t>(input.plane_size(), kUnmapped)};
  for (int p = 0; p < out.input.size(); ++p) {
    if (!inside.data()[static_cast<std::size_t>(p)]) continue;
    out.target[static_cast<std::size_t>(p)] = nearest_neighbor(in_patches.row(p), style_patches).index;
  }
  return out;
}

template <typename Real>
void check_same_layers(const FeatureStack<Real>& input, const FeatureStack<Real>& style) {
  if (input.size() != style.size()) throw ConfigError("mapping: input and style stacks differ in layers");
  for (const auto& [name, f] : input) {
    if (!style.count(name)) throw ConfigError("mapping: style stack lacks layer '" + name + "'");
  }
}

}  // namespace detail

/// Every in-mask patch of every layer gets its nearest style patch at that
/// layer; layers do not interact.
template <typename Real>
MappingField independent_mapping(const FeatureStack<Real>& input, const Mask& mask, const FeatureStack<Real>& style) {
  detail::check_same_layers(input, style);
  MappingField field;
  for (const auto& [name, f] : input) field.layers.emplace(name, detail::match_layer(name, f, mask, style.at(name)));
  return field;
}

/// Neighbour offsets in candidate order: N, NE, E, SE, S, SW, W, NW.
inline constexpr std::array<std::array<int, 2>, 8> kNeighborOffsets = {
    {{0, -1}, {1, -1}, {1, 0}, {1, 1}, {0, 1}, {-1, 1}, {-1, 0}, {-1, -1}}};

/// One outlier-removal sweep. Candidates are the current match plus each
/// in-mask neighbour's match shifted back by the neighbour offset; the winner
/// minimizes the summed squared activation distance to the neighbours'
/// matches. Reads the input field only, so visiting order is irrelevant.
template <typename Real>
LayerMapping spatial_consistency(const LayerMapping& mapping, const Tensor<Real>& style) {
  if (grid_of(style) != mapping.style) throw ConfigError("spatial_consistency: style grid mismatch");
  const int n = style.channels();
  const auto sq_dist = [&](int a, int b) {
    double d = 0.0;
    const auto ax = mapping.style.x_of(a), ay = mapping.style.y_of(a);
    const auto bx = mapping.style.x_of(b), by = mapping.style.y_of(b);
    for (int c = 0; c < n; ++c) {
      const double diff = static_cast<double>(style(c, ay, ax)) - static_cast<double>(style(c, by, bx));
      d += diff * diff;
    }
    return d;
  };

  LayerMapping out = mapping;
  const Grid& g = mapping.input;
  std::vector<int> candidates;
  std::vector<int> neighbor_matches;
  for (int p = 0; p < g.size(); ++p) {
    if (!mapping.mapped(p)) continue;
    const int x = g.x_of(p), y = g.y_of(p);
    candidates.assign(1, mapping.target[static_cast<std::size_t>(p)]);
    neighbor_matches.clear();
    for (const auto& [ox, oy] : kNeighborOffsets) {
      if (!g.contains(x + ox, y + oy)) continue;
      const int neighbor = g.index(x + ox, y + oy);
      if (!mapping.mapped(neighbor)) continue;
      const int q = mapping.target[static_cast<std::size_t>(neighbor)];
      neighbor_matches.push_back(q);
      const int cx = mapping.style.x_of(q) - ox, cy = mapping.style.y_of(q) - oy;
      if (mapping.style.contains(cx, cy)) candidates.push_back(mapping.style.index(cx, cy));
    }
    int best = candidates.front();
    double best_cost = std::numeric_limits<double>::infinity();
    for (int c : candidates) {
      double cost = 0.0;
      for (int q : neighbor_matches) cost += sq_dist(c, q);
      if (cost < best_cost) {
        best_cost = cost;
        best = c;
      }
    }
    out.target[static_cast<std::size_t>(p)] = best;
  }
  return out;
}

/// Maps a flat index between layer grids by scaling each coordinate and
/// clamping to the destination grid.
inline int change_resolution(const Grid& from, const Grid& to, int p) {
  const long long x = from.x_of(p), y = from.y_of(p);
  const int tx = static_cast<int>(std::clamp<long long>(x * to.width / from.width, 0, to.width - 1));
  const int ty = static_cast<int>(std::clamp<long long>(y * to.height / from.height, 0, to.height - 1));
  return to.index(tx, ty);
}

/// Matches at the reference layer only, cleaned by spatial_consistency, then
/// copied to every other layer so that all layers of one output location read
/// style activations from a single style location.
template <typename Real>
MappingField consistent_mapping(const FeatureStack<Real>& input, const Mask& mask, const FeatureStack<Real>& style,
                                const std::string& reference_layer) {
  detail::check_same_layers(input, style);
  if (!input.count(reference_layer)) throw ConfigError("consistent_mapping: reference layer '" + reference_layer + "' missing");
  const auto& in_ref = input.at(reference_layer);
  const auto& style_ref = style.at(reference_layer);

  MappingField field;
  field.reference_layer = reference_layer;
  const LayerMapping raw = detail::match_layer(reference_layer, in_ref, mask, style_ref);
  const LayerMapping ref = spatial_consistency(raw, style_ref);
  field.layers.emplace(reference_layer, ref);

  // Locations of other layers may fall on reference cells outside the resized
  // mask; those get a plain nearest-neighbour match computed on demand.
  std::optional<PatchMatrix<Real>> in_patches, style_patches;
  std::unordered_map<int, int> extra;
  const auto ref_match = [&](int p) {
    if (ref.mapped(p)) return static_cast<int>(ref.target[static_cast<std::size_t>(p)]);
    if (const auto it = extra.find(p); it != extra.end()) return it->second;
    if (!in_patches) {
      in_patches = extract_patches(in_ref);
      style_patches = extract_patches(style_ref);
    }
    const int q = nearest_neighbor(in_patches->row(p), *style_patches).index;
    extra.emplace(p, q);
    return q;
  };

  for (const auto& [name, f] : input) {
    if (name == reference_layer) continue;
    const Mask inside = resize_mask(mask, name);
    LayerMapping m{grid_of(f), grid_of(style.at(name)), std::vector<std::int32_t>(f.plane_size(), kUnmapped)};
    for (int p = 0; p < m.input.size(); ++p) {
      if (!inside.data()[static_cast<std::size_t>(p)]) continue;
      const int p_ref = change_resolution(m.input, ref.input, p);
      const int q_ref = ref_match(p_ref);
      const int base = change_resolution(ref.style, m.style, q_ref);
      // keep the position of p inside its reference cell
      const int corner = change_resolution(ref.input, m.input, p_ref);
      const int x = std::clamp(m.style.x_of(base) + m.input.x_of(p) - m.input.x_of(corner), 0, m.style.width - 1);
      const int y = std::clamp(m.style.y_of(base) + m.input.y_of(p) - m.input.y_of(corner), 0, m.style.height - 1);
      m.target[static_cast<std::size_t>(p)] = m.style.index(x, y);
    }
    field.layers.emplace(name, std::move(m));
  }
  return field;
}

/// Debug dump: reference layer plus (layer, p, q) triples.
inline nlohmann::json mapping_to_json(const MappingField& field) {
  nlohmann::json j;
  j["reference_layer"] = field.reference_layer;
  auto& layers = j["layers"] = nlohmann::json::object();
  auto& matches = j["matches"] = nlohmann::json::array();
  for (const auto& [name, m] : field.layers) {
    layers[name] = {{"input_size", {m.input.height, m.input.width}}, {"style_size", {m.style.height, m.style.width}}};
    for (int p = 0; p < m.input.size(); ++p) {
      if (m.mapped(p)) matches.push_back({name, p, m.target[static_cast<std::size_t>(p)]});
    }
  }
  return j;
}

}  // namespace painterly
