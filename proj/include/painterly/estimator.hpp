#pragma once

// Painting estimator tail: style-class probabilities -> (w_s, w_hist) by
// linear interpolation over the strength table, and w_tv from the painting's
// median total variation.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "painterly/errors.hpp"
#include "painterly/tensor.hpp"

namespace painterly {

enum class Strength { weak, medium, strong };

inline std::string to_string(Strength s) {
  switch (s) {
    case Strength::weak: return "Weak";
    case Strength::medium: return "Medium";
    case Strength::strong: return "Strong";
  }
  return "?";
}

inline Strength parse_strength(const std::string& s) {
  if (s == "Weak") return Strength::weak;
  if (s == "Medium") return Strength::medium;
  if (s == "Strong") return Strength::strong;
  throw FormatError("unknown strength class '" + s + "'");
}

/// (w_s, w_hist) attached to a strength class.
inline std::pair<double, double> strength_weights(Strength s) {
  switch (s) {
    case Strength::weak: return {1.0, 1.0};
    case Strength::medium: return {5.0, 5.0};
    case Strength::strong: return {10.0, 10.0};
  }
  return {0.0, 0.0};
}

struct StyleCategory {
  std::string name;
  Strength strength = Strength::medium;
  double style_weight = 5.0;
  double histogram_weight = 5.0;
  bool assumed = false;  // class not published, filled with the Medium default
};

inline constexpr std::size_t kStyleCount = 18;

class StyleCategoryTable {
 public:
  StyleCategoryTable() = default;
  explicit StyleCategoryTable(std::vector<StyleCategory> entries) : entries_(std::move(entries)) { validate(); }

  /// The 18 most common wikiart styles. Only Baroque, High Renaissance,
  /// Abstract Art, Post-Impressionism, Cubism and Expressionism have
  /// published classes; the rest default to Medium.
  static StyleCategoryTable builtin() {
    const std::map<std::string, Strength> published = {
        {"Baroque", Strength::weak},          {"High Renaissance", Strength::weak},
        {"Abstract Art", Strength::medium},   {"Post-Impressionism", Strength::medium},
        {"Cubism", Strength::strong},         {"Expressionism", Strength::strong}};
    const std::vector<std::string> names = {
        "Abstract Art",        "Abstract Expressionism", "Art Nouveau (Modern)",
        "Baroque",             "Color Field Painting",   "Cubism",
        "Early Renaissance",   "Expressionism",          "High Renaissance",
        "Impressionism",       "Mannerism (Late Renaissance)", "Naive Art (Primitivism)",
        "Northern Renaissance", "Post-Impressionism",    "Realism",
        "Surrealism",          "Symbolism",              "Ukiyo-e"};
    std::vector<StyleCategory> entries;
    for (const auto& name : names) {
      const auto it = published.find(name);
      const Strength s = it == published.end() ? Strength::medium : it->second;
      const auto [ws, wh] = strength_weights(s);
      entries.push_back({name, s, ws, wh, it == published.end()});
    }
    return StyleCategoryTable(std::move(entries));
  }

  const std::vector<StyleCategory>& entries() const { return entries_; }

  const StyleCategory& at(const std::string& name) const {
    for (const auto& e : entries_) {
      if (e.name == name) return e;
    }
    throw ConfigError("unknown style '" + name + "'");
  }

  void validate() const {
    if (entries_.size() != kStyleCount) {
      throw FormatError("style table must list " + std::to_string(kStyleCount) + " styles, got " +
                        std::to_string(entries_.size()));
    }
    std::set<std::string> seen;
    for (const auto& e : entries_) {
      if (!seen.insert(e.name).second) throw FormatError("duplicate style '" + e.name + "'");
      const auto [ws, wh] = strength_weights(e.strength);
      if (e.style_weight != ws || e.histogram_weight != wh) {
        throw FormatError("style '" + e.name + "': weights do not match class " + to_string(e.strength));
      }
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    auto& styles = j["styles"] = nlohmann::json::array();
    for (const auto& e : entries_) {
      styles.push_back({{"name", e.name},
                        {"class", to_string(e.strength)},
                        {"weights", {e.style_weight, e.histogram_weight}},
                        {"default", e.assumed}});
    }
    return j;
  }

  static StyleCategoryTable from_json(const nlohmann::json& j) {
    try {
      std::vector<StyleCategory> entries;
      for (const auto& s : j.at("styles")) {
        StyleCategory e;
        e.name = s.at("name").get<std::string>();
        e.strength = parse_strength(s.at("class").get<std::string>());
        const auto& w = s.at("weights");
        if (!w.is_array() || w.size() != 2) throw FormatError("style '" + e.name + "': weights must be a pair");
        e.style_weight = w[0].get<double>();
        e.histogram_weight = w[1].get<double>();
        e.assumed = s.value("default", false);
        entries.push_back(std::move(e));
      }
      return StyleCategoryTable(std::move(entries));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("style table: ") + e.what());
    }
  }

 private:
  std::vector<StyleCategory> entries_;
};

/// Softmax output of the style classifier keyed by style name.
struct StyleProbs {
  std::map<std::string, double> probs;

  static StyleProbs one_hot(const std::string& style) { return {{{style, 1.0}}}; }

  static StyleProbs uniform(const StyleCategoryTable& table) {
    StyleProbs p;
    for (const auto& e : table.entries()) p.probs[e.name] = 1.0 / static_cast<double>(table.entries().size());
    return p;
  }

  /// {"styles": {"Cubism": 0.7, ...}}; absent styles count as 0.
  static StyleProbs from_json(const nlohmann::json& j) {
    try {
      StyleProbs p;
      for (const auto& [name, v] : j.at("styles").items()) p.probs[name] = v.get<double>();
      return p;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("style probabilities: ") + e.what());
    }
  }

  void validate(const StyleCategoryTable& table) const {
    double sum = 0.0;
    for (const auto& [name, p] : probs) {
      table.at(name);
      if (!(p >= 0.0)) throw ConfigError("negative probability for style '" + name + "'");
      sum += p;
    }
    if (std::abs(sum - 1.0) >= 1e-6) throw ConfigError("style probabilities sum to " + std::to_string(sum));
  }
};

inline nlohmann::json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("'" + path + "': " + e.what());
  }
}

/// sum_k p_k * (w_s, w_hist)_k
inline std::pair<double, double> interpolate_weights(const StyleProbs& probs, const StyleCategoryTable& table) {
  probs.validate(table);
  double ws = 0.0, wh = 0.0;
  for (const auto& e : table.entries()) {
    const auto it = probs.probs.find(e.name);
    if (it == probs.probs.end()) continue;
    ws += it->second * e.style_weight;
    wh += it->second * e.histogram_weight;
  }
  return {ws, wh};
}

/// Median over pixels of the per-pixel squared differences to the upper and
/// left neighbours (summed over channels). Even counts take the lower middle.
inline double median_tv(const Image& image) {
  const int h = image.height(), w = image.width();
  if (h == 0 || w == 0) return 0.0;
  std::vector<double> t(static_cast<std::size_t>(h) * w, 0.0);
  for (int c = 0; c < image.channels(); ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double& v = t[static_cast<std::size_t>(y) * w + x];
        if (y > 0) v += std::pow(image(c, y, x) - image(c, y - 1, x), 2);
        if (x > 0) v += std::pow(image(c, y, x) - image(c, y, x - 1), 2);
      }
    }
  }
  const auto mid = t.begin() + static_cast<std::ptrdiff_t>((t.size() - 1) / 2);
  std::nth_element(t.begin(), mid, t.end());
  return *mid;
}

/// 10 / (1 + exp(1e4 x - 25))
inline double tv_sigmoid(double x) { return 10.0 / (1.0 + std::exp(1e4 * x - 25.0)); }

struct EstimatedWeights {
  double tau = 0.0;
  double style_weight = 0.0;
  double histogram_weight = 0.0;
  double tv_weight = 0.0;
};

inline EstimatedWeights predict_weights(const Image& painting, const StyleProbs& probs,
                                        const StyleCategoryTable& table) {
  const auto [ws, wh] = interpolate_weights(probs, table);
  EstimatedWeights out;
  out.tau = ws;
  out.style_weight = ws;
  out.histogram_weight = wh;
  out.tv_weight = ws * tv_sigmoid(median_tv(painting));
  return out;
}

}  // namespace painterly
