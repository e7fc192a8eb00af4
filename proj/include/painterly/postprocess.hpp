#pragma once

// Clean-up after reconstruction: guided-filter chrominance denoising in
// CIE-Lab, then PatchMatch-driven patch synthesis of the base layer.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "painterly/errors.hpp"
#include "painterly/tensor.hpp"

namespace painterly {

// ---------------------------------------------------------------------------
// sRGB <-> CIE-Lab (D65).

namespace detail {

using Mat3 = std::array<std::array<double, 3>, 3>;

inline constexpr Mat3 kRgbToXyz = {{{0.4124564, 0.3575761, 0.1804375},
                                    {0.2126729, 0.7151522, 0.0721750},
                                    {0.0193339, 0.1191920, 0.9503041}}};

inline Mat3 invert(const Mat3& m) {
  const double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                     m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                     m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  Mat3 r{};
  r[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det;
  r[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det;
  r[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det;
  r[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det;
  r[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det;
  r[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det;
  r[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det;
  r[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det;
  r[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det;
  return r;
}

inline const Mat3& xyz_to_rgb() {
  static const Mat3 m = invert(kRgbToXyz);
  return m;
}

// white point = image of RGB (1,1,1)
inline std::array<double, 3> white() {
  std::array<double, 3> w{};
  for (int i = 0; i < 3; ++i) w[i] = kRgbToXyz[i][0] + kRgbToXyz[i][1] + kRgbToXyz[i][2];
  return w;
}

inline double srgb_to_linear(double c) { return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4); }
inline double linear_to_srgb(double c) {
  return c <= 0.0031308 ? 12.92 * c : 1.055 * std::pow(c, 1.0 / 2.4) - 0.055;
}

inline constexpr double kDelta = 6.0 / 29.0;
inline double lab_f(double t) {
  return t > kDelta * kDelta * kDelta ? std::cbrt(t) : t / (3.0 * kDelta * kDelta) + 4.0 / 29.0;
}
inline double lab_f_inv(double t) { return t > kDelta ? t * t * t : 3.0 * kDelta * kDelta * (t - 4.0 / 29.0); }

}  // namespace detail

/// Planes L in [0,100], a, b.
inline Tensor<double> rgb_to_lab(const Image& rgb) {
  if (rgb.channels() != 3) throw ConfigError("rgb_to_lab: expected 3 channels");
  const auto w = detail::white();
  Tensor<double> lab(3, rgb.height(), rgb.width());
  for (std::size_t i = 0; i < rgb.plane_size(); ++i) {
    std::array<double, 3> lin{};
    for (int c = 0; c < 3; ++c) lin[c] = detail::srgb_to_linear(rgb.plane(c)[i]);
    std::array<double, 3> f{};
    for (int r = 0; r < 3; ++r) {
      const double xyz = detail::kRgbToXyz[r][0] * lin[0] + detail::kRgbToXyz[r][1] * lin[1] + detail::kRgbToXyz[r][2] * lin[2];
      f[r] = detail::lab_f(xyz / w[r]);
    }
    lab.plane(0)[i] = 116.0 * f[1] - 16.0;
    lab.plane(1)[i] = 500.0 * (f[0] - f[1]);
    lab.plane(2)[i] = 200.0 * (f[1] - f[2]);
  }
  return lab;
}

/// Out-of-gamut results are clipped to [0,1].
inline Image lab_to_rgb(const Tensor<double>& lab) {
  if (lab.channels() != 3) throw ConfigError("lab_to_rgb: expected 3 channels");
  const auto w = detail::white();
  const auto& m = detail::xyz_to_rgb();
  Image rgb(3, lab.height(), lab.width());
  for (std::size_t i = 0; i < lab.plane_size(); ++i) {
    const double fy = (lab.plane(0)[i] + 16.0) / 116.0;
    const double fx = fy + lab.plane(1)[i] / 500.0;
    const double fz = fy - lab.plane(2)[i] / 200.0;
    const std::array<double, 3> xyz = {w[0] * detail::lab_f_inv(fx), w[1] * detail::lab_f_inv(fy),
                                       w[2] * detail::lab_f_inv(fz)};
    for (int c = 0; c < 3; ++c) {
      const double lin = m[c][0] * xyz[0] + m[c][1] * xyz[1] + m[c][2] * xyz[2];
      rgb.plane(c)[i] = std::clamp(detail::linear_to_srgb(std::max(lin, 0.0)), 0.0, 1.0);
    }
  }
  return rgb;
}

// ---------------------------------------------------------------------------
// Guided filter.

/// Mean over the (2r+1)^2 window with edge-replicated borders.
inline Tensor<double> box_mean(const Tensor<double>& in, int r) {
  const int h = in.height(), w = in.width();
  const double norm = 1.0 / (2 * r + 1);
  Tensor<double> tmp(1, h, w), out(1, h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int d = -r; d <= r; ++d) s += in(0, y, std::clamp(x + d, 0, w - 1));
      tmp(0, y, x) = s * norm;
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int d = -r; d <= r; ++d) s += tmp(0, std::clamp(y + d, 0, h - 1), x);
      out(0, y, x) = s * norm;
    }
  }
  return out;
}

/// Single-plane guided filter: per-window linear model input ~ a * guide + b,
/// coefficients box-averaged and applied to the guide.
inline Tensor<double> guided_filter(const Tensor<double>& input, const Tensor<double>& guide, int r, double eps) {
  if (!input.same_shape(guide) || input.channels() != 1) throw ConfigError("guided_filter: planes must match");
  if (r < 1 || !(eps > 0.0)) throw ConfigError("guided_filter: need r >= 1 and eps > 0");
  const std::size_t n = input.size();
  Tensor<double> gg(1, input.height(), input.width()), gp(1, input.height(), input.width());
  for (std::size_t i = 0; i < n; ++i) {
    gg.data()[i] = guide.data()[i] * guide.data()[i];
    gp.data()[i] = guide.data()[i] * input.data()[i];
  }
  const auto mean_g = box_mean(guide, r);
  const auto mean_p = box_mean(input, r);
  const auto corr_gg = box_mean(gg, r);
  const auto corr_gp = box_mean(gp, r);
  Tensor<double> a(1, input.height(), input.width()), b(1, input.height(), input.width());
  for (std::size_t i = 0; i < n; ++i) {
    const double var = corr_gg.data()[i] - mean_g.data()[i] * mean_g.data()[i];
    const double cov = corr_gp.data()[i] - mean_g.data()[i] * mean_p.data()[i];
    a.data()[i] = cov / (var + eps);
    b.data()[i] = mean_p.data()[i] - a.data()[i] * mean_g.data()[i];
  }
  const auto mean_a = box_mean(a, r);
  const auto mean_b = box_mean(b, r);
  Tensor<double> out(1, input.height(), input.width());
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = mean_a.data()[i] * guide.data()[i] + mean_b.data()[i];
  return out;
}

inline constexpr int kGuidedRadius = 2;
inline constexpr double kGuidedEps = 0.01;

namespace detail {

inline Tensor<double> plane_copy(const Tensor<double>& t, int c, double scale = 1.0, double offset = 0.0) {
  Tensor<double> p(1, t.height(), t.width());
  const auto src = t.plane(c);
  for (std::size_t i = 0; i < src.size(); ++i) p.data()[i] = (src[i] + offset) * scale;
  return p;
}

/// Lab lightness scaled to [0,1].
inline Tensor<double> luminance(const Image& rgb) { return plane_copy(rgb_to_lab(rgb), 0, 1.0 / 100.0); }

}  // namespace detail

/// Filters the a and b planes (rescaled from [-128,127] to [0,1]) with the
/// lightness as guide; L is passed through untouched.
inline Tensor<double> denoise_chroma_lab(Tensor<double> lab, int r = kGuidedRadius, double eps = kGuidedEps) {
  const auto guide = detail::plane_copy(lab, 0, 1.0 / 100.0);
  for (int c = 1; c < 3; ++c) {
    const auto chroma = detail::plane_copy(lab, c, 1.0 / 255.0, 128.0);
    const auto filtered = guided_filter(chroma, guide, r, eps);
    auto dst = lab.plane(c);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = filtered.data()[i] * 255.0 - 128.0;
  }
  return lab;
}

inline Image chrominance_denoise(const Image& rgb, int r = kGuidedRadius, double eps = kGuidedEps) {
  return lab_to_rgb(denoise_chroma_lab(rgb_to_lab(rgb), r, eps));
}

// ---------------------------------------------------------------------------
// PatchMatch.

/// For every patch (top-left corner) of the target, the matched source patch
/// and the squared distance between the two.
struct NNField {
  int patch = 7;
  int width = 0;   // target patch grid
  int height = 0;
  std::vector<std::int32_t> match_x;
  std::vector<std::int32_t> match_y;
  std::vector<double> distance;
  std::vector<std::uint8_t> active;
  std::vector<double> total_distance;  // after init and after every iteration

  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
};

namespace detail {

/// Squared distance between patches, stopping once `cutoff` is reached.
inline double patch_distance(const Image& a, int ax, int ay, const Image& b, int bx, int by, int p,
                             double cutoff = std::numeric_limits<double>::infinity()) {
  double d = 0.0;
  for (int c = 0; c < a.channels(); ++c) {
    for (int dy = 0; dy < p; ++dy) {
      const double* ra = &a(c, ay + dy, ax);
      const double* rb = &b(c, by + dy, bx);
      for (int dx = 0; dx < p; ++dx) {
        const double diff = ra[dx] - rb[dx];
        d += diff * diff;
      }
      if (d >= cutoff) return d;
    }
  }
  return d;
}

}  // namespace detail

/// Randomized NNF from `target` patches to `source` patches: random init, then
/// alternating-direction propagation and shrinking-window random search.
/// `target_active` (over the target patch grid) restricts which patches are
/// matched; empty means all.
inline NNField patchmatch_nnf(const Image& source, const Image& target, int patch = 7, int iterations = 5,
                              std::uint32_t seed = 0, const std::vector<std::uint8_t>& target_active = {}) {
  if (patch < 1) throw ConfigError("patchmatch: patch size must be positive");
  if (source.channels() != target.channels()) throw ConfigError("patchmatch: channel mismatch");
  if (source.height() < patch || source.width() < patch || target.height() < patch || target.width() < patch) {
    throw ConfigError("patchmatch: images smaller than the patch size");
  }
  NNField f;
  f.patch = patch;
  f.width = target.width() - patch + 1;
  f.height = target.height() - patch + 1;
  const int sw = source.width() - patch + 1, sh = source.height() - patch + 1;
  const std::size_t n = static_cast<std::size_t>(f.width) * f.height;
  f.active = target_active.empty() ? std::vector<std::uint8_t>(n, 1) : target_active;
  if (f.active.size() != n) throw ConfigError("patchmatch: active mask does not match the target patch grid");
  f.match_x.assign(n, -1);
  f.match_y.assign(n, -1);
  f.distance.assign(n, std::numeric_limits<double>::infinity());

  std::mt19937 gen(seed);
  const auto rand_below = [&gen](int bound) { return static_cast<int>(gen() % static_cast<std::uint32_t>(bound)); };
  const auto total = [&f] {
    double s = 0.0;
    for (std::size_t i = 0; i < f.distance.size(); ++i) {
      if (f.active[i]) s += f.distance[i];
    }
    return s;
  };

  for (int y = 0; y < f.height; ++y) {
    for (int x = 0; x < f.width; ++x) {
      const auto i = f.index(x, y);
      if (!f.active[i]) continue;
      f.match_x[i] = rand_below(sw);
      f.match_y[i] = rand_below(sh);
      f.distance[i] = detail::patch_distance(target, x, y, source, f.match_x[i], f.match_y[i], patch);
    }
  }
  f.total_distance.push_back(total());

  for (int iter = 0; iter < iterations; ++iter) {
    const int step = iter % 2 == 0 ? 1 : -1;
    const int y0 = step > 0 ? 0 : f.height - 1, y1 = step > 0 ? f.height : -1;
    const int x0 = step > 0 ? 0 : f.width - 1, x1 = step > 0 ? f.width : -1;
    for (int y = y0; y != y1; y += step) {
      for (int x = x0; x != x1; x += step) {
        const auto i = f.index(x, y);
        if (!f.active[i]) continue;
        int bx = f.match_x[i], by = f.match_y[i];
        double best = f.distance[i];
        const auto try_candidate = [&](int cx, int cy) {
          if (cx < 0 || cy < 0 || cx >= sw || cy >= sh) return;
          const double d = detail::patch_distance(target, x, y, source, cx, cy, patch, best);
          if (d < best) {
            best = d;
            bx = cx;
            by = cy;
          }
        };
        // propagation from the already-visited neighbours
        if (x - step >= 0 && x - step < f.width && f.active[f.index(x - step, y)]) {
          const auto j = f.index(x - step, y);
          try_candidate(f.match_x[j] + step, f.match_y[j]);
        }
        if (y - step >= 0 && y - step < f.height && f.active[f.index(x, y - step)]) {
          const auto j = f.index(x, y - step);
          try_candidate(f.match_x[j], f.match_y[j] + step);
        }
        for (int radius = std::max(source.width(), source.height()); radius >= 1; radius /= 2) {
          const int xmin = std::max(bx - radius, 0), xmax = std::min(bx + radius + 1, sw);
          const int ymin = std::max(by - radius, 0), ymax = std::min(by + radius + 1, sh);
          try_candidate(xmin + rand_below(xmax - xmin), ymin + rand_below(ymax - ymin));
        }
        f.match_x[i] = bx;
        f.match_y[i] = by;
        f.distance[i] = best;
      }
    }
    f.total_distance.push_back(total());
  }
  return f;
}

// ---------------------------------------------------------------------------
// Patch synthesis.

struct SynthesisResult {
  Image output;       // clamped; equals the input outside the mask
  Image base;         // guided-filtered input
  Image detail;       // input - base
  Image painting_base;
  Image synthesized;  // base' (meaningful inside the mask)
  Image unclamped;    // base' + detail inside the mask
  NNField nnf;
};

struct SynthesisOptions {
  int patch = 7;
  int iterations = 5;
  std::uint32_t seed = 0;
};

/// Splits both images into guided-filter base and detail, rebuilds the masked
/// base from overlapping matched painting-base patches (uniform average) and
/// adds the detail back.
inline SynthesisResult patch_synthesis(const Image& image, const Image& painting, const Mask& mask,
                                       const SynthesisOptions& options = {}) {
  if (!image.same_shape(painting) || image.channels() != 3) throw ConfigError("patch_synthesis: image shapes differ");
  if (mask.height() != image.height() || mask.width() != image.width()) {
    throw ConfigError("patch_synthesis: mask shape differs");
  }
  const auto split = [](const Image& rgb) {
    const auto guide = detail::luminance(rgb);
    Image base(3, rgb.height(), rgb.width());
    for (int c = 0; c < 3; ++c) {
      const auto filtered = guided_filter(detail::plane_copy(rgb, c), guide, kGuidedRadius, kGuidedEps);
      std::copy(filtered.data().begin(), filtered.data().end(), base.plane(c).begin());
    }
    return base;
  };

  SynthesisResult out;
  out.base = split(image);
  out.painting_base = split(painting);
  out.detail = Image(3, image.height(), image.width());
  for (std::size_t i = 0; i < image.size(); ++i) out.detail.data()[i] = image.data()[i] - out.base.data()[i];

  const int p = options.patch;
  const int gw = image.width() - p + 1, gh = image.height() - p + 1;
  if (gw < 1 || gh < 1) throw ConfigError("patch_synthesis: image smaller than the patch size");
  // patches touching the mask
  std::vector<std::uint8_t> active(static_cast<std::size_t>(gw) * gh, 0);
  for (int y = 0; y < gh; ++y) {
    for (int x = 0; x < gw; ++x) {
      bool touches = false;
      for (int dy = 0; dy < p && !touches; ++dy) {
        for (int dx = 0; dx < p && !touches; ++dx) touches = mask(0, y + dy, x + dx) != 0;
      }
      active[static_cast<std::size_t>(y) * gw + x] = touches;
    }
  }
  out.nnf = patchmatch_nnf(out.painting_base, out.base, p, options.iterations, options.seed, active);

  Image sum(3, image.height(), image.width());
  Tensor<double> weight(1, image.height(), image.width());
  for (int y = 0; y < gh; ++y) {
    for (int x = 0; x < gw; ++x) {
      const auto i = out.nnf.index(x, y);
      if (!out.nnf.active[i]) continue;
      const int sx = out.nnf.match_x[i], sy = out.nnf.match_y[i];
      for (int dy = 0; dy < p; ++dy) {
        for (int dx = 0; dx < p; ++dx) {
          if (!mask(0, y + dy, x + dx)) continue;
          weight(0, y + dy, x + dx) += 1.0;
          for (int c = 0; c < 3; ++c) sum(c, y + dy, x + dx) += out.painting_base(c, sy + dy, sx + dx);
        }
      }
    }
  }

  out.synthesized = out.base;
  out.unclamped = image;
  out.output = image;
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      if (!mask(0, y, x)) continue;
      for (int c = 0; c < 3; ++c) {
        const double b = sum(c, y, x) / weight(0, y, x);
        out.synthesized(c, y, x) = b;
        out.unclamped(c, y, x) = b + out.detail(c, y, x);
        out.output(c, y, x) = std::clamp(out.unclamped(c, y, x), 0.0, 1.0);
      }
    }
  }
  return out;
}

struct PostprocessOptions {
  bool denoise = true;
  bool synthesis = true;
  SynthesisOptions synthesis_options;
};

/// Chrominance denoising then patch synthesis, both confined to `mask`.
inline Image postprocess(const Image& image, const Image& painting, const Mask& mask,
                         const PostprocessOptions& options = {}) {
  Image out = image;
  if (options.denoise) {
    const Image denoised = chrominance_denoise(image);
    for (int c = 0; c < 3; ++c) {
      for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask.data()[i]) out.plane(c)[i] = denoised.plane(c)[i];
      }
    }
  }
  if (options.synthesis) out = patch_synthesis(out, painting, mask, options.synthesis_options).output;
  return out;
}

}  // namespace painterly
