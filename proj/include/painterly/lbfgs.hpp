#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "painterly/errors.hpp"

namespace painterly {

enum class Termination { max_iterations, gradient_tolerance, line_search_failure, non_finite };

inline const char* to_string(Termination t) {
  switch (t) {
    case Termination::max_iterations: return "max-iters";
    case Termination::gradient_tolerance: return "gradient-tol";
    case Termination::line_search_failure: return "line-search-failure";
    case Termination::non_finite: return "non-finite";
  }
  return "?";
}

struct OptimizeReport {
  int iterations = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> trace;  // loss at x0 and after every iteration
  Termination reason = Termination::max_iterations;
};

struct LbfgsOptions {
  int max_iterations = 1000;
  int history = 10;
  double gradient_tolerance = 1e-7;
  double armijo = 1e-4;
  int max_backtracks = 60;
  double curvature_floor = 1e-10;  // pairs with s.y below this are skipped
};

/// Writes the gradient into `grad` and returns the loss.
using ObjectiveFn = std::function<double(std::span<const double> x, std::span<double> grad)>;
using ProgressFn = std::function<void(int iteration, double loss)>;

/// Limited-memory BFGS with backtracking Armijo line search. Coordinates with
/// active[i] == 0 are never modified. On a non-finite loss or gradient the
/// last finite iterate is returned with reason non_finite.
inline std::pair<std::vector<double>, OptimizeReport> lbfgs_minimize(const ObjectiveFn& objective,
                                                                     std::vector<double> x,
                                                                     const LbfgsOptions& options = {},
                                                                     std::span<const std::uint8_t> active = {},
                                                                     const ProgressFn& progress = {}) {
  const std::size_t n = x.size();
  if (!active.empty() && active.size() != n) throw ConfigError("lbfgs: active mask length mismatch");
  for (double v : x) {
    if (!std::isfinite(v)) throw ConfigError("lbfgs: non-finite starting point");
  }
  const auto is_active = [&](std::size_t i) { return active.empty() || active[i] != 0; };
  const auto finite = [](double f, const std::vector<double>& g) {
    if (!std::isfinite(f)) return false;
    return std::all_of(g.begin(), g.end(), [](double v) { return std::isfinite(v); });
  };
  const auto evaluate = [&](const std::vector<double>& at, std::vector<double>& g) {
    const double f = objective(at, g);
    for (std::size_t i = 0; i < n; ++i) {
      if (!is_active(i)) g[i] = 0.0;
    }
    return f;
  };
  const auto dot = [n](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
  };

  OptimizeReport report;
  std::vector<double> g(n), d(n), x_new(n), g_new(n);
  double f = evaluate(x, g);
  report.initial_loss = report.final_loss = f;
  report.trace.push_back(f);
  if (!finite(f, g)) {
    report.reason = Termination::non_finite;
    return {std::move(x), std::move(report)};
  }

  struct Pair {
    std::vector<double> s, y;
    double rho;
  };
  std::deque<Pair> pairs;
  double gamma = 0.0;  // initial inverse-Hessian scale; 0 until a usable step exists
  std::vector<double> alpha(static_cast<std::size_t>(std::max(options.history, 0)));

  report.reason = Termination::max_iterations;
  for (int iter = 0; iter < options.max_iterations; ++iter) {
    double gmax = 0.0, gsum = 0.0;
    for (double v : g) {
      gmax = std::max(gmax, std::abs(v));
      gsum += std::abs(v);
    }
    if (gmax < options.gradient_tolerance) {
      report.reason = Termination::gradient_tolerance;
      break;
    }

    bool accepted = false;
    for (int attempt = 0; attempt < 2 && !accepted; ++attempt) {
      // two-loop recursion
      d = g;
      for (std::size_t k = pairs.size(); k-- > 0;) {
        alpha[k] = pairs[k].rho * dot(pairs[k].s, d);
        for (std::size_t i = 0; i < n; ++i) d[i] -= alpha[k] * pairs[k].y[i];
      }
      const double scale = gamma > 0.0 ? gamma : 1.0;
      for (double& v : d) v *= scale;
      for (std::size_t k = 0; k < pairs.size(); ++k) {
        const double beta = pairs[k].rho * dot(pairs[k].y, d);
        for (std::size_t i = 0; i < n; ++i) d[i] += (alpha[k] - beta) * pairs[k].s[i];
      }
      for (double& v : d) v = -v;
      double slope = dot(g, d);
      if (!(slope < 0.0)) {
        pairs.clear();
        for (std::size_t i = 0; i < n; ++i) d[i] = -scale * g[i];
        slope = dot(g, d);
      }
      double t = gamma > 0.0 ? 1.0 : std::min(1.0, 1.0 / gsum);

      for (int bt = 0; bt < options.max_backtracks; ++bt, t *= 0.5) {
        bool moved = false;
        for (std::size_t i = 0; i < n; ++i) {
          x_new[i] = is_active(i) ? x[i] + t * d[i] : x[i];
          moved = moved || x_new[i] != x[i];
        }
        if (!moved) break;  // step underflowed
        const double f_new = evaluate(x_new, g_new);
        if (!finite(f_new, g_new)) {
          report.reason = Termination::non_finite;
          report.final_loss = f;
          return {std::move(x), std::move(report)};
        }
        if (f_new <= f + options.armijo * t * slope) {
          accepted = true;
          std::vector<double> s(n), y(n);
          for (std::size_t i = 0; i < n; ++i) {
            s[i] = x_new[i] - x[i];
            y[i] = g_new[i] - g[i];
          }
          const double sy = dot(s, y);
          if (sy > options.curvature_floor) {
            gamma = sy / dot(y, y);
            if (options.history > 0) {
              if (static_cast<int>(pairs.size()) == options.history) pairs.pop_front();
              pairs.push_back({std::move(s), std::move(y), 1.0 / sy});
            }
          }
          std::swap(x, x_new);
          std::swap(g, g_new);
          f = f_new;
          break;
        }
      }
      if (!accepted) {
        if (pairs.empty() && gamma == 0.0) break;
        // retry once from a fresh steepest-descent model
        pairs.clear();
        gamma = 0.0;
      }
    }
    if (!accepted) {
      report.reason = Termination::line_search_failure;
      break;
    }
    report.iterations = iter + 1;
    report.trace.push_back(f);
    if (progress) progress(report.iterations, f);
  }
  report.final_loss = f;
  return {std::move(x), std::move(report)};
}

}  // namespace painterly
