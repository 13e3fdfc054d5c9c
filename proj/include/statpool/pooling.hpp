#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "statpool/moments.hpp"

namespace statpool {

enum class Statistic { Max, Mean, Std, Skew, Kurt };

inline constexpr std::array<Statistic, 5> kAllStatistics = {
    Statistic::Max, Statistic::Mean, Statistic::Std, Statistic::Skew,
    Statistic::Kurt};

// Short names as used in system labels ("max", "mean", "std", "skew",
// "kurto").
inline std::string_view to_string(Statistic s) {
  switch (s) {
    case Statistic::Max: return "max";
    case Statistic::Mean: return "mean";
    case Statistic::Std: return "std";
    case Statistic::Skew: return "skew";
    case Statistic::Kurt: return "kurto";
  }
  return "?";
}

inline Statistic parse_statistic(std::string_view name) {
  if (name == "max") return Statistic::Max;
  if (name == "mean") return Statistic::Mean;
  if (name == "std") return Statistic::Std;
  if (name == "skew") return Statistic::Skew;
  if (name == "kurto" || name == "kurt") return Statistic::Kurt;
  throw std::invalid_argument("unknown statistic '" + std::string(name) + "'");
}

// Ordered, duplicate-free list of statistics concatenated by the pooling
// layer. Statistic j occupies output slice [j*D, (j+1)*D).
class PoolingConfig {
 public:
  PoolingConfig(std::vector<Statistic> stats, double eps = kDefaultEps)
      : stats_(std::move(stats)), eps_(eps) {
    if (stats_.empty() || stats_.size() > kAllStatistics.size())
      throw std::invalid_argument("PoolingConfig: need 1 to 5 statistics");
    for (std::size_t i = 0; i < stats_.size(); ++i)
      for (std::size_t j = i + 1; j < stats_.size(); ++j)
        if (stats_[i] == stats_[j])
          throw std::invalid_argument("PoolingConfig: duplicate statistic " +
                                      std::string(to_string(stats_[i])));
    detail::check_eps(eps_);
  }

  // Parses names like "mean-std-skew".
  static PoolingConfig parse(std::string_view name, double eps = kDefaultEps) {
    std::vector<Statistic> stats;
    std::size_t start = 0;
    while (start <= name.size()) {
      const auto dash = name.find('-', start);
      const auto end = dash == std::string_view::npos ? name.size() : dash;
      stats.push_back(parse_statistic(name.substr(start, end - start)));
      if (dash == std::string_view::npos) break;
      start = dash + 1;
    }
    return PoolingConfig(std::move(stats), eps);
  }

  const std::vector<Statistic>& stats() const { return stats_; }
  double eps() const { return eps_; }

  std::string name() const {
    std::string out;
    for (std::size_t i = 0; i < stats_.size(); ++i) {
      if (i) out += '-';
      out += to_string(stats_[i]);
    }
    return out;
  }

  bool operator==(const PoolingConfig&) const = default;

 private:
  std::vector<Statistic> stats_;
  double eps_;
};

inline std::size_t output_width(const PoolingConfig& cfg, std::size_t dim) {
  if (dim < 1) throw std::invalid_argument("output_width: D must be >= 1");
  return cfg.stats().size() * dim;
}

inline Vector forward(const PoolingConfig& cfg, const FrameSequence& x) {
  const auto d = static_cast<Eigen::Index>(x.dim());
  Vector out(static_cast<Eigen::Index>(output_width(cfg, x.dim())));
  for (Eigen::Index j = 0; j < d; ++j) {
    const auto c = detail::column_moments(x.matrix(), j);
    for (std::size_t k = 0; k < cfg.stats().size(); ++k) {
      double v = 0.0;
      switch (cfg.stats()[k]) {
        case Statistic::Max: v = c.max; break;
        case Statistic::Mean: v = c.mean; break;
        case Statistic::Std: v = std::sqrt(c.m2); break;
        case Statistic::Skew: v = detail::skew_from(c.m2, c.m3, cfg.eps()); break;
        case Statistic::Kurt: v = detail::kurt_from(c.m2, c.m4, cfg.eps()); break;
      }
      out[static_cast<Eigen::Index>(k) * d + j] = v;
    }
  }
  return out;
}

// Vector-Jacobian product of forward(): returns the T x D matrix
// sum_o upstream[o] * d out[o] / d x[i, d].
//
// With dev_i = x_i - mu and central moments m_k = mean(dev^k):
//   d m_k / d x_i = (k / T) (dev_i^(k-1) - m_(k-1)),   m_1 = 0
//   skew = m3 / m2^(3/2),  kurt = m4 / m2^2
// Max routes the gradient to the lowest-index argmax. Skew and kurt slices
// of dimensions with sigma <= eps get no gradient.
inline Matrix backward(const PoolingConfig& cfg, const FrameSequence& x,
                       const Vector& upstream) {
  const auto t = static_cast<Eigen::Index>(x.frames());
  const auto d = static_cast<Eigen::Index>(x.dim());
  if (upstream.size() != static_cast<Eigen::Index>(output_width(cfg, x.dim())))
    throw std::invalid_argument("pooling backward: upstream has wrong length");
  const Matrix& xm = x.matrix();
  Matrix grad = Matrix::Zero(t, d);
  const double n = static_cast<double>(t);

  for (Eigen::Index j = 0; j < d; ++j) {
    double g_max = 0.0, g_mean = 0.0, g_std = 0.0, g_skew = 0.0, g_kurt = 0.0;
    for (std::size_t k = 0; k < cfg.stats().size(); ++k) {
      const double u = upstream[static_cast<Eigen::Index>(k) * d + j];
      switch (cfg.stats()[k]) {
        case Statistic::Max: g_max = u; break;
        case Statistic::Mean: g_mean = u; break;
        case Statistic::Std: g_std = u; break;
        case Statistic::Skew: g_skew = u; break;
        case Statistic::Kurt: g_kurt = u; break;
      }
    }
    if (g_max == 0.0 && g_mean == 0.0 && g_std == 0.0 && g_skew == 0.0 &&
        g_kurt == 0.0)
      continue;

    const auto c = detail::column_moments(xm, j);
    const double sigma = std::sqrt(c.m2);
    const bool spread = sigma > cfg.eps();
    if (!spread) g_skew = g_kurt = 0.0;

    // Coefficients of the per-frame polynomial a0 + a1 dev + a2 dev^2 + a3 dev^3.
    double a0 = g_mean / n;
    double a1 = g_std / (n * std::max(sigma, cfg.eps()));
    double a2 = 0.0, a3 = 0.0;
    if (g_skew != 0.0) {
      const double s3 = sigma * sigma * sigma;
      const double s5 = s3 * c.m2;
      a0 += -g_skew * 3.0 * c.m2 / (n * s3);
      a1 += -g_skew * 3.0 * c.m3 / (n * s5);
      a2 += g_skew * 3.0 / (n * s3);
    }
    if (g_kurt != 0.0) {
      const double s4 = c.m2 * c.m2;
      const double s6 = s4 * c.m2;
      a0 += -g_kurt * 4.0 * c.m3 / (n * s4);
      a1 += -g_kurt * 4.0 * c.m4 / (n * s6);
      a3 += g_kurt * 4.0 / (n * s4);
    }
    if (a0 != 0.0 || a1 != 0.0 || a2 != 0.0 || a3 != 0.0) {
      for (Eigen::Index i = 0; i < t; ++i) {
        const double dev = xm(i, j) - c.mean;
        grad(i, j) = a0 + dev * (a1 + dev * (a2 + dev * a3));
      }
    }
    grad(c.argmax, j) += g_max;
  }
  return grad;
}

}  // namespace statpool
