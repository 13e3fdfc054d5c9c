#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>

#include "statpool/frame_sequence.hpp"

namespace statpool {

// Default floor on sigma in the skewness and kurtosis denominators.
inline constexpr double kDefaultEps = 1e-6;

// Per-dimension pooled statistics of a frame sequence. All moments are the
// population (divide-by-T) versions.
struct PooledStats {
  Vector max;
  Vector mean;
  Vector std;
  Vector skew;
  Vector kurt;
};

namespace detail {

// Central moments of one column, the raw material for both the forward
// statistics and the analytic gradients.
struct ColumnMoments {
  double mean = 0.0;
  double m2 = 0.0;
  double m3 = 0.0;
  double m4 = 0.0;
  double max = 0.0;
  double min = 0.0;
  Eigen::Index argmax = 0;  // lowest index on ties
};

inline ColumnMoments column_moments(const Matrix& x, Eigen::Index d) {
  const Eigen::Index t = x.rows();
  ColumnMoments c;
  c.max = x(0, d);
  c.min = x(0, d);
  double sum = 0.0;
  for (Eigen::Index i = 0; i < t; ++i) {
    const double v = x(i, d);
    if (v > c.max) {
      c.max = v;
      c.argmax = i;
    }
    c.min = std::min(c.min, v);
    sum += v;
  }
  if (c.min == c.max) {
    // Constant column: exact mean, zero dispersion.
    c.mean = c.min;
    return c;
  }
  const double n = static_cast<double>(t);
  double mean = sum / n;
  double resid = 0.0;
  for (Eigen::Index i = 0; i < t; ++i) resid += x(i, d) - mean;
  mean += resid / n;
  c.mean = std::clamp(mean, c.min, c.max);

  double s2 = 0.0, s3 = 0.0, s4 = 0.0;
  for (Eigen::Index i = 0; i < t; ++i) {
    const double dev = x(i, d) - c.mean;
    const double dev2 = dev * dev;
    s2 += dev2;
    s3 += dev2 * dev;
    s4 += dev2 * dev2;
  }
  c.m2 = s2 / n;
  c.m3 = s3 / n;
  c.m4 = s4 / n;
  return c;
}

// m3 / max(sigma, eps)^3 and m4 / max(sigma, eps)^4. A zero-variance
// dimension has m3 = m4 = 0 and so maps to 0.
inline double skew_from(double m2, double m3, double eps) {
  const double s = std::max(std::sqrt(m2), eps);
  return m3 / (s * s * s);
}

inline double kurt_from(double m2, double m4, double eps) {
  const double s = std::max(std::sqrt(m2), eps);
  const double s2 = s * s;
  return m4 / (s2 * s2);
}

inline void check_eps(double eps) {
  if (!(eps > 0.0) || !std::isfinite(eps))
    throw std::invalid_argument("eps must be finite and > 0");
}

}  // namespace detail

inline PooledStats pooled_stats(const FrameSequence& x,
                                double eps = kDefaultEps) {
  detail::check_eps(eps);
  const auto d = static_cast<Eigen::Index>(x.dim());
  PooledStats s{Vector(d), Vector(d), Vector(d), Vector(d), Vector(d)};
  for (Eigen::Index j = 0; j < d; ++j) {
    const auto c = detail::column_moments(x.matrix(), j);
    s.max[j] = c.max;
    s.mean[j] = c.mean;
    s.std[j] = std::sqrt(c.m2);
    s.skew[j] = detail::skew_from(c.m2, c.m3, eps);
    s.kurt[j] = detail::kurt_from(c.m2, c.m4, eps);
  }
  return s;
}

inline Vector max_pool(const FrameSequence& x) {
  return x.matrix().colwise().maxCoeff().transpose();
}

inline Vector mean_pool(const FrameSequence& x) {
  return pooled_stats(x).mean;
}

inline Vector std_pool(const FrameSequence& x) { return pooled_stats(x).std; }

inline Vector skew_pool(const FrameSequence& x, double eps = kDefaultEps) {
  return pooled_stats(x, eps).skew;
}

inline Vector kurt_pool(const FrameSequence& x, double eps = kDefaultEps) {
  return pooled_stats(x, eps).kurt;
}

// One-pass accumulator of per-dimension max and the first four central
// moments. Uses the shifted central-moment recurrences so that offset data
// does not lose precision in the fourth-order terms. Merge combines two
// disjoint partial accumulators.
class MomentAccumulator {
 public:
  explicit MomentAccumulator(std::size_t dim)
      : mean_(Vector::Zero(static_cast<Eigen::Index>(dim))),
        m2_(Vector::Zero(mean_.size())),
        m3_(Vector::Zero(mean_.size())),
        m4_(Vector::Zero(mean_.size())),
        max_(Vector::Constant(mean_.size(),
                              -std::numeric_limits<double>::infinity())),
        min_(Vector::Constant(mean_.size(),
                              std::numeric_limits<double>::infinity())) {
    if (dim < 1) throw std::invalid_argument("MomentAccumulator: dim < 1");
  }

  std::size_t dim() const { return static_cast<std::size_t>(mean_.size()); }
  std::size_t count() const { return count_; }

  void add(std::span<const double> frame) {
    if (frame.size() != dim())
      throw std::invalid_argument("MomentAccumulator: dimension mismatch");
    for (double v : frame)
      if (!std::isfinite(v))
        throw std::invalid_argument("MomentAccumulator: non-finite entry");
    const double n1 = static_cast<double>(count_);
    ++count_;
    const double n = static_cast<double>(count_);
    for (Eigen::Index j = 0; j < mean_.size(); ++j) {
      const double v = frame[static_cast<std::size_t>(j)];
      const double delta = v - mean_[j];
      const double delta_n = delta / n;
      const double delta_n2 = delta_n * delta_n;
      const double term1 = delta * delta_n * n1;
      mean_[j] += delta_n;
      m4_[j] += term1 * delta_n2 * (n * n - 3.0 * n + 3.0) +
                6.0 * delta_n2 * m2_[j] - 4.0 * delta_n * m3_[j];
      m3_[j] += term1 * delta_n * (n - 2.0) - 3.0 * delta_n * m2_[j];
      m2_[j] += term1;
      max_[j] = std::max(max_[j], v);
      min_[j] = std::min(min_[j], v);
    }
  }

  void add(const Vector& frame) {
    add(std::span<const double>(frame.data(), static_cast<std::size_t>(frame.size())));
  }

  void add_all(const FrameSequence& x) {
    Vector row(static_cast<Eigen::Index>(x.dim()));
    for (std::size_t t = 0; t < x.frames(); ++t) {
      row = x.matrix().row(static_cast<Eigen::Index>(t)).transpose();
      add(row);
    }
  }

  void merge(const MomentAccumulator& other) {
    if (other.dim() != dim())
      throw std::invalid_argument("MomentAccumulator: dimension mismatch");
    if (other.count_ == 0) return;
    if (count_ == 0) {
      *this = other;
      return;
    }
    const double na = static_cast<double>(count_);
    const double nb = static_cast<double>(other.count_);
    const double n = na + nb;
    for (Eigen::Index j = 0; j < mean_.size(); ++j) {
      const double delta = other.mean_[j] - mean_[j];
      const double d2 = delta * delta;
      const double d3 = d2 * delta;
      const double d4 = d2 * d2;
      const double m2a = m2_[j], m2b = other.m2_[j];
      const double m3a = m3_[j], m3b = other.m3_[j];
      const double m4 = m4_[j] + other.m4_[j] +
                        d4 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n) +
                        6.0 * d2 * (na * na * m2b + nb * nb * m2a) / (n * n) +
                        4.0 * delta * (na * m3b - nb * m3a) / n;
      const double m3 = m3a + m3b + d3 * na * nb * (na - nb) / (n * n) +
                        3.0 * delta * (na * m2b - nb * m2a) / n;
      const double m2 = m2a + m2b + d2 * na * nb / n;
      mean_[j] = (na * mean_[j] + nb * other.mean_[j]) / n;
      m2_[j] = m2;
      m3_[j] = m3;
      m4_[j] = m4;
      max_[j] = std::max(max_[j], other.max_[j]);
      min_[j] = std::min(min_[j], other.min_[j]);
    }
    count_ += other.count_;
  }

  PooledStats finalize(double eps = kDefaultEps) const {
    detail::check_eps(eps);
    if (count_ == 0)
      throw std::logic_error("MomentAccumulator: finalize with no frames");
    const double n = static_cast<double>(count_);
    const auto d = mean_.size();
    PooledStats s{max_, Vector(d), Vector(d), Vector(d), Vector(d)};
    for (Eigen::Index j = 0; j < d; ++j) {
      if (min_[j] == max_[j]) {
        s.mean[j] = min_[j];
        s.std[j] = s.skew[j] = s.kurt[j] = 0.0;
        continue;
      }
      const double m2 = std::max(m2_[j] / n, 0.0);
      s.mean[j] = std::clamp(mean_[j], min_[j], max_[j]);
      s.std[j] = std::sqrt(m2);
      s.skew[j] = detail::skew_from(m2, m3_[j] / n, eps);
      s.kurt[j] = detail::kurt_from(m2, m4_[j] / n, eps);
    }
    return s;
  }

 private:
  std::size_t count_ = 0;
  Vector mean_, m2_, m3_, m4_, max_, min_;
};

inline MomentAccumulator accumulate(MomentAccumulator acc,
                                    std::span<const double> frame) {
  acc.add(frame);
  return acc;
}

inline MomentAccumulator merge(MomentAccumulator a, const MomentAccumulator& b) {
  a.merge(b);
  return a;
}

}  // namespace statpool
