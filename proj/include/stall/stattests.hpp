#pragma once

// Normality and sphere-uniformity diagnostics for embedding populations:
// Anderson-Darling and D'Agostino-Pearson per-coordinate tests, the grouped
// batch protocol, Maxwell-Poincare projections of uniform sphere draws, and
// pairwise cosine histograms.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stall/detail/parallel.hpp"
#include "stall/embedseq.hpp"
#include "stall/error.hpp"
#include "stall/random.hpp"

namespace stall::stats {

inline constexpr double kAdThreshold = 0.752;
inline constexpr double kDpAlpha = 0.05;
inline constexpr std::size_t kAdMinSamples = 8;
inline constexpr std::size_t kDpMinSamples = 20;

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

namespace detail {

struct Moments {
  double mean = 0.0;
  double m2 = 0.0;
  double m3 = 0.0;
  double m4 = 0.0;
};

inline Moments central_moments(std::span<const double> x) {
  Moments m;
  const double n = static_cast<double>(x.size());
  m.mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
  for (double v : x) {
    const double c = v - m.mean;
    const double c2 = c * c;
    m.m2 += c2;
    m.m3 += c2 * c;
    m.m4 += c2 * c2;
  }
  m.m2 /= n;
  m.m3 /= n;
  m.m4 /= n;
  return m;
}

}  // namespace detail

// A^2 = -n - sum_i (2i-1)/n [ln F(x_(i)) + ln(1 - F(x_(n+1-i)))], with F the
// standard normal CDF of the sample standardized by its mean and n-1
// standard deviation. CDF values are clamped into (1e-15, 1 - 1e-15).
inline double anderson_darling(std::span<const double> sample) {
  const std::size_t n = sample.size();
  if (n < kAdMinSamples) {
    fail(ErrorCode::kInsufficientData, "Anderson-Darling needs at least 8 samples");
  }
  std::vector<double> x(sample.begin(), sample.end());
  std::sort(x.begin(), x.end());
  const double nd = static_cast<double>(n);
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / nd;
  double ss = 0.0;
  for (double v : x) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (nd - 1.0));
  if (!(sd > 0.0) || !std::isfinite(sd)) {
    fail(ErrorCode::kInvalidArgument, "Anderson-Darling sample has zero variance");
  }
  constexpr double lo = 1e-15;
  constexpr double hi = 1.0 - 1e-15;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double lower = std::clamp(normal_cdf((x[i] - mean) / sd), lo, hi);
    // 1 - F(z) evaluated as F(-z) to keep precision in the right tail.
    const double upper = std::clamp(normal_cdf(-(x[n - 1 - i] - mean) / sd), lo, hi);
    sum += (2.0 * static_cast<double>(i) + 1.0) * (std::log(lower) + std::log(upper));
  }
  return -nd - sum / nd;
}

struct DagostinoPearsonResult {
  double k2 = 0.0;
  double p_value = 1.0;
  double skewness = 0.0;         // g1 = m3 / m2^{3/2}
  double excess_kurtosis = 0.0;  // g2 = m4 / m2^2 - 3
  double z_skew = 0.0;
  double z_kurtosis = 0.0;
};

// D'Agostino (1970) skewness transform.
inline double skewness_z(double g1, double n) {
  const double y = g1 * std::sqrt((n + 1.0) * (n + 3.0) / (6.0 * (n - 2.0)));
  const double beta2 = 3.0 * (n * n + 27.0 * n - 70.0) * (n + 1.0) * (n + 3.0) /
                       ((n - 2.0) * (n + 5.0) * (n + 7.0) * (n + 9.0));
  const double w2 = -1.0 + std::sqrt(2.0 * (beta2 - 1.0));
  const double delta = 1.0 / std::sqrt(0.5 * std::log(w2));
  const double alpha = std::sqrt(2.0 / (w2 - 1.0));
  return delta * std::asinh(y / alpha);
}

// Anscombe-Glynn (1983) kurtosis transform; b2 is the non-excess kurtosis.
inline double kurtosis_z(double b2, double n) {
  const double expected = 3.0 * (n - 1.0) / (n + 1.0);
  const double variance =
      24.0 * n * (n - 2.0) * (n - 3.0) / ((n + 1.0) * (n + 1.0) * (n + 3.0) * (n + 5.0));
  const double x = (b2 - expected) / std::sqrt(variance);
  const double sqrt_beta1 = 6.0 * (n * n - 5.0 * n + 2.0) / ((n + 7.0) * (n + 9.0)) *
                            std::sqrt(6.0 * (n + 3.0) * (n + 5.0) / (n * (n - 2.0) * (n - 3.0)));
  const double a = 6.0 + 8.0 / sqrt_beta1 *
                             (2.0 / sqrt_beta1 + std::sqrt(1.0 + 4.0 / (sqrt_beta1 * sqrt_beta1)));
  const double term1 = 1.0 - 2.0 / (9.0 * a);
  const double denom = 1.0 + x * std::sqrt(2.0 / (a - 4.0));
  const double term2 = std::copysign(std::cbrt((1.0 - 2.0 / a) / std::abs(denom)), denom);
  return (term1 - term2) / std::sqrt(2.0 / (9.0 * a));
}

// K^2 = Z1^2 + Z2^2, p = 1 - F_chi2(2)(K^2) = exp(-K^2 / 2).
inline DagostinoPearsonResult dagostino_pearson(std::span<const double> sample) {
  const std::size_t n = sample.size();
  if (n < kDpMinSamples) {
    fail(ErrorCode::kInsufficientData, "D'Agostino-Pearson needs at least 20 samples");
  }
  const auto m = detail::central_moments(sample);
  if (!(m.m2 > 0.0) || !std::isfinite(m.m2)) {
    fail(ErrorCode::kInvalidArgument, "D'Agostino-Pearson sample has zero variance");
  }
  const double nd = static_cast<double>(n);
  DagostinoPearsonResult r;
  r.skewness = m.m3 / std::pow(m.m2, 1.5);
  const double b2 = m.m4 / (m.m2 * m.m2);
  r.excess_kurtosis = b2 - 3.0;
  r.z_skew = skewness_z(r.skewness, nd);
  r.z_kurtosis = kurtosis_z(b2, nd);
  r.k2 = r.z_skew * r.z_skew + r.z_kurtosis * r.z_kurtosis;
  r.p_value = std::exp(-0.5 * r.k2);
  return r;
}

// ---------------------------------------------------------------------------
// Grouped batch protocol

struct CoordinateStats {
  std::size_t coordinate = 0;
  double ad_statistic = 0.0;
  double dp_statistic = 0.0;
  double dp_p_value = 0.0;
  double skewness = 0.0;
  double excess_kurtosis = 0.0;
};

struct TestReport {
  std::vector<CoordinateStats> per_coordinate;
  double avg_ad = 0.0;
  double avg_dp_p = 0.0;
  double frac_ad_pass = 0.0;
  double frac_dp_pass = 0.0;
  double ad_threshold = kAdThreshold;
  double dp_alpha = kDpAlpha;
  std::size_t groups = 0;
  std::size_t group_size = 0;
};

struct BatchNormalityOptions {
  std::size_t groups = 40;
  std::size_t group_size = 250;
  std::uint64_t seed = 0;
  double ad_threshold = kAdThreshold;
  double dp_alpha = kDpAlpha;
  std::size_t jobs = 1;
};

// Draws `groups` groups of `group_size` distinct rows, runs both tests on
// every coordinate of every group, averages each statistic over groups and
// reports the fraction of coordinates whose averages pass.
inline TestReport batch_normality(const Eigen::Ref<const RowMatrix>& population,
                                  const BatchNormalityOptions& opt = {}) {
  const auto n = static_cast<std::size_t>(population.rows());
  const auto d = static_cast<std::size_t>(population.cols());
  if (opt.groups < 1) fail(ErrorCode::kInvalidArgument, "need at least one group");
  if (opt.group_size < kDpMinSamples) {
    fail(ErrorCode::kInvalidArgument, "group size must be >= 20");
  }
  if (n < opt.group_size) {
    fail(ErrorCode::kInsufficientData, "population of " + std::to_string(n) +
                                           " is smaller than the group size " +
                                           std::to_string(opt.group_size));
  }
  if (d < 1) fail(ErrorCode::kInvalidArgument, "population has no coordinates");

  // per_group[g][j] holds coordinate j's statistics for group g.
  std::vector<std::vector<CoordinateStats>> per_group(opt.groups);
  stall::detail::parallel_for(opt.groups, opt.jobs, [&](std::size_t g) {
    Rng rng(derive_seed(opt.seed, g));
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < opt.group_size; ++i) {
      const auto j = i + uniform_index(rng, n - i);
      std::swap(idx[i], idx[j]);
    }
    auto& out = per_group[g];
    out.resize(d);
    std::vector<double> column(opt.group_size);
    for (std::size_t j = 0; j < d; ++j) {
      for (std::size_t i = 0; i < opt.group_size; ++i) {
        column[i] = population(static_cast<Eigen::Index>(idx[i]), static_cast<Eigen::Index>(j));
      }
      const auto dp = dagostino_pearson(column);
      out[j] = {j, anderson_darling(column), dp.k2, dp.p_value, dp.skewness, dp.excess_kurtosis};
    }
  });

  TestReport report;
  report.ad_threshold = opt.ad_threshold;
  report.dp_alpha = opt.dp_alpha;
  report.groups = opt.groups;
  report.group_size = opt.group_size;
  report.per_coordinate.resize(d);
  const double gd = static_cast<double>(opt.groups);
  std::size_t ad_pass = 0;
  std::size_t dp_pass = 0;
  for (std::size_t j = 0; j < d; ++j) {
    CoordinateStats avg{j, 0, 0, 0, 0, 0};
    for (std::size_t g = 0; g < opt.groups; ++g) {
      const auto& s = per_group[g][j];
      avg.ad_statistic += s.ad_statistic;
      avg.dp_statistic += s.dp_statistic;
      avg.dp_p_value += s.dp_p_value;
      avg.skewness += s.skewness;
      avg.excess_kurtosis += s.excess_kurtosis;
    }
    avg.ad_statistic /= gd;
    avg.dp_statistic /= gd;
    avg.dp_p_value /= gd;
    avg.skewness /= gd;
    avg.excess_kurtosis /= gd;
    if (avg.ad_statistic < opt.ad_threshold) ++ad_pass;
    if (avg.dp_p_value > opt.dp_alpha) ++dp_pass;
    report.avg_ad += avg.ad_statistic;
    report.avg_dp_p += avg.dp_p_value;
    report.per_coordinate[j] = avg;
  }
  const double dd = static_cast<double>(d);
  report.avg_ad /= dd;
  report.avg_dp_p /= dd;
  report.frac_ad_pass = static_cast<double>(ad_pass) / dd;
  report.frac_dp_pass = static_cast<double>(dp_pass) / dd;
  return report;
}

inline void write_report_csv(std::ostream& out, const TestReport& r) {
  out << "coordinate,ad_statistic,dp_statistic,dp_p_value,skewness,excess_kurtosis\n";
  char buf[256];
  for (const auto& c : r.per_coordinate) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", c.coordinate,
                  c.ad_statistic, c.dp_statistic, c.dp_p_value, c.skewness, c.excess_kurtosis);
    out << buf;
  }
}

inline nlohmann::json report_summary(const TestReport& r) {
  return {{"dim", r.per_coordinate.size()}, {"groups", r.groups},
          {"group_size", r.group_size},     {"avg_ad", r.avg_ad},
          {"avg_dp_p", r.avg_dp_p},         {"frac_ad_pass", r.frac_ad_pass},
          {"frac_dp_pass", r.frac_dp_pass}, {"ad_threshold", r.ad_threshold},
          {"dp_alpha", r.dp_alpha}};
}

// ---------------------------------------------------------------------------
// Sphere diagnostics

// Rows are independent uniform draws from the unit sphere S^{d-1}.
inline RowMatrix uniform_sphere(std::size_t count, Eigen::Index d, Rng& rng) {
  NormalSampler normal;
  RowMatrix out(static_cast<Eigen::Index>(count), d);
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    double norm = 0.0;
    do {
      for (Eigen::Index j = 0; j < d; ++j) out(i, j) = normal(rng);
      norm = out.row(i).norm();
    } while (norm == 0.0);
    out.row(i) /= norm;
  }
  return out;
}

// Total-variation bound 2(k+3)/(d-k-3) between sqrt(d) times k coordinates
// of a uniform sphere vector and N(0, I_k); requires 1 <= k <= d-4.
inline double tv_bound(std::size_t d, std::size_t k) {
  if (k < 1 || d < 5 || k > d - 4) {
    fail(ErrorCode::kOutOfRange, "TV bound needs 1 <= k <= d - 4 (d=" + std::to_string(d) +
                                     ", k=" + std::to_string(k) + ")");
  }
  const double kd = static_cast<double>(k);
  return 2.0 * (kd + 3.0) / (static_cast<double>(d) - kd - 3.0);
}

struct SphereCheckResult {
  double pass_rate = 0.0;  // fraction of (group, coordinate) DP tests with p > alpha
  double tv_bound = 0.0;
  std::size_t tests = 0;
};

struct SphereCheckOptions {
  std::size_t group_size = 100;
  double dp_alpha = kDpAlpha;
};

inline SphereCheckResult sphere_projection_check(std::size_t d, std::size_t samples, std::size_t k,
                                                 std::uint64_t seed,
                                                 const SphereCheckOptions& opt = {}) {
  SphereCheckResult result;
  result.tv_bound = tv_bound(d, k);
  if (opt.group_size < kDpMinSamples || samples < opt.group_size) {
    fail(ErrorCode::kInsufficientData, "need at least one group of >= 20 samples");
  }
  Rng rng(seed);
  const RowMatrix u = uniform_sphere(samples, static_cast<Eigen::Index>(d), rng);
  const double scale = std::sqrt(static_cast<double>(d));
  const std::size_t groups = samples / opt.group_size;
  std::size_t passed = 0;
  std::vector<double> column(opt.group_size);
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t g = 0; g < groups; ++g) {
      for (std::size_t i = 0; i < opt.group_size; ++i) {
        column[i] = scale * u(static_cast<Eigen::Index>(g * opt.group_size + i),
                              static_cast<Eigen::Index>(j));
      }
      if (dagostino_pearson(column).p_value > opt.dp_alpha) ++passed;
      ++result.tests;
    }
  }
  result.pass_rate = static_cast<double>(passed) / static_cast<double>(result.tests);
  return result;
}

struct CosineHistogram {
  std::vector<std::uint64_t> counts;  // bins over [-1, 1]
  std::uint64_t pairs = 0;
  double mean = 0.0;
  double stddev = 0.0;

  double bin_lower(std::size_t b) const {
    return -1.0 + 2.0 * static_cast<double>(b) / static_cast<double>(counts.size());
  }
};

// Cosine similarity over all unordered pairs of rows.
inline CosineHistogram pairwise_cosine_histogram(const Eigen::Ref<const RowMatrix>& vectors,
                                                 std::size_t bins) {
  const Eigen::Index n = vectors.rows();
  if (n < 2) fail(ErrorCode::kInsufficientData, "need at least 2 vectors");
  if (bins < 1) fail(ErrorCode::kInvalidArgument, "need at least 1 bin");
  RowMatrix unit = vectors;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double norm = unit.row(i).norm();
    if (!(norm > 0.0)) fail(ErrorCode::kInvalidArgument, "zero vector has no direction");
    unit.row(i) /= norm;
  }
  const RowMatrix gram = unit * unit.transpose();
  CosineHistogram h;
  h.counts.assign(bins, 0);
  double sum = 0.0;
  double sum_sq = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double c = std::clamp(gram(i, j), -1.0, 1.0);
      auto b = static_cast<std::size_t>((c + 1.0) * 0.5 * static_cast<double>(bins));
      h.counts[std::min(b, bins - 1)] += 1;
      sum += c;
      sum_sq += c * c;
      ++h.pairs;
    }
  }
  const double p = static_cast<double>(h.pairs);
  h.mean = sum / p;
  h.stddev = std::sqrt(std::max(0.0, sum_sq / p - h.mean * h.mean));
  return h;
}

}  // namespace stall::stats
