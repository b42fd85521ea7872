#pragma once

// Isotropic Gaussian log-likelihoods of whitened frames (spatial branch) and
// whitened, l2-normalized frame transitions (temporal branch).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "stall/embedseq.hpp"
#include "stall/error.hpp"
#include "stall/whitening.hpp"

namespace stall {

inline constexpr double kDefaultNormFloor = 1e-12;

inline double log_likelihood_from_sqnorm(Eigen::Index d, double squared_norm) {
  return -0.5 * (static_cast<double>(d) * std::log(2.0 * std::numbers::pi) + squared_norm);
}

// l(y) = -1/2 (d log(2 pi) + ||y||^2)
inline double log_likelihood(const Eigen::Ref<const Vector>& y) {
  if (!y.allFinite()) fail(ErrorCode::kNonFinite, "log_likelihood input is not finite");
  return log_likelihood_from_sqnorm(y.size(), y.squaredNorm());
}

struct FrameLikelihoods {
  std::vector<double> values;
};

struct TransitionLikelihoods {
  std::vector<double> values;
  std::size_t discarded_count = 0;
  int derivative_order = 1;
};

inline FrameLikelihoods spatial_scores(const EmbeddingSequence& seq, const WhiteningModel& model) {
  check_dim(model, seq.dim(), "spatial_scores");
  const RowMatrix y = whiten_rows(model, seq.frames);
  FrameLikelihoods out;
  out.values.resize(static_cast<std::size_t>(y.rows()));
  for (Eigen::Index t = 0; t < y.rows(); ++t) {
    out.values[static_cast<std::size_t>(t)] =
        log_likelihood_from_sqnorm(y.cols(), y.row(t).squaredNorm());
  }
  return out;
}

struct TransitionOptions {
  int derivative_order = 1;
  int step = 1;
  double norm_floor = kDefaultNormFloor;
};

// Finite differences of the requested order, each pass x[t + step] - x[t].
// Zero (or near-zero) differences are flagged and dropped; the rest are
// normalized to unit l2 norm.
struct TransitionSet {
  RowMatrix normalized;           // retained transitions, one per row
  std::vector<bool> discarded;    // one flag per raw transition, in time order
  std::size_t discarded_count = 0;
};

inline std::size_t min_frames_for(const TransitionOptions& opt) {
  return static_cast<std::size_t>(opt.derivative_order) * static_cast<std::size_t>(opt.step) + 1;
}

inline void validate(const TransitionOptions& opt) {
  if (opt.derivative_order < 1) fail(ErrorCode::kInvalidArgument, "derivative order must be >= 1");
  if (opt.step < 1) fail(ErrorCode::kInvalidArgument, "step must be >= 1");
  if (!(opt.norm_floor >= 0.0)) fail(ErrorCode::kInvalidArgument, "norm floor must be >= 0");
}

inline RowMatrix raw_differences(const Eigen::Ref<const RowMatrix>& frames,
                                 const TransitionOptions& opt) {
  validate(opt);
  if (static_cast<std::size_t>(frames.rows()) < min_frames_for(opt)) {
    fail(ErrorCode::kInsufficientData,
         "sequence of " + std::to_string(frames.rows()) + " frames is too short for order " +
             std::to_string(opt.derivative_order) + " step " + std::to_string(opt.step));
  }
  RowMatrix cur = frames;
  for (int pass = 0; pass < opt.derivative_order; ++pass) {
    const Eigen::Index rows = cur.rows() - opt.step;
    RowMatrix next = cur.bottomRows(rows) - cur.topRows(rows);
    cur = std::move(next);
  }
  return cur;
}

inline TransitionSet transitions(const EmbeddingSequence& seq, const TransitionOptions& opt = {}) {
  const RowMatrix diffs = raw_differences(seq.frames, opt);
  TransitionSet out;
  out.discarded.assign(static_cast<std::size_t>(diffs.rows()), false);
  std::vector<Eigen::Index> keep;
  keep.reserve(static_cast<std::size_t>(diffs.rows()));
  for (Eigen::Index t = 0; t < diffs.rows(); ++t) {
    const double norm = diffs.row(t).norm();
    if (norm == 0.0 || norm <= opt.norm_floor) {
      out.discarded[static_cast<std::size_t>(t)] = true;
      ++out.discarded_count;
    } else {
      keep.push_back(t);
    }
  }
  out.normalized.resize(static_cast<Eigen::Index>(keep.size()), diffs.cols());
  for (std::size_t i = 0; i < keep.size(); ++i) {
    const auto row = diffs.row(keep[i]);
    out.normalized.row(static_cast<Eigen::Index>(i)) = row / row.norm();
  }
  return out;
}

// An all-zero sequence yields empty values; the caller decides on fallback.
inline TransitionLikelihoods temporal_scores(const EmbeddingSequence& seq,
                                             const WhiteningModel& model,
                                             const TransitionOptions& opt = {}) {
  check_dim(model, seq.dim(), "temporal_scores");
  const TransitionSet set = transitions(seq, opt);
  TransitionLikelihoods out;
  out.derivative_order = opt.derivative_order;
  out.discarded_count = set.discarded_count;
  if (set.normalized.rows() == 0) return out;
  const RowMatrix z = whiten_rows(model, set.normalized);
  out.values.resize(static_cast<std::size_t>(z.rows()));
  for (Eigen::Index t = 0; t < z.rows(); ++t) {
    out.values[static_cast<std::size_t>(t)] =
        log_likelihood_from_sqnorm(z.cols(), z.row(t).squaredNorm());
  }
  return out;
}

enum class Aggregation { kMin, kMax, kMean };

constexpr std::string_view to_string(Aggregation op) {
  switch (op) {
    case Aggregation::kMin: return "min";
    case Aggregation::kMax: return "max";
    case Aggregation::kMean: return "mean";
  }
  return "mean";
}

inline Aggregation parse_aggregation(std::string_view text) {
  if (text == "min") return Aggregation::kMin;
  if (text == "max") return Aggregation::kMax;
  if (text == "mean") return Aggregation::kMean;
  fail(ErrorCode::kInvalidArgument, "unknown aggregation '" + std::string(text) + "'");
}

inline double aggregate(std::span<const double> values, Aggregation op) {
  if (values.empty()) fail(ErrorCode::kInsufficientData, "cannot aggregate an empty list");
  switch (op) {
    case Aggregation::kMin: return *std::min_element(values.begin(), values.end());
    case Aggregation::kMax: return *std::max_element(values.begin(), values.end());
    case Aggregation::kMean:
      return std::accumulate(values.begin(), values.end(), 0.0) /
             static_cast<double>(values.size());
  }
  fail(ErrorCode::kInvalidArgument, "bad aggregation");
}

}  // namespace stall
