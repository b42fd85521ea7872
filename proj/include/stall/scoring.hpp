#pragma once

// Inference against a calibration profile: branch scores, rank percentiles
// and the fused video score. s_video is a realness score (higher = more
// real).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "stall/calibration.hpp"
#include "stall/detail/parallel.hpp"
#include "stall/embedseq.hpp"
#include "stall/error.hpp"

namespace stall {

// Fraction of calibration scores <= s (upper bound on a sorted list).
inline double percentile(std::span<const double> sorted_calibration, double s) {
  if (sorted_calibration.empty()) fail(ErrorCode::kInsufficientData, "empty calibration list");
  const auto it = std::upper_bound(sorted_calibration.begin(), sorted_calibration.end(), s);
  return static_cast<double>(it - sorted_calibration.begin()) /
         static_cast<double>(sorted_calibration.size());
}

inline double fuse(double perc_spatial, double perc_temporal, Fusion fusion) {
  return fusion == Fusion::kMean ? 0.5 * (perc_spatial + perc_temporal)
                                 : perc_spatial * perc_temporal;
}

struct ScoreRecord {
  std::string video_id;
  Label label = Label::kUnknown;
  std::optional<std::string> generator;
  double s_spatial = 0.0;
  std::optional<double> s_temporal;
  double perc_spatial = 0.0;
  std::optional<double> perc_temporal;
  double s_video = 0.0;
  bool fallback_spatial_only = false;
  Fusion fusion = Fusion::kMean;

  bool operator==(const ScoreRecord&) const = default;
};

struct BatchEntry {
  std::optional<ScoreRecord> record;
  std::optional<Error> error;
};

namespace detail {

inline std::optional<Error> check_scorable(const EmbeddingSequence& seq,
                                           const CalibrationProfile& profile) {
  if (seq.num_frames() < 1) {
    return Error(ErrorCode::kInvalidArgument, "video '" + seq.video_id + "' has no frames");
  }
  if (seq.dim() != profile.dim()) {
    return Error(ErrorCode::kDimensionMismatch,
                 "video '" + seq.video_id + "' has dimension " + std::to_string(seq.dim()) +
                     " but the profile has " + std::to_string(profile.dim()));
  }
  if (!seq.frames.allFinite()) {
    return Error(ErrorCode::kNonFinite, "video '" + seq.video_id + "' has non-finite entries");
  }
  return std::nullopt;
}

inline std::vector<double> row_log_likelihoods(const RowMatrix& y) {
  std::vector<double> out(static_cast<std::size_t>(y.rows()));
  for (Eigen::Index t = 0; t < y.rows(); ++t) {
    out[static_cast<std::size_t>(t)] = log_likelihood_from_sqnorm(y.cols(), y.row(t).squaredNorm());
  }
  return out;
}

// Scores a group of sequences with one whitening product per branch: frames
// (and transitions) of the whole group are stacked before multiplying. A
// 16-row product per video leaves most of the time in packing the d x d
// matrix, so stacking is what makes d = 1024 fast. The per-row arithmetic is
// that of score_branches up to rounding.
inline std::vector<BatchEntry> score_group(std::span<const EmbeddingSequence* const> seqs,
                                           const CalibrationProfile& profile,
                                           std::optional<Fusion> fusion_override) {
  const auto& cfg = profile.config;
  const auto opt = cfg.transition_options();
  validate(opt);
  const Eigen::Index d = profile.dim();
  std::vector<BatchEntry> out(seqs.size());

  std::vector<std::size_t> ok;
  Eigen::Index frame_rows = 0;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    out[i].error = check_scorable(*seqs[i], profile);
    if (out[i].error) continue;
    ok.push_back(i);
    frame_rows += seqs[i]->num_frames();
  }

  std::vector<TransitionSet> sets(seqs.size());
  std::vector<bool> has_branch(seqs.size(), false);
  Eigen::Index transition_rows = 0;
  for (std::size_t i : ok) {
    if (static_cast<std::size_t>(seqs[i]->num_frames()) < min_frames_for(opt)) continue;
    sets[i] = transitions(*seqs[i], opt);
    has_branch[i] = sets[i].normalized.rows() > 0;
    transition_rows += sets[i].normalized.rows();
  }

  RowMatrix frames(frame_rows, d);
  RowMatrix deltas(transition_rows, d);
  std::vector<Eigen::Index> frame_at(seqs.size(), 0), delta_at(seqs.size(), 0);
  Eigen::Index fr = 0, tr = 0;
  for (std::size_t i : ok) {
    frame_at[i] = fr;
    frames.middleRows(fr, seqs[i]->num_frames()) =
        seqs[i]->frames.rowwise() - profile.spatial_model.mean.transpose();
    fr += seqs[i]->num_frames();
    delta_at[i] = tr;
    const auto rows = sets[i].normalized.rows();
    if (rows > 0) {
      deltas.middleRows(tr, rows) =
          sets[i].normalized.rowwise() - profile.temporal_model.mean.transpose();
    }
    tr += rows;
  }
  // Rows are centered while stacking, which saves a second copy per branch.
  const auto spatial_ll =
      row_log_likelihoods(whiten_centered_rows(profile.spatial_model, frames));
  const auto temporal_ll =
      transition_rows > 0
          ? row_log_likelihoods(whiten_centered_rows(profile.temporal_model, deltas))
          : std::vector<double>{};

  for (std::size_t i : ok) {
    const auto& seq = *seqs[i];
    ScoreRecord r;
    r.video_id = seq.video_id;
    r.label = seq.label;
    r.generator = seq.generator;
    r.fusion = fusion_override.value_or(cfg.fusion);
    const auto f0 = static_cast<std::size_t>(frame_at[i]);
    r.s_spatial = aggregate(std::span<const double>(spatial_ll).subspan(
                                f0, static_cast<std::size_t>(seq.num_frames())),
                            cfg.spatial_agg);
    r.perc_spatial = percentile(profile.spatial_scores, r.s_spatial);
    if (has_branch[i]) {
      if (profile.temporal_scores.empty()) {
        out[i].error = Error(ErrorCode::kInsufficientData,
                             "profile has no temporal calibration scores (n_temp = 0)");
        continue;
      }
      const auto t0 = static_cast<std::size_t>(delta_at[i]);
      r.s_temporal = aggregate(std::span<const double>(temporal_ll).subspan(
                                   t0, static_cast<std::size_t>(sets[i].normalized.rows())),
                               cfg.temporal_agg);
      r.perc_temporal = percentile(profile.temporal_scores, *r.s_temporal);
      r.s_video = fuse(r.perc_spatial, *r.perc_temporal, r.fusion);
    } else {
      // Frozen or too-short videos have no temporal branch; the score falls
      // back to the spatial percentile alone.
      r.fallback_spatial_only = true;
      r.s_video = r.perc_spatial;
    }
    out[i].record = std::move(r);
  }
  return out;
}

}  // namespace detail

inline ScoreRecord score_video(const EmbeddingSequence& seq, const CalibrationProfile& profile,
                               std::optional<Fusion> fusion_override = std::nullopt) {
  const EmbeddingSequence* one[] = {&seq};
  auto out = detail::score_group(one, profile, fusion_override);
  if (out[0].error) throw *out[0].error;
  return std::move(*out[0].record);
}

// In-memory batch. Videos are grouped in fixed runs of kScoreGroup in input
// order, so the output does not depend on `jobs`.
inline constexpr std::size_t kScoreGroup = 128;

inline std::vector<BatchEntry> score_sequences(std::span<const EmbeddingSequence> seqs,
                                               const CalibrationProfile& profile,
                                               std::size_t jobs = 1,
                                               std::optional<Fusion> fusion = std::nullopt) {
  std::vector<BatchEntry> out(seqs.size());
  const std::size_t groups = (seqs.size() + kScoreGroup - 1) / kScoreGroup;
  detail::parallel_for(groups, jobs, [&](std::size_t g) {
    const std::size_t begin = g * kScoreGroup;
    const std::size_t end = std::min(seqs.size(), begin + kScoreGroup);
    std::vector<const EmbeddingSequence*> ptrs;
    for (std::size_t i = begin; i < end; ++i) ptrs.push_back(&seqs[i]);
    auto part = detail::score_group(ptrs, profile, fusion);
    std::move(part.begin(), part.end(), out.begin() + static_cast<std::ptrdiff_t>(begin));
  });
  return out;
}

struct BatchOptions {
  std::size_t jobs = 1;
  std::optional<Fusion> fusion;
  std::function<EmbeddingSequence(EmbeddingSequence)> prepare;
};

// Results come back in manifest order. A failing entry is reported in place
// and does not abort the rest of the batch.
inline std::vector<BatchEntry> score_batch(const DatasetManifest& manifest,
                                           const CalibrationProfile& profile,
                                           const BatchOptions& options = {}) {
  const std::size_t n = manifest.size();
  std::vector<BatchEntry> out(n);
  const std::size_t groups = (n + kScoreGroup - 1) / kScoreGroup;
  detail::parallel_for(groups, options.jobs, [&](std::size_t g) {
    const std::size_t begin = g * kScoreGroup;
    const std::size_t end = std::min(n, begin + kScoreGroup);
    std::vector<EmbeddingSequence> loaded(end - begin);
    std::vector<const EmbeddingSequence*> ptrs;
    std::vector<std::size_t> slot;
    for (std::size_t i = begin; i < end; ++i) {
      const auto& entry = manifest.entries[i];
      try {
        auto seq = load_entry(entry);
        if (options.prepare) seq = options.prepare(std::move(seq));
        loaded[i - begin] = std::move(seq);
        ptrs.push_back(&loaded[i - begin]);
        slot.push_back(i);
      } catch (const Error& e) {
        out[i].error = Error(e.code(), entry.video_id + ": " + e.what());
      } catch (const std::exception& e) {
        out[i].error = Error(ErrorCode::kIo, entry.video_id + ": " + e.what());
      }
    }
    auto part = detail::score_group(ptrs, profile, options.fusion);
    for (std::size_t k = 0; k < part.size(); ++k) {
      auto& dst = out[slot[k]];
      dst.record = std::move(part[k].record);
      if (part[k].error) {
        dst.error = Error(part[k].error->code(),
                          manifest.entries[slot[k]].video_id + ": " + part[k].error->what());
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// CSV output

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline constexpr std::string_view kScoreCsvHeader =
    "video_id,label,generator,s_spatial,s_temporal,perc_spatial,perc_temporal,s_video,fallback";

inline void write_score_csv_header(std::ostream& out) { out << kScoreCsvHeader << '\n'; }

inline void write_score_csv_row(std::ostream& out, const ScoreRecord& r) {
  out << r.video_id << ',' << to_string(r.label) << ',' << r.generator.value_or("") << ','
      << format_double(r.s_spatial) << ','
      << (r.s_temporal ? format_double(*r.s_temporal) : std::string()) << ','
      << format_double(r.perc_spatial) << ','
      << (r.perc_temporal ? format_double(*r.perc_temporal) : std::string()) << ','
      << format_double(r.s_video) << ',' << (r.fallback_spatial_only ? "true" : "false") << '\n';
}

}  // namespace stall
