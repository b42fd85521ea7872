#pragma once

// Calibration: fits the spatial and temporal whitening models on a corpus of
// real videos and records the sorted per-video calibration scores. The
// resulting profile is the detector's entire state.

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stall/detail/binary_io.hpp"
#include "stall/detail/parallel.hpp"
#include "stall/embedseq.hpp"
#include "stall/error.hpp"
#include "stall/likelihood.hpp"
#include "stall/random.hpp"
#include "stall/whitening.hpp"

namespace stall {

enum class Fusion : std::uint8_t { kMean = 0, kProduct = 1 };

constexpr std::string_view to_string(Fusion f) {
  return f == Fusion::kMean ? "mean" : "product";
}

inline Fusion parse_fusion(std::string_view text) {
  if (text == "mean") return Fusion::kMean;
  if (text == "product" || text == "prod") return Fusion::kProduct;
  fail(ErrorCode::kInvalidArgument, "unknown fusion '" + std::string(text) + "'");
}

// How the temporal whitening population is gathered.
enum class TemporalFit : std::uint8_t {
  kAllTransitions = 0,
  kSingleTransition = 1,  // one uniformly drawn transition per video
};

struct DetectorConfig {
  int derivative_order = 1;
  int step = 1;
  Aggregation spatial_agg = Aggregation::kMax;
  Aggregation temporal_agg = Aggregation::kMin;
  Fusion fusion = Fusion::kMean;
  TemporalFit temporal_fit = TemporalFit::kAllTransitions;
  double epsilon = kDefaultEigenFloor;
  double norm_floor = kDefaultNormFloor;

  TransitionOptions transition_options() const { return {derivative_order, step, norm_floor}; }
};

inline void validate(const DetectorConfig& cfg) {
  validate(cfg.transition_options());
  if (!(cfg.epsilon >= 0.0)) fail(ErrorCode::kInvalidArgument, "epsilon must be >= 0");
}

inline bool operator==(const WhiteningModel& a, const WhiteningModel& b) {
  auto same = [](const auto& x, const auto& y) {
    return x.rows() == y.rows() && x.cols() == y.cols() && x == y;
  };
  return same(a.mean, b.mean) && same(a.matrix, b.matrix) && same(a.eigenvalues, b.eigenvalues) &&
         a.sample_count == b.sample_count && a.epsilon == b.epsilon && a.floor == b.floor;
}

inline bool operator==(const DetectorConfig& a, const DetectorConfig& b) {
  return a.derivative_order == b.derivative_order && a.step == b.step &&
         a.spatial_agg == b.spatial_agg && a.temporal_agg == b.temporal_agg &&
         a.fusion == b.fusion && a.temporal_fit == b.temporal_fit && a.epsilon == b.epsilon &&
         a.norm_floor == b.norm_floor;
}

struct CalibrationProfile {
  WhiteningModel spatial_model;
  WhiteningModel temporal_model;
  std::vector<double> spatial_scores;   // sorted ascending, length n
  std::vector<double> temporal_scores;  // sorted ascending, length n_temp <= n
  DetectorConfig config;
  std::uint64_t rng_seed = 0;

  Eigen::Index dim() const { return spatial_model.dim(); }
  std::size_t n() const { return spatial_scores.size(); }
  std::size_t n_temp() const { return temporal_scores.size(); }

  bool operator==(const CalibrationProfile&) const = default;
};

// Per-video branch scores under fixed models. temporal is empty when no
// transition survives (frozen or too-short video).
struct VideoScores {
  double spatial = 0.0;
  std::optional<double> temporal;
  std::size_t discarded_transitions = 0;
};

inline VideoScores score_branches(const EmbeddingSequence& seq, const WhiteningModel& spatial,
                                  const WhiteningModel& temporal, const DetectorConfig& cfg) {
  if (seq.num_frames() < 1) fail(ErrorCode::kInvalidArgument, "sequence has no frames");
  VideoScores out;
  const auto frames = spatial_scores(seq, spatial);
  out.spatial = aggregate(frames.values, cfg.spatial_agg);
  const auto opt = cfg.transition_options();
  check_dim(temporal, seq.dim(), "temporal_scores");
  if (static_cast<std::size_t>(seq.num_frames()) < min_frames_for(opt)) return out;
  const auto trans = temporal_scores(seq, temporal, opt);
  out.discarded_transitions = trans.discarded_count;
  if (!trans.values.empty()) out.temporal = aggregate(trans.values, cfg.temporal_agg);
  return out;
}

struct CalibrationOptions {
  DetectorConfig config;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
};

// Fits a profile on in-memory sequences. Every sequence must be labeled real
// or unknown; generated content is refused outright.
inline CalibrationProfile calibrate(std::span<const EmbeddingSequence> videos,
                                    const CalibrationOptions& options) {
  const DetectorConfig& cfg = options.config;
  validate(cfg);
  if (videos.size() < 2) fail(ErrorCode::kInsufficientData, "calibration needs at least 2 videos");
  const Eigen::Index d = videos.front().dim();
  for (const auto& v : videos) {
    if (v.label == Label::kGenerated) {
      fail(ErrorCode::kLabelViolation,
           "calibration corpus contains generated video '" + v.video_id + "'");
    }
    validate(v);
    if (v.dim() != d) {
      fail(ErrorCode::kDimensionMismatch, "video '" + v.video_id + "' has dimension " +
                                              std::to_string(v.dim()) + ", expected " +
                                              std::to_string(d));
    }
  }

  const std::size_t n = videos.size();
  const auto opt = cfg.transition_options();
  const std::uint64_t frame_seed = derive_seed(options.seed, "spatial-frame");
  const std::uint64_t transition_seed = derive_seed(options.seed, "temporal-transition");

  // One uniformly drawn frame per video.
  RowMatrix spatial_pop(static_cast<Eigen::Index>(n), d);
  std::vector<TransitionSet> sets(n);
  detail::parallel_for(n, options.jobs, [&](std::size_t i) {
    const auto& v = videos[i];
    Rng rng(derive_seed(frame_seed, i));
    const auto t = uniform_index(rng, static_cast<std::uint64_t>(v.num_frames()));
    spatial_pop.row(static_cast<Eigen::Index>(i)) = v.frames.row(static_cast<Eigen::Index>(t));
    if (static_cast<std::size_t>(v.num_frames()) >= min_frames_for(opt)) {
      sets[i] = transitions(v, opt);
    }
  });

  // Deterministic merge in video order.
  Eigen::Index temporal_rows = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = sets[i].normalized.rows();
    if (cfg.temporal_fit == TemporalFit::kAllTransitions) {
      temporal_rows += r;
    } else if (r > 0) {
      temporal_rows += 1;
    }
  }
  if (temporal_rows < 2) {
    fail(ErrorCode::kInsufficientData,
         "calibration corpus has fewer than 2 nonzero transitions; temporal model cannot be fit");
  }
  RowMatrix temporal_pop(temporal_rows, d);
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& set = sets[i];
    if (set.normalized.rows() == 0) continue;
    if (cfg.temporal_fit == TemporalFit::kAllTransitions) {
      temporal_pop.middleRows(row, set.normalized.rows()) = set.normalized;
      row += set.normalized.rows();
    } else {
      Rng rng(derive_seed(transition_seed, i));
      const auto pick = uniform_index(rng, static_cast<std::uint64_t>(set.normalized.rows()));
      temporal_pop.row(row++) = set.normalized.row(static_cast<Eigen::Index>(pick));
    }
  }
  sets.clear();

  CalibrationProfile profile;
  profile.config = cfg;
  profile.rng_seed = options.seed;
  profile.spatial_model = fit(spatial_pop, cfg.epsilon);
  profile.temporal_model = fit(temporal_pop, cfg.epsilon);

  std::vector<VideoScores> scores(n);
  detail::parallel_for(n, options.jobs, [&](std::size_t i) {
    scores[i] = score_branches(videos[i], profile.spatial_model, profile.temporal_model, cfg);
  });
  profile.spatial_scores.reserve(n);
  for (const auto& s : scores) {
    profile.spatial_scores.push_back(s.spatial);
    if (s.temporal) profile.temporal_scores.push_back(*s.temporal);
  }
  std::sort(profile.spatial_scores.begin(), profile.spatial_scores.end());
  std::sort(profile.temporal_scores.begin(), profile.temporal_scores.end());
  return profile;
}

// Loads every manifest entry (after checking that none is labeled
// generated) and calibrates. `prepare` may standardize frame rate/length.
inline CalibrationProfile calibrate(
    const DatasetManifest& manifest, const CalibrationOptions& options,
    const std::function<EmbeddingSequence(EmbeddingSequence)>& prepare = {}) {
  if (manifest.empty()) fail(ErrorCode::kInsufficientData, "calibration manifest is empty");
  for (const auto& e : manifest.entries) {
    if (e.label != Label::kReal) {
      fail(ErrorCode::kLabelViolation, "calibration manifest entry '" + e.video_id +
                                           "' is labeled " + std::string(to_string(e.label)) +
                                           "; only real videos are allowed");
    }
  }
  std::vector<EmbeddingSequence> videos(manifest.size());
  detail::parallel_for(manifest.size(), options.jobs, [&](std::size_t i) {
    auto seq = load_entry(manifest.entries[i]);
    videos[i] = prepare ? prepare(std::move(seq)) : std::move(seq);
  });
  return calibrate(std::span<const EmbeddingSequence>(videos), options);
}

// ---------------------------------------------------------------------------
// STALLCAL profile file
//
//   magic "STALLCAL" | u16 version | u16 reserved | u32 d | u32 n | u32 n_temp
//   | config block | mu | W | eigenvalues | mu_D | W_D | eigenvalues_D
//   | spatial scores (n) | temporal scores (n_temp)
//
// Config block (version 1): u32 derivative_order, u32 step, u8 spatial_agg,
// u8 temporal_agg, u8 fusion, u8 temporal_fit, f64 epsilon, f64 norm_floor,
// u64 rng_seed, u64 spatial sample count, u64 temporal sample count,
// f64 spatial floor, f64 temporal floor. Arrays are f64, matrices row-major.

inline constexpr std::string_view kProfileMagic = "STALLCAL";
inline constexpr std::uint16_t kProfileVersion = 1;

namespace detail {

inline void write_model_arrays(std::ostream& out, const WhiteningModel& m) {
  write_le_span<double>(out, std::span<const double>(m.mean.data(), m.mean.size()));
  write_le_span<double>(out, std::span<const double>(m.matrix.data(), m.matrix.size()));
  write_le_span<double>(out, std::span<const double>(m.eigenvalues.data(), m.eigenvalues.size()));
}

inline void read_model_arrays(std::istream& in, WhiteningModel& m, Eigen::Index d,
                              const std::string& name) {
  m.mean.resize(d);
  m.matrix.resize(d, d);
  m.eigenvalues.resize(d);
  read_le_span<double>(in, std::span<double>(m.mean.data(), m.mean.size()), name + " mean");
  read_le_span<double>(in, std::span<double>(m.matrix.data(), m.matrix.size()), name + " matrix");
  read_le_span<double>(in, std::span<double>(m.eigenvalues.data(), m.eigenvalues.size()),
                       name + " eigenvalues");
}

inline std::uint8_t checked_enum(std::uint8_t v, std::uint8_t max, const char* what) {
  if (v > max) fail(ErrorCode::kFormat, std::string("profile has invalid ") + what);
  return v;
}

}  // namespace detail

inline void save_profile(const CalibrationProfile& p, std::ostream& out) {
  const auto d = static_cast<std::uint32_t>(p.dim());
  if (p.temporal_model.dim() != p.dim()) {
    fail(ErrorCode::kDimensionMismatch, "profile models disagree on dimension");
  }
  out.write(kProfileMagic.data(), static_cast<std::streamsize>(kProfileMagic.size()));
  detail::write_le<std::uint16_t>(out, kProfileVersion);
  detail::write_le<std::uint16_t>(out, 0);
  detail::write_le<std::uint32_t>(out, d);
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.n()));
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.n_temp()));
  const auto& c = p.config;
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.derivative_order));
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.step));
  detail::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(c.spatial_agg));
  detail::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(c.temporal_agg));
  detail::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(c.fusion));
  detail::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(c.temporal_fit));
  detail::write_le<double>(out, c.epsilon);
  detail::write_le<double>(out, c.norm_floor);
  detail::write_le<std::uint64_t>(out, p.rng_seed);
  detail::write_le<std::uint64_t>(out, p.spatial_model.sample_count);
  detail::write_le<std::uint64_t>(out, p.temporal_model.sample_count);
  detail::write_le<double>(out, p.spatial_model.floor);
  detail::write_le<double>(out, p.temporal_model.floor);
  detail::write_model_arrays(out, p.spatial_model);
  detail::write_model_arrays(out, p.temporal_model);
  detail::write_le_span<double>(out, p.spatial_scores);
  detail::write_le_span<double>(out, p.temporal_scores);
  if (!out) fail(ErrorCode::kIo, "failed writing profile");
}

inline void save_profile(const CalibrationProfile& p, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  save_profile(p, out);
  out.close();
  if (!out) fail(ErrorCode::kIo, "failed writing " + path.string());
}

inline CalibrationProfile load_profile(std::istream& in) {
  detail::expect_magic(in, kProfileMagic);
  const auto version = detail::read_le<std::uint16_t>(in, "version");
  if (version != kProfileVersion) {
    fail(ErrorCode::kUnsupportedVersion, "unsupported profile version " + std::to_string(version) +
                                             " (this build reads version " +
                                             std::to_string(kProfileVersion) + ")");
  }
  detail::read_le<std::uint16_t>(in, "reserved");
  const auto d = detail::read_le<std::uint32_t>(in, "d");
  const auto n = detail::read_le<std::uint32_t>(in, "n");
  const auto n_temp = detail::read_le<std::uint32_t>(in, "n_temp");
  if (d == 0) fail(ErrorCode::kFormat, "profile has d = 0");

  CalibrationProfile p;
  auto& c = p.config;
  c.derivative_order = static_cast<int>(detail::read_le<std::uint32_t>(in, "derivative_order"));
  c.step = static_cast<int>(detail::read_le<std::uint32_t>(in, "step"));
  c.spatial_agg = static_cast<Aggregation>(
      detail::checked_enum(detail::read_le<std::uint8_t>(in, "spatial_agg"), 2, "spatial_agg"));
  c.temporal_agg = static_cast<Aggregation>(
      detail::checked_enum(detail::read_le<std::uint8_t>(in, "temporal_agg"), 2, "temporal_agg"));
  c.fusion = static_cast<Fusion>(
      detail::checked_enum(detail::read_le<std::uint8_t>(in, "fusion"), 1, "fusion"));
  c.temporal_fit = static_cast<TemporalFit>(
      detail::checked_enum(detail::read_le<std::uint8_t>(in, "temporal_fit"), 1, "temporal_fit"));
  c.epsilon = detail::read_le<double>(in, "epsilon");
  c.norm_floor = detail::read_le<double>(in, "norm_floor");
  p.rng_seed = detail::read_le<std::uint64_t>(in, "rng_seed");
  p.spatial_model.sample_count = detail::read_le<std::uint64_t>(in, "spatial sample count");
  p.temporal_model.sample_count = detail::read_le<std::uint64_t>(in, "temporal sample count");
  p.spatial_model.floor = detail::read_le<double>(in, "spatial floor");
  p.temporal_model.floor = detail::read_le<double>(in, "temporal floor");
  p.spatial_model.epsilon = c.epsilon;
  p.temporal_model.epsilon = c.epsilon;
  validate(c);

  detail::read_model_arrays(in, p.spatial_model, d, "spatial");
  detail::read_model_arrays(in, p.temporal_model, d, "temporal");
  p.spatial_scores.resize(n);
  p.temporal_scores.resize(n_temp);
  detail::read_le_span<double>(in, std::span<double>(p.spatial_scores), "spatial scores");
  detail::read_le_span<double>(in, std::span<double>(p.temporal_scores), "temporal scores");
  return p;
}

inline CalibrationProfile load_profile(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open profile " + path.string());
  return load_profile(in);
}

}  // namespace stall
