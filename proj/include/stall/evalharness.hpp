#pragma once

// Detection-quality evaluation: AUC / AP over the generated (positive)
// class, the balanced real-vs-generated sampling protocol, temporal
// perturbations of embedding sequences, and a synthetic corpus generator
// used as a desk-scale stand-in for encoded benchmark videos.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "stall/detail/parallel.hpp"
#include "stall/embedseq.hpp"
#include "stall/error.hpp"
#include "stall/random.hpp"
#include "stall/scoring.hpp"

namespace stall::eval {

// detection_score is oriented so that higher means "more likely generated".
struct LabeledScore {
  std::string video_id;
  double detection_score = 0.0;
  Label label = Label::kReal;
  std::optional<std::string> generator;
};

inline LabeledScore to_labeled(const ScoreRecord& r) {
  return {r.video_id, 1.0 - r.s_video, r.label, r.generator};
}

struct EvalResult {
  std::string benchmark;
  std::optional<std::string> generator;
  double auc = 0.0;
  double ap = 0.0;
  std::size_t n_real = 0;
  std::size_t n_generated = 0;
};

// Mann-Whitney AUC with midranks: P(gen > real) + 1/2 P(tie).
inline double auc(std::span<const LabeledScore> scores) {
  std::vector<std::size_t> order;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i].label == Label::kGenerated) {
      ++positives;
    } else if (scores[i].label == Label::kReal) {
      ++negatives;
    } else {
      continue;
    }
    order.push_back(i);
  }
  if (positives == 0 || negatives == 0) {
    fail(ErrorCode::kInsufficientData, "AUC needs at least one real and one generated score");
  }
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a].detection_score < scores[b].detection_score;
  });
  double positive_rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() &&
           scores[order[j]].detection_score == scores[order[i]].detection_score) {
      ++j;
    }
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (scores[order[k]].label == Label::kGenerated) positive_rank_sum += midrank;
    }
    i = j;
  }
  const double p = static_cast<double>(positives);
  const double n = static_cast<double>(negatives);
  return (positive_rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

// Ranking used by average_precision: descending score, then video_id
// ascending, then input position.
inline std::vector<std::size_t> detection_ranking(std::span<const LabeledScore> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a].detection_score != scores[b].detection_score) {
      return scores[a].detection_score > scores[b].detection_score;
    }
    return scores[a].video_id < scores[b].video_id;
  });
  return order;
}

// Step-wise AP: mean over positives of the precision at each positive's rank.
inline double average_precision(std::span<const LabeledScore> scores) {
  const auto order = detection_ranking(scores);
  std::size_t positives = 0;
  for (const auto& s : scores) positives += s.label == Label::kGenerated ? 1 : 0;
  if (positives == 0) fail(ErrorCode::kInsufficientData, "AP needs at least one generated score");
  double ap = 0.0;
  std::size_t hits = 0;
  std::size_t rank = 0;
  for (std::size_t idx : order) {
    if (scores[idx].label == Label::kUnknown) continue;
    ++rank;
    if (scores[idx].label == Label::kGenerated) {
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(rank);
    }
  }
  return ap / static_cast<double>(positives);
}

// ---------------------------------------------------------------------------
// Balanced sampling

struct EvalSplit {
  std::optional<std::string> generator;  // empty for the pooled split
  std::vector<ManifestEntry> real;
  std::vector<ManifestEntry> generated;
};

// For each generator with N generated videos, draws exactly N real videos.
// Real videos are split evenly across their source datasets: every source
// gets floor(N / k) and the N mod k remainder goes to sources picked by a
// seeded shuffle. With per_generator = false, all generated videos form one
// pooled split.
inline std::vector<EvalSplit> balanced_pairs(const DatasetManifest& manifest, bool per_generator,
                                             std::uint64_t seed) {
  std::map<std::string, std::vector<const ManifestEntry*>> real_by_source;
  std::map<std::string, std::vector<const ManifestEntry*>> generated_by_model;
  for (const auto& e : manifest.entries) {
    if (e.label == Label::kReal) {
      real_by_source[e.source].push_back(&e);
    } else if (e.label == Label::kGenerated) {
      generated_by_model[per_generator ? e.generator.value_or("unknown") : ""].push_back(&e);
    }
  }
  if (generated_by_model.empty()) fail(ErrorCode::kInsufficientData, "no generated videos");
  if (real_by_source.empty()) fail(ErrorCode::kInsufficientData, "no real videos");

  std::vector<EvalSplit> splits;
  for (const auto& [model, generated] : generated_by_model) {
    EvalSplit split;
    if (per_generator) split.generator = model;
    for (const auto* e : generated) split.generated.push_back(*e);

    const std::size_t want = generated.size();
    const std::size_t k = real_by_source.size();
    std::vector<std::string> sources;
    for (const auto& kv : real_by_source) sources.push_back(kv.first);
    Rng remainder_rng(derive_seed(seed, "remainder/" + model));
    std::vector<std::string> shuffled = sources;
    seeded_shuffle(shuffled.begin(), shuffled.end(), remainder_rng);
    std::map<std::string, std::size_t> quota;
    for (const auto& s : sources) quota[s] = want / k;
    for (std::size_t i = 0; i < want % k; ++i) quota[shuffled[i]] += 1;

    for (const auto& source : sources) {
      const auto& pool = real_by_source.at(source);
      const std::size_t take = quota[source];
      if (pool.size() < take) {
        fail(ErrorCode::kInsufficientData,
             "real source '" + source + "' has " + std::to_string(pool.size()) +
                 " videos but the split for '" + model + "' needs " + std::to_string(take));
      }
      std::vector<std::size_t> idx(pool.size());
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      Rng rng(derive_seed(seed, "sample/" + model + "/" + source));
      for (std::size_t i = 0; i < take; ++i) {
        std::swap(idx[i], idx[i + uniform_index(rng, pool.size() - i)]);
        split.real.push_back(*pool[idx[i]]);
      }
    }
    splits.push_back(std::move(split));
  }
  return splits;
}

// Runs balanced_pairs over the manifest entries that have score records and
// computes AUC / AP per split.
inline std::vector<EvalResult> evaluate(std::span<const ScoreRecord> records,
                                        const DatasetManifest& manifest, bool per_generator,
                                        std::uint64_t seed, const std::string& benchmark) {
  std::unordered_map<std::string, const ScoreRecord*> by_id;
  for (const auto& r : records) by_id[r.video_id] = &r;
  DatasetManifest scored;
  for (const auto& e : manifest.entries) {
    if (by_id.count(e.video_id)) scored.entries.push_back(e);
  }
  std::vector<EvalResult> results;
  for (const auto& split : balanced_pairs(scored, per_generator, seed)) {
    std::vector<LabeledScore> scores;
    for (const auto* group : {&split.real, &split.generated}) {
      for (const auto& e : *group) {
        auto s = to_labeled(*by_id.at(e.video_id));
        s.label = e.label;
        s.generator = e.generator;
        scores.push_back(std::move(s));
      }
    }
    EvalResult r;
    r.benchmark = benchmark;
    r.generator = split.generator;
    r.n_real = split.real.size();
    r.n_generated = split.generated.size();
    r.auc = auc(scores);
    r.ap = average_precision(scores);
    results.push_back(std::move(r));
  }
  return results;
}

inline void write_eval_csv(std::ostream& out, std::span<const EvalResult> results) {
  out << "benchmark,generator,n_real,n_generated,auc,ap\n";
  for (const auto& r : results) {
    out << r.benchmark << ',' << r.generator.value_or("all") << ',' << r.n_real << ','
        << r.n_generated << ',' << format_double(r.auc) << ',' << format_double(r.ap) << '\n';
  }
}

inline std::vector<ScoreRecord> read_score_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) fail(ErrorCode::kFormat, "score CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kScoreCsvHeader) fail(ErrorCode::kFormat, "unexpected score CSV header: " + line);
  auto parse_double = [](const std::string& text) {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  };
  std::vector<ScoreRecord> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cols.push_back(cell);
    if (!line.empty() && line.back() == ',') cols.emplace_back();
    if (cols.size() != 9) {
      fail(ErrorCode::kFormat, "score CSV line " + std::to_string(line_no) + " has " +
                                   std::to_string(cols.size()) + " columns");
    }
    try {
      ScoreRecord r;
      r.video_id = cols[0];
      r.label = parse_label(cols[1]);
      if (!cols[2].empty()) r.generator = cols[2];
      r.s_spatial = parse_double(cols[3]);
      if (!cols[4].empty()) r.s_temporal = parse_double(cols[4]);
      r.perc_spatial = parse_double(cols[5]);
      if (!cols[6].empty()) r.perc_temporal = parse_double(cols[6]);
      r.s_video = parse_double(cols[7]);
      r.fallback_spatial_only = cols[8] == "true";
      out.push_back(std::move(r));
    } catch (const std::logic_error&) {
      fail(ErrorCode::kFormat, "score CSV line " + std::to_string(line_no) + " is malformed");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Temporal perturbations

struct Reverse {};
struct ShuffleConsecutive {
  std::uint64_t seed = 0;
};
struct InsertVector {
  std::size_t position = 0;
  Vector vector;  // embedding of the inserted frame (e.g. a black or white frame)
};
using Perturbation = std::variant<Reverse, ShuffleConsecutive, InsertVector>;

inline EmbeddingSequence reverse_frames(const EmbeddingSequence& seq) {
  EmbeddingSequence out = seq;
  out.frames = seq.frames.colwise().reverse();
  return out;
}

// Swaps each disjoint adjacent pair (0,1), (2,3), ... with probability 1/2.
inline EmbeddingSequence shuffle_consecutive(const EmbeddingSequence& seq, std::uint64_t seed) {
  EmbeddingSequence out = seq;
  Rng rng(seed);
  for (Eigen::Index t = 0; t + 1 < out.frames.rows(); t += 2) {
    if (rng() >> 63) out.frames.row(t).swap(out.frames.row(t + 1));
  }
  return out;
}

// Inserts a frame before `position`; position == T appends.
inline EmbeddingSequence insert_frame(const EmbeddingSequence& seq, std::size_t position,
                                      const Eigen::Ref<const Vector>& frame) {
  if (frame.size() != seq.dim()) {
    fail(ErrorCode::kDimensionMismatch, "inserted frame has dimension " +
                                            std::to_string(frame.size()) + ", expected " +
                                            std::to_string(seq.dim()));
  }
  if (!frame.allFinite()) fail(ErrorCode::kNonFinite, "inserted frame is not finite");
  const auto t = static_cast<std::size_t>(seq.num_frames());
  if (position > t) {
    fail(ErrorCode::kOutOfRange, "insert position " + std::to_string(position) +
                                     " is past the end of a " + std::to_string(t) +
                                     "-frame sequence");
  }
  EmbeddingSequence out = seq;
  const auto p = static_cast<Eigen::Index>(position);
  out.frames.resize(seq.num_frames() + 1, seq.dim());
  out.frames.topRows(p) = seq.frames.topRows(p);
  out.frames.row(p) = frame.transpose();
  out.frames.bottomRows(seq.num_frames() - p) = seq.frames.bottomRows(seq.num_frames() - p);
  return out;
}

inline EmbeddingSequence perturb_sequence(const EmbeddingSequence& seq, const Perturbation& kind) {
  validate(seq);
  struct Visitor {
    const EmbeddingSequence& seq;
    EmbeddingSequence operator()(const Reverse&) const { return reverse_frames(seq); }
    EmbeddingSequence operator()(const ShuffleConsecutive& s) const {
      return shuffle_consecutive(seq, s.seed);
    }
    EmbeddingSequence operator()(const InsertVector& s) const {
      return insert_frame(seq, s.position, s.vector);
    }
  };
  return std::visit(Visitor{seq}, kind);
}

// ---------------------------------------------------------------------------
// Synthetic corpus
//
// Real videos: frame x_t = a + e_t with a per-video anchor a ~ N(0, diag(s^2))
// and AR(1) noise e_t = rho e_{t-1} + sqrt(1 - rho^2) * nu (.) g_t, both with
// scales decaying geometrically from their top value to a tenth of it over
// the coordinates. Fake videos tweak one of three knobs:
//   spatial_shift     anchor mean moved along coordinate 0 (the top
//                     eigendirection) by this many frame standard deviations
//   transition_scale  multiplies the AR noise
//   direction_bias    alternating +/- bias/2 offset along a fixed unit
//                     vector spread over the upper half of the coordinates,
//                     which tilts every transition toward that direction

struct SynthProcess {
  double spatial_shift = 0.0;
  double transition_scale = 1.0;
  double direction_bias = 0.0;
};

struct SynthParams {
  std::size_t n_calibration = 2000;
  std::size_t n_real = 500;
  std::size_t n_fake = 500;
  std::size_t frames = 16;
  Eigen::Index dim = 64;
  double fps = 8.0;
  double anchor_scale = 1.0;
  double noise_scale = 0.3;
  double rho = 0.9;
  SynthProcess fake;
};

inline Vector decaying_scales(Eigen::Index d, double top) {
  Vector s(d);
  for (Eigen::Index k = 0; k < d; ++k) {
    s(k) = d > 1 ? top * std::pow(10.0, -static_cast<double>(k) / static_cast<double>(d - 1))
                 : top;
  }
  return s;
}

inline Vector bias_direction(Eigen::Index d) {
  Vector u = Vector::Zero(d);
  u.tail(d - d / 2).setOnes();
  return u.normalized();
}

inline void validate(const SynthParams& p) {
  if (p.dim < 2) fail(ErrorCode::kInvalidArgument, "synthetic corpus needs d >= 2");
  if (p.frames < 2) fail(ErrorCode::kInvalidArgument, "synthetic corpus needs T >= 2");
  if (!(p.fps > 0.0)) fail(ErrorCode::kInvalidArgument, "synthetic fps must be positive");
  if (!(p.rho >= 0.0 && p.rho < 1.0)) fail(ErrorCode::kInvalidArgument, "rho must be in [0, 1)");
  if (!(p.anchor_scale > 0.0) || !(p.noise_scale > 0.0) || !(p.fake.transition_scale > 0.0)) {
    fail(ErrorCode::kInvalidArgument, "synthetic scales must be positive");
  }
}

inline EmbeddingSequence synth_video(const SynthParams& p, const SynthProcess& process,
                                     std::uint64_t seed) {
  Rng rng(seed);
  NormalSampler normal;
  const Eigen::Index d = p.dim;
  const Vector anchor_sd = decaying_scales(d, p.anchor_scale);
  const Vector noise_sd = decaying_scales(d, p.noise_scale) * process.transition_scale;
  const Vector base_noise = decaying_scales(d, p.noise_scale);
  Vector anchor(d);
  for (Eigen::Index k = 0; k < d; ++k) anchor(k) = anchor_sd(k) * normal(rng);
  anchor(0) += process.spatial_shift *
               std::sqrt(anchor_sd(0) * anchor_sd(0) + base_noise(0) * base_noise(0));
  const Vector u = bias_direction(d);
  const double innovation = std::sqrt(1.0 - p.rho * p.rho);

  EmbeddingSequence seq;
  seq.fps = p.fps;
  seq.frames.resize(static_cast<Eigen::Index>(p.frames), d);
  Vector e(d);
  for (Eigen::Index k = 0; k < d; ++k) e(k) = noise_sd(k) * normal(rng);
  for (Eigen::Index t = 0; t < seq.frames.rows(); ++t) {
    if (t > 0) {
      for (Eigen::Index k = 0; k < d; ++k) e(k) = p.rho * e(k) + innovation * noise_sd(k) * normal(rng);
    }
    const double sign = (t % 2 == 0) ? 1.0 : -1.0;
    seq.frames.row(t) = (anchor + e + sign * 0.5 * process.direction_bias * u).transpose();
  }
  return seq;
}

inline std::vector<EmbeddingSequence> synth_videos(const SynthParams& p,
                                                   const SynthProcess& process, std::size_t count,
                                                   std::uint64_t seed, Label label,
                                                   const std::string& prefix,
                                                   std::optional<std::string> generator = {},
                                                   std::size_t jobs = 1) {
  validate(p);
  std::vector<EmbeddingSequence> out(count);
  stall::detail::parallel_for(count, jobs, [&](std::size_t i) {
    out[i] = synth_video(p, process, derive_seed(seed, i));
    char id[64];
    std::snprintf(id, sizeof id, "%s_%06zu", prefix.c_str(), i);
    out[i].video_id = id;
    out[i].label = label;
    out[i].generator = generator;
  });
  return out;
}

struct SynthCorpus {
  std::vector<EmbeddingSequence> calibration;
  std::vector<EmbeddingSequence> test_real;
  std::vector<EmbeddingSequence> test_fake;
};

inline SynthCorpus synth_corpus(const SynthParams& p, std::uint64_t seed, std::size_t jobs = 1) {
  SynthCorpus c;
  c.calibration = synth_videos(p, {}, p.n_calibration, derive_seed(seed, "calibration"),
                               Label::kReal, "calib", std::nullopt, jobs);
  c.test_real = synth_videos(p, {}, p.n_real, derive_seed(seed, "test-real"), Label::kReal,
                             "real", std::nullopt, jobs);
  c.test_fake = synth_videos(p, p.fake, p.n_fake, derive_seed(seed, "test-fake"),
                             Label::kGenerated, "fake", std::string("synthetic"), jobs);
  return c;
}

struct SynthManifests {
  DatasetManifest calibration;
  DatasetManifest test;
};

// Writes every sequence as <dir>/<video_id>.emb and returns the two
// manifests (calibration: real only; test: real + generated).
inline SynthManifests write_corpus(const SynthCorpus& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto emit = [&](const std::vector<EmbeddingSequence>& videos, const std::string& source,
                  DatasetManifest& m) {
    for (const auto& v : videos) {
      const auto path = dir / (v.video_id + ".emb");
      write_sequence(v, path);
      m.entries.push_back({path, v.video_id, v.label, v.generator, source});
    }
  };
  SynthManifests m;
  emit(c.calibration, "synthetic-calibration", m.calibration);
  emit(c.test_real, "synthetic-real", m.test);
  emit(c.test_fake, "synthetic-fake", m.test);
  return m;
}

}  // namespace stall::eval
