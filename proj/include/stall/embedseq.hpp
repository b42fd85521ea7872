#pragma once

// Embedding sequences: the per-video T x d matrix of frame embeddings, its
// STALLEMB binary file format, the JSON Lines dataset manifest, and the
// frame-rate standardization rule.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stall/detail/binary_io.hpp"
#include "stall/error.hpp"

namespace stall {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

enum class Label { kReal, kGenerated, kUnknown };

constexpr std::string_view to_string(Label label) {
  switch (label) {
    case Label::kReal: return "real";
    case Label::kGenerated: return "generated";
    case Label::kUnknown: return "unknown";
  }
  return "unknown";
}

inline Label parse_label(std::string_view text) {
  if (text == "real") return Label::kReal;
  if (text == "generated" || text == "fake") return Label::kGenerated;
  if (text == "unknown" || text.empty()) return Label::kUnknown;
  fail(ErrorCode::kFormat, "unknown label '" + std::string(text) + "'");
}

struct EmbeddingSequence {
  std::string video_id;
  RowMatrix frames;  // T x d, one frame per row
  double fps = 0.0;
  Label label = Label::kUnknown;
  std::optional<std::string> generator;

  Eigen::Index num_frames() const { return frames.rows(); }
  Eigen::Index dim() const { return frames.cols(); }
};

// Throws unless T >= 1, d >= 1, fps > 0 and every entry is finite.
inline void validate(const EmbeddingSequence& seq) {
  if (seq.frames.rows() < 1 || seq.frames.cols() < 1) {
    fail(ErrorCode::kInvalidArgument,
         "sequence '" + seq.video_id + "' must have T >= 1 and d >= 1");
  }
  if (!(seq.fps > 0.0) || !std::isfinite(seq.fps)) {
    fail(ErrorCode::kInvalidArgument, "sequence '" + seq.video_id + "' has non-positive fps");
  }
  if (!seq.frames.allFinite()) {
    fail(ErrorCode::kNonFinite, "sequence '" + seq.video_id + "' has non-finite entries");
  }
}

// ---------------------------------------------------------------------------
// STALLEMB file format
//
//   magic "STALLEMB" | u16 version=1 | u16 reserved | u32 T | u32 d | f64 fps
//   | T*d f32 row-major (frame-major)
//
// All little-endian.

inline constexpr std::string_view kEmbeddingMagic = "STALLEMB";
inline constexpr std::uint16_t kEmbeddingVersion = 1;

inline void write_sequence(const EmbeddingSequence& seq, std::ostream& out) {
  validate(seq);
  const auto rows = static_cast<std::uint32_t>(seq.frames.rows());
  const auto cols = static_cast<std::uint32_t>(seq.frames.cols());
  std::vector<float> payload(static_cast<std::size_t>(rows) * cols);
  for (std::uint32_t t = 0; t < rows; ++t) {
    for (std::uint32_t j = 0; j < cols; ++j) {
      const float v = static_cast<float>(seq.frames(t, j));
      if (!std::isfinite(v)) {
        fail(ErrorCode::kNonFinite,
             "sequence '" + seq.video_id + "' has an entry outside f32 range");
      }
      payload[static_cast<std::size_t>(t) * cols + j] = v;
    }
  }
  out.write(kEmbeddingMagic.data(), static_cast<std::streamsize>(kEmbeddingMagic.size()));
  detail::write_le<std::uint16_t>(out, kEmbeddingVersion);
  detail::write_le<std::uint16_t>(out, 0);
  detail::write_le<std::uint32_t>(out, rows);
  detail::write_le<std::uint32_t>(out, cols);
  detail::write_le<double>(out, seq.fps);
  detail::write_le_span<float>(out, payload);
  if (!out) fail(ErrorCode::kIo, "failed writing sequence '" + seq.video_id + "'");
}

inline void write_sequence(const EmbeddingSequence& seq, const std::filesystem::path& path) {
  validate(seq);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  write_sequence(seq, out);
  out.close();
  if (!out) fail(ErrorCode::kIo, "failed writing " + path.string());
}

inline EmbeddingSequence read_sequence(std::istream& in, std::string video_id = {}) {
  detail::expect_magic(in, kEmbeddingMagic);
  const auto version = detail::read_le<std::uint16_t>(in, "version");
  if (version != kEmbeddingVersion) {
    fail(ErrorCode::kUnsupportedVersion,
         "unsupported embedding file version " + std::to_string(version));
  }
  detail::read_le<std::uint16_t>(in, "reserved");
  const auto rows = detail::read_le<std::uint32_t>(in, "T");
  const auto cols = detail::read_le<std::uint32_t>(in, "d");
  const auto fps = detail::read_le<double>(in, "fps");
  if (rows == 0 || cols == 0) fail(ErrorCode::kFormat, "embedding file has T = 0 or d = 0");
  if (!(fps > 0.0) || !std::isfinite(fps)) fail(ErrorCode::kFormat, "embedding file has fps <= 0");

  std::vector<float> payload(static_cast<std::size_t>(rows) * cols);
  detail::read_le_span<float>(in, payload, "embedding payload");

  EmbeddingSequence seq;
  seq.video_id = std::move(video_id);
  seq.fps = fps;
  seq.frames.resize(rows, cols);
  for (std::size_t i = 0; i < payload.size(); ++i) {
    if (!std::isfinite(payload[i])) {
      fail(ErrorCode::kNonFinite, "embedding payload has a non-finite entry at index " +
                                      std::to_string(i));
    }
    seq.frames.data()[i] = static_cast<double>(payload[i]);
  }
  return seq;
}

// video_id defaults to the file stem; label and generator come from the
// manifest (see load_entry).
inline EmbeddingSequence read_sequence(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  return read_sequence(in, path.stem().string());
}

// ---------------------------------------------------------------------------
// Dataset manifest (JSON Lines: path, video_id, label, generator, source)

struct ManifestEntry {
  std::filesystem::path path;
  std::string video_id;
  Label label = Label::kUnknown;
  std::optional<std::string> generator;
  std::string source;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
};

inline void check_unique_ids(const DatasetManifest& manifest) {
  std::set<std::string> seen;
  for (const auto& e : manifest.entries) {
    if (!seen.insert(e.video_id).second) {
      fail(ErrorCode::kFormat, "duplicate video_id '" + e.video_id + "' in manifest");
    }
  }
}

inline nlohmann::json to_json(const ManifestEntry& e) {
  nlohmann::json j;
  j["path"] = e.path.generic_string();
  j["video_id"] = e.video_id;
  j["label"] = std::string(to_string(e.label));
  j["generator"] = e.generator ? nlohmann::json(*e.generator) : nlohmann::json(nullptr);
  j["source"] = e.source;
  return j;
}

// Relative paths inside a manifest resolve against the manifest's directory.
inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open manifest " + path.string());
  const auto base = path.parent_path();
  DatasetManifest manifest;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& ex) {
      fail(ErrorCode::kFormat, path.string() + ":" + std::to_string(line_no) + ": " + ex.what());
    }
    if (!j.contains("path") || !j["path"].is_string()) {
      fail(ErrorCode::kFormat, path.string() + ":" + std::to_string(line_no) + ": missing path");
    }
    ManifestEntry e;
    e.path = j["path"].get<std::string>();
    if (e.path.is_relative()) e.path = base / e.path;
    e.video_id = j.value("video_id", e.path.stem().string());
    e.label = parse_label(j.value("label", std::string("unknown")));
    if (j.contains("generator") && j["generator"].is_string()) {
      e.generator = j["generator"].get<std::string>();
    }
    e.source = j.value("source", std::string());
    manifest.entries.push_back(std::move(e));
  }
  check_unique_ids(manifest);
  return manifest;
}

// Paths are written relative to the manifest's directory when they live
// beneath it.
inline void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  check_unique_ids(manifest);
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  const auto base = std::filesystem::absolute(path).parent_path().lexically_normal();
  for (auto e : manifest.entries) {
    const auto abs = std::filesystem::absolute(e.path).lexically_normal();
    const auto rel = abs.lexically_relative(base);
    if (!rel.empty() && *rel.begin() != "..") e.path = rel;
    out << to_json(e).dump() << '\n';
  }
  if (!out) fail(ErrorCode::kIo, "failed writing " + path.string());
}

inline EmbeddingSequence load_entry(const ManifestEntry& entry) {
  auto seq = read_sequence(entry.path);
  seq.video_id = entry.video_id;
  seq.label = entry.label;
  seq.generator = entry.generator;
  return seq;
}

// ---------------------------------------------------------------------------
// Frame-rate standardization

// Tie-break for the rounded frame position: half-to-even, the rule used by
// the reference implementation of the sampler.
inline long long round_position(double x) {
  return static_cast<long long>(std::nearbyint(x));
}

// i_j = round(r * j), r = current_fps / target_fps, for j = 0, 1, ... while
// i_j < num_frames. Requires target_fps <= current_fps.
inline std::vector<std::size_t> downsample_indices(std::size_t num_frames, double current_fps,
                                                   double target_fps) {
  if (num_frames < 1) fail(ErrorCode::kInvalidArgument, "num_frames must be >= 1");
  if (!(current_fps > 0.0) || !(target_fps > 0.0)) {
    fail(ErrorCode::kInvalidArgument, "frame rates must be positive");
  }
  if (target_fps > current_fps) {
    fail(ErrorCode::kInvalidArgument, "target fps exceeds source fps; upsampling is not supported");
  }
  const double ratio = current_fps / target_fps;
  std::vector<std::size_t> indices;
  for (std::size_t j = 0;; ++j) {
    const long long idx = round_position(ratio * static_cast<double>(j));
    if (idx >= static_cast<long long>(num_frames)) break;
    indices.push_back(static_cast<std::size_t>(idx));
  }
  return indices;
}

inline EmbeddingSequence select_frames(const EmbeddingSequence& seq,
                                       std::span<const std::size_t> indices) {
  EmbeddingSequence out = seq;
  out.frames.resize(static_cast<Eigen::Index>(indices.size()), seq.dim());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    out.frames.row(static_cast<Eigen::Index>(i)) =
        seq.frames.row(static_cast<Eigen::Index>(indices[i]));
  }
  return out;
}

// Downsamples to target_fps when the source is faster, then keeps at most
// max_frames frames. Slower sources are left as they are.
inline EmbeddingSequence standardize(const EmbeddingSequence& seq, double target_fps,
                                     std::size_t max_frames) {
  EmbeddingSequence out = seq;
  if (seq.fps > target_fps) {
    const auto idx = downsample_indices(static_cast<std::size_t>(seq.num_frames()), seq.fps,
                                        target_fps);
    out = select_frames(seq, idx);
    out.fps = target_fps;
  }
  if (max_frames > 0 && static_cast<std::size_t>(out.num_frames()) > max_frames) {
    out.frames.conservativeResize(static_cast<Eigen::Index>(max_frames), Eigen::NoChange);
  }
  return out;
}

}  // namespace stall
