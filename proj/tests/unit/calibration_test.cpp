#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <functional>
#include <sstream>

#include "stall/calibration.hpp"
#include "stall/evalharness.hpp"

namespace fs = std::filesystem;
using stall::EmbeddingSequence;
using stall::ErrorCode;
using stall::RowMatrix;

namespace {

EmbeddingSequence seq_of(std::string id, const RowMatrix& frames) {
  EmbeddingSequence s;
  s.video_id = std::move(id);
  s.fps = 8.0;
  s.frames = frames;
  s.label = stall::Label::kReal;
  return s;
}

std::vector<EmbeddingSequence> small_corpus(std::size_t n, std::uint64_t seed) {
  stall::eval::SynthParams p;
  p.n_calibration = n;
  p.n_real = 0;
  p.n_fake = 0;
  p.dim = 6;
  p.frames = 8;
  return stall::eval::synth_corpus(p, seed).calibration;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const stall::Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected a stall::Error";
  return ErrorCode::kFormat;
}

}  // namespace

TEST(Calibrate, TinyCorpus) {
  RowMatrix a(2, 2), b(2, 2);
  a << 0, 0, 1, 0;
  b << 2, 1, 2, 3;
  const std::vector<EmbeddingSequence> videos{seq_of("a", a), seq_of("b", b)};
  const auto p = stall::calibrate(videos, {});
  EXPECT_EQ(p.n(), 2u);
  EXPECT_EQ(p.n_temp(), 2u);
  EXPECT_EQ(p.dim(), 2);
  EXPECT_EQ(p.spatial_model.sample_count, 2u);
  EXPECT_EQ(p.temporal_model.sample_count, 2u);
  // The two transitions are (1,0) and (0,1): mean (0.5, 0.5).
  EXPECT_DOUBLE_EQ(p.temporal_model.mean(0), 0.5);
  EXPECT_DOUBLE_EQ(p.temporal_model.mean(1), 0.5);
  EXPECT_TRUE(std::is_sorted(p.spatial_scores.begin(), p.spatial_scores.end()));
}

TEST(Calibrate, FrozenCorpusHasNoTemporalModel) {
  RowMatrix f(3, 2);
  f << 1, 2, 1, 2, 1, 2;
  RowMatrix g(3, 2);
  g << 0, 1, 0, 1, 0, 1;
  const std::vector<EmbeddingSequence> videos{seq_of("a", f), seq_of("b", g)};
  EXPECT_EQ(code_of([&] { stall::calibrate(videos, {}); }), ErrorCode::kInsufficientData);
}

TEST(Calibrate, FrozenVideosAreOmittedFromTemporalScores) {
  auto videos = small_corpus(20, 3);
  for (Eigen::Index t = 1; t < videos[4].frames.rows(); ++t) {
    videos[4].frames.row(t) = videos[4].frames.row(0);
  }
  const auto p = stall::calibrate(videos, {});
  EXPECT_EQ(p.n(), 20u);
  EXPECT_EQ(p.n_temp(), 19u);
}

TEST(Calibrate, SameSeedIsBitIdentical) {
  const auto videos = small_corpus(40, 4);
  stall::CalibrationOptions opts;
  opts.seed = 99;
  const auto a = stall::calibrate(videos, opts);
  opts.jobs = 8;
  const auto b = stall::calibrate(videos, opts);
  EXPECT_TRUE(a == b);
  opts.seed = 100;
  const auto c = stall::calibrate(videos, opts);
  EXPECT_FALSE(a.spatial_model == c.spatial_model);
}

TEST(Calibrate, RefusesGeneratedVideos) {
  auto videos = small_corpus(5, 5);
  videos[2].label = stall::Label::kGenerated;
  EXPECT_EQ(code_of([&] { stall::calibrate(videos, {}); }), ErrorCode::kLabelViolation);

  stall::DatasetManifest m;
  m.entries.push_back({"/nonexistent/a.emb", "a", stall::Label::kReal, std::nullopt, ""});
  m.entries.push_back({"/nonexistent/b.emb", "b", stall::Label::kGenerated, "g", ""});
  // The label check happens before any file is opened.
  EXPECT_EQ(code_of([&] { stall::calibrate(m, {}); }), ErrorCode::kLabelViolation);
}

TEST(Calibrate, DimensionMismatch) {
  auto videos = small_corpus(5, 6);
  videos[3].frames = RowMatrix::Ones(8, 5);
  EXPECT_EQ(code_of([&] { stall::calibrate(videos, {}); }), ErrorCode::kDimensionMismatch);
}

TEST(Calibrate, SingleTransitionModeUsesOnePerVideo) {
  const auto videos = small_corpus(30, 7);
  stall::CalibrationOptions opts;
  opts.config.temporal_fit = stall::TemporalFit::kSingleTransition;
  const auto p = stall::calibrate(videos, opts);
  EXPECT_EQ(p.temporal_model.sample_count, 30u);
  opts.config.temporal_fit = stall::TemporalFit::kAllTransitions;
  EXPECT_EQ(stall::calibrate(videos, opts).temporal_model.sample_count, 30u * 7u);
}

TEST(Calibrate, StoredScoresAreSelfConsistent) {
  const auto videos = small_corpus(50, 8);
  const auto p = stall::calibrate(videos, {});
  std::stringstream buf;
  stall::save_profile(p, buf);
  const auto loaded = stall::load_profile(buf);
  std::vector<double> spatial, temporal;
  for (const auto& v : videos) {
    const auto s = stall::score_branches(v, loaded.spatial_model, loaded.temporal_model,
                                         loaded.config);
    spatial.push_back(s.spatial);
    if (s.temporal) temporal.push_back(*s.temporal);
  }
  std::sort(spatial.begin(), spatial.end());
  std::sort(temporal.begin(), temporal.end());
  ASSERT_EQ(spatial.size(), loaded.spatial_scores.size());
  ASSERT_EQ(temporal.size(), loaded.temporal_scores.size());
  for (std::size_t i = 0; i < spatial.size(); ++i) {
    EXPECT_NEAR(spatial[i], loaded.spatial_scores[i], 1e-9);
    EXPECT_NEAR(temporal[i], loaded.temporal_scores[i], 1e-9);
  }
}

TEST(ProfileFile, RoundTripIsBitExact) {
  stall::CalibrationOptions opts;
  opts.seed = 7;
  opts.config.derivative_order = 2;
  opts.config.step = 2;
  opts.config.fusion = stall::Fusion::kProduct;
  opts.config.spatial_agg = stall::Aggregation::kMean;
  const auto p = stall::calibrate(small_corpus(25, 9), opts);
  std::stringstream buf;
  stall::save_profile(p, buf);
  const std::string first = buf.str();
  const auto back = stall::load_profile(buf);
  EXPECT_TRUE(back == p);
  std::stringstream again;
  stall::save_profile(back, again);
  EXPECT_EQ(again.str(), first);

  const auto dir = fs::temp_directory_path() / "stall_profile_roundtrip";
  fs::create_directories(dir);
  stall::save_profile(p, dir / "p.stallcal");
  EXPECT_TRUE(stall::load_profile(dir / "p.stallcal") == p);
  fs::remove_all(dir);
}

TEST(ProfileFile, HeaderCarriesShape) {
  const auto p = stall::calibrate(small_corpus(12, 10), {});
  std::stringstream buf;
  stall::save_profile(p, buf);
  const std::string bytes = buf.str();
  EXPECT_EQ(bytes.substr(0, 8), "STALLCAL");
  std::uint32_t d = 0, n = 0;
  std::memcpy(&d, bytes.data() + 12, 4);
  std::memcpy(&n, bytes.data() + 16, 4);
  EXPECT_EQ(d, 6u);
  EXPECT_EQ(n, 12u);
}

TEST(ProfileFile, WrongMagicAndVersion) {
  const auto p = stall::calibrate(small_corpus(12, 11), {});
  std::stringstream buf;
  stall::save_profile(p, buf);
  std::string bytes = buf.str();

  std::string magic = bytes;
  magic[5] = 'E';
  EXPECT_EQ(code_of([&] {
              std::istringstream in(magic);
              stall::load_profile(in);
            }),
            ErrorCode::kBadMagic);

  std::string v2 = bytes;
  v2[8] = 2;
  EXPECT_EQ(code_of([&] {
              std::istringstream in(v2);
              stall::load_profile(in);
            }),
            ErrorCode::kUnsupportedVersion);

  EXPECT_EQ(code_of([&] {
              std::istringstream in(bytes.substr(0, bytes.size() - 3));
              stall::load_profile(in);
            }),
            ErrorCode::kTruncated);
}
