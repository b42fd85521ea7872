// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "stall/stall.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;
namespace ev = stall::eval;
namespace st = stall::stats;
using stall::Label;
using stall::RowMatrix;
using stall::Vector;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

RowMatrix normal_rows(Eigen::Index n, Eigen::Index d, stall::Rng& rng) {
  stall::NormalSampler normal;
  RowMatrix x(n, d);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);
  return x;
}

fs::path work_dir(const std::string& name) {
  const auto dir =
      fs::temp_directory_path() / ("stall_acceptance_" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<stall::ScoreRecord> records_of(const std::vector<stall::BatchEntry>& entries) {
  std::vector<stall::ScoreRecord> out;
  for (const auto& e : entries) {
    if (!e.record) throw *e.error;
    out.push_back(*e.record);
  }
  return out;
}

// AUC with generated as the positive class, from any realness-like value.
double auc_of(const std::vector<stall::ScoreRecord>& records,
              const std::function<double(const stall::ScoreRecord&)>& realness) {
  std::vector<ev::LabeledScore> s;
  for (const auto& r : records) s.push_back({r.video_id, 1.0 - realness(r), r.label, {}});
  return ev::auc(s);
}

// ---------------------------------------------------------------------------

Outcome whitening_identity() {
  const auto t0 = Clock::now();
  const Eigen::Index d = 16;
  stall::Rng rng(101);
  // Known SPD transform: x = L g + b with Sigma = L L^T.
  RowMatrix a = normal_rows(d, d, rng);
  const RowMatrix sigma = a * a.transpose() + 0.5 * RowMatrix::Identity(d, d);
  const RowMatrix l = Eigen::LLT<Eigen::MatrixXd>(sigma).matrixL().toDenseMatrix();
  Vector b = Vector::LinSpaced(d, -3.0, 5.0);
  auto draw = [&](Eigen::Index n) {
    RowMatrix g = normal_rows(n, d, rng);
    RowMatrix x = g * l.transpose();
    x.rowwise() += b.transpose();
    return x;
  };
  const RowMatrix x = draw(20000);
  const auto m = stall::fit(x);
  auto moment_dev = [&](const RowMatrix& sample) {
    const RowMatrix y = stall::whiten_rows(m, sample);
    const Vector mean = y.colwise().mean();
    const RowMatrix yc = y.rowwise() - mean.transpose();
    const RowMatrix cov = (yc.transpose() * yc) / static_cast<double>(y.rows());
    return std::max(mean.cwiseAbs().maxCoeff(),
                    (cov - RowMatrix::Identity(d, d)).cwiseAbs().maxCoeff());
  };
  const double fit_dev = moment_dev(x);
  const double fresh_dev = moment_dev(draw(20000));
  // Regularized empirical covariance rebuilt independently of the model.
  const RowMatrix xc = x.rowwise() - x.colwise().mean();
  const RowMatrix emp = (xc.transpose() * xc) / static_cast<double>(x.rows());
  const double inv_dev =
      (m.matrix.transpose() * m.matrix * emp - RowMatrix::Identity(d, d)).cwiseAbs().maxCoeff();
  const double secs = seconds_since(t0);
  return {fit_dev < 5e-2 && fresh_dev < 5e-2 && inv_dev < 1e-8 && secs < 5.0,
          fmt("max|cov-I| fit sample %.2e, fresh sample %.2e (< 5e-2); max|W^T W S - I| %.2e "
              "(< 1e-8); %.2f s (< 5 s)",
              fit_dev, fresh_dev, inv_dev, secs)};
}

Outcome likelihood_exactness() {
  stall::Rng rng(202);
  stall::NormalSampler normal;
  double worst = 0.0;
  for (int c = 0; c < 1000; ++c) {
    const auto d = static_cast<Eigen::Index>(1 + stall::uniform_index(rng, 1024));
    const double scale = std::exp(4.0 * stall::uniform_unit(rng) - 2.0);
    Vector y(d);
    for (Eigen::Index j = 0; j < d; ++j) y(j) = scale * normal(rng);
    const std::vector<double> yv(y.data(), y.data() + d);
    const double got = stall::log_likelihood(y);
    const double want = stall::oracle::gaussian_log_density(yv);
    worst = std::max(worst, std::abs(got - want) / std::max(1.0, std::abs(want)));
  }
  return {worst <= 1e-12,
          fmt("1000 cases, d in [1, 1024]: max |diff| / max(1, |l|) = %.2e (<= 1e-12)", worst)};
}

Outcome percentile_exactness() {
  stall::Rng rng(303);
  stall::NormalSampler normal;
  int mismatches = 0;
  for (int c = 0; c < 1000; ++c) {
    const std::size_t n = 1 + stall::uniform_index(rng, 500);
    const bool coarse = c % 2 == 0;
    std::vector<double> cal(n);
    for (auto& v : cal) v = coarse ? std::round(normal(rng) * 3.0) : normal(rng);
    std::sort(cal.begin(), cal.end());
    double s = coarse ? std::round(normal(rng) * 3.0) : normal(rng);
    if (c % 7 == 0) s = cal[stall::uniform_index(rng, n)];
    if (stall::percentile(cal, s) != stall::oracle::count_percentile(cal, s)) ++mismatches;
  }
  return {mismatches == 0, fmt("1000 cases, %d mismatches against brute-force counting", mismatches)};
}

Outcome downsampling() {
  using V = std::vector<std::size_t>;
  struct Case {
    std::size_t n;
    double current, target;
    V expected;  // empty: check against the reference rule only
  };
  const std::vector<Case> cases{
      {10, 24, 8, {0, 3, 6, 9}},  {16, 30, 8, {0, 4, 8, 11, 15}}, {5, 8, 8, {0, 1, 2, 3, 4}},
      {9, 20, 8, {0, 2, 5, 8}},   {48, 24, 8, {}},                {60, 30, 8, {}},
      {72, 29.97, 8, {}},         {120, 59.94, 8, {}},            {50, 25, 8, {}},
      {100, 60, 8, {}},           {31, 23.976, 8, {}},            {17, 12, 8, {}},
      {1, 30, 8, {0}},            {2, 30, 8, {0}},                {240, 120, 8, {}},
      {33, 15, 8, {}},            {100, 24, 12, {}},              {45, 30, 7.5, {}},
      {64, 10, 8, {}},            {1000, 50, 8, {}},
  };
  int bad = 0;
  for (const auto& c : cases) {
    const auto got = stall::downsample_indices(c.n, c.current, c.target);
    const auto ref = stall::oracle::reference_downsample(c.n, c.current, c.target);
    if (got != ref || (!c.expected.empty() && got != c.expected)) ++bad;
  }
  return {bad == 0, fmt("%zu cases (incl. r=3 -> [0,3,6,9], r=3.75 -> [0,4,8,11,15]), %d mismatches",
                        cases.size(), bad)};
}

Outcome metric_oracles() {
  stall::Rng rng(404);
  double worst_auc = 0.0, worst_ap = 0.0, worst_swap = 0.0;
  int swap_cases = 0;
  for (int c = 0; c < 500; ++c) {
    const std::size_t n = 2 + stall::uniform_index(rng, 49);
    const bool ties = c % 2 == 0;
    std::vector<ev::LabeledScore> s(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double u = stall::uniform_unit(rng);
      s[i].video_id = "v" + std::to_string(stall::uniform_index(rng, 100));
      s[i].detection_score = ties ? std::floor(u * 6.0) / 6.0 : u;
      s[i].label = stall::uniform_index(rng, 2) ? Label::kGenerated : Label::kReal;
    }
    s[0].label = Label::kGenerated;
    s[1].label = Label::kReal;
    const double a = ev::auc(s);
    worst_auc = std::max(worst_auc, std::abs(a - stall::oracle::pairwise_auc(s)));
    worst_ap = std::max(worst_ap, std::abs(ev::average_precision(s) -
                                           stall::oracle::counting_average_precision(s)));
    if (!ties) {
      auto swapped = s;
      for (auto& x : swapped) x.label = x.label == Label::kReal ? Label::kGenerated : Label::kReal;
      worst_swap = std::max(worst_swap, std::abs(ev::auc(swapped) - (1.0 - a)));
      ++swap_cases;
    }
  }
  const bool hand = ev::auc(std::vector<ev::LabeledScore>{{"a", 0.9, Label::kGenerated, {}},
                                                          {"b", 0.4, Label::kGenerated, {}},
                                                          {"c", 0.5, Label::kReal, {}},
                                                          {"d", 0.1, Label::kReal, {}}}) == 0.75 &&
                    std::abs(ev::average_precision(std::vector<ev::LabeledScore>{
                                 {"a", 0.9, Label::kGenerated, {}},
                                 {"b", 0.7, Label::kReal, {}},
                                 {"c", 0.5, Label::kGenerated, {}},
                                 {"d", 0.3, Label::kReal, {}}}) -
                             5.0 / 6.0) < 1e-15;
  return {worst_auc <= 1e-12 && worst_ap <= 1e-12 && worst_swap <= 1e-12 && hand,
          fmt("500 instances: AUC %.1e, AP %.1e, label swap %.1e over %d tie-free (all <= 1e-12); "
              "hand cases %s",
              worst_auc, worst_ap, worst_swap, swap_cases, hand ? "ok" : "wrong")};
}

Outcome normality_suite() {
  const auto t0 = Clock::now();
  const Eigen::Index d = 64;
  const Eigen::Index n = 20000;
  stall::Rng rng(505);
  st::BatchNormalityOptions opt;  // G = 40, m = 250
  opt.seed = 506;

  const RowMatrix gaussian = normal_rows(n, d, rng);
  const auto g = st::batch_normality(gaussian, opt);

  // Raw transition analog: random directions times a mixture of magnitudes.
  RowMatrix raw = st::uniform_sphere(static_cast<std::size_t>(n), d, rng);
  const double magnitudes[] = {0.05, 1.0, 20.0};
  for (Eigen::Index i = 0; i < n; ++i) raw.row(i) *= magnitudes[stall::uniform_index(rng, 3)];
  const auto r = st::batch_normality(raw, opt);
  RowMatrix normalized = raw;
  for (Eigen::Index i = 0; i < n; ++i) normalized.row(i).normalize();
  const auto u = st::batch_normality(normalized, opt);
  const double secs = seconds_since(t0);

  const bool pass = g.frac_ad_pass >= 0.9 && g.frac_dp_pass >= 0.9 && r.frac_ad_pass <= 0.1 &&
                    r.frac_dp_pass <= 0.1 && u.frac_ad_pass >= 0.9 && u.frac_dp_pass >= 0.9 &&
                    secs < 60.0;
  return {pass, fmt("gaussian AD %.3f DP %.3f (>= 0.90); raw mixture AD %.3f DP %.3f (<= 0.10); "
                    "normalized AD %.3f DP %.3f (>= 0.90); %.1f s (< 60 s)",
                    g.frac_ad_pass, g.frac_dp_pass, r.frac_ad_pass, r.frac_dp_pass,
                    u.frac_ad_pass, u.frac_dp_pass, secs)};
}

Outcome maxwell_poincare() {
  const double bound = st::tv_bound(1024, 1);
  const auto check = st::sphere_projection_check(1024, 10000, 1, 606);
  stall::Rng rng(607);
  const auto draws = st::uniform_sphere(3000, 1024, rng);
  const auto h = st::pairwise_cosine_histogram(draws, 200);
  const double target = 1.0 / std::sqrt(1024.0);
  const double rel = std::abs(h.stddev - target) / target;
  return {std::abs(bound - 8.0 / 1020.0) < 1e-15 && check.pass_rate >= 0.9 && rel <= 0.2,
          fmt("TV bound %.6f (8/1020); DP pass rate %.3f over %zu groups of 100 (>= 0.90); "
              "cosine std %.5f vs 1/sqrt(d) %.5f, %.1f%% off (<= 20%%)",
              bound, check.pass_rate, check.tests, h.stddev, target, 100.0 * rel)};
}

// Shared synthetic suite: 2000 calibration, 500 real + 500 fake with both a
// spatial shift and a temporal direction bias, d = 64, T = 16.
struct Suite {
  ev::SynthParams params;
  ev::SynthCorpus corpus;
  ev::SynthManifests manifests;
  stall::CalibrationProfile profile;
  std::vector<stall::ScoreRecord> records;
  double seconds = 0.0;
};

Suite& suite() {
  static Suite s = [] {
    Suite out;
    const auto t0 = Clock::now();
    out.params.fake.spatial_shift = 5.0;
    out.params.fake.direction_bias = 0.12;
    out.corpus = ev::synth_corpus(out.params, 20251016);
    out.manifests = ev::write_corpus(out.corpus, work_dir("suite"));
    stall::CalibrationOptions copt;
    copt.seed = 7;
    out.profile = stall::calibrate(out.manifests.calibration, copt);
    out.records = records_of(stall::score_batch(out.manifests.test, out.profile));
    out.seconds = seconds_since(t0);
    return out;
  }();
  return s;
}

Outcome synthetic_end_to_end() {
  auto& s = suite();
  const auto results = ev::evaluate(s.records, s.manifests.test, false, 11, "synthetic");
  const double unified = results.at(0).auc;
  const double spatial = auc_of(s.records, [](const auto& r) { return r.perc_spatial; });
  const double temporal = auc_of(s.records, [](const auto& r) { return *r.perc_temporal; });

  const auto t0 = Clock::now();
  ev::SynthParams null_params;
  const auto null_corpus = ev::synth_corpus(null_params, 99);
  const auto null_manifests = ev::write_corpus(null_corpus, work_dir("null"));
  stall::CalibrationOptions copt;
  copt.seed = 8;
  const auto null_profile = stall::calibrate(null_manifests.calibration, copt);
  const auto null_records = records_of(stall::score_batch(null_manifests.test, null_profile));
  const double null_auc =
      ev::evaluate(null_records, null_manifests.test, false, 12, "synthetic-null").at(0).auc;
  const double null_secs = seconds_since(t0);

  const bool pass = unified >= 0.9 && unified >= std::max(spatial, temporal) - 0.02 &&
                    null_auc >= 0.45 && null_auc <= 0.55 && s.seconds < 120.0 &&
                    null_secs < 120.0;
  return {pass, fmt("unified AUC %.4f (>= 0.90 and >= max(spatial %.4f, temporal %.4f) - 0.02); "
                    "fake=real AUC %.4f (in [0.45, 0.55]); %.1f s and %.1f s (< 120 s each)",
                    unified, spatial, temporal, null_auc, s.seconds, null_secs)};
}

Outcome corner_cases() {
  auto& s = suite();
  auto frozen = s.corpus.test_real[0];
  for (Eigen::Index t = 1; t < frozen.frames.rows(); ++t) frozen.frames.row(t) = frozen.frames.row(0);
  const auto fr = stall::score_video(frozen, s.profile);
  const bool fallback = fr.fallback_spatial_only && !fr.s_temporal && fr.s_video == fr.perc_spatial;

  auto one_zero = s.corpus.test_real[1];
  one_zero.frames.row(6) = one_zero.frames.row(5);
  const auto tl = stall::temporal_scores(one_zero, s.profile.temporal_model);
  const auto base = stall::temporal_scores(s.corpus.test_real[1], s.profile.temporal_model);
  const bool discarded = tl.discarded_count == base.discarded_count + 1 &&
                         tl.values.size() + 1 == base.values.size();

  const Eigen::Index d = s.params.dim;
  const Vector flash = Vector::Constant(d, 50.0 / std::sqrt(static_cast<double>(d)));
  std::size_t dropped = 0;
  for (const auto& v : s.corpus.test_real) {
    const auto before = stall::score_video(v, s.profile);
    const auto after = stall::score_video(ev::perturb_sequence(v, ev::InsertVector{8, flash}), s.profile);
    if (*after.s_temporal < *before.s_temporal) ++dropped;
  }
  const double frac = static_cast<double>(dropped) / static_cast<double>(s.corpus.test_real.size());
  return {fallback && discarded && frac > 0.95,
          fmt("frozen video fallback %s; single zero transition discarded %s (count %zu); flash "
              "insertion lowers temporal score for %.1f%% of %zu real videos (> 95%%)",
              fallback ? "ok" : "wrong", discarded ? "ok" : "wrong", tl.discarded_count,
              100.0 * frac, s.corpus.test_real.size())};
}

std::vector<double> unified_scores(const std::vector<stall::EmbeddingSequence>& videos,
                                   const stall::CalibrationProfile& profile,
                                   std::optional<stall::Fusion> fusion = std::nullopt) {
  std::vector<double> out;
  for (const auto& e : stall::score_sequences(videos, profile, 1, fusion)) {
    out.push_back(e.record->s_video);
  }
  return out;
}

Outcome ablations() {
  auto& s = suite();
  std::vector<stall::EmbeddingSequence> test = s.corpus.test_real;
  test.insert(test.end(), s.corpus.test_fake.begin(), s.corpus.test_fake.end());

  std::vector<std::vector<double>> by_order;
  for (int order = 1; order <= 4; ++order) {
    stall::CalibrationOptions o;
    o.seed = 7;
    o.config.derivative_order = order;
    by_order.push_back(unified_scores(test, stall::calibrate(s.corpus.calibration, o)));
  }
  double min_rho = 1.0;
  for (std::size_t a = 0; a < 4; ++a) {
    for (std::size_t b = a + 1; b < 4; ++b) {
      min_rho = std::min(min_rho, stall::oracle::spearman(by_order[a], by_order[b]));
    }
  }

  stall::CalibrationOptions all_opt;
  all_opt.seed = 7;
  stall::CalibrationOptions single_opt = all_opt;
  single_opt.config.temporal_fit = stall::TemporalFit::kSingleTransition;
  const auto all_scores = unified_scores(test, stall::calibrate(s.corpus.calibration, all_opt));
  const auto single_scores =
      unified_scores(test, stall::calibrate(s.corpus.calibration, single_opt));
  const double r = stall::oracle::pearson(all_scores, single_scores);

  auto fusion_auc = [&](stall::Fusion f) {
    std::vector<stall::ScoreRecord> records;
    for (const auto& e : stall::score_sequences(test, s.profile, 1, f)) records.push_back(*e.record);
    return auc_of(records, [](const auto& x) { return x.s_video; });
  };
  const double mean_auc = fusion_auc(stall::Fusion::kMean);
  const double product_auc = fusion_auc(stall::Fusion::kProduct);

  return {min_rho > 0.9 && r > 0.99 && std::abs(mean_auc - product_auc) <= 0.05,
          fmt("orders 1-4 min pairwise Spearman %.4f (> 0.9); single vs all transitions "
              "Pearson %.4f (> 0.99); mean AUC %.4f vs product AUC %.4f (within 0.05)",
              min_rho, r, mean_auc, product_auc)};
}

struct PipelineBytes {
  std::string profile, scores, eval;
  bool operator==(const PipelineBytes&) const = default;
};

PipelineBytes run_pipeline(std::size_t jobs, const std::string& tag) {
  ev::SynthParams p;
  p.n_calibration = 400;
  p.n_real = 120;
  p.n_fake = 120;
  p.dim = 32;
  p.fake.spatial_shift = 2.0;
  p.fake.direction_bias = 0.1;
  const auto dir = work_dir("determinism_" + tag);
  const auto corpus = ev::synth_corpus(p, 4242, jobs);
  const auto m = ev::write_corpus(corpus, dir / "emb");
  stall::CalibrationOptions copt;
  copt.seed = 4243;
  copt.jobs = jobs;
  const auto profile = stall::calibrate(m.calibration, copt);
  stall::save_profile(profile, dir / "profile.stallcal");
  stall::BatchOptions bopt;
  bopt.jobs = jobs;
  const auto records = records_of(stall::score_batch(m.test, profile, bopt));
  std::ostringstream scores;
  stall::write_score_csv_header(scores);
  for (const auto& r : records) stall::write_score_csv_row(scores, r);
  std::ostringstream eval;
  const auto results = ev::evaluate(records, m.test, true, 4244, "determinism");
  ev::write_eval_csv(eval, results);
  std::ifstream in(dir / "profile.stallcal", std::ios::binary);
  std::ostringstream profile_bytes;
  profile_bytes << in.rdbuf();
  return {profile_bytes.str(), scores.str(), eval.str()};
}

Outcome determinism() {
  const auto a = run_pipeline(1, "a");
  const auto b = run_pipeline(1, "b");
  const auto c = run_pipeline(8, "c");
  const auto d = run_pipeline(8, "d");
  const bool same = a == b && a == c && a == d;
  return {same && !a.profile.empty(),
          fmt("profile (%zu B), score CSV (%zu B) and eval CSV (%zu B) bit-identical across 2 runs "
              "at 1 worker and 2 runs at 8 workers: %s",
              a.profile.size(), a.scores.size(), a.eval.size(), same ? "yes" : "no")};
}

Outcome throughput() {
  ev::SynthParams p;
  p.dim = 1024;
  p.n_calibration = 1200;
  p.n_real = 1000;
  p.n_fake = 0;
  const auto corpus = ev::synth_corpus(p, 777);
  const auto m = ev::write_corpus(corpus, work_dir("throughput"));
  const auto profile = stall::calibrate(corpus.calibration, {});
  std::vector<double> times;
  std::size_t scored = 0;
  for (int rep = 0; rep < 3; ++rep) {
    const auto t0 = Clock::now();
    const auto out = stall::score_batch(m.test, profile);
    times.push_back(seconds_since(t0));
    scored = static_cast<std::size_t>(
        std::count_if(out.begin(), out.end(), [](const auto& e) { return e.record.has_value(); }));
  }
  std::sort(times.begin(), times.end());
  return {times[1] < 2.0 && scored == 1000,
          fmt("%zu videos x 16 frames x d=1024 scored from files on 1 worker: median %.3f s "
              "of 3 runs (min %.3f, max %.3f; < 2 s)",
              scored, times[1], times[0], times[2])};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, Outcome (*)()>> criteria{
      {"whitening identity", whitening_identity},
      {"likelihood exactness", likelihood_exactness},
      {"percentile exactness", percentile_exactness},
      {"downsampling bit-exactness", downsampling},
      {"metric oracles", metric_oracles},
      {"normality suite", normality_suite},
      {"maxwell-poincare", maxwell_poincare},
      {"synthetic end-to-end", synthetic_end_to_end},
      {"corner cases", corner_cases},
      {"ablations", ablations},
      {"determinism", determinism},
      {"throughput", throughput},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("[%s] %s: %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  fs::remove_all(fs::temp_directory_path() / ("stall_acceptance_" + std::to_string(::getpid())));
  std::printf("%zu criteria, %d failed\n", criteria.size(), failed);
  return failed == 0 ? 0 : 1;
}
