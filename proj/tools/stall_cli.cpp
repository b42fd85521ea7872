// stall: batch front end for calibration, scoring, evaluation, normality
// diagnostics, synthetic corpora and temporal perturbations.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "stall/stall.hpp"

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kDefaultSeed = 20251016;

struct RunConfig {
  std::string manifest;
  std::string profile;
  std::string out;
  std::string scores;
  std::uint64_t seed = kDefaultSeed;
  std::size_t jobs = 1;
  int derivative_order = 1;
  int step = 1;
  std::string fusion = "mean";
  std::string spatial_agg = "max";
  std::string temporal_agg = "min";
  double epsilon = stall::kDefaultEigenFloor;
  bool single_transition = false;
  double target_fps = 8.0;
  std::size_t max_frames = 16;

  // eval
  std::string benchmark = "default";
  bool pooled = false;

  // stats
  std::string population = "frames";
  std::size_t groups = 40;
  std::size_t group_size = 250;

  // synth
  stall::eval::SynthParams synth;

  // perturb
  std::string kind = "reverse";
  std::size_t position = 0;
  std::string vector_file;
};

void emit_error(std::string_view code, const std::string& message) {
  nlohmann::json j{{"error", code}, {"message", message}};
  std::cerr << j.dump() << std::endl;
}

stall::DetectorConfig detector_config(const RunConfig& rc) {
  stall::DetectorConfig c;
  c.derivative_order = rc.derivative_order;
  c.step = rc.step;
  c.fusion = stall::parse_fusion(rc.fusion);
  c.spatial_agg = stall::parse_aggregation(rc.spatial_agg);
  c.temporal_agg = stall::parse_aggregation(rc.temporal_agg);
  c.epsilon = rc.epsilon;
  c.temporal_fit = rc.single_transition ? stall::TemporalFit::kSingleTransition
                                        : stall::TemporalFit::kAllTransitions;
  stall::validate(c);
  return c;
}

// Checked before any file is touched.
void validate_overrides(const RunConfig& rc) {
  const auto cfg = detector_config(rc);
  if (!(rc.target_fps > 0.0)) {
    stall::fail(stall::ErrorCode::kInvalidArgument, "--target-fps must be positive");
  }
  if (rc.max_frames < 1) {
    stall::fail(stall::ErrorCode::kInvalidArgument, "--max-frames must be >= 1");
  }
  if (cfg.fusion == stall::Fusion::kProduct &&
      rc.max_frames < stall::min_frames_for(cfg.transition_options())) {
    stall::fail(stall::ErrorCode::kInvalidArgument,
                "--fusion product needs a temporal branch, but --max-frames " +
                    std::to_string(rc.max_frames) + " leaves no transition at derivative order " +
                    std::to_string(cfg.derivative_order) + " and step " +
                    std::to_string(cfg.step));
  }
}

auto standardizer(const RunConfig& rc) {
  return [target = rc.target_fps, max = rc.max_frames](stall::EmbeddingSequence seq) {
    return stall::standardize(seq, target, max);
  };
}

std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) stall::fail(stall::ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  return out;
}

int run_calibrate(const RunConfig& rc) {
  validate_overrides(rc);
  const auto manifest = stall::read_manifest(rc.manifest);
  stall::CalibrationOptions opt{detector_config(rc), rc.seed, rc.jobs};
  spdlog::info("calibrating on {} videos", manifest.size());
  const auto profile = stall::calibrate(manifest, opt, standardizer(rc));
  if (fs::path(rc.out).has_parent_path()) fs::create_directories(fs::path(rc.out).parent_path());
  stall::save_profile(profile, fs::path(rc.out));
  spdlog::info("profile d={} n={} n_temp={} written to {}", profile.dim(), profile.n(),
               profile.n_temp(), rc.out);
  return 0;
}

int run_score(const RunConfig& rc, bool fusion_given) {
  validate_overrides(rc);
  const auto profile = stall::load_profile(fs::path(rc.profile));
  const auto manifest = stall::read_manifest(rc.manifest);
  stall::BatchOptions opt;
  opt.jobs = rc.jobs;
  if (fusion_given) opt.fusion = stall::parse_fusion(rc.fusion);
  opt.prepare = standardizer(rc);
  const auto entries = stall::score_batch(manifest, profile, opt);

  auto out = open_output(rc.out);
  stall::write_score_csv_header(out);
  std::size_t failures = 0;
  std::optional<stall::ErrorCode> only_code;
  for (const auto& e : entries) {
    if (e.record) {
      stall::write_score_csv_row(out, *e.record);
    } else {
      ++failures;
      emit_error(stall::to_string(e.error->code()), e.error->what());
      only_code = e.error->code();
    }
  }
  out.close();
  spdlog::info("scored {} of {} videos", entries.size() - failures, entries.size());
  if (failures == 0) return 0;
  // A batch where nothing could be scored reports like any other failure.
  if (failures == entries.size()) return 1;
  return 2;
}

int run_eval(const RunConfig& rc) {
  std::ifstream in(rc.scores);
  if (!in) stall::fail(stall::ErrorCode::kIo, "cannot open scores " + rc.scores);
  const auto records = stall::eval::read_score_csv(in);
  const auto manifest = stall::read_manifest(rc.manifest);
  const auto results =
      stall::eval::evaluate(records, manifest, !rc.pooled, rc.seed, rc.benchmark);
  auto out = open_output(rc.out);
  stall::eval::write_eval_csv(out, results);
  for (const auto& r : results) {
    spdlog::info("{} / {}: AUC={:.4f} AP={:.4f} ({} real, {} generated)", r.benchmark,
                 r.generator.value_or("all"), r.auc, r.ap, r.n_real, r.n_generated);
  }
  return 0;
}

stall::RowMatrix stack(const std::vector<stall::RowMatrix>& blocks, Eigen::Index d) {
  Eigen::Index rows = 0;
  for (const auto& b : blocks) rows += b.rows();
  stall::RowMatrix out(rows, d);
  Eigen::Index r = 0;
  for (const auto& b : blocks) {
    out.middleRows(r, b.rows()) = b;
    r += b.rows();
  }
  return out;
}

int run_stats(const RunConfig& rc) {
  validate_overrides(rc);
  const auto manifest = stall::read_manifest(rc.manifest);
  const auto prepare = standardizer(rc);
  const bool needs_profile = rc.population == "whitened" || rc.population == "whitened-transitions";
  std::optional<stall::CalibrationProfile> profile;
  if (needs_profile) {
    if (rc.profile.empty()) {
      stall::fail(stall::ErrorCode::kInvalidArgument,
                  "--population " + rc.population + " needs --profile");
    }
    profile = stall::load_profile(fs::path(rc.profile));
  }
  const auto cfg = profile ? profile->config : detector_config(rc);
  const auto topt = cfg.transition_options();

  std::vector<stall::RowMatrix> blocks;
  Eigen::Index d = -1;
  for (const auto& entry : manifest.entries) {
    const auto seq = prepare(stall::load_entry(entry));
    if (d < 0) d = seq.dim();
    if (seq.dim() != d) {
      stall::fail(stall::ErrorCode::kDimensionMismatch, "video '" + seq.video_id +
                                                            "' has a different dimension");
    }
    if (rc.population == "frames") {
      blocks.push_back(seq.frames);
    } else if (rc.population == "whitened") {
      blocks.push_back(stall::whiten_rows(profile->spatial_model, seq.frames));
    } else {
      if (static_cast<std::size_t>(seq.num_frames()) < stall::min_frames_for(topt)) continue;
      if (rc.population == "transitions") {
        const auto raw = stall::raw_differences(seq.frames, topt);
        std::vector<Eigen::Index> keep;
        for (Eigen::Index t = 0; t < raw.rows(); ++t) {
          if (raw.row(t).norm() > topt.norm_floor) keep.push_back(t);
        }
        stall::RowMatrix kept(static_cast<Eigen::Index>(keep.size()), raw.cols());
        for (std::size_t i = 0; i < keep.size(); ++i) {
          kept.row(static_cast<Eigen::Index>(i)) = raw.row(keep[i]);
        }
        blocks.push_back(std::move(kept));
      } else if (rc.population == "normalized") {
        blocks.push_back(stall::transitions(seq, topt).normalized);
      } else if (rc.population == "whitened-transitions") {
        blocks.push_back(
            stall::whiten_rows(profile->temporal_model, stall::transitions(seq, topt).normalized));
      } else {
        stall::fail(stall::ErrorCode::kInvalidArgument, "unknown population " + rc.population);
      }
    }
  }
  if (d < 0) stall::fail(stall::ErrorCode::kInsufficientData, "manifest is empty");
  const auto population = stack(blocks, d);
  stall::stats::BatchNormalityOptions opt;
  opt.groups = rc.groups;
  opt.group_size = rc.group_size;
  opt.seed = stall::derive_seed(rc.seed, "stats");
  opt.jobs = rc.jobs;
  const auto report = stall::stats::batch_normality(population, opt);

  const fs::path prefix(rc.out);
  auto csv = open_output(prefix.string() + ".csv");
  stall::stats::write_report_csv(csv, report);
  auto summary = stall::stats::report_summary(report);
  summary["population"] = rc.population;
  summary["population_size"] = population.rows();
  auto json = open_output(prefix.string() + ".json");
  json << summary.dump(2) << '\n';
  spdlog::info("{}: AD pass {:.3f}, DP pass {:.3f} over {} coordinates", rc.population,
               report.frac_ad_pass, report.frac_dp_pass, report.per_coordinate.size());
  return 0;
}

int run_synth(const RunConfig& rc) {
  const auto corpus = stall::eval::synth_corpus(rc.synth, stall::derive_seed(rc.seed, "synth"),
                                                rc.jobs);
  const fs::path dir(rc.out);
  const auto manifests = stall::eval::write_corpus(corpus, dir / "embeddings");
  stall::write_manifest(manifests.calibration, dir / "calibration.jsonl");
  stall::write_manifest(manifests.test, dir / "test.jsonl");
  spdlog::info("wrote {} calibration and {} test sequences under {}",
               manifests.calibration.size(), manifests.test.size(), dir.string());
  return 0;
}

int run_perturb(const RunConfig& rc) {
  const auto manifest = stall::read_manifest(rc.manifest);
  std::optional<stall::Vector> inserted;
  if (rc.kind == "insert") {
    if (rc.vector_file.empty()) {
      stall::fail(stall::ErrorCode::kInvalidArgument, "--kind insert needs --vector");
    }
    inserted = stall::read_sequence(fs::path(rc.vector_file)).frames.row(0).transpose();
  } else if (rc.kind != "reverse" && rc.kind != "shuffle") {
    stall::fail(stall::ErrorCode::kInvalidArgument, "unknown perturbation " + rc.kind);
  }
  const fs::path dir(rc.out);
  fs::create_directories(dir / "embeddings");
  stall::DatasetManifest out_manifest;
  const auto shuffle_seed = stall::derive_seed(rc.seed, "perturb-shuffle");
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const auto& entry = manifest.entries[i];
    const auto seq = stall::load_entry(entry);
    stall::eval::Perturbation p = stall::eval::Reverse{};
    if (rc.kind == "shuffle") {
      p = stall::eval::ShuffleConsecutive{stall::derive_seed(shuffle_seed, i)};
    } else if (rc.kind == "insert") {
      const auto pos = std::min<std::size_t>(rc.position, static_cast<std::size_t>(seq.num_frames()));
      p = stall::eval::InsertVector{pos, *inserted};
    }
    const auto perturbed = stall::eval::perturb_sequence(seq, p);
    auto e = entry;
    e.path = dir / "embeddings" / (entry.video_id + ".emb");
    stall::write_sequence(perturbed, e.path);
    out_manifest.entries.push_back(std::move(e));
  }
  stall::write_manifest(out_manifest, dir / "manifest.jsonl");
  spdlog::info("wrote {} {}-perturbed sequences under {}", out_manifest.size(), rc.kind,
               dir.string());
  return 0;
}

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("stall");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::info);
  if (const char* level = std::getenv("STALL_LOG")) {
    spdlog::set_level(spdlog::level::from_str(level));
  }
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  RunConfig rc;
  CLI::App app{"Spatial-temporal likelihood scoring for generated-video detection"};
  app.require_subcommand(1);

  auto add_seed = [&](CLI::App* sub) {
    sub->add_option("--seed", rc.seed, "Root seed for every random draw")->capture_default_str();
    sub->add_option("--jobs", rc.jobs, "Worker threads")->capture_default_str()
        ->check(CLI::PositiveNumber);
  };
  auto add_frames = [&](CLI::App* sub) {
    sub->add_option("--target-fps", rc.target_fps, "Downsample faster sources to this rate")
        ->capture_default_str();
    sub->add_option("--max-frames", rc.max_frames, "Keep at most this many frames")
        ->capture_default_str();
  };
  auto add_detector = [&](CLI::App* sub) {
    sub->add_option("--derivative-order", rc.derivative_order, "Temporal finite-difference order")
        ->capture_default_str();
    sub->add_option("--step", rc.step, "Frame step of each difference pass")->capture_default_str();
  };
  const std::vector<std::string> aggs{"min", "mean", "max"};

  auto* calibrate = app.add_subcommand("calibrate", "Fit a calibration profile on real videos");
  calibrate->add_option("--manifest", rc.manifest, "Manifest of real videos")->required();
  calibrate->add_option("--out", rc.out, "Output profile path")->required();
  add_seed(calibrate);
  add_frames(calibrate);
  add_detector(calibrate);
  calibrate->add_option("--fusion", rc.fusion, "Default fusion stored in the profile")
      ->check(CLI::IsMember({"mean", "product"}))->capture_default_str();
  calibrate->add_option("--spatial-agg", rc.spatial_agg)->check(CLI::IsMember(aggs))
      ->capture_default_str();
  calibrate->add_option("--temporal-agg", rc.temporal_agg)->check(CLI::IsMember(aggs))
      ->capture_default_str();
  calibrate->add_option("--epsilon", rc.epsilon, "Relative eigenvalue floor")->capture_default_str();
  calibrate->add_flag("--single-transition", rc.single_transition,
                      "Fit the temporal model on one random transition per video");

  auto* score = app.add_subcommand("score", "Score videos against a profile");
  score->add_option("--manifest", rc.manifest)->required();
  score->add_option("--profile", rc.profile)->required();
  score->add_option("--out", rc.out, "Output CSV")->required();
  auto* fusion_opt = score->add_option("--fusion", rc.fusion, "Override the profile's fusion")
                         ->check(CLI::IsMember({"mean", "product"}));
  add_seed(score);
  add_frames(score);

  auto* eval = app.add_subcommand("eval", "AUC / AP on balanced real-vs-generated splits");
  eval->add_option("--scores", rc.scores, "Score CSV from `score`")->required();
  eval->add_option("--manifest", rc.manifest, "Manifest with labels and sources")->required();
  eval->add_option("--out", rc.out, "Output CSV")->required();
  eval->add_option("--benchmark", rc.benchmark)->capture_default_str();
  eval->add_flag("--pooled", rc.pooled, "One split for all generators");
  add_seed(eval);

  auto* stats = app.add_subcommand("stats", "Per-coordinate normality report");
  stats->add_option("--manifest", rc.manifest)->required();
  stats->add_option("--out", rc.out, "Output prefix (.csv and .json)")->required();
  stats->add_option("--profile", rc.profile, "Needed for whitened populations");
  stats->add_option("--population", rc.population)
      ->check(CLI::IsMember({"frames", "whitened", "transitions", "normalized",
                             "whitened-transitions"}))
      ->capture_default_str();
  stats->add_option("--groups", rc.groups)->capture_default_str();
  stats->add_option("--group-size", rc.group_size)->capture_default_str();
  add_seed(stats);
  add_frames(stats);
  add_detector(stats);

  auto* synth = app.add_subcommand("synth", "Write a synthetic corpus and manifests");
  synth->add_option("--out", rc.out, "Output directory")->required();
  synth->add_option("--n-calibration", rc.synth.n_calibration)->capture_default_str();
  synth->add_option("--n-real", rc.synth.n_real)->capture_default_str();
  synth->add_option("--n-fake", rc.synth.n_fake)->capture_default_str();
  synth->add_option("--frames", rc.synth.frames)->capture_default_str();
  synth->add_option("--dim", rc.synth.dim)->capture_default_str();
  synth->add_option("--spatial-shift", rc.synth.fake.spatial_shift)->capture_default_str();
  synth->add_option("--transition-scale", rc.synth.fake.transition_scale)->capture_default_str();
  synth->add_option("--direction-bias", rc.synth.fake.direction_bias)->capture_default_str();
  add_seed(synth);

  auto* perturb = app.add_subcommand("perturb", "Write temporally perturbed copies of a manifest");
  perturb->add_option("--manifest", rc.manifest)->required();
  perturb->add_option("--out", rc.out, "Output directory")->required();
  perturb->add_option("--kind", rc.kind)
      ->check(CLI::IsMember({"reverse", "shuffle", "insert"}))->capture_default_str();
  perturb->add_option("--position", rc.position, "Insert position (clamped to T)");
  perturb->add_option("--vector", rc.vector_file, "Embedding file whose first frame is inserted");
  add_seed(perturb);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    emit_error("usage", e.what());
    return 64;
  }

  spdlog::info("seed={}", rc.seed);
  try {
    if (*calibrate) return run_calibrate(rc);
    if (*score) return run_score(rc, fusion_opt->count() > 0);
    if (*eval) return run_eval(rc);
    if (*stats) return run_stats(rc);
    if (*synth) return run_synth(rc);
    if (*perturb) return run_perturb(rc);
  } catch (const stall::Error& e) {
    emit_error(stall::to_string(e.code()), e.what());
    return 1;
  } catch (const std::exception& e) {
    emit_error("internal", e.what());
    return 1;
  }
  return 1;
}
