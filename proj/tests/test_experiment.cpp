#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>
#include <string>
#include <unistd.h>

#include "statpool/experiment.hpp"

using namespace statpool;

namespace {

const char* kSmallConfig = R"({
  "seed": 3,
  "synth": {"num_speakers": 6, "utts_per_speaker": 6, "input_dim": 8, "base_frames": 40},
  "train_speakers": 8,
  "encoder": {"frame_hidden": [], "embed_dim": 16, "epochs": 2, "lr": 0.05, "batch_size": 8},
  "systems": ["std", "std-skew", "max"],
  "trials": {"target": 20, "nontarget": 20},
  "probe": {"hidden_width": 32, "epochs": 5},
  "probe_tasks": ["gender", "word_presence"],
  "fusions": [["std", "std-skew"]]
})";

class TempDir {
 public:
  explicit TempDir(const std::string& tag)
      : path_(fs::temp_directory_path() /
              ("statpool-" + tag + "-" + std::to_string(::getpid()))) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

ExperimentConfig small_config(const fs::path& out) {
  auto c = parse_config(kSmallConfig);
  c.output_dir = out.string();
  return c;
}

}  // namespace

TEST(ConfigTest, DefaultsAndStrictKeys) {
  const auto c = parse_config("{}");
  EXPECT_EQ(c.systems, default_systems());
  EXPECT_EQ(c.synth.num_speakers, 50u);
  EXPECT_EQ(c.synth.utts_per_speaker, 20u);
  EXPECT_EQ(c.target_trials, 2000u);
  EXPECT_EQ(c.probe.hidden_width, 500u);
  EXPECT_EQ(c.probe_tasks.size(), 6u);
  EXPECT_THROW(parse_config(R"({"sed": 1})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"synth": {"speakers": 5}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"encoder": {"epochs": "ten"}})"), ConfigError);
  EXPECT_THROW(parse_config("{not json"), ConfigError);
  EXPECT_THROW(parse_config(R"({"systems": ["mean", "mean"]})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"systems": ["mean"], "fusions": [["mean", "std"]]})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"probe_tasks": ["accent"]})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"systems": ["median"]})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"dcf": {"p_target": 2}})"), ConfigError);
}

TEST(ConfigTest, JsonRoundTrip) {
  const auto c = parse_config(kSmallConfig);
  const auto back = parse_config(config_to_json(c).dump());
  EXPECT_EQ(config_to_json(back), config_to_json(c));
  EXPECT_EQ(back.systems, c.systems);
  EXPECT_EQ(back.fusions, c.fusions);
}

TEST(ConfigTest, ShippedDefaultConfigMatchesBuiltInDefaults) {
  auto shipped = parse_config(read_file(fs::path(STATPOOL_SOURCE_DIR) / "configs" / "default.json"));
  auto builtin = ExperimentConfig{};
  shipped.output_dir = builtin.output_dir;
  EXPECT_EQ(config_to_json(shipped), config_to_json(builtin));
}

TEST(ConfigTest, DerivedSpecsShareWorldWithDisjointSpeakers) {
  const auto c = parse_config(kSmallConfig);
  const auto b = benchmark_spec(c), t = training_spec(c);
  EXPECT_EQ(b.seed, t.seed);
  EXPECT_EQ(b.first_speaker, 0u);
  EXPECT_EQ(t.first_speaker, 6u);
  EXPECT_EQ(t.num_speakers, 8u);
  EXPECT_EQ(encoder_config(c, "std-skew").num_classes, 8u);
  EXPECT_EQ(encoder_config(c, "std").seed, encoder_config(c, "max").seed);
}

TEST(ReportFormatTest, SignificantDigits) {
  EXPECT_EQ(format_significant(0.34712, 3), "0.347");
  EXPECT_EQ(format_significant(12.54, 3), "12.5");
  EXPECT_EQ(format_significant(4.4, 3), "4.40");
  EXPECT_EQ(format_significant(9.996, 3), "10.0");
  EXPECT_EQ(format_significant(123.4, 3), "123");
  EXPECT_EQ(format_significant(0.0, 3), "0.00");
}

TEST(ReportFormatTest, TableAndGridShape) {
  const std::vector<ResultRow> rows{{"max", 0.2335, 0.91234, 10, 10}};
  const std::string one = render_report(rows, {});
  EXPECT_NE(one.find("23.4"), std::string::npos);
  EXPECT_NE(one.find("0.9123"), std::string::npos);
  std::vector<ProbeReport> probes;
  for (const char* s : {"max", "mean-std"})
    for (const char* t : {"gender", "rate", "word_presence"}) probes.push_back({s, t, 0.5, 0.5, 8, 2, false});
  const std::string text = render_report(rows, probes);
  std::istringstream in(text.substr(text.find("Probe accuracy")));
  std::string line;
  std::getline(in, line);
  std::getline(in, line);
  EXPECT_NE(line.find("max"), std::string::npos);
  EXPECT_NE(line.find("mean-std"), std::string::npos);
  int grid_rows = 0;
  while (std::getline(in, line)) grid_rows += !line.empty();
  EXPECT_EQ(grid_rows, 3);
}

TEST(ManifestTest, RoundTrip) {
  SynthSpec s;
  s.num_speakers = 3;
  s.utts_per_speaker = 2;
  s.base_frames = 5;
  const auto data = generate(s);
  const auto m = read_manifest(write_manifest(data), s.lexicon_size);
  ASSERT_EQ(m.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(m[i].meta.id, data[i].id);
    EXPECT_EQ(m[i].meta.cluster, data[i].cluster);
    EXPECT_EQ(m[i].meta.words, data[i].words);
    EXPECT_EQ(m[i].frames, data[i].frames.frames());
  }
  EXPECT_THROW(read_manifest("a 1 2\n", 16), std::runtime_error);
}

TEST(ExperimentTest, MissingArtifactsAreNamed) {
  TempDir dir("missing");
  Experiment exp(small_config(dir.path()), nullptr);
  try {
    exp.report();
    FAIL() << "report on an empty directory must fail";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "report");
    EXPECT_NE(std::string(e.what()).find("results.txt"), std::string::npos);
  }
  EXPECT_THROW(exp.train(), StageError);
  EXPECT_THROW(exp.score(), StageError);
  EXPECT_THROW(exp.probe(), StageError);
}

TEST(ExperimentTest, PipelineArtifactsDeterminismAndFusion) {
  TempDir a("run-a"), b("run-b");
  Experiment ea(small_config(a.path()), nullptr);
  Experiment eb(small_config(b.path()), nullptr);
  const std::string report = ea.run();
  eb.run();
  const Layout& la = ea.layout();
  const Layout& lb = eb.layout();
  for (const auto& sys : ea.config().systems) {
    for (const auto& p : {la.model(sys), la.embeddings(sys), la.scores(sys), la.center(sys)})
      EXPECT_TRUE(fs::exists(p)) << p;
    EXPECT_EQ(read_file(la.scores(sys)), read_file(lb.scores(sys))) << sys;
  }
  for (const auto& p : {la.corpus(), la.train_corpus(), la.trials(), la.results(),
                        la.results_json(), la.probes(), la.probes_json(), la.report(),
                        la.fused({"std", "std-skew"})})
    EXPECT_TRUE(fs::exists(p)) << p;
  EXPECT_EQ(read_file(la.results()), read_file(lb.results()));
  EXPECT_EQ(read_file(la.probes()), read_file(lb.probes()));

  // Fused file equals the per-trial mean of its constituent score files.
  const auto s1 = read_scores(read_file(la.scores("std")));
  const auto s2 = read_scores(read_file(la.scores("std-skew")));
  const auto f = read_scores(read_file(la.fused({"std", "std-skew"})));
  ASSERT_EQ(f.scores.size(), s1.scores.size());
  for (std::size_t i = 0; i < f.scores.size(); ++i) {
    EXPECT_EQ(f.trials[i], s1.trials[i]);
    EXPECT_DOUBLE_EQ(f.scores[i], 0.5 * (s1.scores[i] + s2.scores[i]));
  }

  // One row per system plus one per fusion recipe.
  const auto rows = read_results(read_file(la.results()));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[3].system, "(std)⊕(std-skew)");
  EXPECT_EQ(rows[0].n_target, 20u);
  EXPECT_NE(report.find("(std)⊕(std-skew)"), std::string::npos);
  EXPECT_EQ(read_probe_reports(read_file(la.probes())).size(), 3u * 2u);

  // Rerunning report leaves scores and embeddings untouched.
  const auto before_scores = read_file(la.scores("max"));
  const auto before_emb = read_file(la.embeddings("max"));
  const auto t0 = fs::last_write_time(la.scores("max"));
  EXPECT_EQ(ea.report(), report);
  EXPECT_EQ(read_file(la.scores("max")), before_scores);
  EXPECT_EQ(read_file(la.embeddings("max")), before_emb);
  EXPECT_EQ(fs::last_write_time(la.scores("max")), t0);

  // A tampered manifest is caught when the corpus is regenerated.
  std::string manifest = read_file(la.corpus());
  const auto pos = manifest.find("fnv:") + 4;
  manifest[pos] = manifest[pos] == '0' ? '1' : '0';
  write_file_atomic(la.corpus(), manifest);
  EXPECT_THROW(ea.extract(), StageError);

  // A config that no longer matches the stored corpus is rejected.
  auto changed = small_config(b.path());
  changed.synth.noise_scale = 0.5;
  Experiment ec(changed, nullptr);
  EXPECT_THROW(ec.train(), StageError);
}

TEST(ExperimentTest, SingleSystemRunGivesOneRowTable) {
  TempDir dir("single");
  auto c = small_config(dir.path());
  c.systems = {"mean"};
  c.fusions.clear();
  c.probe_tasks = {ProbeTask::Gender};
  Experiment exp(c, nullptr);
  exp.run();
  EXPECT_EQ(read_results(read_file(exp.layout().results())).size(), 1u);
  EXPECT_EQ(read_probe_reports(read_file(exp.layout().probes())).size(), 1u);
}
