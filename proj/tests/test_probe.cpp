#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "oracles.hpp"
#include "statpool/moments.hpp"
#include "statpool/probe.hpp"

using namespace statpool;

namespace {

ProbeConfig small_probe(std::uint64_t seed = 1) {
  ProbeConfig c;
  c.hidden_width = 64;
  c.epochs = 30;
  c.seed = seed;
  return c;
}

// Two Gaussian blobs in `dim` dimensions, `n` points each.
void blobs(std::size_t n, Eigen::Index dim, double sep, std::mt19937_64& rng,
           std::vector<Vector>& x, std::vector<std::size_t>& y) {
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < n; ++i) {
      Vector v = oracle::random_matrix(dim, 1, rng).col(0);
      v[0] += c ? sep : -sep;
      x.push_back(v);
      y.push_back(c);
    }
}

template <class T>
std::vector<T> pick(const std::vector<T>& v, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  for (auto i : idx) out.push_back(v[i]);
  return out;
}

}  // namespace

TEST(ProbeConfigTest, Validation) {
  ProbeConfig c;
  EXPECT_EQ(c.hidden_width, 500u);
  c.hidden_width = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = ProbeConfig{};
  c.train_frac = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(ProbeTest, SeparableBlobs) {
  std::mt19937_64 rng(40);
  std::vector<Vector> x;
  std::vector<std::size_t> y;
  blobs(200, 6, 3.0, rng, x, y);
  const auto [tr, te] = split(y, 0.8, 3);
  const auto model = train_probe(pick(x, tr), pick(y, tr), ProbeConfig{});
  EXPECT_GE(probe_accuracy(model, pick(x, te), pick(y, te)), 0.95);
}

TEST(ProbeTest, ShuffledLabelsStayNearChance) {
  std::mt19937_64 rng(41);
  std::vector<Vector> x;
  std::vector<std::size_t> y;
  blobs(500, 8, 3.0, rng, x, y);
  std::shuffle(y.begin(), y.end(), rng);
  const auto [tr, te] = split(y, 0.8, 4);
  const auto model = train_probe(pick(x, tr), pick(y, tr), ProbeConfig{});
  const auto yte = pick(y, te);
  const double acc = probe_accuracy(model, pick(x, te), yte);
  const double chance = majority_rate(yte);
  const double sigma = std::sqrt(chance * (1.0 - chance) / static_cast<double>(yte.size()));
  EXPECT_LE(std::abs(acc - chance), 0.1);
  EXPECT_LE(std::abs(acc - chance), 3.0 * sigma);
}

TEST(ProbeTest, DeterministicAndSingleClassRejected) {
  std::mt19937_64 rng(42);
  std::vector<Vector> x;
  std::vector<std::size_t> y;
  blobs(50, 4, 1.0, rng, x, y);
  const auto a = train_probe(x, y, small_probe());
  const auto b = train_probe(x, y, small_probe());
  EXPECT_EQ(a.predict(x), b.predict(x));
  EXPECT_THROW(train_probe(x, std::vector<std::size_t>(x.size(), 1), small_probe()),
               std::invalid_argument);
}

TEST(ProbeTest, CoordinatePermutationGivesIdenticalModel) {
  std::mt19937_64 rng(43);
  std::vector<Vector> x;
  std::vector<std::size_t> y;
  blobs(80, 7, 0.7, rng, x, y);
  std::vector<Eigen::Index> perm(7);
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  auto permute = [&](const std::vector<Vector>& in) {
    std::vector<Vector> out;
    for (const auto& v : in) {
      Vector p(7);
      for (Eigen::Index j = 0; j < 7; ++j) p[j] = v[perm[static_cast<std::size_t>(j)]];
      out.push_back(p);
    }
    return out;
  };
  std::vector<Vector> probe_x;
  std::vector<std::size_t> probe_y;
  blobs(40, 7, 0.7, rng, probe_x, probe_y);
  const auto a = train_probe(x, y, small_probe());
  const auto b = train_probe(permute(x), y, small_probe());
  EXPECT_EQ(a.predict(probe_x), b.predict(permute(probe_x)));
  EXPECT_EQ(probe_accuracy(a, probe_x, probe_y), probe_accuracy(b, permute(probe_x), probe_y));
}

TEST(WordProbeTest, DegenerateWhenNoWordVaries) {
  std::mt19937_64 rng(44);
  std::vector<Vector> x;
  std::vector<std::size_t> y;
  blobs(20, 3, 1.0, rng, x, y);
  const std::vector<std::vector<bool>> words(x.size(), std::vector<bool>(5, false));
  const auto r = word_presence_probe(x, words, x, words, small_probe());
  EXPECT_TRUE(r.degenerate);
  EXPECT_TRUE(std::isnan(r.accuracy));
  EXPECT_EQ(r.skipped.size(), 5u);
}

TEST(WordProbeTest, HighAmplitudeBurstsAreFoundByMaxPooling) {
  SynthSpec spec;
  spec.num_speakers = 20;
  spec.utts_per_speaker = 10;
  spec.input_dim = 8;
  spec.base_frames = 60;
  spec.lexicon_size = 4;
  spec.bursts_per_utt = 2;
  spec.burst_amplitude = 20.0;
  spec.seed = 45;
  const auto data = generate(spec);
  std::vector<Vector> emb;
  std::vector<std::size_t> strata;
  for (const auto& u : data) {
    emb.push_back(max_pool(u.frames));
    strata.push_back(u.speaker);
  }
  const auto [tr, te] = split(strata, 0.8, 5);
  std::vector<std::vector<bool>> wtr, wte;
  for (auto i : tr) wtr.push_back(data[i].words);
  for (auto i : te) wte.push_back(data[i].words);
  const auto r = word_presence_probe(pick(emb, tr), wtr, pick(emb, te), wte, small_probe());
  ASSERT_FALSE(r.degenerate);
  EXPECT_GE(r.per_word[0], 0.9);
  double mean = 0.0;
  for (double a : r.per_word) mean += a;
  EXPECT_DOUBLE_EQ(r.accuracy, mean / static_cast<double>(r.per_word.size()));
}

TEST(ProbeTaskTest, NamesAndLabels) {
  for (auto t : kAllProbeTasks) EXPECT_EQ(parse_probe_task(to_string(t)), t);
  EXPECT_THROW(parse_probe_task("accent"), std::invalid_argument);
  LabeledUtterance u;
  u.speaker = 7;
  u.gender = 1;
  u.cluster = 3;
  u.rate = 2;
  u.nuisance = 1;
  EXPECT_EQ(task_label(ProbeTask::SpeakerId, u), 7u);
  EXPECT_EQ(task_label(ProbeTask::Gender, u), 1u);
  EXPECT_EQ(task_label(ProbeTask::Cluster, u), 3u);
  EXPECT_EQ(task_label(ProbeTask::Rate, u), 2u);
  EXPECT_EQ(task_label(ProbeTask::Nuisance, u), 1u);
}

class ProbeMatrixTest : public ::testing::Test {
 protected:
  void SetUp() override {
    SynthSpec spec;
    spec.num_speakers = 8;
    spec.utts_per_speaker = 10;
    spec.input_dim = 6;
    spec.base_frames = 30;
    spec.seed = 46;
    utts_ = generate(spec);
    for (const char* name : {"max", "mean", "std", "skew", "kurto"}) {
      SystemEmbeddings s{name, {}};
      const auto cfg = PoolingConfig::parse(name);
      for (const auto& u : utts_) s.embeddings.push_back(forward(cfg, u.frames));
      systems_.push_back(s);
    }
    cfg_ = small_probe(9);
    cfg_.epochs = 5;
  }

  std::vector<LabeledUtterance> utts_;
  std::vector<SystemEmbeddings> systems_;
  ProbeConfig cfg_;
};

TEST_F(ProbeMatrixTest, CrossProductSize) {
  const std::vector<ProbeTask> one{ProbeTask::Gender};
  EXPECT_EQ(run_matrix({systems_[0]}, utts_, one, cfg_).size(), 1u);
  const std::vector<ProbeTask> all(kAllProbeTasks.begin(), kAllProbeTasks.end());
  const auto reports = run_matrix(systems_, utts_, all, cfg_);
  ASSERT_EQ(reports.size(), 30u);
  for (const auto& r : reports) {
    EXPECT_EQ(r.n_train + r.n_test, utts_.size());
    EXPECT_GE(r.accuracy, 0.0);
    EXPECT_LE(r.accuracy, 1.0);
  }
}

TEST_F(ProbeMatrixTest, ReportsIndependentOfJobOrder) {
  const std::vector<ProbeTask> tasks{ProbeTask::SpeakerId, ProbeTask::Rate, ProbeTask::WordPresence};
  const auto forward_order = run_matrix(systems_, utts_, tasks, cfg_);
  auto rs = systems_;
  std::reverse(rs.begin(), rs.end());
  auto rt = tasks;
  std::reverse(rt.begin(), rt.end());
  const auto reversed = run_matrix(rs, utts_, rt, cfg_);
  std::map<std::pair<std::string, std::string>, double> a, b;
  for (const auto& r : forward_order) a[{r.pooling, r.task}] = r.accuracy;
  for (const auto& r : reversed) b[{r.pooling, r.task}] = r.accuracy;
  EXPECT_EQ(a, b);
}

TEST_F(ProbeMatrixTest, SplitHygiene) {
  for (auto t : kAllProbeTasks) {
    std::vector<std::size_t> labels;
    for (const auto& u : utts_) labels.push_back(task_label(t, u));
    const auto [tr, te] = split(labels, cfg_.train_frac, 17);
    std::set<std::string> train_ids;
    for (auto i : tr) train_ids.insert(utts_[i].id);
    for (auto i : te) EXPECT_FALSE(train_ids.count(utts_[i].id));
    EXPECT_EQ(tr.size() + te.size(), utts_.size());
  }
}

TEST(ProbeIoTest, RoundTrip) {
  std::vector<ProbeReport> reps{{"max", "gender", 0.8125, 0.5, 64, 16, false},
                                {"mean-std", "word_presence", std::nan(""), std::nan(""), 64, 16, true}};
  const auto text = write_probe_reports(reps);
  const auto back = read_probe_reports(text);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].pooling, "max");
  EXPECT_EQ(back[0].accuracy, 0.8125);
  EXPECT_EQ(back[0].n_test, 16u);
  EXPECT_TRUE(std::isnan(back[1].accuracy));
  EXPECT_TRUE(back[1].degenerate);
  EXPECT_EQ(write_probe_reports(back), text);
}
