#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>
#include <utility>

#include "statpool/moments.hpp"
#include "statpool/synthdata.hpp"

using namespace statpool;

namespace {

SynthSpec small_spec(std::uint64_t seed = 3) {
  SynthSpec s;
  s.num_speakers = 6;
  s.utts_per_speaker = 6;
  s.input_dim = 8;
  s.base_frames = 40;
  s.seed = seed;
  return s;
}

void expect_same_corpus(const std::vector<LabeledUtterance>& a,
                        const std::vector<LabeledUtterance>& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].id, b[i].id);
    EXPECT_EQ(a[i].speaker, b[i].speaker);
    EXPECT_EQ(a[i].gender, b[i].gender);
    EXPECT_EQ(a[i].nuisance, b[i].nuisance);
    EXPECT_EQ(a[i].rate, b[i].rate);
    EXPECT_EQ(a[i].words, b[i].words);
    EXPECT_EQ(a[i].frames.matrix(), b[i].frames.matrix());
  }
}

// E[f(z)] for z ~ N(0, 1) by the trapezoid rule on [-12, 12].
template <class F>
double gauss_expect(F f) {
  const int n = 200000;
  const double lo = -12.0, h = 24.0 / n;
  double s = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double z = lo + h * i;
    const double w = (i == 0 || i == n) ? 0.5 : 1.0;
    s += w * f(z) * std::exp(-0.5 * z * z);
  }
  return s * h / std::sqrt(2.0 * M_PI);
}

}  // namespace

TEST(SynthSpecTest, Validation) {
  auto s = small_spec();
  s.num_speakers = 1;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = small_spec();
  s.speaker_scale = 0.0;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = small_spec();
  s.rate_multipliers = {1.0, -0.5};
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = small_spec();
  s.burst_support = 9;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  EXPECT_NO_THROW(small_spec().validate());
}

TEST(SynthTest, DeterministicPerSeed) {
  expect_same_corpus(generate(small_spec(7)), generate(small_spec(7)));
  const auto a = generate(small_spec(7));
  const auto b = generate(small_spec(8));
  EXPECT_NE(a[0].frames.matrix(), b[0].frames.matrix());
}

TEST(SynthTest, ShapesLabelsAndWords) {
  const auto spec = small_spec();
  const auto data = generate(spec);
  ASSERT_EQ(data.size(), 36u);
  std::set<std::string> ids;
  for (const auto& u : data) {
    ids.insert(u.id);
    EXPECT_EQ(u.frames.frames(),
              static_cast<std::size_t>(std::llround(spec.rate_multipliers[u.rate] * 40.0)));
    EXPECT_EQ(u.frames.dim(), 8u);
    EXPECT_LT(u.nuisance, spec.nuisance_types);
    EXPECT_LT(u.rate, 3u);
    EXPECT_LT(u.cluster, spec.num_clusters);
    ASSERT_EQ(u.words.size(), spec.lexicon_size);
    std::size_t present = 0;
    for (bool w : u.words) present += w;
    EXPECT_GE(present, 1u);
    EXPECT_LE(present, spec.bursts_per_utt);
  }
  EXPECT_EQ(ids.size(), data.size());
}

TEST(SynthTest, NoiselessLimitGivesCentroidPlusOffset) {
  auto spec = small_spec();
  spec.noise_scale = 0.0;
  spec.utts_per_speaker = 1;
  spec.bursts_per_utt = 0;
  const auto world = make_world(spec);
  const auto speakers = make_speakers(spec, world);
  const auto data = generate(spec);
  for (std::size_t k = 0; k < data.size(); ++k) {
    const Vector want = speakers[k].centroid + world.nuisance_offsets[data[k].nuisance];
    const Matrix& x = data[k].frames.matrix();
    for (Eigen::Index i = 0; i < x.rows(); ++i) EXPECT_EQ(Vector(x.row(i).transpose()), want);
  }
}

TEST(SynthTest, FirstSpeakerGivesDisjointSpeakersInSameWorld) {
  auto a = small_spec();
  auto b = small_spec();
  b.first_speaker = a.num_speakers;
  const auto da = generate(a), db = generate(b);
  std::set<std::string> ids;
  std::set<std::size_t> spk;
  for (const auto& u : da) {
    ids.insert(u.id);
    spk.insert(u.speaker);
  }
  for (const auto& u : db) {
    EXPECT_FALSE(ids.count(u.id));
    EXPECT_FALSE(spk.count(u.speaker));
    EXPECT_GE(u.speaker, a.num_speakers);
  }
  // A speaker's profile depends on its global index only.
  auto c = small_spec();
  c.num_speakers = 12;
  const auto wc = make_world(c);
  const auto wb = make_world(b);
  EXPECT_EQ(wb.cluster_means[0], wc.cluster_means[0]);
  EXPECT_EQ(make_speaker(b, wb, 8).centroid, make_speaker(c, wc, 8).centroid);
}

TEST(SynthTest, SpeakersSeparableWhenSpreadDominatesNoise) {
  // speaker_scale / noise_scale = 10; nearest centroid of mean-pooled frames.
  auto spec = small_spec(11);
  spec.num_speakers = 50;
  spec.utts_per_speaker = 10;
  spec.speaker_scale = 1.0;
  spec.noise_scale = 0.1;
  const auto data = generate(spec);
  std::map<std::size_t, Vector> centroid;
  std::map<std::size_t, int> count;
  for (const auto& u : data) {
    if (u.id.back() % 2 == 1) continue;  // even-numbered utterances enroll
    const Vector m = mean_pool(u.frames);
    auto [it, fresh] = centroid.emplace(u.speaker, m);
    if (!fresh) it->second += m;
    ++count[u.speaker];
  }
  for (auto& [s, c] : centroid) c /= count[s];
  std::size_t hit = 0, total = 0;
  for (const auto& u : data) {
    if (u.id.back() % 2 == 0) continue;
    const Vector m = mean_pool(u.frames);
    std::size_t best = 0;
    double bd = INFINITY;
    for (const auto& [s, c] : centroid)
      if ((m - c).squaredNorm() < bd) bd = (m - c).squaredNorm(), best = s;
    hit += best == u.speaker;
    ++total;
  }
  EXPECT_GE(static_cast<double>(hit) / static_cast<double>(total), 0.99);
}

TEST(SynthTest, SpeakerAndNuisanceAreIndependent) {
  auto spec = small_spec(12);
  spec.num_speakers = 50;
  spec.utts_per_speaker = 20;
  spec.base_frames = 4;
  const auto data = generate(spec);
  ASSERT_GE(data.size(), 1000u);
  std::map<std::pair<std::size_t, std::size_t>, double> joint;
  std::map<std::size_t, double> ps, pn;
  const double n = static_cast<double>(data.size());
  for (const auto& u : data) {
    joint[{u.speaker, u.nuisance}] += 1.0 / n;
    ps[u.speaker] += 1.0 / n;
    pn[u.nuisance] += 1.0 / n;
  }
  double mi = 0.0;
  for (const auto& [k, p] : joint) mi += p * std::log2(p / (ps[k.first] * pn[k.second]));
  EXPECT_LE(mi, 0.05);
}

TEST(SynthTest, SkewedUnitIsStandardized) {
  for (double g : {0.0, 0.2, -0.2, 0.5}) {
    const double m1 = gauss_expect([&](double z) { return detail::skewed_unit(z, g); });
    const double m2 = gauss_expect([&](double z) { return std::pow(detail::skewed_unit(z, g), 2); });
    const double m3 = gauss_expect([&](double z) { return std::pow(detail::skewed_unit(z, g), 3); });
    const double q = std::exp(g * g);
    const double want_skew = (g > 0 ? 1 : g < 0 ? -1 : 0) * (q + 2.0) * std::sqrt(q - 1.0);
    EXPECT_NEAR(m1, 0.0, 1e-9) << g;
    EXPECT_NEAR(m2, 1.0, 1e-9) << g;
    EXPECT_NEAR(m3, want_skew, 1e-7) << g;
  }
}

TEST(SynthTest, CorpusTextRoundTripIsBitExact) {
  const auto spec = small_spec(13);
  const auto data = generate(spec);
  std::vector<std::size_t> clusters(spec.num_speakers);
  for (const auto& u : data) clusters[u.speaker] = u.cluster;
  const auto text = write_corpus(data);
  const auto back = read_corpus(text, spec.lexicon_size, clusters);
  expect_same_corpus(back, data);
  for (std::size_t i = 0; i < data.size(); ++i) EXPECT_EQ(back[i].cluster, data[i].cluster);
  EXPECT_EQ(write_corpus(back), text);
  // Header layout: id speaker gender nuisance rate T D words:<hex>
  const auto head = text.substr(0, text.find('\n'));
  EXPECT_EQ(split_ws(head).size(), 8u);
  EXPECT_EQ(head.rfind("words:", std::string::npos) != std::string::npos, true);
  EXPECT_THROW(read_corpus("x 0 0 0 0 2 1 words:1\n1.0\n"), std::runtime_error);
}

TEST(SynthTest, WordHexEncoding) {
  std::vector<bool> w(10, false);
  w[0] = w[3] = w[9] = true;
  EXPECT_EQ(words_to_hex(w), "209");
  EXPECT_EQ(hex_to_words("209", 10), w);
  EXPECT_THROW(hex_to_words("800", 10), std::runtime_error);
  EXPECT_THROW(hex_to_words("2g", 10), std::runtime_error);
}

TEST(SplitTest, DisjointExhaustiveStratified) {
  std::vector<std::size_t> labels(10, 0);
  auto [tr, te] = split(labels, 0.8, 1);
  EXPECT_EQ(tr.size(), 8u);
  EXPECT_EQ(te.size(), 2u);

  const std::vector<std::size_t> two{0, 0, 1, 1, 2, 2};
  auto [a, b] = split(two, 0.5, 2);
  EXPECT_EQ(a.size(), 3u);
  EXPECT_EQ(b.size(), 3u);
  std::set<std::size_t> seen_a, seen_b;
  for (auto i : a) seen_a.insert(two[i]);
  for (auto i : b) seen_b.insert(two[i]);
  EXPECT_EQ(seen_a.size(), 3u);
  EXPECT_EQ(seen_b.size(), 3u);

  std::vector<std::size_t> mixed;
  for (int i = 0; i < 97; ++i) mixed.push_back(static_cast<std::size_t>(i % 7));
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto [x, y] = split(mixed, 0.8, seed);
    std::multiset<std::size_t> all(x.begin(), x.end());
    all.insert(y.begin(), y.end());
    EXPECT_EQ(all.size(), mixed.size());
    EXPECT_EQ(std::set<std::size_t>(all.begin(), all.end()).size(), mixed.size());
  }
  EXPECT_THROW(split(std::vector<std::size_t>{0, 0, 1}, 0.8, 0), std::invalid_argument);
  EXPECT_THROW(split(labels, 1.0, 0), std::invalid_argument);
}

TEST(TrialsTest, SmallCases) {
  auto spec = small_spec();
  spec.num_speakers = 2;
  spec.utts_per_speaker = 2;
  auto data = generate(spec);
  std::vector<LabeledUtterance> one{data[0], data[1]};
  const auto t = build_trials(one, 1, 0, 5);
  ASSERT_EQ(t.size(), 1u);
  EXPECT_TRUE(t[0].target);
  EXPECT_THROW(build_trials(one, 2, 0, 5), std::invalid_argument);
  EXPECT_THROW(build_trials(one, 1, 1, 5), std::invalid_argument);
  EXPECT_EQ(build_trials(data, 2, 4, 5).size(), 6u);
}

TEST(TrialsTest, SampledPairsAreUniqueAndCorrectlyLabelled) {
  auto spec = small_spec(14);
  spec.num_speakers = 50;
  spec.utts_per_speaker = 6;
  spec.base_frames = 4;
  const auto data = generate(spec);
  // Exhaustive enumeration of all unordered pairs.
  std::map<std::pair<std::string, std::string>, bool> pairs;
  for (std::size_t i = 0; i < data.size(); ++i)
    for (std::size_t j = i + 1; j < data.size(); ++j)
      pairs[{data[i].id, data[j].id}] = data[i].speaker == data[j].speaker;

  const auto trials = build_trials(data, 500, 500, 99);
  ASSERT_EQ(trials.size(), 1000u);
  std::set<std::pair<std::string, std::string>> seen;
  std::size_t targets = 0;
  for (const auto& t : trials) {
    EXPECT_NE(t.enroll_id, t.test_id);
    auto it = pairs.find({t.enroll_id, t.test_id});
    ASSERT_NE(it, pairs.end());
    EXPECT_EQ(it->second, t.target);
    EXPECT_TRUE(seen.insert({t.enroll_id, t.test_id}).second);
    EXPECT_FALSE(seen.count({t.test_id, t.enroll_id}));
    targets += t.target;
  }
  EXPECT_EQ(targets, 500u);
  EXPECT_EQ(build_trials(data, 500, 500, 99), trials);
}
