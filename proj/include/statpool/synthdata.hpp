#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "statpool/frame_sequence.hpp"
#include "statpool/scoring.hpp"
#include "statpool/seed.hpp"
#include "statpool/text_io.hpp"

namespace statpool {

// Parameters of the synthetic speaker world. A frame of an utterance is
//
//   centroid(speaker) + offset(nuisance)
//     + noise_scale * shape(gender) .* shape(speaker) .* g(eps; gamma(speaker))
//     + noise_scale * extra(nuisance) * eta
//     + word bursts
//
// where eps, eta are i.i.d. standard normal per frame and dimension and
// g(z; gamma) is the standardized lognormal transform exp(gamma z), with zero
// mean, unit variance and skewness sign(gamma) growing with |gamma|.
struct SynthSpec {
  std::size_t num_speakers = 50;
  std::size_t first_speaker = 0;        // global index of the first speaker
  std::size_t input_dim = 16;
  std::size_t base_frames = 400;        // T0, scaled by the rate multiplier
  std::size_t utts_per_speaker = 20;
  double speaker_scale = 0.1;           // within-cluster spread of centroids
  double noise_scale = 1.0;             // within-utterance frame std
  std::size_t num_clusters = 8;         // nationality-like speaker groups
  double cluster_scale = 1.0;
  double gender_offset = 0.5;           // mean shift between genders
  double gender_shaping = 0.3;          // log-std of per-dimension noise scaling
  double speaker_shaping = 0.2;         // log-std of per-speaker noise scaling
  double speaker_skew = 0.2;            // std of per-speaker lognormal shape gamma
  std::size_t nuisance_types = 4;       // none / noise / music / babble
  double nuisance_scale = 0.5;          // std of per-type offset vectors
  double nuisance_noise = 0.5;          // extra frame noise of non-clean types
  std::vector<double> rate_multipliers{0.9, 1.0, 1.1};
  std::size_t lexicon_size = 16;
  std::size_t bursts_per_utt = 8;
  std::size_t burst_frames = 2;
  std::size_t burst_support = 1;        // dimensions excited by each word
  double burst_amplitude = 6.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_speakers < 2) throw std::invalid_argument("SynthSpec: need >= 2 speakers");
    if (input_dim < 1 || base_frames < 1 || utts_per_speaker < 1)
      throw std::invalid_argument("SynthSpec: dims and counts must be >= 1");
    if (!(speaker_scale > 0.0) || !(noise_scale >= 0.0) || !(cluster_scale >= 0.0) ||
        !(nuisance_scale >= 0.0) || !(nuisance_noise >= 0.0) || !(gender_shaping >= 0.0) ||
        !(speaker_shaping >= 0.0) || !(speaker_skew >= 0.0) ||
        !(burst_amplitude >= 0.0))
      throw std::invalid_argument("SynthSpec: scales must be positive");
    if (num_clusters < 1 || nuisance_types < 1 || lexicon_size < 1)
      throw std::invalid_argument("SynthSpec: class counts must be >= 1");
    if (rate_multipliers.empty())
      throw std::invalid_argument("SynthSpec: need at least one rate class");
    for (double r : rate_multipliers)
      if (!(r > 0.0)) throw std::invalid_argument("SynthSpec: rates must be positive");
    if (bursts_per_utt > 0 && burst_frames < 1)
      throw std::invalid_argument("SynthSpec: burst_frames must be >= 1");
    if (burst_support < 1 || burst_support > input_dim)
      throw std::invalid_argument("SynthSpec: burst_support must be in [1, input_dim]");
  }

  std::size_t frames_for_rate(std::size_t rate) const {
    return std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(rate_multipliers.at(rate) *
                                                 static_cast<double>(base_frames))));
  }
};

struct SpeakerProfile {
  Vector centroid;
  Vector shape;  // per-dimension noise multiplier
  Vector gamma;  // per-dimension lognormal shape, 0 = Gaussian
  int gender = 0;
  std::size_t cluster = 0;
};

struct LabeledUtterance {
  std::string id;
  std::size_t speaker = 0;
  int gender = 0;
  std::size_t cluster = 0;
  std::size_t nuisance = 0;
  std::size_t rate = 0;
  std::vector<bool> words;  // lexicon_size presence bits
  FrameSequence frames{{0.0}};
};

inline std::string utterance_id(std::size_t speaker, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "s%03zu-u%03zu", speaker, index);
  return buf;
}

namespace detail {

inline Vector normal_vector(std::size_t d, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vector v(static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = scale * n(rng);
  return v;
}

inline Vector unit_vector(std::size_t d, std::mt19937_64& rng) {
  Vector v = normal_vector(d, 1.0, rng);
  const double n = v.norm();
  return n > 0.0 ? Vector(v / n) : v;
}

// Standardized lognormal: (exp(g z) - E) / SD for z ~ N(0, 1); z itself at g = 0.
inline double skewed_unit(double z, double g) {
  if (std::abs(g) < 1e-8) return z;
  const double a = std::abs(g);
  const double q = std::exp(a * a);
  const double y = (std::exp(a * z) - std::sqrt(q)) / std::sqrt((q - 1.0) * q);
  return g > 0.0 ? y : -y;
}

// Labels 0..k-1 repeated to length n, in a seeded order. Keeps each label's
// share within one of uniform for every speaker.
inline std::vector<std::size_t> balanced_labels(std::size_t n, std::size_t k,
                                                std::mt19937_64& rng) {
  std::vector<std::size_t> out(n);
  const std::size_t offset = std::uniform_int_distribution<std::size_t>(0, k - 1)(rng);
  for (std::size_t i = 0; i < n; ++i) out[i] = (i + offset) % k;
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

}  // namespace detail

// Quantities shared by every speaker: cluster means, gender shaping,
// nuisance offsets and word templates.
struct SynthWorld {
  std::vector<Vector> cluster_means;
  Vector gender_direction;
  std::array<Vector, 2> gender_shape;
  std::vector<Vector> nuisance_offsets;
  std::vector<double> nuisance_extra;
  std::vector<Matrix> word_templates;  // burst_frames x D each
};

inline SynthWorld make_world(const SynthSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(derive_seed(spec.seed, "synth:world"));
  const auto d = spec.input_dim;
  SynthWorld w;
  for (std::size_t c = 0; c < spec.num_clusters; ++c)
    w.cluster_means.push_back(detail::normal_vector(d, spec.cluster_scale, rng));
  w.gender_direction = detail::unit_vector(d, rng);
  const Vector log_shape = detail::normal_vector(d, spec.gender_shaping, rng);
  w.gender_shape[0] = log_shape.array().exp();
  w.gender_shape[1] = (-log_shape.array()).exp();
  std::uniform_real_distribution<double> extra(0.5, 1.5);
  for (std::size_t k = 0; k < spec.nuisance_types; ++k) {
    if (k == 0) {
      w.nuisance_offsets.push_back(Vector::Zero(static_cast<Eigen::Index>(d)));
      w.nuisance_extra.push_back(0.0);
    } else {
      w.nuisance_offsets.push_back(detail::normal_vector(d, spec.nuisance_scale, rng));
      w.nuisance_extra.push_back(spec.nuisance_noise * extra(rng));
    }
  }
  // Each word is a pulse train of norm burst_amplitude spread evenly over
  // burst_support dimensions, alternating in sign frame by frame, so an
  // even-length word adds nothing to the first and third moments. Dimensions
  // are dealt from successive shuffled permutations, so words are disjoint
  // while lexicon * support <= D.
  std::vector<std::size_t> deck;
  const double level = spec.burst_amplitude / std::sqrt(static_cast<double>(spec.burst_support));
  for (std::size_t v = 0; v < spec.lexicon_size; ++v) {
    Vector row = Vector::Zero(static_cast<Eigen::Index>(d));
    for (std::size_t k = 0; k < spec.burst_support;) {
      if (deck.empty()) {
        deck.resize(d);
        std::iota(deck.begin(), deck.end(), std::size_t{0});
        std::shuffle(deck.begin(), deck.end(), rng);
      }
      const auto j = static_cast<Eigen::Index>(deck.back());
      deck.pop_back();
      if (row[j] != 0.0) continue;
      row[j] = level;
      ++k;
    }
    Matrix t(static_cast<Eigen::Index>(spec.burst_frames), static_cast<Eigen::Index>(d));
    for (Eigen::Index f = 0; f < t.rows(); ++f)
      t.row(f) = (f % 2 == 0 ? 1.0 : -1.0) * row.transpose();
    w.word_templates.push_back(std::move(t));
  }
  return w;
}

// Speaker k (global index) is drawn from its own stream, so corpora with
// disjoint index ranges over the same world have disjoint speakers.
inline SpeakerProfile make_speaker(const SynthSpec& spec, const SynthWorld& world,
                                   std::size_t global_index) {
  std::mt19937_64 rng(derive_seed(derive_seed(spec.seed, "synth:speaker"), global_index));
  SpeakerProfile p;
  p.gender = std::bernoulli_distribution(0.5)(rng) ? 1 : 0;
  p.cluster = std::uniform_int_distribution<std::size_t>(0, spec.num_clusters - 1)(rng);
  const double sign = p.gender ? 1.0 : -1.0;
  p.centroid = world.cluster_means[p.cluster] +
               detail::normal_vector(spec.input_dim, spec.speaker_scale, rng) +
               sign * spec.gender_offset * world.gender_direction;
  p.shape = detail::normal_vector(spec.input_dim, spec.speaker_shaping, rng).array().exp();
  p.gamma = detail::normal_vector(spec.input_dim, spec.speaker_skew, rng);
  return p;
}

inline std::vector<SpeakerProfile> make_speakers(const SynthSpec& spec,
                                                 const SynthWorld& world) {
  std::vector<SpeakerProfile> out;
  for (std::size_t s = 0; s < spec.num_speakers; ++s)
    out.push_back(make_speaker(spec, world, spec.first_speaker + s));
  return out;
}

// Deterministic corpus: utts_per_speaker utterances for every speaker, in
// speaker-major order. Each speaker draws from its own sub-stream.
inline std::vector<LabeledUtterance> generate(const SynthSpec& spec) {
  const SynthWorld world = make_world(spec);
  const auto speakers = make_speakers(spec, world);
  const auto d = static_cast<Eigen::Index>(spec.input_dim);
  std::vector<LabeledUtterance> out;
  out.reserve(spec.num_speakers * spec.utts_per_speaker);
  for (std::size_t k = 0; k < spec.num_speakers; ++k) {
    const auto& prof = speakers[k];
    const std::size_t s = spec.first_speaker + k;
    std::mt19937_64 rng(derive_seed(derive_seed(spec.seed, "synth:utts"), s));
    const auto nuis = detail::balanced_labels(spec.utts_per_speaker, spec.nuisance_types, rng);
    const auto rates =
        detail::balanced_labels(spec.utts_per_speaker, spec.rate_multipliers.size(), rng);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> word(0, spec.lexicon_size - 1);
    const Vector& shape = world.gender_shape[static_cast<std::size_t>(prof.gender)];
    for (std::size_t u = 0; u < spec.utts_per_speaker; ++u) {
      LabeledUtterance utt;
      utt.id = utterance_id(s, u);
      utt.speaker = s;
      utt.gender = prof.gender;
      utt.cluster = prof.cluster;
      utt.nuisance = nuis[u];
      utt.rate = rates[u];
      utt.words.assign(spec.lexicon_size, false);
      const auto t = static_cast<Eigen::Index>(spec.frames_for_rate(utt.rate));
      const Vector base = prof.centroid + world.nuisance_offsets[utt.nuisance];
      const double extra = spec.noise_scale * world.nuisance_extra[utt.nuisance];
      Matrix x(t, d);
      for (Eigen::Index i = 0; i < t; ++i)
        for (Eigen::Index j = 0; j < d; ++j) {
          const double eps = normal(rng);
          const double eta = normal(rng);
          x(i, j) = base[j] +
                    spec.noise_scale * shape[j] * prof.shape[j] *
                        detail::skewed_unit(eps, prof.gamma[j]) +
                    extra * eta;
        }
      for (std::size_t b = 0; b < spec.bursts_per_utt; ++b) {
        const std::size_t w = word(rng);
        const Matrix& tmpl = world.word_templates[w];
        const Eigen::Index len = std::min<Eigen::Index>(tmpl.rows(), t);
        const auto start = static_cast<Eigen::Index>(
            std::uniform_int_distribution<std::size_t>(0, static_cast<std::size_t>(t - len))(rng));
        x.middleRows(start, len) += tmpl.topRows(len);
        utt.words[w] = true;
      }
      utt.frames = FrameSequence(std::move(x));
      out.push_back(std::move(utt));
    }
  }
  return out;
}

// Seeded stratified split of item indices by label. Each class keeps
// round(train_frac * n) items for training, clamped so both sides get at
// least one.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split(
    const std::vector<std::size_t>& labels, double train_frac, std::uint64_t seed) {
  if (!(train_frac > 0.0 && train_frac < 1.0))
    throw std::invalid_argument("split: train_frac must be in (0, 1)");
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> train, test;
  for (auto& [label, members] : by_class) {
    if (members.size() < 2)
      throw std::invalid_argument("split: class " + std::to_string(label) +
                                  " has fewer than 2 items");
    std::shuffle(members.begin(), members.end(), rng);
    auto n_train = static_cast<std::size_t>(
        std::llround(train_frac * static_cast<double>(members.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, members.size() - 1);
    train.insert(train.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_train));
    test.insert(test.end(), members.begin() + static_cast<std::ptrdiff_t>(n_train), members.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {std::move(train), std::move(test)};
}

inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split(
    const std::vector<LabeledUtterance>& data, double train_frac, std::uint64_t seed,
    std::size_t (*label)(const LabeledUtterance&)) {
  std::vector<std::size_t> labels;
  labels.reserve(data.size());
  for (const auto& u : data) labels.push_back(label(u));
  return split(labels, train_frac, seed);
}

namespace detail {

// k distinct indices out of [0, n) by partial Fisher-Yates, ascending.
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k,
                                               std::mt19937_64& rng) {
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(all[i], all[pick(rng)]);
  }
  all.resize(k);
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace detail

// Samples num_target same-speaker pairs and num_nontarget cross-speaker pairs
// without replacement. Pairs are unordered (i < j in corpus order; enroll is
// the earlier utterance). Targets come first.
inline std::vector<Trial> build_trials(const std::vector<LabeledUtterance>& data,
                                       std::size_t num_target, std::size_t num_nontarget,
                                       std::uint64_t seed) {
  std::vector<std::pair<std::size_t, std::size_t>> same, cross;
  for (std::size_t i = 0; i < data.size(); ++i)
    for (std::size_t j = i + 1; j < data.size(); ++j)
      (data[i].speaker == data[j].speaker ? same : cross).emplace_back(i, j);
  if (num_target > same.size())
    throw std::invalid_argument("build_trials: requested " + std::to_string(num_target) +
                                " target trials, only " + std::to_string(same.size()) +
                                " same-speaker pairs exist");
  if (num_nontarget > cross.size())
    throw std::invalid_argument("build_trials: requested " + std::to_string(num_nontarget) +
                                " nontarget trials, only " + std::to_string(cross.size()) +
                                " cross-speaker pairs exist");
  std::mt19937_64 rng(seed);
  std::vector<Trial> out;
  out.reserve(num_target + num_nontarget);
  for (auto k : detail::sample_indices(same.size(), num_target, rng))
    out.push_back({data[same[k].first].id, data[same[k].second].id, true});
  for (auto k : detail::sample_indices(cross.size(), num_nontarget, rng))
    out.push_back({data[cross[k].first].id, data[cross[k].second].id, false});
  return out;
}

// ---------------------------------------------------------------------------
// Corpus text format, one record per utterance:
//   id speaker gender nuisance rate T D words:<hex>
// followed by T rows of D decimal values. Bit i of the hex number is word i.

inline std::string words_to_hex(const std::vector<bool>& bits) {
  const std::size_t digits = std::max<std::size_t>(1, (bits.size() + 3) / 4);
  std::string out(digits, '0');
  for (std::size_t nib = 0; nib < digits; ++nib) {
    unsigned v = 0;
    for (std::size_t b = 0; b < 4; ++b) {
      const std::size_t i = nib * 4 + b;
      if (i < bits.size() && bits[i]) v |= 1u << b;
    }
    out[digits - 1 - nib] = "0123456789abcdef"[v];
  }
  return out;
}

inline std::vector<bool> hex_to_words(std::string_view hex, std::size_t lexicon_size) {
  if (hex.empty()) throw std::runtime_error("corpus: empty word bitset");
  const std::size_t nbits = hex.size() * 4;
  if (lexicon_size == 0) lexicon_size = nbits;
  if (lexicon_size > nbits) throw std::runtime_error("corpus: word bitset too short");
  std::vector<bool> bits(lexicon_size, false);
  for (std::size_t nib = 0; nib < hex.size(); ++nib) {
    const char c = hex[hex.size() - 1 - nib];
    unsigned v;
    if (c >= '0' && c <= '9') v = static_cast<unsigned>(c - '0');
    else if (c >= 'a' && c <= 'f') v = static_cast<unsigned>(c - 'a' + 10);
    else if (c >= 'A' && c <= 'F') v = static_cast<unsigned>(c - 'A' + 10);
    else throw std::runtime_error("corpus: bad hex digit in word bitset");
    for (std::size_t b = 0; b < 4; ++b) {
      const std::size_t i = nib * 4 + b;
      if (v & (1u << b)) {
        if (i >= lexicon_size) throw std::runtime_error("corpus: word bit beyond lexicon");
        bits[i] = true;
      }
    }
  }
  return bits;
}

inline std::string write_corpus(const std::vector<LabeledUtterance>& data) {
  std::string out;
  for (const auto& u : data) {
    const auto& m = u.frames.matrix();
    out += u.id + ' ' + std::to_string(u.speaker) + ' ' + std::to_string(u.gender) + ' ' +
           std::to_string(u.nuisance) + ' ' + std::to_string(u.rate) + ' ' +
           std::to_string(m.rows()) + ' ' + std::to_string(m.cols()) + " words:" +
           words_to_hex(u.words) + '\n';
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        if (j) out += ' ';
        out += format_sig17(m(i, j));
      }
      out += '\n';
    }
  }
  return out;
}

// Cluster ids are not part of the corpus record; they are taken from
// `clusters` (indexed by speaker) when given.
inline std::vector<LabeledUtterance> read_corpus(const std::string& text,
                                                 std::size_t lexicon_size = 0,
                                                 const std::vector<std::size_t>& clusters = {}) {
  std::vector<LabeledUtterance> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto next_line = [&]() -> std::vector<std::string_view> {
    while (std::getline(in, line)) {
      ++lineno;
      auto tok = split_ws(line);
      if (!tok.empty()) return tok;
    }
    return {};
  };
  for (;;) {
    auto head = next_line();
    if (head.empty()) break;
    if (head.size() != 8 || head[7].substr(0, 6) != "words:")
      throw std::runtime_error("corpus line " + std::to_string(lineno) + ": bad header");
    LabeledUtterance u;
    u.id = std::string(head[0]);
    u.speaker = parse_u64(head[1]);
    u.gender = static_cast<int>(parse_u64(head[2]));
    u.nuisance = parse_u64(head[3]);
    u.rate = parse_u64(head[4]);
    const auto t = static_cast<Eigen::Index>(parse_u64(head[5]));
    const auto d = static_cast<Eigen::Index>(parse_u64(head[6]));
    u.words = hex_to_words(head[7].substr(6), lexicon_size);
    if (!clusters.empty()) u.cluster = clusters.at(u.speaker);
    Matrix x(t, d);
    for (Eigen::Index i = 0; i < t; ++i) {
      auto row = next_line();
      if (static_cast<Eigen::Index>(row.size()) != d)
        throw std::runtime_error("corpus line " + std::to_string(lineno) +
                                 ": expected " + std::to_string(d) + " values");
      for (Eigen::Index j = 0; j < d; ++j) x(i, j) = parse_double(row[static_cast<std::size_t>(j)]);
    }
    u.frames = FrameSequence(std::move(x));
    out.push_back(std::move(u));
  }
  return out;
}

}  // namespace statpool
