#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "statpool/frame_sequence.hpp"
#include "statpool/text_io.hpp"

namespace statpool {

struct Trial {
  std::string enroll_id;
  std::string test_id;
  bool target = false;

  bool operator==(const Trial&) const = default;
};

struct ScoreSet {
  std::string name;
  std::vector<Trial> trials;
  std::vector<double> scores;

  void validate() const {
    if (trials.size() != scores.size())
      throw std::invalid_argument("ScoreSet '" + name + "': trials and scores misaligned");
    for (double s : scores)
      if (!std::isfinite(s))
        throw std::invalid_argument("ScoreSet '" + name + "': non-finite score");
  }
};

// Cost weights for the detection cost function.
struct DcfParams {
  double c_miss = 1.0;
  double c_fa = 1.0;
  double p_target = 0.01;

  double normalizer() const {
    if (!(c_miss > 0.0) || !(c_fa > 0.0) || !(p_target > 0.0 && p_target < 1.0))
      throw std::invalid_argument("DcfParams: need c_miss, c_fa > 0 and p_target in (0,1)");
    return std::min(c_miss * p_target, c_fa * (1.0 - p_target));
  }
};

class ScoringError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline double cosine_score(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_score: dim mismatch");
  const double na = a.norm();
  const double nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0)) throw ScoringError("cosine_score: zero-norm embedding");
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

// One point of the threshold sweep: error counts when accepting every score
// >= threshold.
struct SweepPoint {
  double threshold;  // +inf for the reject-all end
  std::size_t misses;
  std::size_t false_alarms;
};

// Sweep over every distinct score value (ascending) followed by +inf.
inline std::vector<SweepPoint> threshold_sweep(const ScoreSet& s) {
  s.validate();
  std::vector<std::pair<double, bool>> v;
  v.reserve(s.scores.size());
  std::size_t n_tar = 0;
  for (std::size_t i = 0; i < s.scores.size(); ++i) {
    v.emplace_back(s.scores[i], s.trials[i].target);
    n_tar += s.trials[i].target ? 1 : 0;
  }
  const std::size_t n_non = v.size() - n_tar;
  if (n_tar == 0 || n_non == 0)
    throw ScoringError("ScoreSet '" + s.name + "': need both target and nontarget trials");
  std::sort(v.begin(), v.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  std::vector<SweepPoint> out;
  std::size_t misses = 0;        // targets strictly below the threshold
  std::size_t false_alarms = n_non;
  for (std::size_t i = 0; i < v.size();) {
    out.push_back({v[i].first, misses, false_alarms});
    const double t = v[i].first;
    for (; i < v.size() && v[i].first == t; ++i) {
      if (v[i].second) ++misses;
      else --false_alarms;
    }
  }
  out.push_back({std::numeric_limits<double>::infinity(), misses, false_alarms});
  return out;
}

// Rate where false-alarm and miss rates cross. Between adjacent sweep points
// where FAR - FRR changes sign, the crossing is linearly interpolated.
inline double eer(const ScoreSet& s) {
  const auto sweep = threshold_sweep(s);
  std::size_t n_tar = sweep.back().misses;
  std::size_t n_non = sweep.front().false_alarms;
  const double nt = static_cast<double>(n_tar);
  const double nn = static_cast<double>(n_non);
  double prev_far = 1.0, prev_frr = 0.0;
  for (std::size_t k = 0; k < sweep.size(); ++k) {
    const double far = static_cast<double>(sweep[k].false_alarms) / nn;
    const double frr = static_cast<double>(sweep[k].misses) / nt;
    const double diff = far - frr;
    if (diff == 0.0) return far;
    if (diff < 0.0) {
      // k > 0: the first point always has FAR = 1, FRR = 0.
      const double prev_diff = prev_far - prev_frr;
      const double alpha = prev_diff / (prev_diff - diff);
      return prev_far + alpha * (far - prev_far);
    }
    prev_far = far;
    prev_frr = frr;
  }
  return 0.0;  // unreachable: the +inf point has FAR = 0, FRR = 1
}

inline double min_dcf(const ScoreSet& s, const DcfParams& p = {}) {
  const double norm = p.normalizer();
  const auto sweep = threshold_sweep(s);
  const double nt = static_cast<double>(sweep.back().misses);
  const double nn = static_cast<double>(sweep.front().false_alarms);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& pt : sweep) {
    const double frr = static_cast<double>(pt.misses) / nt;
    const double far = static_cast<double>(pt.false_alarms) / nn;
    const double cost = p.c_miss * p.p_target * frr + p.c_fa * (1.0 - p.p_target) * far;
    best = std::min(best, cost);
  }
  return std::min(best / norm, 1.0);
}

inline std::string fused_name(const std::vector<std::string>& names) {
  std::string out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (i) out += "⊕";
    out += "(" + names[i] + ")";
  }
  return out;
}

// Equal-weight score averaging. All systems must carry the identical trial
// list in identical order.
inline ScoreSet fuse(const std::vector<ScoreSet>& systems) {
  if (systems.empty()) throw ScoringError("fuse: no systems");
  for (const auto& s : systems) s.validate();
  if (systems.size() == 1) return systems.front();
  const auto& ref = systems.front();
  for (std::size_t k = 1; k < systems.size(); ++k)
    if (systems[k].trials != ref.trials)
      throw ScoringError("fuse: trial list of '" + systems[k].name +
                         "' does not match '" + ref.name + "'");
  ScoreSet out;
  std::vector<std::string> names;
  for (const auto& s : systems) names.push_back(s.name);
  out.name = fused_name(names);
  out.trials = ref.trials;
  out.scores.assign(ref.scores.size(), 0.0);
  const double w = 1.0 / static_cast<double>(systems.size());
  for (std::size_t i = 0; i < out.scores.size(); ++i) {
    double sum = 0.0;
    for (const auto& s : systems) sum += s.scores[i];
    out.scores[i] = sum * w;
  }
  return out;
}

// Cosine scores for a trial list, given embeddings keyed by utterance id.
inline ScoreSet score_trials(const std::string& name, const std::vector<Trial>& trials,
                             const std::map<std::string, Vector>& embeddings) {
  ScoreSet out{name, trials, {}};
  out.scores.reserve(trials.size());
  for (const auto& t : trials) {
    auto e = embeddings.find(t.enroll_id);
    auto x = embeddings.find(t.test_id);
    if (e == embeddings.end() || x == embeddings.end())
      throw ScoringError("score_trials: missing embedding for trial " + t.enroll_id +
                         " " + t.test_id);
    out.scores.push_back(cosine_score(e->second, x->second));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Text formats. Scores: `enroll_id test_id score label` per line.
// Embeddings: `id dim v1 ... vD` per line. Trials: `enroll_id test_id label`.

inline std::string write_scores(const ScoreSet& s) {
  s.validate();
  std::string out;
  for (std::size_t i = 0; i < s.trials.size(); ++i) {
    out += s.trials[i].enroll_id;
    out += ' ';
    out += s.trials[i].test_id;
    out += ' ';
    out += format_sig17(s.scores[i]);
    out += s.trials[i].target ? " target\n" : " nontarget\n";
  }
  return out;
}

inline bool parse_label(std::string_view s) {
  if (s == "target") return true;
  if (s == "nontarget") return false;
  throw std::runtime_error("bad trial label '" + std::string(s) + "'");
}

inline ScoreSet read_scores(const std::string& text, std::string name = {}) {
  ScoreSet s;
  s.name = std::move(name);
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok.size() != 4)
      throw std::runtime_error("score file line " + std::to_string(lineno) +
                               ": expected 4 fields");
    s.trials.push_back({std::string(tok[0]), std::string(tok[1]), parse_label(tok[3])});
    s.scores.push_back(parse_double(tok[2]));
  }
  return s;
}

inline std::string write_trials(const std::vector<Trial>& trials) {
  std::string out;
  for (const auto& t : trials)
    out += t.enroll_id + ' ' + t.test_id + (t.target ? " target\n" : " nontarget\n");
  return out;
}

inline std::vector<Trial> read_trials(const std::string& text) {
  std::vector<Trial> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok.size() != 3) throw std::runtime_error("trial file: expected 3 fields");
    out.push_back({std::string(tok[0]), std::string(tok[1]), parse_label(tok[2])});
  }
  return out;
}

using EmbeddingTable = std::vector<std::pair<std::string, Vector>>;

inline std::string write_embeddings(const EmbeddingTable& table) {
  std::string out;
  for (const auto& [id, v] : table) {
    out += id + ' ' + std::to_string(v.size());
    for (Eigen::Index i = 0; i < v.size(); ++i) out += ' ' + format_sig17(v[i]);
    out += '\n';
  }
  return out;
}

inline EmbeddingTable read_embeddings(const std::string& text) {
  EmbeddingTable out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok.size() < 2) throw std::runtime_error("embedding file: short line " + std::to_string(lineno));
    const auto dim = parse_u64(tok[1]);
    if (tok.size() != dim + 2)
      throw std::runtime_error("embedding file line " + std::to_string(lineno) +
                               ": dim does not match value count");
    Vector v(static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < dim; ++i) v[static_cast<Eigen::Index>(i)] = parse_double(tok[i + 2]);
    out.emplace_back(std::string(tok[0]), std::move(v));
  }
  return out;
}

}  // namespace statpool
