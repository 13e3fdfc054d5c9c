#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "statpool/encoder.hpp"
#include "statpool/seed.hpp"
#include "statpool/synthdata.hpp"

namespace statpool {

struct ProbeConfig {
  std::size_t hidden_width = 500;
  std::size_t epochs = 50;
  double lr = 0.05;
  double weight_decay = 0.01;  // L2 penalty on both weight matrices
  std::size_t batch_size = 32;
  double train_frac = 0.8;
  std::uint64_t seed = 0;

  void validate() const {
    if (hidden_width < 1) throw std::invalid_argument("ProbeConfig: hidden_width < 1");
    if (batch_size < 1) throw std::invalid_argument("ProbeConfig: batch_size < 1");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("ProbeConfig: weight_decay < 0");
    if (!(train_frac > 0.0 && train_frac < 1.0))
      throw std::invalid_argument("ProbeConfig: train_frac outside (0, 1)");
  }
};

// Single-hidden-layer rectifier MLP with one or more softmax output heads
// sharing the hidden layer.
//
// Inputs are standardized with training-set statistics and reordered into a
// canonical coordinate order (sorted by column content), so a common
// permutation of the input coordinates yields a bitwise identical model.
class MlpProbe {
 public:
  // labels(i, h) is the class of example i for head h.
  static MlpProbe fit(const std::vector<Vector>& inputs,
                      const std::vector<std::vector<std::size_t>>& labels,
                      const std::vector<std::size_t>& head_classes, const ProbeConfig& cfg) {
    cfg.validate();
    if (inputs.empty() || inputs.size() != labels.size())
      throw std::invalid_argument("MlpProbe: empty or misaligned training data");
    if (head_classes.empty()) throw std::invalid_argument("MlpProbe: no output heads");
    MlpProbe p;
    p.fit_input_transform(inputs);
    p.head_offset_.push_back(0);
    for (auto c : head_classes) {
      if (c < 2) throw std::invalid_argument("MlpProbe: head with fewer than 2 classes");
      p.head_offset_.push_back(p.head_offset_.back() + c);
    }
    const Matrix x = p.transform(inputs);
    const auto n = x.rows();
    const auto heads = static_cast<Eigen::Index>(head_classes.size());
    for (const auto& l : labels) {
      if (static_cast<Eigen::Index>(l.size()) != heads)
        throw std::invalid_argument("MlpProbe: label row has wrong head count");
      for (std::size_t h = 0; h < l.size(); ++h)
        if (l[h] >= head_classes[h]) throw std::invalid_argument("MlpProbe: label out of range");
    }

    std::mt19937_64 rng(cfg.seed);
    const std::size_t total_out = p.head_offset_.back();
    p.w1_ = glorot_uniform(cfg.hidden_width, static_cast<std::size_t>(x.cols()), rng);
    p.b1_ = Vector::Zero(static_cast<Eigen::Index>(cfg.hidden_width));
    p.w2_ = glorot_uniform(total_out, cfg.hidden_width, rng);
    p.b2_ = Vector::Zero(static_cast<Eigen::Index>(total_out));

    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::size_t end = std::min(order.size(), start + cfg.batch_size);
        const auto b = static_cast<Eigen::Index>(end - start);
        Matrix xb(b, x.cols());
        for (Eigen::Index i = 0; i < b; ++i) xb.row(i) = x.row(order[start + static_cast<std::size_t>(i)]);
        Matrix z1 = xb * p.w1_.transpose();
        z1.rowwise() += p.b1_.transpose();
        const Matrix h = z1.cwiseMax(0.0);
        Matrix logits = h * p.w2_.transpose();
        logits.rowwise() += p.b2_.transpose();
        Matrix d_logits = Matrix::Zero(b, logits.cols());
        for (Eigen::Index i = 0; i < b; ++i) {
          const auto& lab = labels[static_cast<std::size_t>(order[start + static_cast<std::size_t>(i)])];
          for (Eigen::Index hd = 0; hd < heads; ++hd) {
            const auto off = static_cast<Eigen::Index>(p.head_offset_[static_cast<std::size_t>(hd)]);
            const auto c = static_cast<Eigen::Index>(head_classes[static_cast<std::size_t>(hd)]);
            auto seg = logits.row(i).segment(off, c);
            const double mx = seg.maxCoeff();
            Eigen::RowVectorXd e = (seg.array() - mx).exp();
            e /= e.sum();
            e[static_cast<Eigen::Index>(lab[static_cast<std::size_t>(hd)])] -= 1.0;
            d_logits.row(i).segment(off, c) = e / static_cast<double>(b);
          }
        }
        Matrix d_w2 = d_logits.transpose() * h;
        const Vector d_b2 = d_logits.colwise().sum().transpose();
        const Matrix d_z1 = (z1.array() > 0.0).select(d_logits * p.w2_, 0.0);
        Matrix d_w1 = d_z1.transpose() * xb;
        if (cfg.weight_decay > 0.0) {
          d_w1 += cfg.weight_decay * p.w1_;
          d_w2 += cfg.weight_decay * p.w2_;
        }
        const Vector d_b1 = d_z1.colwise().sum().transpose();
        p.w2_ -= cfg.lr * d_w2;
        p.b2_ -= cfg.lr * d_b2;
        p.w1_ -= cfg.lr * d_w1;
        p.b1_ -= cfg.lr * d_b1;
      }
    }
    return p;
  }

  std::size_t heads() const { return head_offset_.size() - 1; }

  // Predicted class per head for each input.
  std::vector<std::vector<std::size_t>> predict(const std::vector<Vector>& inputs) const {
    std::vector<std::vector<std::size_t>> out;
    if (inputs.empty()) return out;
    const Matrix x = transform(inputs);
    Matrix z1 = x * w1_.transpose();
    z1.rowwise() += b1_.transpose();
    Matrix logits = z1.cwiseMax(0.0) * w2_.transpose();
    logits.rowwise() += b2_.transpose();
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      std::vector<std::size_t> row;
      for (std::size_t h = 0; h < heads(); ++h) {
        const auto off = static_cast<Eigen::Index>(head_offset_[h]);
        const auto c = static_cast<Eigen::Index>(head_offset_[h + 1] - head_offset_[h]);
        Eigen::Index arg = 0;
        logits.row(i).segment(off, c).maxCoeff(&arg);
        row.push_back(static_cast<std::size_t>(arg));
      }
      out.push_back(std::move(row));
    }
    return out;
  }

 private:
  void fit_input_transform(const std::vector<Vector>& inputs) {
    const auto d = inputs.front().size();
    Matrix x(static_cast<Eigen::Index>(inputs.size()), d);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (inputs[i].size() != d) throw std::invalid_argument("MlpProbe: ragged inputs");
      x.row(static_cast<Eigen::Index>(i)) = inputs[i].transpose();
    }
    mean_ = x.colwise().mean().transpose();
    scale_.resize(d);
    for (Eigen::Index j = 0; j < d; ++j) {
      const double sd = std::sqrt((x.col(j).array() - mean_[j]).square().mean());
      scale_[j] = sd > 0.0 ? 1.0 / sd : 1.0;
    }
    order_.resize(static_cast<std::size_t>(d));
    std::iota(order_.begin(), order_.end(), Eigen::Index{0});
    std::sort(order_.begin(), order_.end(), [&](Eigen::Index a, Eigen::Index b) {
      if (mean_[a] != mean_[b]) return mean_[a] < mean_[b];
      if (scale_[a] != scale_[b]) return scale_[a] < scale_[b];
      for (Eigen::Index i = 0; i < x.rows(); ++i)
        if (x(i, a) != x(i, b)) return x(i, a) < x(i, b);
      return false;
    });
  }

  Matrix transform(const std::vector<Vector>& inputs) const {
    const auto d = static_cast<Eigen::Index>(order_.size());
    Matrix x(static_cast<Eigen::Index>(inputs.size()), d);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (inputs[i].size() != d) throw std::invalid_argument("MlpProbe: input dim mismatch");
      for (Eigen::Index k = 0; k < d; ++k) {
        const auto j = order_[static_cast<std::size_t>(k)];
        x(static_cast<Eigen::Index>(i), k) = (inputs[i][j] - mean_[j]) * scale_[j];
      }
    }
    return x;
  }

  Vector mean_, scale_;
  std::vector<Eigen::Index> order_;
  Matrix w1_, w2_;
  Vector b1_, b2_;
  std::vector<std::size_t> head_offset_;
};

// Number of distinct labels; the labels must already be dense in [0, k).
inline std::size_t count_classes(const std::vector<std::size_t>& labels) {
  return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
}

// Single-task classifier over frozen embeddings.
inline MlpProbe train_probe(const std::vector<Vector>& emb, const std::vector<std::size_t>& labels,
                            const ProbeConfig& cfg, std::size_t num_classes = 0) {
  if (emb.size() != labels.size()) throw std::invalid_argument("train_probe: misaligned");
  std::vector<std::size_t> distinct(labels);
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() < 2)
    throw std::invalid_argument("train_probe: training data has a single class");
  if (num_classes == 0) num_classes = count_classes(labels);
  std::vector<std::vector<std::size_t>> rows;
  rows.reserve(labels.size());
  for (auto l : labels) rows.push_back({l});
  return MlpProbe::fit(emb, rows, {num_classes}, cfg);
}

inline double probe_accuracy(const MlpProbe& p, const std::vector<Vector>& emb,
                             const std::vector<std::size_t>& labels) {
  if (emb.empty()) return std::numeric_limits<double>::quiet_NaN();
  const auto pred = p.predict(emb);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i][0] == labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(emb.size());
}

// Accuracy of always predicting the most frequent class of `labels`.
inline double majority_rate(const std::vector<std::size_t>& labels) {
  if (labels.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::map<std::size_t, std::size_t> counts;
  for (auto l : labels) ++counts[l];
  std::size_t best = 0;
  for (const auto& [l, c] : counts) best = std::max(best, c);
  return static_cast<double>(best) / static_cast<double>(labels.size());
}

struct WordProbeResult {
  double accuracy = std::numeric_limits<double>::quiet_NaN();  // mean over probed words
  double chance = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> per_word;       // NaN for skipped words
  std::vector<std::size_t> skipped;   // words constant over the training split
  bool degenerate = false;            // every word skipped
};

// One binary presence head per word on a shared hidden layer; reports the
// mean of per-word held-out accuracies. Words that are constant over the
// training split are skipped.
inline WordProbeResult word_presence_probe(const std::vector<Vector>& train_emb,
                                           const std::vector<std::vector<bool>>& train_words,
                                           const std::vector<Vector>& test_emb,
                                           const std::vector<std::vector<bool>>& test_words,
                                           const ProbeConfig& cfg) {
  if (train_emb.size() != train_words.size() || test_emb.size() != test_words.size())
    throw std::invalid_argument("word_presence_probe: misaligned");
  if (train_words.empty()) throw std::invalid_argument("word_presence_probe: no training data");
  const std::size_t lexicon = train_words.front().size();
  if (lexicon < 1) throw std::invalid_argument("word_presence_probe: empty lexicon");

  WordProbeResult r;
  r.per_word.assign(lexicon, std::numeric_limits<double>::quiet_NaN());
  std::vector<std::size_t> active;
  for (std::size_t w = 0; w < lexicon; ++w) {
    std::size_t present = 0;
    for (const auto& ws : train_words) present += ws.at(w) ? 1 : 0;
    if (present == 0 || present == train_words.size()) r.skipped.push_back(w);
    else active.push_back(w);
  }
  if (active.empty()) {
    r.degenerate = true;
    return r;
  }
  std::vector<std::vector<std::size_t>> rows;
  for (const auto& ws : train_words) {
    std::vector<std::size_t> row;
    for (auto w : active) row.push_back(ws[w] ? 1 : 0);
    rows.push_back(std::move(row));
  }
  const auto model =
      MlpProbe::fit(train_emb, rows, std::vector<std::size_t>(active.size(), 2), cfg);
  const auto pred = model.predict(test_emb);
  double acc_sum = 0.0, chance_sum = 0.0;
  for (std::size_t h = 0; h < active.size(); ++h) {
    const auto w = active[h];
    std::size_t hit = 0, present = 0;
    for (std::size_t i = 0; i < test_emb.size(); ++i) {
      const bool truth = test_words[i].at(w);
      present += truth ? 1 : 0;
      hit += (pred[i][h] == 1) == truth ? 1 : 0;
    }
    const double n = static_cast<double>(test_emb.size());
    r.per_word[w] = static_cast<double>(hit) / n;
    acc_sum += r.per_word[w];
    chance_sum += static_cast<double>(std::max(present, test_emb.size() - present)) / n;
  }
  r.accuracy = acc_sum / static_cast<double>(active.size());
  r.chance = chance_sum / static_cast<double>(active.size());
  return r;
}

// ---------------------------------------------------------------------------
// Probing tasks over labeled utterances.

enum class ProbeTask { SpeakerId, Gender, Cluster, Rate, Nuisance, WordPresence };

inline constexpr std::array<ProbeTask, 6> kAllProbeTasks = {
    ProbeTask::SpeakerId, ProbeTask::Gender,   ProbeTask::Cluster,
    ProbeTask::Rate,      ProbeTask::Nuisance, ProbeTask::WordPresence};

inline std::string_view to_string(ProbeTask t) {
  switch (t) {
    case ProbeTask::SpeakerId: return "speaker_id";
    case ProbeTask::Gender: return "gender";
    case ProbeTask::Cluster: return "cluster";
    case ProbeTask::Rate: return "rate";
    case ProbeTask::Nuisance: return "nuisance";
    case ProbeTask::WordPresence: return "word_presence";
  }
  return "?";
}

inline ProbeTask parse_probe_task(std::string_view s) {
  for (auto t : kAllProbeTasks)
    if (to_string(t) == s) return t;
  throw std::invalid_argument("unknown probe task '" + std::string(s) + "'");
}

// Class label of an utterance for a classification task, before densifying.
inline std::size_t task_label(ProbeTask t, const LabeledUtterance& u) {
  switch (t) {
    case ProbeTask::SpeakerId: return u.speaker;
    case ProbeTask::Gender: return static_cast<std::size_t>(u.gender);
    case ProbeTask::Cluster: return u.cluster;
    case ProbeTask::Rate: return u.rate;
    case ProbeTask::Nuisance: return u.nuisance;
    case ProbeTask::WordPresence: return u.speaker;  // split stratum only
  }
  return 0;
}

struct ProbeReport {
  std::string pooling;  // system name
  std::string task;
  double accuracy = 0.0;
  double chance = 0.0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  bool degenerate = false;
};

// Runs one probing task on embeddings aligned with `utts`: seeded stratified
// split, probe training, held-out accuracy. The split and probe seeds depend
// only on (cfg.seed, task), so every system sees the same split.
inline ProbeReport run_probe(const std::string& system, const std::vector<Vector>& emb,
                             const std::vector<LabeledUtterance>& utts, ProbeTask task,
                             const ProbeConfig& cfg) {
  if (emb.size() != utts.size()) throw std::invalid_argument("run_probe: misaligned");
  const std::string tname(to_string(task));
  std::vector<std::size_t> raw;
  for (const auto& u : utts) raw.push_back(task_label(task, u));
  // Densify labels in sorted order.
  std::vector<std::size_t> keys(raw);
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
  std::vector<std::size_t> labels;
  for (auto l : raw)
    labels.push_back(static_cast<std::size_t>(std::lower_bound(keys.begin(), keys.end(), l) - keys.begin()));

  const auto [train_idx, test_idx] =
      split(labels, cfg.train_frac, derive_seed(cfg.seed, "probe-split:" + tname));
  ProbeConfig pc = cfg;
  pc.seed = derive_seed(cfg.seed, "probe-init:" + tname);

  ProbeReport rep;
  rep.pooling = system;
  rep.task = tname;
  rep.n_train = train_idx.size();
  rep.n_test = test_idx.size();
  std::vector<Vector> xtr, xte;
  for (auto i : train_idx) xtr.push_back(emb[i]);
  for (auto i : test_idx) xte.push_back(emb[i]);

  if (task == ProbeTask::WordPresence) {
    std::vector<std::vector<bool>> wtr, wte;
    for (auto i : train_idx) wtr.push_back(utts[i].words);
    for (auto i : test_idx) wte.push_back(utts[i].words);
    const auto r = word_presence_probe(xtr, wtr, xte, wte, pc);
    rep.accuracy = r.accuracy;
    rep.chance = r.chance;
    rep.degenerate = r.degenerate;
    return rep;
  }
  std::vector<std::size_t> ytr, yte;
  for (auto i : train_idx) ytr.push_back(labels[i]);
  for (auto i : test_idx) yte.push_back(labels[i]);
  const auto model = train_probe(xtr, ytr, pc, keys.size());
  rep.accuracy = probe_accuracy(model, xte, yte);
  rep.chance = majority_rate(yte);
  return rep;
}

struct SystemEmbeddings {
  std::string name;
  std::vector<Vector> embeddings;  // aligned with the utterance list
};

// Full (system x task) cross-product, system-major.
inline std::vector<ProbeReport> run_matrix(const std::vector<SystemEmbeddings>& systems,
                                           const std::vector<LabeledUtterance>& utts,
                                           const std::vector<ProbeTask>& tasks,
                                           const ProbeConfig& cfg) {
  std::vector<ProbeReport> out;
  for (const auto& s : systems)
    for (auto t : tasks) out.push_back(run_probe(s.name, s.embeddings, utts, t, cfg));
  return out;
}

// `pooling task accuracy chance n_train n_test` per line.
inline std::string write_probe_reports(const std::vector<ProbeReport>& reports) {
  std::string out;
  for (const auto& r : reports)
    out += r.pooling + ' ' + r.task + ' ' + format_sig17(r.accuracy) + ' ' +
           format_sig17(r.chance) + ' ' + std::to_string(r.n_train) + ' ' +
           std::to_string(r.n_test) + '\n';
  return out;
}

inline std::vector<ProbeReport> read_probe_reports(const std::string& text) {
  std::vector<ProbeReport> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok.size() != 6) throw std::runtime_error("probe report: expected 6 fields");
    ProbeReport r;
    r.pooling = std::string(tok[0]);
    r.task = std::string(tok[1]);
    r.accuracy = tok[2] == "nan" ? std::numeric_limits<double>::quiet_NaN() : parse_double(tok[2]);
    r.chance = tok[3] == "nan" ? std::numeric_limits<double>::quiet_NaN() : parse_double(tok[3]);
    r.n_train = parse_u64(tok[4]);
    r.n_test = parse_u64(tok[5]);
    r.degenerate = std::isnan(r.accuracy);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace statpool
