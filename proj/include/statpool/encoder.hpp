#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "statpool/pooling.hpp"
#include "statpool/seed.hpp"
#include "statpool/text_io.hpp"

namespace statpool {

struct EncoderConfig {
  std::size_t input_dim = 1;
  std::vector<std::size_t> frame_hidden;  // empty: pool the input frames
  PoolingConfig pooling{{Statistic::Mean, Statistic::Std}};
  std::size_t embed_dim = 256;
  std::size_t num_classes = 2;
  double arcface_scale = 30.0;
  double arcface_margin = 0.2;
  std::uint64_t seed = 0;

  std::size_t frame_output_dim() const {
    return frame_hidden.empty() ? input_dim : frame_hidden.back();
  }

  void validate() const {
    if (input_dim < 1 || embed_dim < 1)
      throw std::invalid_argument("EncoderConfig: widths must be >= 1");
    for (auto w : frame_hidden)
      if (w < 1) throw std::invalid_argument("EncoderConfig: widths must be >= 1");
    if (num_classes < 2)
      throw std::invalid_argument("EncoderConfig: need at least 2 classes");
    if (!(arcface_scale > 0.0))
      throw std::invalid_argument("EncoderConfig: arcface_scale must be > 0");
    if (!(arcface_margin >= 0.0 && arcface_margin <= 0.5))
      throw std::invalid_argument("EncoderConfig: arcface_margin outside [0, 0.5]");
  }
};

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;
};

struct ModelState {
  EncoderConfig config;
  std::vector<DenseLayer> frame_layers;
  DenseLayer embedding;   // first segment-level layer
  Matrix class_weights;   // num_classes x embed_dim, normalized on use
};

inline Matrix glorot_uniform(std::size_t out, std::size_t in, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-a, a);
  Matrix w(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
  for (Eigen::Index i = 0; i < w.rows(); ++i)
    for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = dist(rng);
  return w;
}

// Layers are initialized from independent named streams, so systems that
// differ only in pooling share identical frame-level initial weights.
inline ModelState init_model(const EncoderConfig& cfg) {
  cfg.validate();
  ModelState m;
  m.config = cfg;
  std::size_t in = cfg.input_dim;
  for (std::size_t l = 0; l < cfg.frame_hidden.size(); ++l) {
    std::mt19937_64 rng(derive_seed(cfg.seed, "init:frame:" + std::to_string(l)));
    const std::size_t out = cfg.frame_hidden[l];
    m.frame_layers.push_back(
        {glorot_uniform(out, in, rng), Vector::Zero(static_cast<Eigen::Index>(out))});
    in = out;
  }
  const std::size_t pooled = output_width(cfg.pooling, cfg.frame_output_dim());
  std::mt19937_64 erng(derive_seed(cfg.seed, "init:embedding"));
  m.embedding = {glorot_uniform(cfg.embed_dim, pooled, erng),
                 Vector::Zero(static_cast<Eigen::Index>(cfg.embed_dim))};
  std::mt19937_64 crng(derive_seed(cfg.seed, "init:classes"));
  m.class_weights = glorot_uniform(cfg.num_classes, cfg.embed_dim, crng);
  return m;
}

namespace detail {

// Activations kept for the backward pass of one utterance.
struct ForwardTrace {
  std::vector<Matrix> activations;  // [0] = input, [l+1] = ReLU output of layer l
  Vector pooled;
  Vector embedding;
};

inline ForwardTrace forward_trace(const ModelState& m, const FrameSequence& x) {
  if (x.dim() != m.config.input_dim)
    throw std::invalid_argument("encoder: input dim " + std::to_string(x.dim()) +
                                " != " + std::to_string(m.config.input_dim));
  ForwardTrace tr;
  tr.activations.reserve(m.frame_layers.size() + 1);
  tr.activations.push_back(x.matrix());
  for (const auto& layer : m.frame_layers) {
    Matrix z = tr.activations.back() * layer.weight.transpose();
    z.rowwise() += layer.bias.transpose();
    tr.activations.push_back(z.cwiseMax(0.0));
  }
  tr.pooled = forward(m.config.pooling, FrameSequence(tr.activations.back()));
  tr.embedding = m.embedding.weight * tr.pooled + m.embedding.bias;
  return tr;
}

}  // namespace detail

// Embedding = pre-activation output of the first segment-level layer.
inline Vector forward_embed(const ModelState& m, const FrameSequence& x) {
  return detail::forward_trace(m, x).embedding;
}

inline std::vector<Vector> extract_all(const ModelState& m,
                                       const std::vector<FrameSequence>& utts,
                                       unsigned threads = 1) {
  std::vector<Vector> out(utts.size());
  if (threads <= 1 || utts.size() < 2) {
    for (std::size_t i = 0; i < utts.size(); ++i) out[i] = forward_embed(m, utts[i]);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (unsigned w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < utts.size(); i += threads)
          out[i] = forward_embed(m, utts[i]);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

struct ArcFaceGrad {
  double loss = 0.0;
  Vector d_embedding;
  Matrix d_class_weights;
};

namespace detail {

inline constexpr double kNormFloor = 1e-12;
inline constexpr double kSinFloor = 1e-6;

inline ArcFaceGrad arcface(const Matrix& class_weights, const Vector& emb,
                           std::size_t label, double s, double m, bool want_grad) {
  const auto n = class_weights.rows();
  if (label >= static_cast<std::size_t>(n))
    throw std::invalid_argument("arcface: label out of range");
  if (emb.size() != class_weights.cols())
    throw std::invalid_argument("arcface: embedding dim mismatch");
  const auto y = static_cast<Eigen::Index>(label);

  const double e_norm = std::max(emb.norm(), kNormFloor);
  const Vector e_hat = emb / e_norm;
  Vector w_norm = class_weights.rowwise().norm().cwiseMax(kNormFloor);
  Matrix w_hat = class_weights.array().colwise() / w_norm.array();
  Vector cosines = w_hat * e_hat;

  Vector logits = s * cosines;
  const double c_y = std::clamp(cosines[y], -1.0, 1.0);
  const double theta = std::acos(c_y);
  logits[y] = s * std::cos(theta + m);

  const double zmax = logits.maxCoeff();
  Vector p = (logits.array() - zmax).exp();
  const double denom = p.sum();
  ArcFaceGrad g;
  g.loss = std::log(denom) + zmax - logits[y];
  if (!want_grad) return g;

  p /= denom;
  // dL/dcos_j
  Vector d_cos = s * p;
  const double sin_theta = std::max(std::sin(theta), kSinFloor);
  d_cos[y] = s * (p[y] - 1.0) * std::sin(theta + m) / sin_theta;

  // cos_j = w_hat_j . e_hat
  g.d_embedding = (w_hat.transpose() * d_cos - d_cos.dot(cosines) * e_hat) / e_norm;
  g.d_class_weights.resize(n, class_weights.cols());
  for (Eigen::Index j = 0; j < n; ++j)
    g.d_class_weights.row(j) =
        d_cos[j] * (e_hat.transpose() - cosines[j] * w_hat.row(j)) / w_norm[j];
  return g;
}

}  // namespace detail

// Cross-entropy over s*cos(theta_j + m*[j == label]).
inline double arcface_loss(const Matrix& class_weights, const Vector& emb,
                           std::size_t label, double s, double m) {
  return detail::arcface(class_weights, emb, label, s, m, false).loss;
}

inline double arcface_loss(const ModelState& model, const Vector& emb,
                           std::size_t label, double s, double m) {
  return arcface_loss(model.class_weights, emb, label, s, m);
}

inline ArcFaceGrad arcface_loss_grad(const Matrix& class_weights, const Vector& emb,
                                     std::size_t label, double s, double m) {
  return detail::arcface(class_weights, emb, label, s, m, true);
}

struct TrainBatch {
  std::vector<FrameSequence> sequences;
  std::vector<std::size_t> labels;
};

// Parameter-shaped gradient container.
struct ModelGradient {
  std::vector<DenseLayer> frame_layers;
  DenseLayer embedding;
  Matrix class_weights;

  explicit ModelGradient(const ModelState& m) {
    for (const auto& l : m.frame_layers)
      frame_layers.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()),
                              Vector::Zero(l.bias.size())});
    embedding = {Matrix::Zero(m.embedding.weight.rows(), m.embedding.weight.cols()),
                 Vector::Zero(m.embedding.bias.size())};
    class_weights = Matrix::Zero(m.class_weights.rows(), m.class_weights.cols());
  }

  double squared_norm() const {
    double s = embedding.weight.squaredNorm() + embedding.bias.squaredNorm() +
               class_weights.squaredNorm();
    for (const auto& l : frame_layers) s += l.weight.squaredNorm() + l.bias.squaredNorm();
    return s;
  }
};

// Mean ArcFace loss over the batch and its gradient w.r.t. every parameter.
inline double loss_and_gradient(const ModelState& m, const TrainBatch& batch,
                                ModelGradient& grad) {
  if (batch.sequences.empty() || batch.sequences.size() != batch.labels.size())
    throw std::invalid_argument("TrainBatch: empty or misaligned");
  const double inv_b = 1.0 / static_cast<double>(batch.sequences.size());
  double total = 0.0;
  const auto& cfg = m.config;
  for (std::size_t b = 0; b < batch.sequences.size(); ++b) {
    const auto tr = detail::forward_trace(m, batch.sequences[b]);
    const auto af = arcface_loss_grad(m.class_weights, tr.embedding, batch.labels[b],
                                      cfg.arcface_scale, cfg.arcface_margin);
    total += af.loss;
    grad.class_weights += inv_b * af.d_class_weights;
    const Vector d_emb = inv_b * af.d_embedding;
    grad.embedding.weight += d_emb * tr.pooled.transpose();
    grad.embedding.bias += d_emb;
    const Vector d_pooled = m.embedding.weight.transpose() * d_emb;
    Matrix d_act =
        backward(cfg.pooling, FrameSequence(tr.activations.back()), d_pooled);
    for (std::size_t l = m.frame_layers.size(); l-- > 0;) {
      const Matrix& out = tr.activations[l + 1];
      Matrix d_z = (out.array() > 0.0).select(d_act, 0.0);
      grad.frame_layers[l].weight += d_z.transpose() * tr.activations[l];
      grad.frame_layers[l].bias += d_z.colwise().sum().transpose();
      if (l > 0) d_act = d_z * m.frame_layers[l].weight;
    }
  }
  return total * inv_b;
}

inline double batch_loss(const ModelState& m, const TrainBatch& batch) {
  double total = 0.0;
  for (std::size_t b = 0; b < batch.sequences.size(); ++b)
    total += arcface_loss(m.class_weights, forward_embed(m, batch.sequences[b]),
                          batch.labels[b], m.config.arcface_scale,
                          m.config.arcface_margin);
  return total / static_cast<double>(batch.sequences.size());
}

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t step)
      : std::runtime_error(what + " at step " + std::to_string(step)), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct TrainOptions {
  std::size_t epochs = 10;
  double lr = 0.05;
  // Rescale the gradient when its global norm exceeds this; 0 disables.
  double clip_norm = 0.0;
  // When non-zero, every step trains on a fresh seeded crop of this many
  // frames from each longer sequence.
  std::size_t segment_frames = 0;
  // L2 penalty on frame and embedding weight matrices (not biases).
  double weight_decay = 0.0;
};

struct TrainResult {
  ModelState model;
  std::vector<double> epoch_loss;  // mean batch loss per epoch
};

// Seeded minibatch gradient descent; batch order is reshuffled each epoch
// from a stream derived from cfg.seed.
inline TrainResult train(const EncoderConfig& cfg, const std::vector<TrainBatch>& data,
                         const TrainOptions& opt) {
  TrainResult res{init_model(cfg), {}};
  if (data.empty()) throw std::invalid_argument("train: no batches");
  for (const auto& b : data)
    for (auto y : b.labels)
      if (y >= cfg.num_classes) throw std::invalid_argument("train: label out of range");

  ModelState& m = res.model;
  std::mt19937_64 rng(derive_seed(cfg.seed, "train:batch-order"));
  std::mt19937_64 crop_rng(derive_seed(cfg.seed, "train:crop"));
  auto cropped = [&](const TrainBatch& b) {
    TrainBatch out;
    out.labels = b.labels;
    for (const auto& x : b.sequences) {
      if (x.frames() <= opt.segment_frames) {
        out.sequences.push_back(x);
        continue;
      }
      std::uniform_int_distribution<std::size_t> off(0, x.frames() - opt.segment_frames);
      out.sequences.emplace_back(Matrix(x.matrix().middleRows(
          static_cast<Eigen::Index>(off(crop_rng)),
          static_cast<Eigen::Index>(opt.segment_frames))));
    }
    return out;
  };
  std::vector<std::size_t> order(data.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    for (auto bi : order) {
      ModelGradient g(m);
      const double loss = opt.segment_frames > 0
                              ? loss_and_gradient(m, cropped(data[bi]), g)
                              : loss_and_gradient(m, data[bi], g);
      if (!std::isfinite(loss)) throw TrainingError("non-finite loss", step);
      sum += loss;
      double scale = opt.lr;
      if (opt.clip_norm > 0.0) {
        const double norm = std::sqrt(g.squared_norm());
        if (norm > opt.clip_norm) scale *= opt.clip_norm / norm;
      }
      if (opt.weight_decay > 0.0) {
        for (std::size_t l = 0; l < m.frame_layers.size(); ++l)
          m.frame_layers[l].weight *= 1.0 - opt.lr * opt.weight_decay;
        m.embedding.weight *= 1.0 - opt.lr * opt.weight_decay;
      }
      if (scale != 0.0) {
        for (std::size_t l = 0; l < m.frame_layers.size(); ++l) {
          m.frame_layers[l].weight -= scale * g.frame_layers[l].weight;
          m.frame_layers[l].bias -= scale * g.frame_layers[l].bias;
        }
        m.embedding.weight -= scale * g.embedding.weight;
        m.embedding.bias -= scale * g.embedding.bias;
        m.class_weights -= scale * g.class_weights;
      }
      ++step;
    }
    res.epoch_loss.push_back(sum / static_cast<double>(data.size()));
  }
  return res;
}

inline TrainResult train(const EncoderConfig& cfg, const std::vector<TrainBatch>& data,
                         std::size_t epochs, double lr) {
  TrainOptions opt;
  opt.epochs = epochs;
  opt.lr = lr;
  return train(cfg, data, opt);
}

// Groups (sequence, label) pairs into seeded minibatches. When segment_frames
// is non-zero, longer sequences are cropped to a seeded window of that length.
inline std::vector<TrainBatch> make_batches(const std::vector<FrameSequence>& seqs,
                                            const std::vector<std::size_t>& labels,
                                            std::size_t batch_size, std::uint64_t seed,
                                            std::size_t segment_frames = 0) {
  if (seqs.size() != labels.size()) throw std::invalid_argument("make_batches: misaligned");
  if (batch_size < 1) throw std::invalid_argument("make_batches: batch_size < 1");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<TrainBatch> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    TrainBatch b;
    for (std::size_t k = i; k < std::min(order.size(), i + batch_size); ++k) {
      const auto& s = seqs[order[k]];
      if (segment_frames > 0 && s.frames() > segment_frames) {
        std::uniform_int_distribution<std::size_t> off(0, s.frames() - segment_frames);
        const auto start = static_cast<Eigen::Index>(off(rng));
        b.sequences.emplace_back(
            Matrix(s.matrix().middleRows(start, static_cast<Eigen::Index>(segment_frames))));
      } else {
        b.sequences.push_back(s);
      }
      b.labels.push_back(labels[order[k]]);
    }
    out.push_back(std::move(b));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint: versioned text container. Values use shortest round-trip
// decimal text, so a reload reproduces embeddings bitwise.

namespace detail {

inline void write_tensor(std::ostringstream& os, const std::string& name, const Matrix& t) {
  os << "tensor " << name << ' ' << t.rows() << ' ' << t.cols() << '\n';
  for (Eigen::Index i = 0; i < t.rows(); ++i) {
    for (Eigen::Index j = 0; j < t.cols(); ++j) {
      if (j) os << ' ';
      os << format_shortest(t(i, j));
    }
    os << '\n';
  }
}

class LineReader {
 public:
  explicit LineReader(const std::string& text) : in_(text) {}
  std::vector<std::string> next() {
    std::string line;
    while (std::getline(in_, line)) {
      ++lineno_;
      auto toks = split_ws(line);
      if (toks.empty()) continue;
      return {toks.begin(), toks.end()};
    }
    throw std::runtime_error("checkpoint: unexpected end of file");
  }
  std::vector<std::string> expect(const std::string& key, std::size_t min_tokens) {
    auto toks = next();
    if (toks[0] != key || toks.size() < min_tokens)
      throw std::runtime_error("checkpoint: expected '" + key + "' at line " +
                               std::to_string(lineno_));
    return toks;
  }
  Matrix tensor(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    auto h = expect("tensor", 4);
    if (h[1] != name || std::stoll(h[2]) != rows || std::stoll(h[3]) != cols)
      throw std::runtime_error("checkpoint: bad tensor header for " + name);
    Matrix t(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
      auto row = next();
      if (static_cast<Eigen::Index>(row.size()) != cols)
        throw std::runtime_error("checkpoint: bad row in " + name);
      for (Eigen::Index j = 0; j < cols; ++j) t(i, j) = parse_double(row[static_cast<std::size_t>(j)]);
    }
    return t;
  }

 private:
  std::istringstream in_;
  std::size_t lineno_ = 0;
};

}  // namespace detail

inline constexpr const char* kCheckpointMagic = "statpool-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline std::string serialize_model(const ModelState& m) {
  std::ostringstream os;
  const auto& c = m.config;
  os << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  os << "input_dim " << c.input_dim << '\n';
  os << "frame_hidden " << c.frame_hidden.size();
  for (auto w : c.frame_hidden) os << ' ' << w;
  os << '\n';
  os << "pooling " << c.pooling.name() << ' ' << format_shortest(c.pooling.eps()) << '\n';
  os << "embed_dim " << c.embed_dim << '\n';
  os << "num_classes " << c.num_classes << '\n';
  os << "arcface " << format_shortest(c.arcface_scale) << ' '
     << format_shortest(c.arcface_margin) << '\n';
  os << "seed " << c.seed << '\n';
  for (std::size_t l = 0; l < m.frame_layers.size(); ++l) {
    detail::write_tensor(os, "frame." + std::to_string(l) + ".weight", m.frame_layers[l].weight);
    detail::write_tensor(os, "frame." + std::to_string(l) + ".bias",
                         m.frame_layers[l].bias.transpose());
  }
  detail::write_tensor(os, "embedding.weight", m.embedding.weight);
  detail::write_tensor(os, "embedding.bias", m.embedding.bias.transpose());
  detail::write_tensor(os, "classes.weight", m.class_weights);
  os << "end\n";
  return os.str();
}

inline ModelState deserialize_model(const std::string& text) {
  detail::LineReader r(text);
  auto magic = r.expect(kCheckpointMagic, 2);
  if (std::stoi(magic[1]) != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + magic[1]);
  EncoderConfig c;
  c.input_dim = std::stoul(r.expect("input_dim", 2)[1]);
  auto fh = r.expect("frame_hidden", 2);
  const auto nh = std::stoul(fh[1]);
  if (fh.size() != nh + 2) throw std::runtime_error("checkpoint: bad frame_hidden");
  for (std::size_t i = 0; i < nh; ++i) c.frame_hidden.push_back(std::stoul(fh[i + 2]));
  auto pl = r.expect("pooling", 3);
  c.pooling = PoolingConfig::parse(pl[1], parse_double(pl[2]));
  c.embed_dim = std::stoul(r.expect("embed_dim", 2)[1]);
  c.num_classes = std::stoul(r.expect("num_classes", 2)[1]);
  auto af = r.expect("arcface", 3);
  c.arcface_scale = parse_double(af[1]);
  c.arcface_margin = parse_double(af[2]);
  c.seed = parse_u64(r.expect("seed", 2)[1]);
  c.validate();

  ModelState m;
  m.config = c;
  auto in = static_cast<Eigen::Index>(c.input_dim);
  for (std::size_t l = 0; l < nh; ++l) {
    const auto out = static_cast<Eigen::Index>(c.frame_hidden[l]);
    DenseLayer layer;
    layer.weight = r.tensor("frame." + std::to_string(l) + ".weight", out, in);
    layer.bias = r.tensor("frame." + std::to_string(l) + ".bias", 1, out).row(0).transpose();
    m.frame_layers.push_back(std::move(layer));
    in = out;
  }
  const auto pooled =
      static_cast<Eigen::Index>(output_width(c.pooling, c.frame_output_dim()));
  const auto e = static_cast<Eigen::Index>(c.embed_dim);
  m.embedding.weight = r.tensor("embedding.weight", e, pooled);
  m.embedding.bias = r.tensor("embedding.bias", 1, e).row(0).transpose();
  m.class_weights =
      r.tensor("classes.weight", static_cast<Eigen::Index>(c.num_classes), e);
  r.expect("end", 1);
  return m;
}

}  // namespace statpool
