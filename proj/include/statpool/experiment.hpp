#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "statpool/encoder.hpp"
#include "statpool/pooling.hpp"
#include "statpool/probe.hpp"
#include "statpool/scoring.hpp"
#include "statpool/seed.hpp"
#include "statpool/synthdata.hpp"
#include "statpool/text_io.hpp"

namespace statpool {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Failure of one pipeline stage; the message names the stage.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error("stage '" + stage + "': " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// Encoder architecture and optimizer settings shared by every system; the
// pooling and class count are filled in per system.
struct EncoderTemplate {
  std::vector<std::size_t> frame_hidden;
  std::size_t embed_dim = 128;
  double arcface_scale = 30.0;
  double arcface_margin = 0.2;
  std::size_t epochs = 10;
  double lr = 0.05;
  std::size_t batch_size = 16;
  std::size_t segment_frames = 0;
  double clip_norm = 0.0;
  double weight_decay = 0.0;
};

inline std::vector<std::string> default_systems() {
  return {"max", "mean", "std", "skew", "kurto", "mean-std", "mean-std-skew"};
}

struct ExperimentConfig {
  std::uint64_t seed = 0;
  SynthSpec synth;                  // benchmark corpus; its seed is derived
  std::size_t train_speakers = 100;  // separate speakers for encoder training
  EncoderTemplate encoder;
  std::vector<std::string> systems = default_systems();
  std::size_t target_trials = 2000;
  std::size_t nontarget_trials = 2000;
  DcfParams dcf;
  ProbeConfig probe;                // its seed is derived
  std::vector<ProbeTask> probe_tasks{kAllProbeTasks.begin(), kAllProbeTasks.end()};
  std::vector<std::string> probe_systems;  // empty: every system
  std::vector<std::vector<std::string>> fusions{{"mean-std", "mean-std-skew"}};
  std::string output_dir = "out";

  void validate() const {
    synth.validate();
    probe.validate();
    dcf.normalizer();
    if (train_speakers < 2) throw ConfigError("train_speakers must be >= 2");
    if (encoder.embed_dim < 1 || encoder.batch_size < 1)
      throw ConfigError("encoder widths and batch_size must be >= 1");
    if (systems.empty()) throw ConfigError("no systems configured");
    std::set<std::string> names;
    for (const auto& s : systems) {
      PoolingConfig::parse(s);
      if (!names.insert(s).second) throw ConfigError("duplicate system '" + s + "'");
    }
    for (const auto& s : probe_systems)
      if (!names.count(s)) throw ConfigError("probe system '" + s + "' is not configured");
    for (const auto& f : fusions) {
      if (f.size() < 2) throw ConfigError("a fusion recipe needs at least two systems");
      for (const auto& s : f)
        if (!names.count(s)) throw ConfigError("fusion system '" + s + "' is not configured");
    }
    if (target_trials < 1 || nontarget_trials < 1)
      throw ConfigError("need at least one target and one nontarget trial");
  }

  std::vector<std::string> probed_systems() const {
    return probe_systems.empty() ? systems : probe_systems;
  }
};

// ---------------------------------------------------------------------------
// Derived seeds and corpora.

inline SynthSpec benchmark_spec(const ExperimentConfig& cfg) {
  SynthSpec s = cfg.synth;
  s.seed = derive_seed(cfg.seed, "synth");
  s.first_speaker = 0;
  return s;
}

// Same world as the benchmark, disjoint speakers.
inline SynthSpec training_spec(const ExperimentConfig& cfg) {
  SynthSpec s = benchmark_spec(cfg);
  s.first_speaker = cfg.synth.num_speakers;
  s.num_speakers = cfg.train_speakers;
  return s;
}

inline EncoderConfig encoder_config(const ExperimentConfig& cfg, const std::string& system) {
  EncoderConfig c;
  c.input_dim = cfg.synth.input_dim;
  c.frame_hidden = cfg.encoder.frame_hidden;
  c.pooling = PoolingConfig::parse(system);
  c.embed_dim = cfg.encoder.embed_dim;
  c.num_classes = cfg.train_speakers;
  c.arcface_scale = cfg.encoder.arcface_scale;
  c.arcface_margin = cfg.encoder.arcface_margin;
  c.seed = derive_seed(cfg.seed, "init");
  return c;
}

inline TrainOptions train_options(const ExperimentConfig& cfg) {
  TrainOptions o;
  o.epochs = cfg.encoder.epochs;
  o.lr = cfg.encoder.lr;
  o.segment_frames = cfg.encoder.segment_frames;
  o.clip_norm = cfg.encoder.clip_norm;
  o.weight_decay = cfg.encoder.weight_decay;
  return o;
}

inline ProbeConfig probe_config(const ExperimentConfig& cfg) {
  ProbeConfig p = cfg.probe;
  p.seed = derive_seed(cfg.seed, "probe");
  return p;
}

// ---------------------------------------------------------------------------
// JSON config. Unknown keys are rejected so typos do not silently fall back
// to defaults.

namespace detail {

inline void check_keys(const Json& j, const std::string& where,
                       std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

template <class T>
void read_key(const Json& j, const char* key, T& out, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

inline SynthSpec parse_synth(const Json& j, SynthSpec s) {
  const std::string w = "synth";
  check_keys(j, w,
             {"num_speakers", "input_dim", "base_frames", "utts_per_speaker", "speaker_scale",
              "noise_scale", "num_clusters", "cluster_scale", "gender_offset", "gender_shaping",
              "speaker_shaping", "speaker_skew", "nuisance_types", "nuisance_scale",
              "nuisance_noise", "rate_multipliers", "lexicon_size", "bursts_per_utt",
              "burst_frames", "burst_support", "burst_amplitude"});
  read_key(j, "num_speakers", s.num_speakers, w);
  read_key(j, "input_dim", s.input_dim, w);
  read_key(j, "base_frames", s.base_frames, w);
  read_key(j, "utts_per_speaker", s.utts_per_speaker, w);
  read_key(j, "speaker_scale", s.speaker_scale, w);
  read_key(j, "noise_scale", s.noise_scale, w);
  read_key(j, "num_clusters", s.num_clusters, w);
  read_key(j, "cluster_scale", s.cluster_scale, w);
  read_key(j, "gender_offset", s.gender_offset, w);
  read_key(j, "gender_shaping", s.gender_shaping, w);
  read_key(j, "speaker_shaping", s.speaker_shaping, w);
  read_key(j, "speaker_skew", s.speaker_skew, w);
  read_key(j, "nuisance_types", s.nuisance_types, w);
  read_key(j, "nuisance_scale", s.nuisance_scale, w);
  read_key(j, "nuisance_noise", s.nuisance_noise, w);
  read_key(j, "rate_multipliers", s.rate_multipliers, w);
  read_key(j, "lexicon_size", s.lexicon_size, w);
  read_key(j, "bursts_per_utt", s.bursts_per_utt, w);
  read_key(j, "burst_frames", s.burst_frames, w);
  read_key(j, "burst_support", s.burst_support, w);
  read_key(j, "burst_amplitude", s.burst_amplitude, w);
  return s;
}

inline Json synth_to_json(const SynthSpec& s) {
  return Json{{"num_speakers", s.num_speakers},
              {"first_speaker", s.first_speaker},
              {"input_dim", s.input_dim},
              {"base_frames", s.base_frames},
              {"utts_per_speaker", s.utts_per_speaker},
              {"speaker_scale", s.speaker_scale},
              {"noise_scale", s.noise_scale},
              {"num_clusters", s.num_clusters},
              {"cluster_scale", s.cluster_scale},
              {"gender_offset", s.gender_offset},
              {"gender_shaping", s.gender_shaping},
              {"speaker_shaping", s.speaker_shaping},
              {"speaker_skew", s.speaker_skew},
              {"nuisance_types", s.nuisance_types},
              {"nuisance_scale", s.nuisance_scale},
              {"nuisance_noise", s.nuisance_noise},
              {"rate_multipliers", s.rate_multipliers},
              {"lexicon_size", s.lexicon_size},
              {"bursts_per_utt", s.bursts_per_utt},
              {"burst_frames", s.burst_frames},
              {"burst_support", s.burst_support},
              {"burst_amplitude", s.burst_amplitude},
              {"seed", s.seed}};
}

}  // namespace detail

inline ExperimentConfig parse_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  const std::string w = "config";
  detail::check_keys(j, w,
                     {"seed", "synth", "train_speakers", "encoder", "systems", "trials", "dcf",
                      "probe", "probe_tasks", "probe_systems", "fusions", "output_dir"});
  detail::read_key(j, "seed", c.seed, w);
  if (j.contains("synth")) c.synth = detail::parse_synth(j["synth"], c.synth);
  detail::read_key(j, "train_speakers", c.train_speakers, w);
  if (j.contains("encoder")) {
    const auto& e = j["encoder"];
    const std::string we = "encoder";
    detail::check_keys(e, we,
                       {"frame_hidden", "embed_dim", "arcface_scale", "arcface_margin", "epochs",
                        "lr", "batch_size", "segment_frames", "clip_norm", "weight_decay"});
    detail::read_key(e, "frame_hidden", c.encoder.frame_hidden, we);
    detail::read_key(e, "embed_dim", c.encoder.embed_dim, we);
    detail::read_key(e, "arcface_scale", c.encoder.arcface_scale, we);
    detail::read_key(e, "arcface_margin", c.encoder.arcface_margin, we);
    detail::read_key(e, "epochs", c.encoder.epochs, we);
    detail::read_key(e, "lr", c.encoder.lr, we);
    detail::read_key(e, "batch_size", c.encoder.batch_size, we);
    detail::read_key(e, "segment_frames", c.encoder.segment_frames, we);
    detail::read_key(e, "clip_norm", c.encoder.clip_norm, we);
    detail::read_key(e, "weight_decay", c.encoder.weight_decay, we);
  }
  detail::read_key(j, "systems", c.systems, w);
  if (j.contains("trials")) {
    detail::check_keys(j["trials"], "trials", {"target", "nontarget"});
    detail::read_key(j["trials"], "target", c.target_trials, "trials");
    detail::read_key(j["trials"], "nontarget", c.nontarget_trials, "trials");
  }
  if (j.contains("dcf")) {
    detail::check_keys(j["dcf"], "dcf", {"c_miss", "c_fa", "p_target"});
    detail::read_key(j["dcf"], "c_miss", c.dcf.c_miss, "dcf");
    detail::read_key(j["dcf"], "c_fa", c.dcf.c_fa, "dcf");
    detail::read_key(j["dcf"], "p_target", c.dcf.p_target, "dcf");
  }
  if (j.contains("probe")) {
    const auto& p = j["probe"];
    detail::check_keys(p, "probe",
                       {"hidden_width", "epochs", "lr", "weight_decay", "batch_size", "train_frac"});
    detail::read_key(p, "hidden_width", c.probe.hidden_width, "probe");
    detail::read_key(p, "epochs", c.probe.epochs, "probe");
    detail::read_key(p, "lr", c.probe.lr, "probe");
    detail::read_key(p, "weight_decay", c.probe.weight_decay, "probe");
    detail::read_key(p, "batch_size", c.probe.batch_size, "probe");
    detail::read_key(p, "train_frac", c.probe.train_frac, "probe");
  }
  if (j.contains("probe_tasks")) {
    std::vector<std::string> names;
    detail::read_key(j, "probe_tasks", names, w);
    c.probe_tasks.clear();
    try {
      for (const auto& n : names) c.probe_tasks.push_back(parse_probe_task(n));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("probe_tasks: ") + e.what());
    }
  }
  detail::read_key(j, "probe_systems", c.probe_systems, w);
  detail::read_key(j, "fusions", c.fusions, w);
  detail::read_key(j, "output_dir", c.output_dir, w);
  try {
    c.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline Json config_to_json(const ExperimentConfig& c) {
  Json synth = detail::synth_to_json(c.synth);
  synth.erase("first_speaker");
  synth.erase("seed");
  std::vector<std::string> tasks;
  for (auto t : c.probe_tasks) tasks.emplace_back(to_string(t));
  return Json{
      {"seed", c.seed},
      {"synth", synth},
      {"train_speakers", c.train_speakers},
      {"encoder",
       {{"frame_hidden", c.encoder.frame_hidden},
        {"embed_dim", c.encoder.embed_dim},
        {"arcface_scale", c.encoder.arcface_scale},
        {"arcface_margin", c.encoder.arcface_margin},
        {"epochs", c.encoder.epochs},
        {"lr", c.encoder.lr},
        {"batch_size", c.encoder.batch_size},
        {"segment_frames", c.encoder.segment_frames},
        {"clip_norm", c.encoder.clip_norm},
        {"weight_decay", c.encoder.weight_decay}}},
      {"systems", c.systems},
      {"trials", {{"target", c.target_trials}, {"nontarget", c.nontarget_trials}}},
      {"dcf", {{"c_miss", c.dcf.c_miss}, {"c_fa", c.dcf.c_fa}, {"p_target", c.dcf.p_target}}},
      {"probe",
       {{"hidden_width", c.probe.hidden_width},
        {"epochs", c.probe.epochs},
        {"lr", c.probe.lr},
        {"weight_decay", c.probe.weight_decay},
        {"batch_size", c.probe.batch_size},
        {"train_frac", c.probe.train_frac}}},
      {"probe_tasks", tasks},
      {"probe_systems", c.probe_systems},
      {"fusions", c.fusions},
      {"output_dir", c.output_dir}};
}

// ---------------------------------------------------------------------------
// Output layout.

struct Layout {
  fs::path root;

  fs::path config() const { return root / "config.json"; }
  fs::path synth() const { return root / "synth.json"; }
  fs::path corpus() const { return root / "corpus.txt"; }
  fs::path train_corpus() const { return root / "train_corpus.txt"; }
  fs::path trials() const { return root / "trials.txt"; }
  fs::path system_dir(const std::string& s) const { return root / "systems" / s; }
  fs::path model(const std::string& s) const { return system_dir(s) / "model.ckpt"; }
  fs::path train_loss(const std::string& s) const { return system_dir(s) / "train_loss.txt"; }
  fs::path center(const std::string& s) const { return system_dir(s) / "center.txt"; }
  fs::path embeddings(const std::string& s) const { return system_dir(s) / "embeddings.txt"; }
  fs::path scores(const std::string& s) const { return system_dir(s) / "scores.txt"; }
  fs::path fused(const std::vector<std::string>& recipe) const {
    std::string n;
    for (std::size_t i = 0; i < recipe.size(); ++i) n += (i ? "+" : "") + recipe[i];
    return root / "fused" / (n + ".scores.txt");
  }
  fs::path results() const { return root / "results.txt"; }
  fs::path results_json() const { return root / "results.json"; }
  fs::path probes() const { return root / "probes.txt"; }
  fs::path probes_json() const { return root / "probes.json"; }
  fs::path report() const { return root / "report.txt"; }
};

namespace detail {

inline std::string require_file(const std::string& stage, const fs::path& p,
                                const std::string& producer) {
  if (!fs::exists(p))
    throw StageError(stage, "missing " + p.string() + " (run '" + producer + "' first)");
  return read_file(p);
}

// FNV-1a over the bit patterns of the frame values.
inline std::uint64_t frames_checksum(const FrameSequence& x) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const Matrix& m = x.matrix();
  auto mix = [&](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  };
  mix(static_cast<std::uint64_t>(m.rows()));
  mix(static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) mix(std::bit_cast<std::uint64_t>(m(i, j)));
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace detail

// Corpus manifest: one line per utterance,
//   id speaker gender cluster nuisance rate frames words:<hex> fnv:<hex>
// Frames are regenerated from the stored generator spec and checked against
// the fingerprint, so the manifest stays small.
inline std::string write_manifest(const std::vector<LabeledUtterance>& data) {
  std::string out;
  for (const auto& u : data)
    out += u.id + ' ' + std::to_string(u.speaker) + ' ' + std::to_string(u.gender) + ' ' +
           std::to_string(u.cluster) + ' ' + std::to_string(u.nuisance) + ' ' +
           std::to_string(u.rate) + ' ' + std::to_string(u.frames.frames()) + " words:" +
           words_to_hex(u.words) + " fnv:" + detail::hex64(detail::frames_checksum(u.frames)) +
           '\n';
  return out;
}

struct ManifestEntry {
  LabeledUtterance meta;  // frames left empty
  std::size_t frames = 0;
  std::string checksum;
};

inline std::vector<ManifestEntry> read_manifest(const std::string& text, std::size_t lexicon) {
  std::vector<ManifestEntry> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok.size() != 9 || tok[7].substr(0, 6) != "words:" || tok[8].substr(0, 4) != "fnv:")
      throw std::runtime_error("manifest line " + std::to_string(lineno) + ": bad record");
    ManifestEntry e;
    e.meta.id = std::string(tok[0]);
    e.meta.speaker = parse_u64(tok[1]);
    e.meta.gender = static_cast<int>(parse_u64(tok[2]));
    e.meta.cluster = parse_u64(tok[3]);
    e.meta.nuisance = parse_u64(tok[4]);
    e.meta.rate = parse_u64(tok[5]);
    e.frames = parse_u64(tok[6]);
    e.meta.words = hex_to_words(tok[7].substr(6), lexicon);
    e.checksum = std::string(tok[8].substr(4));
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Results table.

struct ResultRow {
  std::string system;
  double eer = 0.0;      // fraction
  double min_dcf = 0.0;  // normalized
  std::size_t n_target = 0;
  std::size_t n_nontarget = 0;
};

inline ResultRow evaluate(const ScoreSet& s, const DcfParams& p) {
  ResultRow r{s.name, eer(s), min_dcf(s, p), 0, 0};
  for (const auto& t : s.trials) (t.target ? r.n_target : r.n_nontarget)++;
  return r;
}

// `system eer min_dcf n_target n_nontarget` per line.
inline std::string write_results(const std::vector<ResultRow>& rows) {
  std::string out;
  for (const auto& r : rows)
    out += r.system + ' ' + format_sig17(r.eer) + ' ' + format_sig17(r.min_dcf) + ' ' +
           std::to_string(r.n_target) + ' ' + std::to_string(r.n_nontarget) + '\n';
  return out;
}

inline std::vector<ResultRow> read_results(const std::string& text) {
  std::vector<ResultRow> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok.size() != 5) throw std::runtime_error("results: expected 5 fields");
    out.push_back({std::string(tok[0]), parse_double(tok[1]), parse_double(tok[2]),
                   parse_u64(tok[3]), parse_u64(tok[4])});
  }
  return out;
}

inline Json results_to_json(const std::vector<ResultRow>& rows) {
  Json a = Json::array();
  for (const auto& r : rows)
    a.push_back({{"system", r.system},
                 {"eer_percent", 100.0 * r.eer},
                 {"min_dcf", r.min_dcf},
                 {"n_target", r.n_target},
                 {"n_nontarget", r.n_nontarget}});
  return a;
}

inline Json probes_to_json(const std::vector<ProbeReport>& reports) {
  Json a = Json::array();
  for (const auto& r : reports) {
    Json o{{"pooling", r.pooling}, {"task", r.task}};
    o["accuracy"] = std::isnan(r.accuracy) ? Json(nullptr) : Json(r.accuracy);
    o["chance"] = std::isnan(r.chance) ? Json(nullptr) : Json(r.chance);
    o["n_train"] = r.n_train;
    o["n_test"] = r.n_test;
    a.push_back(std::move(o));
  }
  return a;
}

// Fixed-point text with `sig` significant digits, e.g. 0.347 or 12.5.
inline std::string format_significant(double v, int sig) {
  if (!std::isfinite(v)) return "nan";
  int decimals = sig - 1;
  if (v != 0.0) decimals = sig - 1 - static_cast<int>(std::floor(std::log10(std::abs(v))));
  if (decimals < 0) decimals = 0;
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  // Rounding can carry into a new digit (9.995 -> 10.00); redo once if so.
  const double r = std::abs(parse_double(buf));
  if (r != 0.0 && decimals > 0 && static_cast<int>(std::floor(std::log10(r))) >
                                      static_cast<int>(std::floor(std::log10(std::abs(v)))))
    std::snprintf(buf, sizeof(buf), "%.*f", decimals - 1, v);
  return buf;
}

inline std::string render_report(const std::vector<ResultRow>& rows,
                                 const std::vector<ProbeReport>& probes) {
  std::ostringstream os;
  // Display width in code points, so names containing the fusion sign align.
  auto width = [](const std::string& s) {
    std::size_t n = 0;
    for (unsigned char c : s) n += (c & 0xC0) != 0x80;
    return n;
  };
  auto pad = [&](const std::string& s, std::size_t n) {
    return s + std::string(n > width(s) ? n - width(s) : 0, ' ');
  };
  std::size_t w = 6;
  for (const auto& r : rows) w = std::max(w, width(r.system));
  os << "Speaker verification\n";
  os << pad("system", w) << "  EER(%)  minDCF\n";
  for (const auto& r : rows) {
    char dcf[32];
    std::snprintf(dcf, sizeof(dcf), "%.4f", r.min_dcf);
    os << pad(r.system, w) << "  " << pad(format_significant(100.0 * r.eer, 3), 6) << "  "
       << dcf << '\n';
  }
  if (!probes.empty()) {
    std::vector<std::string> systems, tasks;
    std::map<std::pair<std::string, std::string>, const ProbeReport*> cell;
    for (const auto& p : probes) {
      if (std::find(systems.begin(), systems.end(), p.pooling) == systems.end())
        systems.push_back(p.pooling);
      if (std::find(tasks.begin(), tasks.end(), p.task) == tasks.end()) tasks.push_back(p.task);
      cell[{p.task, p.pooling}] = &p;
    }
    std::size_t tw = 4;
    for (const auto& t : tasks) tw = std::max(tw, t.size());
    os << "\nProbe accuracy (task x system)\n" << pad("task", tw);
    for (const auto& s : systems) os << "  " << pad(s, std::max<std::size_t>(s.size(), 6));
    os << "  chance\n";
    for (const auto& t : tasks) {
      os << pad(t, tw);
      double chance = std::numeric_limits<double>::quiet_NaN();
      for (const auto& s : systems) {
        auto it = cell.find({t, s});
        std::string v = "-";
        if (it != cell.end()) {
          char buf[32];
          if (std::isnan(it->second->accuracy)) {
            v = "n/a";
          } else {
            std::snprintf(buf, sizeof(buf), "%.3f", it->second->accuracy);
            v = buf;
          }
          chance = it->second->chance;
        }
        os << "  " << pad(v, std::max<std::size_t>(s.size(), 6));
      }
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.3f", chance);
      os << "  " << (std::isnan(chance) ? std::string("n/a") : std::string(buf)) << '\n';
    }
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Pipeline stages. Each stage reads the artifacts of earlier stages from the
// output directory, so any stage can be rerun on its own.

class Experiment {
 public:
  explicit Experiment(ExperimentConfig cfg, std::ostream* log = &std::cerr)
      : cfg_(std::move(cfg)), layout_{fs::path(cfg_.output_dir)}, log_(log) {
    cfg_.validate();
  }

  const ExperimentConfig& config() const { return cfg_; }
  const Layout& layout() const { return layout_; }

  void synth() {
    const std::string st = "synth";
    try {
      const SynthSpec bench = benchmark_spec(cfg_);
      const SynthSpec train = training_spec(cfg_);
      const auto corpus = generate(bench);
      const auto train_corpus = generate(train);
      const auto trials = build_trials(corpus, cfg_.target_trials, cfg_.nontarget_trials,
                                       derive_seed(cfg_.seed, "trials"));
      write_file_atomic(layout_.config(), config_to_json(cfg_).dump(2) + "\n");
      const Json spec{{"benchmark", detail::synth_to_json(bench)},
                      {"train", detail::synth_to_json(train)}};
      write_file_atomic(layout_.synth(), spec.dump(2) + "\n");
      write_file_atomic(layout_.corpus(), write_manifest(corpus));
      write_file_atomic(layout_.train_corpus(), write_manifest(train_corpus));
      write_file_atomic(layout_.trials(), write_trials(trials));
      note(st, std::to_string(corpus.size()) + " benchmark and " +
                   std::to_string(train_corpus.size()) + " training utterances, " +
                   std::to_string(trials.size()) + " trials");
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(st, e.what());
    }
  }

  void train() {
    const std::string st = "train";
    const auto data = load_corpus(st, /*training=*/true);
    std::vector<FrameSequence> seqs;
    std::vector<std::size_t> labels;
    const std::size_t first = cfg_.synth.num_speakers;
    for (const auto& u : data) {
      seqs.push_back(u.frames);
      labels.push_back(u.speaker - first);
    }
    const auto batches =
        make_batches(seqs, labels, cfg_.encoder.batch_size, derive_seed(cfg_.seed, "batches"));
    for (const auto& sys : cfg_.systems) {
      try {
        const auto res = train_encoder(encoder_config(cfg_, sys), batches, train_options(cfg_));
        std::string loss;
        for (double l : res.epoch_loss) loss += format_sig17(l) + '\n';
        write_file_atomic(layout_.model(sys), serialize_model(res.model));
        write_file_atomic(layout_.train_loss(sys), loss);
        note(st, sys + ": loss " +
                     (res.epoch_loss.empty()
                          ? std::string("n/a")
                          : format_significant(res.epoch_loss.front(), 4) + " -> " +
                                format_significant(res.epoch_loss.back(), 4)));
      } catch (const std::exception& e) {
        throw StageError(st, "system '" + sys + "': " + e.what());
      }
    }
  }

  // Embeddings are centered on the mean training-set embedding of the same
  // system before they are written.
  void extract() {
    const std::string st = "extract";
    const auto bench = load_corpus(st, false);
    const auto train = load_corpus(st, true);
    std::vector<FrameSequence> bseq, tseq;
    for (const auto& u : bench) bseq.push_back(u.frames);
    for (const auto& u : train) tseq.push_back(u.frames);
    for (const auto& sys : cfg_.systems) {
      try {
        const ModelState m =
            deserialize_model(detail::require_file(st, layout_.model(sys), "train"));
        if (!(m.config.pooling == PoolingConfig::parse(sys)))
          throw std::runtime_error("checkpoint pooling does not match system name");
        const auto te = extract_all(m, tseq);
        Vector center = Vector::Zero(static_cast<Eigen::Index>(m.config.embed_dim));
        for (const auto& v : te) center += v;
        center /= static_cast<double>(te.size());
        const auto be = extract_all(m, bseq);
        EmbeddingTable table;
        for (std::size_t i = 0; i < bench.size(); ++i)
          table.emplace_back(bench[i].id, be[i] - center);
        write_file_atomic(layout_.center(sys), write_embeddings({{"center", center}}));
        write_file_atomic(layout_.embeddings(sys), write_embeddings(table));
        note(st, sys + ": " + std::to_string(table.size()) + " embeddings");
      } catch (const StageError&) {
        throw;
      } catch (const std::exception& e) {
        throw StageError(st, "system '" + sys + "': " + e.what());
      }
    }
  }

  void score() {
    const std::string st = "score";
    const auto trials = read_trials(detail::require_file(st, layout_.trials(), "synth"));
    for (const auto& sys : cfg_.systems) {
      try {
        std::map<std::string, Vector> emb;
        for (auto& [id, v] :
             read_embeddings(detail::require_file(st, layout_.embeddings(sys), "extract")))
          emb.emplace(id, std::move(v));
        const auto s = score_trials(sys, trials, emb);
        write_file_atomic(layout_.scores(sys), write_scores(s));
        note(st, sys + ": " + std::to_string(s.scores.size()) + " scores");
      } catch (const StageError&) {
        throw;
      } catch (const std::exception& e) {
        throw StageError(st, "system '" + sys + "': " + e.what());
      }
    }
  }

  // Per-system rows followed by one row per fusion recipe; fused scores are
  // computed in memory from the per-system score files.
  std::vector<ResultRow> eval() {
    const std::string st = "eval";
    std::vector<ResultRow> rows;
    try {
      const auto sets = load_scores(st);
      for (const auto& sys : cfg_.systems) rows.push_back(evaluate(sets.at(sys), cfg_.dcf));
      for (const auto& recipe : cfg_.fusions) rows.push_back(evaluate(fuse_recipe(sets, recipe), cfg_.dcf));
      write_file_atomic(layout_.results(), write_results(rows));
      write_file_atomic(layout_.results_json(), results_to_json(rows).dump(2) + "\n");
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(st, e.what());
    }
    for (const auto& r : rows)
      note(st, r.system + ": EER " + format_significant(100.0 * r.eer, 3) + "%");
    return rows;
  }

  void fuse_stage() {
    const std::string st = "fuse";
    try {
      const auto sets = load_scores(st);
      for (const auto& recipe : cfg_.fusions) {
        const auto f = fuse_recipe(sets, recipe);
        write_file_atomic(layout_.fused(recipe), write_scores(f));
        note(st, f.name);
      }
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(st, e.what());
    }
  }

  std::vector<ProbeReport> probe() {
    const std::string st = "probe";
    std::vector<ProbeReport> reports;
    try {
      const auto manifest = read_manifest(
          detail::require_file(st, layout_.corpus(), "synth"), cfg_.synth.lexicon_size);
      std::vector<LabeledUtterance> utts;
      for (const auto& e : manifest) utts.push_back(e.meta);
      const ProbeConfig pc = probe_config(cfg_);
      for (const auto& sys : cfg_.probed_systems()) {
        const auto table =
            read_embeddings(detail::require_file(st, layout_.embeddings(sys), "extract"));
        if (table.size() != utts.size())
          throw std::runtime_error("embeddings of '" + sys + "' do not cover the corpus");
        std::vector<Vector> emb;
        for (std::size_t i = 0; i < table.size(); ++i) {
          if (table[i].first != utts[i].id)
            throw std::runtime_error("embeddings of '" + sys + "' are not in corpus order");
          emb.push_back(table[i].second);
        }
        for (auto t : cfg_.probe_tasks) {
          reports.push_back(run_probe(sys, emb, utts, t, pc));
          const auto& r = reports.back();
          note(st, sys + " " + r.task + ": " +
                       (std::isnan(r.accuracy) ? std::string("n/a")
                                               : format_significant(r.accuracy, 3)));
        }
      }
      write_file_atomic(layout_.probes(), write_probe_reports(reports));
      write_file_atomic(layout_.probes_json(), probes_to_json(reports).dump(2) + "\n");
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(st, e.what());
    }
    return reports;
  }

  std::string report() {
    const std::string st = "report";
    try {
      const auto rows = read_results(detail::require_file(st, layout_.results(), "eval"));
      std::vector<ProbeReport> probes;
      if (fs::exists(layout_.probes())) probes = read_probe_reports(read_file(layout_.probes()));
      const std::string text = render_report(rows, probes);
      write_file_atomic(layout_.report(), text);
      return text;
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(st, e.what());
    }
  }

  std::string run() {
    synth();
    train();
    extract();
    score();
    eval();
    fuse_stage();
    probe();
    return report();
  }

 private:
  static TrainResult train_encoder(const EncoderConfig& c, const std::vector<TrainBatch>& b,
                                   const TrainOptions& o) {
    return statpool::train(c, b, o);
  }

  void note(const std::string& stage, const std::string& msg) const {
    if (log_) *log_ << "[" << stage << "] " << msg << '\n';
  }

  // Regenerates a corpus from the stored spec and checks it against the
  // manifest written by the synth stage.
  std::vector<LabeledUtterance> load_corpus(const std::string& st, bool training) const {
    const std::string spec_text = detail::require_file(st, layout_.synth(), "synth");
    const fs::path mpath = training ? layout_.train_corpus() : layout_.corpus();
    const std::string manifest_text = detail::require_file(st, mpath, "synth");
    const SynthSpec expected = training ? training_spec(cfg_) : benchmark_spec(cfg_);
    Json stored;
    try {
      stored = Json::parse(spec_text);
    } catch (const std::exception& e) {
      throw StageError(st, "cannot parse " + layout_.synth().string() + ": " + e.what());
    }
    if (stored[training ? "train" : "benchmark"] != detail::synth_to_json(expected))
      throw StageError(st, "configuration differs from the one used by 'synth'; rerun 'synth'");
    try {
      auto data = generate(expected);
      const auto manifest = read_manifest(manifest_text, expected.lexicon_size);
      if (manifest.size() != data.size())
        throw std::runtime_error(mpath.string() + " does not match the generator");
      for (std::size_t i = 0; i < data.size(); ++i)
        if (manifest[i].meta.id != data[i].id ||
            manifest[i].checksum != detail::hex64(detail::frames_checksum(data[i].frames)))
          throw std::runtime_error(mpath.string() + ": utterance " + manifest[i].meta.id +
                                   " does not match the regenerated frames");
      return data;
    } catch (const std::exception& e) {
      throw StageError(st, e.what());
    }
  }

  std::map<std::string, ScoreSet> load_scores(const std::string& st) const {
    std::map<std::string, ScoreSet> out;
    for (const auto& sys : cfg_.systems) {
      auto s = read_scores(detail::require_file(st, layout_.scores(sys), "score"), sys);
      s.validate();
      out.emplace(sys, std::move(s));
    }
    return out;
  }

  static ScoreSet fuse_recipe(const std::map<std::string, ScoreSet>& sets,
                              const std::vector<std::string>& recipe) {
    std::vector<ScoreSet> parts;
    for (const auto& n : recipe) parts.push_back(sets.at(n));
    return fuse(parts);
  }

  ExperimentConfig cfg_;
  Layout layout_;
  std::ostream* log_;
};

}  // namespace statpool
