#include "xmodal/pipeline.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <unordered_map>

#include "json.hpp"
#include "xmodal/evalsuite.hpp"
#include "xmodal/model.hpp"
#include "xmodal/rng.hpp"
#include "xmodal/scaling.hpp"

namespace xmodal {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;
using njson = nlohmann::json;

// ---------------------------------------------------------------------------
// SHA-256 (FIPS 180-4), for artifact digests

namespace {

constexpr std::uint32_t kShaK[64] = {
    0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1,
    0x923f82a4, 0xab1c5ed5, 0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3,
    0x72be5d74, 0x80deb1fe, 0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786,
    0x0fc19dc6, 0x240ca1cc, 0x2de92c6f, 0x4a7484aa, 0x5cb0a9dc, 0x76f988da,
    0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7, 0xc6e00bf3, 0xd5a79147,
    0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc, 0x53380d13,
    0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b,
    0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070,
    0x19a4c116, 0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a,
    0x5b9cca4f, 0x682e6ff3, 0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208,
    0x90befffa, 0xa4506ceb, 0xbef9a3f7, 0xc67178f2};

inline std::uint32_t rotr(std::uint32_t x, int n) {
  return (x >> n) | (x << (32 - n));
}

struct Sha256 {
  std::array<std::uint32_t, 8> h = {0x6a09e667, 0xbb67ae85, 0x3c6ef372,
                                    0xa54ff53a, 0x510e527f, 0x9b05688c,
                                    0x1f83d9ab, 0x5be0cd19};
  std::array<std::uint8_t, 64> buf{};
  std::size_t buf_len = 0;
  std::uint64_t total = 0;

  void compress(const std::uint8_t* p) {
    std::uint32_t w[64];
    for (int i = 0; i < 16; ++i) {
      w[i] = (std::uint32_t(p[4 * i]) << 24) | (std::uint32_t(p[4 * i + 1]) << 16) |
             (std::uint32_t(p[4 * i + 2]) << 8) | std::uint32_t(p[4 * i + 3]);
    }
    for (int i = 16; i < 64; ++i) {
      std::uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
      std::uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
      w[i] = w[i - 16] + s0 + w[i - 7] + s1;
    }
    std::uint32_t a = h[0], b = h[1], c = h[2], d = h[3];
    std::uint32_t e = h[4], f = h[5], g = h[6], hh = h[7];
    for (int i = 0; i < 64; ++i) {
      std::uint32_t s1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
      std::uint32_t ch = (e & f) ^ (~e & g);
      std::uint32_t t1 = hh + s1 + ch + kShaK[i] + w[i];
      std::uint32_t s0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
      std::uint32_t maj = (a & b) ^ (a & c) ^ (b & c);
      std::uint32_t t2 = s0 + maj;
      hh = g;
      g = f;
      f = e;
      e = d + t1;
      d = c;
      c = b;
      b = a;
      a = t1 + t2;
    }
    h[0] += a;
    h[1] += b;
    h[2] += c;
    h[3] += d;
    h[4] += e;
    h[5] += f;
    h[6] += g;
    h[7] += hh;
  }

  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    total += n;
    while (n > 0) {
      std::size_t take = std::min(n, buf.size() - buf_len);
      std::memcpy(buf.data() + buf_len, p, take);
      buf_len += take;
      p += take;
      n -= take;
      if (buf_len == buf.size()) {
        compress(buf.data());
        buf_len = 0;
      }
    }
  }

  std::string hex() {
    std::uint64_t bits = total * 8;
    std::uint8_t pad = 0x80;
    update(&pad, 1);
    std::uint8_t zero = 0;
    while (buf_len != 56) update(&zero, 1);
    std::uint8_t len[8];
    for (int i = 0; i < 8; ++i) len[i] = std::uint8_t(bits >> (56 - 8 * i));
    update(len, 8);
    char out[65];
    for (int i = 0; i < 8; ++i) std::snprintf(out + 8 * i, 9, "%08x", h[i]);
    return std::string(out, 64);
  }
};

}  // namespace

std::string sha256_hex(std::string_view bytes) {
  Sha256 s;
  s.update(bytes.data(), bytes.size());
  return s.hex();
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  Sha256 s;
  char chunk[65536];
  while (in.read(chunk, sizeof(chunk)) || in.gcount() > 0) {
    s.update(chunk, static_cast<std::size_t>(in.gcount()));
  }
  return s.hex();
}

// ---------------------------------------------------------------------------
// RunConfig

RunConfig::RunConfig() {
  // Speech stages adapt a trained backbone: the head crawls while the
  // embeddings move, mirroring the adaptation regime where the language
  // model is near its optimum and the fresh input pathway does the work.
  // A fast head lets narrow data drag both views into lockstep and hides
  // the cross-modal divergence the misalignment metric exists to expose.
  stage1.alpha = 1.0;
  stage1.lr_student = 0.1;
  stage1.lr_embed = 5.0;
  stage1.total_tokens = 1u << 21;
  stage1.warmup_steps = 50;
  // The backbone pretrains from random init and needs full-rate learning.
  // It must also end decisively sharper than any speech stage: a soft text
  // model predicts near-uniformly on both views, which floors the
  // misalignment at zero and inverts its trend.
  backbone = stage1;
  backbone.lr_student = 2.0;
  backbone.lr_embed = 10.0;
  backbone.warmup_steps = 5;
  backbone.total_tokens = 1u << 23;
  stage2 = stage1;
  stage2.total_tokens = 1u << 20;
}

Vocab RunConfig::vocab() const {
  return Vocab{corpus.vocab_size, corpus.acoustic_codes};
}

std::pair<int, int> RunConfig::len_range() const {
  return {corpus.len_lo, corpus.len_hi};
}

namespace {

// total_tokens == 0 means "no training": the stage snapshots its
// initialization and measures it, nothing else.
void validate_train_allow_zero(const TrainConfig& t) {
  if (t.total_tokens == 0) {
    TrainConfig probe = t;
    probe.total_tokens = 1;
    probe.validate();
  } else {
    t.validate();
  }
}

}  // namespace

void RunConfig::validate() const {
  vocab().validate();
  if (corpus.n_domains < 1) throw std::invalid_argument("n_domains must be >= 1");
  for (int d : corpus.narrow_zero) {
    if (d < 0 || d >= corpus.n_domains) {
      throw std::invalid_argument("narrow_zero names domain " + std::to_string(d) +
                                  " outside [0, n_domains)");
    }
  }
  if (corpus.narrow_zero.size() >= static_cast<std::size_t>(corpus.n_domains)) {
    throw std::invalid_argument("narrow_zero cannot cover every domain");
  }
  if (corpus.n_broad < 1 || corpus.n_narrow < 1) {
    throw std::invalid_argument("corpus sizes must be >= 1");
  }
  if (corpus.len_lo < 2 || corpus.len_hi < corpus.len_lo) {
    throw std::invalid_argument("utterance length range is invalid");
  }
  if (corpus.noise_rate < 0.0 || corpus.noise_rate >= 0.5) {
    throw std::invalid_argument("noise_rate must lie in [0, 0.5)");
  }
  if (teacher_order < 1) throw std::invalid_argument("teacher_order must be >= 1");
  if (teacher_lambda <= 0.0) throw std::invalid_argument("teacher_lambda must be > 0");
  if (student_dim < 1 || context_window < 1) {
    throw std::invalid_argument("student dimensions must be >= 1");
  }
  validate_train_allow_zero(backbone);
  validate_train_allow_zero(stage1);
  validate_train_allow_zero(stage2);
  if (selection.clusters < 1) throw std::invalid_argument("clusters must be >= 1");
  if (selection.gamma < 0.0) throw std::invalid_argument("gamma must be >= 0");
  if (selection.budget_fraction <= 0.0 || selection.budget_fraction > 0.2) {
    throw std::invalid_argument("budget_fraction must lie in (0, 0.2]");
  }
  if (selection.probe_per_cluster < 1) {
    throw std::invalid_argument("probe_per_cluster must be >= 1");
  }
  if (eval.n_items < 1) throw std::invalid_argument("eval n_items must be >= 1");
  if (eval.n_shots < 0) throw std::invalid_argument("eval n_shots must be >= 0");
  if (probe_pairs < 1) throw std::invalid_argument("probe_pairs must be >= 1");
  for (double a : sweep.alphas) {
    if (a < 0.0 || a > 1.0) throw std::invalid_argument("sweep alpha outside [0,1]");
  }
  for (std::size_t b : sweep.budgets) {
    if (b == 0) throw std::invalid_argument("sweep budgets must be > 0");
  }
  for (double g : sweep.gammas) {
    if (g < 0.0) throw std::invalid_argument("sweep gamma must be >= 0");
  }
  for (double f : sweep.budget_fractions) {
    if (f <= 0.0 || f > 0.2) {
      throw std::invalid_argument("sweep budget fractions must lie in (0, 0.2]");
    }
  }
  if (out_dir.empty()) throw std::invalid_argument("out_dir is empty");
}

// ---------------------------------------------------------------------------
// Config JSON

namespace {

void check_keys(const njson& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed) {
      if (item.key() == k) {
        known = true;
        break;
      }
    }
    if (!known) {
      throw std::invalid_argument("unknown key '" + item.key() + "' in " + where);
    }
  }
}

template <typename T>
void take(const njson& j, const char* key, T& into) {
  if (j.contains(key)) into = j.at(key).get<T>();
}

ojson train_to_json(const TrainConfig& t) {
  ojson j;
  j["alpha"] = t.alpha;
  j["lr_student"] = t.lr_student;
  j["lr_embed"] = t.lr_embed;
  j["batch_tokens"] = t.batch_tokens;
  j["total_tokens"] = t.total_tokens;
  j["schedule"] = schedule_name(t.schedule);
  j["warmup_steps"] = t.warmup_steps;
  j["decay_fraction"] = t.decay_fraction;
  return j;
}

void train_from_json(const njson& j, TrainConfig& t, const std::string& where) {
  check_keys(j,
             {"alpha", "lr_student", "lr_embed", "batch_tokens", "total_tokens",
              "schedule", "warmup_steps", "decay_fraction"},
             where);
  take(j, "alpha", t.alpha);
  take(j, "lr_student", t.lr_student);
  take(j, "lr_embed", t.lr_embed);
  take(j, "batch_tokens", t.batch_tokens);
  take(j, "total_tokens", t.total_tokens);
  if (j.contains("schedule")) {
    t.schedule = schedule_from_name(j.at("schedule").get<std::string>());
  }
  take(j, "warmup_steps", t.warmup_steps);
  take(j, "decay_fraction", t.decay_fraction);
}

ojson config_to_json(const RunConfig& cfg, bool with_out_dir) {
  ojson j;
  ojson c;
  c["n_domains"] = cfg.corpus.n_domains;
  c["narrow_zero"] = cfg.corpus.narrow_zero;
  c["vocab_size"] = cfg.corpus.vocab_size;
  c["acoustic_codes"] = cfg.corpus.acoustic_codes;
  c["n_broad"] = cfg.corpus.n_broad;
  c["n_narrow"] = cfg.corpus.n_narrow;
  c["len_lo"] = cfg.corpus.len_lo;
  c["len_hi"] = cfg.corpus.len_hi;
  c["noise_rate"] = cfg.corpus.noise_rate;
  c["concentration"] = cfg.corpus.concentration;
  c["targets_per_row"] = cfg.corpus.targets_per_row;
  j["corpus"] = std::move(c);
  j["teacher_order"] = cfg.teacher_order;
  j["teacher_lambda"] = cfg.teacher_lambda;
  j["student_dim"] = cfg.student_dim;
  j["context_window"] = cfg.context_window;
  j["backbone"] = train_to_json(cfg.backbone);
  j["stage1"] = train_to_json(cfg.stage1);
  j["stage2"] = train_to_json(cfg.stage2);
  ojson s;
  s["clusters"] = cfg.selection.clusters;
  s["gamma"] = cfg.selection.gamma;
  s["budget_fraction"] = cfg.selection.budget_fraction;
  s["probe_per_cluster"] = cfg.selection.probe_per_cluster;
  j["selection"] = std::move(s);
  ojson e;
  e["n_items"] = cfg.eval.n_items;
  e["n_shots"] = cfg.eval.n_shots;
  j["eval"] = std::move(e);
  ojson w;
  w["alphas"] = cfg.sweep.alphas;
  w["budgets"] = cfg.sweep.budgets;
  w["gammas"] = cfg.sweep.gammas;
  w["budget_fractions"] = cfg.sweep.budget_fractions;
  j["sweep"] = std::move(w);
  j["probe_pairs"] = cfg.probe_pairs;
  j["master_seed"] = cfg.master_seed;
  if (with_out_dir) j["out_dir"] = cfg.out_dir;
  return j;
}

RunConfig config_from_json(const njson& j) {
  check_keys(j,
             {"corpus", "teacher_order", "teacher_lambda", "student_dim",
              "context_window", "backbone", "stage1", "stage2", "selection",
              "eval", "sweep", "probe_pairs", "master_seed", "out_dir"},
             "run config");
  RunConfig cfg;
  if (j.contains("corpus")) {
    const njson& c = j.at("corpus");
    check_keys(c,
               {"n_domains", "narrow_zero", "vocab_size", "acoustic_codes",
                "n_broad", "n_narrow", "len_lo", "len_hi", "noise_rate",
                "concentration", "targets_per_row"},
               "corpus section");
    take(c, "n_domains", cfg.corpus.n_domains);
    take(c, "narrow_zero", cfg.corpus.narrow_zero);
    take(c, "vocab_size", cfg.corpus.vocab_size);
    take(c, "acoustic_codes", cfg.corpus.acoustic_codes);
    take(c, "n_broad", cfg.corpus.n_broad);
    take(c, "n_narrow", cfg.corpus.n_narrow);
    take(c, "len_lo", cfg.corpus.len_lo);
    take(c, "len_hi", cfg.corpus.len_hi);
    take(c, "noise_rate", cfg.corpus.noise_rate);
    take(c, "concentration", cfg.corpus.concentration);
    take(c, "targets_per_row", cfg.corpus.targets_per_row);
  }
  take(j, "teacher_order", cfg.teacher_order);
  take(j, "teacher_lambda", cfg.teacher_lambda);
  take(j, "student_dim", cfg.student_dim);
  take(j, "context_window", cfg.context_window);
  if (j.contains("backbone")) {
    train_from_json(j.at("backbone"), cfg.backbone, "backbone");
  }
  if (j.contains("stage1")) train_from_json(j.at("stage1"), cfg.stage1, "stage1");
  if (j.contains("stage2")) train_from_json(j.at("stage2"), cfg.stage2, "stage2");
  if (j.contains("selection")) {
    const njson& s = j.at("selection");
    check_keys(s, {"clusters", "gamma", "budget_fraction", "probe_per_cluster"},
               "selection section");
    take(s, "clusters", cfg.selection.clusters);
    take(s, "gamma", cfg.selection.gamma);
    take(s, "budget_fraction", cfg.selection.budget_fraction);
    take(s, "probe_per_cluster", cfg.selection.probe_per_cluster);
  }
  if (j.contains("eval")) {
    const njson& e = j.at("eval");
    check_keys(e, {"n_items", "n_shots"}, "eval section");
    take(e, "n_items", cfg.eval.n_items);
    take(e, "n_shots", cfg.eval.n_shots);
  }
  if (j.contains("sweep")) {
    const njson& w = j.at("sweep");
    check_keys(w, {"alphas", "budgets", "gammas", "budget_fractions"},
               "sweep section");
    take(w, "alphas", cfg.sweep.alphas);
    take(w, "budgets", cfg.sweep.budgets);
    take(w, "gammas", cfg.sweep.gammas);
    take(w, "budget_fractions", cfg.sweep.budget_fractions);
  }
  take(j, "probe_pairs", cfg.probe_pairs);
  take(j, "master_seed", cfg.master_seed);
  take(j, "out_dir", cfg.out_dir);
  return cfg;
}

}  // namespace

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  njson j = njson::parse(in);
  return config_from_json(j);
}

void save_run_config(const fs::path& path, const RunConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << config_to_json(cfg, true).dump(2) << '\n';
}

std::string canonical_config_json(const RunConfig& cfg) {
  return config_to_json(cfg, false).dump();
}

std::uint64_t run_seed(const RunConfig& cfg, const std::string& tag) {
  return derive_seed(cfg.master_seed, tag);
}

// ---------------------------------------------------------------------------
// Manifest

void save_run_manifest(const fs::path& path, const RunManifest& m) {
  ojson j;
  j["config_digest"] = m.config_digest;
  ojson stages = ojson::object();
  for (const auto& [stage, ckpts] : m.stage_checkpoints) stages[stage] = ckpts;
  j["stage_checkpoints"] = std::move(stages);
  j["metric_logs"] = m.metric_logs;
  ojson digests = ojson::object();
  for (const auto& [rel, digest] : m.digests) digests[rel] = digest;
  j["digests"] = std::move(digests);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

RunManifest load_run_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read manifest " + path.string());
  njson j = njson::parse(in);
  RunManifest m;
  m.config_digest = j.at("config_digest").get<std::string>();
  for (const auto& item : j.at("stage_checkpoints").items()) {
    m.stage_checkpoints[item.key()] = item.value().get<std::vector<std::string>>();
  }
  m.metric_logs = j.at("metric_logs").get<std::vector<std::string>>();
  for (const auto& item : j.at("digests").items()) {
    m.digests[item.key()] = item.value().get<std::string>();
  }
  return m;
}

void verify_run_manifest(const fs::path& out_dir, const RunManifest& m) {
  for (const auto& [rel, digest] : m.digests) {
    const fs::path p = out_dir / rel;
    if (!fs::exists(p)) {
      throw std::runtime_error("manifest names a missing artifact: " + rel);
    }
    const std::string actual = sha256_file(p);
    if (actual != digest) {
      throw std::runtime_error("artifact " + rel + " does not match its digest");
    }
  }
}

// ---------------------------------------------------------------------------
// Shared run plumbing

namespace {

std::string fmt_g(double v) {
  char b[32];
  std::snprintf(b, sizeof(b), "%g", v);
  return b;
}

std::string fmt_full(double v) {
  char b[40];
  std::snprintf(b, sizeof(b), "%.17g", v);
  return b;
}

// Collects relative paths + digests and rewrites <root>/manifest.json.
class ManifestWriter {
 public:
  ManifestWriter(fs::path root, const RunConfig& cfg) : root_(std::move(root)) {
    const fs::path mp = root_ / "manifest.json";
    if (fs::exists(mp)) m_ = load_run_manifest(mp);
    m_.config_digest = sha256_hex(canonical_config_json(cfg));
  }

  void add(const std::string& rel) { m_.digests[rel] = sha256_file(root_ / rel); }

  void add_log(const std::string& rel) {
    add(rel);
    auto& logs = m_.metric_logs;
    if (std::find(logs.begin(), logs.end(), rel) == logs.end()) {
      logs.push_back(rel);
      std::sort(logs.begin(), logs.end());
    }
  }

  void set_checkpoints(const std::string& stage, std::vector<std::string> rels) {
    m_.stage_checkpoints[stage] = std::move(rels);
  }

  void save() const { save_run_manifest(root_ / "manifest.json", m_); }

 private:
  fs::path root_;
  RunManifest m_;
};

std::vector<DomainSpec> domain_specs_for(const RunConfig& cfg) {
  return make_domain_specs(cfg.corpus.n_domains, cfg.vocab(),
                           run_seed(cfg, "domains"), cfg.corpus.narrow_zero,
                           cfg.corpus.concentration, cfg.corpus.targets_per_row);
}

CorpusMeta meta_for(const RunConfig& cfg, const std::string& tag) {
  return CorpusMeta{cfg.vocab(), cfg.corpus.noise_rate,
                    run_seed(cfg, "corpus/" + tag + "/codes")};
}

StudentConfig student_config(const RunConfig& cfg) {
  return StudentConfig{cfg.vocab(), cfg.student_dim, cfg.context_window};
}

// The frozen held-out probe every stage measures against.
ProbeSet gap_probe(const RunConfig& cfg) {
  return make_probe_set(domain_specs_for(cfg), cfg.vocab(), cfg.probe_pairs,
                        cfg.len_range(), WeightColumn::broad,
                        cfg.corpus.noise_rate, run_seed(cfg, "probe/gap"), "gap");
}

LoadedCorpus require_corpus(const fs::path& path, const char* which) {
  if (!fs::exists(path)) {
    throw std::runtime_error(std::string(which) + " corpus missing at " +
                             path.string() + "; generate the corpora first");
  }
  return load_corpus(path.string());
}

struct StageIo {
  fs::path root;
  std::string stage_rel;  // also the seed namespace
};

// Seeded shuffled passes over the all-text view of a corpus. Feeds the
// backbone phase, where the acoustic pathway must receive no gradient.
class TextStream final : public TrainStream {
 public:
  TextStream(std::vector<Utterance> corpus, std::uint64_t seed)
      : corpus_(std::move(corpus)),
        order_rng_(derive_seed(seed, "text/order")),
        order_(corpus_.size()) {
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  }

  ContextPair next() override {
    if (cursor_ == order_.size()) {
      cursor_ = 0;
      order_rng_.shuffle(std::span<std::size_t>(order_));
    }
    const Utterance& u = corpus_[order_[cursor_++]];
    return ContextPair{u, text_only_context(u)};
  }

 private:
  std::vector<Utterance> corpus_;
  Rng order_rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

// Distills the student toward the reference on pure text, then attaches a
// fresh acoustic pathway: acoustic embeddings and the acoustic flag are
// redrawn at the scale the trained text embeddings reached, unaligned with
// anything the model knows. Saved under backbone/ckpt.json. Rebuilt from
// scratch on every call: the output is a pure function of the config, so
// the overwrite is bit-exact and never stale.
StudentModel build_backbone(const RunConfig& cfg, const LoadedCorpus& broad,
                            const TeacherModel& teacher, ManifestWriter& mw) {
  const fs::path root(cfg.out_dir);
  fs::create_directories(root / "backbone");
  StudentModel student = StudentModel::init_random(
      student_config(cfg), run_seed(cfg, "backbone/init"));
  TrainConfig t = cfg.backbone;
  t.seed = run_seed(cfg, "backbone/stream");
  if (t.total_tokens > 0) {
    TextStream stream(broad.utterances, t.seed);
    train(student, teacher, stream, t);

    const auto text_embed = student.token_embed();
    double sq = 0.0;
    for (double v : text_embed) sq += v * v;
    const double rms = std::sqrt(sq / static_cast<double>(text_embed.size()));
    Rng fresh(run_seed(cfg, "backbone/acoustic"));
    for (double& v : student.acoustic_embed()) v = fresh.normal(0.0, rms);
    for (double& v : student.flag(Modality::acoustic)) v = fresh.normal(0.0, rms);
  }
  const std::string rel = "backbone/ckpt.json";
  save_student((root / rel).string(), student, Rng(t.seed).state());
  mw.add(rel);
  return student;
}

StageOutcome train_and_measure(const TeacherModel& teacher, const ProbeSet& probe,
                               StudentModel student, TrainStream& stream,
                               const TrainConfig& tcfg, const StageIo& io,
                               ManifestWriter& mw) {
  const fs::path stage_dir = io.root / io.stage_rel;
  fs::create_directories(stage_dir);
  const std::string gaps_rel = io.stage_rel + "/gaps.jsonl";
  const std::string log_rel = io.stage_rel + "/train_log.jsonl";
  fs::remove(io.root / gaps_rel);

  StageOutcome out;
  const std::array<std::uint64_t, 4> rng_state = Rng(tcfg.seed).state();
  auto snapshot = [&](const StudentModel& m, std::size_t tokens) {
    const std::string rel =
        io.stage_rel + "/ckpt_" + std::to_string(tokens) + ".json";
    save_student((io.root / rel).string(), m, rng_state);
    GapReport gap = measure_gap(m, teacher, probe);
    append_gap_report((io.root / gaps_rel).string(), tokens, gap);
    out.checkpoints.push_back({tokens, rel});
    out.gap_series.emplace_back(tokens, gap);
  };

  if (tcfg.total_tokens == 0) {
    snapshot(student, 0);
  } else {
    const auto marks = checkpoint_schedule(tcfg.batch_tokens, tcfg.total_tokens);
    std::size_t next = 0;
    CheckpointHook hook = [&](const StudentModel& m, std::size_t tokens,
                              std::size_t) {
      bool crossed = false;
      while (next < marks.size() && tokens >= marks[next]) {
        ++next;
        crossed = true;
      }
      if (crossed) snapshot(m, tokens);
    };
    out.train = train(student, teacher, stream, tcfg, hook);
  }

  save_metrics_log((io.root / log_rel).string(), out.train.log);
  out.final_checkpoint = out.checkpoints.back().path;

  std::vector<std::string> rels;
  for (const auto& c : out.checkpoints) {
    rels.push_back(c.path);
    mw.add(c.path);
  }
  mw.set_checkpoints(io.stage_rel, std::move(rels));
  mw.add_log(gaps_rel);
  mw.add_log(log_rel);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Schedule

std::vector<std::size_t> checkpoint_schedule(std::size_t batch_tokens,
                                             std::size_t total_tokens) {
  if (batch_tokens == 0) throw std::invalid_argument("batch_tokens must be > 0");
  if (total_tokens == 0) return {0};
  std::vector<std::size_t> marks;
  for (std::size_t m = batch_tokens; m < total_tokens; m *= 2) marks.push_back(m);
  marks.push_back(total_tokens);
  return marks;
}

const CheckpointRef& pre_decay_checkpoint(std::span<const CheckpointRef> ckpts,
                                          const TrainConfig& train) {
  if (ckpts.empty()) throw std::invalid_argument("no checkpoints to resume from");
  const auto threshold = static_cast<std::size_t>(
      (1.0 - train.decay_fraction) * static_cast<double>(train.total_tokens));
  const CheckpointRef* best = &ckpts.front();
  for (const auto& c : ckpts) {
    if (c.tokens_seen <= threshold && c.tokens_seen >= best->tokens_seen) best = &c;
  }
  return *best;
}

// ---------------------------------------------------------------------------
// Corpus preparation

CorpusPaths prepare_corpus(const RunConfig& cfg) {
  cfg.validate();
  const fs::path root(cfg.out_dir);
  fs::create_directories(root / "corpus");
  const auto specs = domain_specs_for(cfg);
  const Vocab vocab = cfg.vocab();

  const auto broad =
      gen_corpus(specs, vocab, cfg.corpus.n_broad, cfg.len_range(), Source::broad,
                 WeightColumn::broad, run_seed(cfg, "corpus/broad"), 0);
  const auto narrow = gen_corpus(specs, vocab, cfg.corpus.n_narrow,
                                 cfg.len_range(), Source::narrow,
                                 WeightColumn::narrow,
                                 run_seed(cfg, "corpus/narrow"), 1000000);

  CorpusPaths paths;
  paths.broad = (root / "corpus/broad.jsonl").string();
  paths.narrow = (root / "corpus/narrow.jsonl").string();
  save_corpus(paths.broad, broad, meta_for(cfg, "broad"));
  save_corpus(paths.narrow, narrow, meta_for(cfg, "narrow"));

  ManifestWriter mw(root, cfg);
  for (const char* rel :
       {"corpus/broad.jsonl", "corpus/broad.jsonl.meta.json",
        "corpus/narrow.jsonl", "corpus/narrow.jsonl.meta.json"}) {
    mw.add(rel);
  }
  mw.save();
  return paths;
}

// ---------------------------------------------------------------------------
// Stage I

StageOutcome run_stage1(const RunConfig& cfg) {
  cfg.validate();
  const fs::path root(cfg.out_dir);
  auto narrow = require_corpus(root / "corpus/narrow.jsonl", "narrow");
  auto broad = require_corpus(root / "corpus/broad.jsonl", "broad");

  ManifestWriter mw(root, cfg);
  const TeacherModel teacher =
      TeacherModel::train(broad.utterances, cfg.vocab(), cfg.teacher_order,
                          cfg.teacher_lambda);
  const ProbeSet probe = gap_probe(cfg);
  StudentModel student = build_backbone(cfg, broad, teacher, mw);
  TrainConfig t = cfg.stage1;
  t.seed = run_seed(cfg, "stage1/stream");
  CorpusStream stream(narrow.utterances, narrow.meta, kTextSpanWords,
                      kAcousticSpanWords, t.seed);

  StageOutcome out =
      train_and_measure(teacher, probe, std::move(student), stream, t,
                        StageIo{root, "stage1"}, mw);
  mw.save();
  return out;
}

// ---------------------------------------------------------------------------
// Stage II

namespace {

// Per-cluster probe: up to probe_per_cluster members of each cluster, with
// the corpus's own fixed acoustic codes and a fresh frozen interleaving.
struct ClusterProbe {
  ProbeSet probe;
  std::vector<int> assignment;  // pair index -> cluster
};

ClusterProbe make_cluster_probe(const RunConfig& cfg, const LoadedCorpus& broad,
                                const ClusterModel& clusters,
                                std::uint64_t seed) {
  ClusterProbe out;
  out.probe.split = "cluster";
  std::vector<std::vector<std::size_t>> members(
      static_cast<std::size_t>(clusters.k));
  for (std::size_t i = 0; i < clusters.assignment.size(); ++i) {
    members[static_cast<std::size_t>(clusters.assignment[i])].push_back(i);
  }
  for (int c = 0; c < clusters.k; ++c) {
    auto& pool = members[static_cast<std::size_t>(c)];
    Rng rng(derive_seed(seed, "cluster/" + std::to_string(c)));
    rng.shuffle(std::span<std::size_t>(pool));
    const std::size_t take = std::min(
        pool.size(), static_cast<std::size_t>(cfg.selection.probe_per_cluster));
    for (std::size_t r = 0; r < take; ++r) {
      const Utterance& u = broad.utterances[pool[r]];
      const auto codes = acoustic_encode(u, broad.meta.vocab,
                                         broad.meta.noise_rate,
                                         broad.meta.acoustic_seed);
      ContextPair pair;
      pair.utterance = u;
      pair.context =
          interleave(u, codes, kTextSpanWords, kAcousticSpanWords,
                     derive_seed(seed, "ctx/" + std::to_string(u.id)));
      out.probe.pairs.push_back(std::move(pair));
      out.assignment.push_back(c);
    }
  }
  return out;
}

Stage2Outcome stage2_into(const RunConfig& cfg, const std::string& checkpoint,
                          const std::string& stage_rel, ManifestWriter& mw,
                          const LoadedCorpus& broad, const LoadedCorpus& narrow,
                          const TeacherModel& teacher, const ProbeSet& probe) {
  const fs::path root(cfg.out_dir);
  if (!fs::exists(checkpoint)) {
    throw std::runtime_error("stage-1 checkpoint missing: " + checkpoint);
  }
  LoadedStudent resumed = load_student(checkpoint);
  const StudentConfig want = student_config(cfg);
  const StudentConfig& got = resumed.model.config();
  if (got.vocab.size != want.vocab.size ||
      got.vocab.acoustic_codes != want.vocab.acoustic_codes ||
      got.d != want.d || got.context_window != want.context_window) {
    throw std::runtime_error("checkpoint " + checkpoint +
                             " was trained under a different model config");
  }

  fs::create_directories(root / stage_rel);
  Stage2Outcome out;

  // Cluster the broad corpus and measure where the resumed model still
  // disagrees with the reference.
  const auto embeddings = embed_items(broad.utterances, cfg.vocab(),
                                      run_seed(cfg, stage_rel + "/embed"));
  const ClusterModel clusters = balanced_kmeans(embeddings, cfg.selection.clusters,
                                                run_seed(cfg, stage_rel + "/kmeans"));
  const ClusterProbe cprobe =
      make_cluster_probe(cfg, broad, clusters, run_seed(cfg, stage_rel + "/probe"));
  out.cluster_m =
      cluster_misalignment(resumed.model, teacher, cprobe.probe,
                           cprobe.assignment, clusters.k);

  std::vector<double> m_c(static_cast<std::size_t>(clusters.k));
  for (std::size_t c = 0; c < m_c.size(); ++c) {
    m_c[c] = out.cluster_m.defined[c]
                 ? out.cluster_m.value[c]
                 : std::numeric_limits<double>::quiet_NaN();
  }

  const auto narrow_tokens =
      static_cast<std::uint64_t>(total_tokens(narrow.utterances));
  const auto budget = static_cast<std::uint64_t>(
      std::llround(cfg.selection.budget_fraction *
                   static_cast<double>(narrow_tokens)));
  out.plan = make_plan(cluster_mass(clusters), m_c, cfg.selection.gamma, budget);
  out.active = sample_active(out.plan, clusters, broad.utterances,
                             run_seed(cfg, stage_rel + "/sample"));

  // Materialize the active set as its own corpus file.
  std::unordered_map<std::uint64_t, std::size_t> by_id;
  by_id.reserve(broad.utterances.size());
  for (std::size_t i = 0; i < broad.utterances.size(); ++i) {
    by_id[broad.utterances[i].id] = i;
  }
  std::vector<Utterance> active_utts;
  active_utts.reserve(out.active.entries.size());
  for (const auto& e : out.active.entries) {
    active_utts.push_back(broad.utterances[by_id.at(e.utterance_id)]);
  }

  out.clusters_path = stage_rel + "/clusters.json";
  out.plan_path = stage_rel + "/plan.json";
  out.active_path = stage_rel + "/active.jsonl";
  save_cluster_model(root / out.clusters_path, clusters);
  save_plan(root / out.plan_path, out.plan);
  save_manifest(root / (stage_rel + "/active_manifest.json"), out.active);
  save_corpus((root / out.active_path).string(), active_utts, broad.meta);

  // Token-mass-weighted mixture of the narrow stream and the active set;
  // an empty active set degrades to the narrow stream alone.
  TrainConfig t = cfg.stage2;
  t.seed = run_seed(cfg, stage_rel + "/stream");
  CorpusStream narrow_stream(narrow.utterances, narrow.meta, kTextSpanWords,
                             kAcousticSpanWords,
                             run_seed(cfg, stage_rel + "/stream/narrow"));
  StageOutcome trained;
  if (active_utts.empty()) {
    trained = train_and_measure(teacher, probe, std::move(resumed.model),
                                narrow_stream, t, StageIo{root, stage_rel}, mw);
  } else {
    CorpusStream active_stream(active_utts, broad.meta, kTextSpanWords,
                               kAcousticSpanWords,
                               run_seed(cfg, stage_rel + "/stream/active"));
    const auto active_tokens =
        static_cast<double>(total_tokens(active_utts));
    std::vector<TrainStream*> sources{&narrow_stream, &active_stream};
    std::vector<double> mixture{static_cast<double>(narrow_tokens),
                                active_tokens};
    MixStream mix(sources, mixture, run_seed(cfg, stage_rel + "/mix"));
    trained = train_and_measure(teacher, probe, std::move(resumed.model), mix, t,
                                StageIo{root, stage_rel}, mw);
  }
  out.stage = std::move(trained);

  for (const std::string& rel :
       {out.clusters_path, out.plan_path, stage_rel + "/active_manifest.json",
        out.active_path, out.active_path + ".meta.json"}) {
    mw.add(rel);
  }
  return out;
}

}  // namespace

Stage2Outcome run_stage2(const RunConfig& cfg, const std::string& stage1_checkpoint) {
  cfg.validate();
  const fs::path root(cfg.out_dir);
  auto broad = require_corpus(root / "corpus/broad.jsonl", "broad");
  auto narrow = require_corpus(root / "corpus/narrow.jsonl", "narrow");
  ManifestWriter mw(root, cfg);
  const TeacherModel teacher =
      TeacherModel::train(broad.utterances, cfg.vocab(), cfg.teacher_order,
                          cfg.teacher_lambda);
  const ProbeSet probe = gap_probe(cfg);
  Stage2Outcome out = stage2_into(cfg, stage1_checkpoint, "stage2", mw, broad,
                                  narrow, teacher, probe);
  mw.save();
  return out;
}

// ---------------------------------------------------------------------------
// Sweep

namespace {

struct CellMetrics {
  double misalignment = 0.0;
  double forgetting = 0.0;
  double acc_text = 0.0;
  double acc_interleaved = 0.0;
};

CellMetrics finish_cell(const RunConfig& cfg, const StageOutcome& stage,
                        const EvalTask& task_text, const EvalTask& task_ilv) {
  CellMetrics m;
  const auto& final_gap = stage.gap_series.back().second;
  m.misalignment = final_gap.misalignment;
  m.forgetting = final_gap.forgetting;
  const fs::path root(cfg.out_dir);
  LoadedStudent final_model =
      load_student((root / stage.final_checkpoint).string());
  m.acc_text = evaluate(final_model.model, task_text).accuracy;
  m.acc_interleaved = evaluate(final_model.model, task_ilv).accuracy;
  return m;
}

}  // namespace

SweepOutcome run_sweep(const RunConfig& cfg) {
  cfg.validate();
  const fs::path root(cfg.out_dir);
  if (!fs::exists(root / "corpus/broad.jsonl") ||
      !fs::exists(root / "corpus/narrow.jsonl")) {
    prepare_corpus(cfg);
  }
  auto broad = require_corpus(root / "corpus/broad.jsonl", "broad");
  auto narrow = require_corpus(root / "corpus/narrow.jsonl", "narrow");
  ManifestWriter mw(root, cfg);
  const TeacherModel teacher =
      TeacherModel::train(broad.utterances, cfg.vocab(), cfg.teacher_order,
                          cfg.teacher_lambda);
  const ProbeSet probe = gap_probe(cfg);

  // One shared task pair keeps scores comparable across cells.
  auto tasks = make_synthetic_tasks(broad.utterances, teacher, cfg.eval.n_items,
                                    cfg.corpus.noise_rate,
                                    run_seed(cfg, "sweep/eval"), {});
  EvalTask& task_text = tasks[0];
  EvalTask& task_ilv = tasks[1];
  task_text.n_shots = cfg.eval.n_shots;
  task_ilv.n_shots = cfg.eval.n_shots;

  SweepOutcome out;
  out.teacher_acc_text = evaluate(teacher, task_text).accuracy;

  fs::create_directories(root / "sweep");

  // Every cell resumes the same text backbone, so cells differ only in
  // their speech-stage training.
  const StudentModel backbone = build_backbone(cfg, broad, teacher, mw);

  // Stage-1 cells: alpha x budget.
  for (double alpha : cfg.sweep.alphas) {
    for (std::size_t budget : cfg.sweep.budgets) {
      SweepCellResult cell;
      cell.name = "a" + fmt_g(alpha) + "_d" + std::to_string(budget);
      cell.alpha = alpha;
      cell.tokens = budget;
      const std::string rel = "sweep/" + cell.name;
      try {
        StudentModel student = backbone;
        TrainConfig t = cfg.stage1;
        t.alpha = alpha;
        t.total_tokens = budget;
        t.seed = run_seed(cfg, rel + "/stream");
        CorpusStream stream(narrow.utterances, narrow.meta, kTextSpanWords,
                            kAcousticSpanWords, t.seed);
        StageOutcome stage = train_and_measure(
            teacher, probe, std::move(student), stream, t, StageIo{root, rel}, mw);
        const CellMetrics m = finish_cell(cfg, stage, task_text, task_ilv);
        cell.misalignment = m.misalignment;
        cell.forgetting = m.forgetting;
        cell.acc_text = m.acc_text;
        cell.acc_interleaved = m.acc_interleaved;
        cell.ok = true;
      } catch (const std::exception& e) {
        cell.ok = false;
        cell.error = e.what();
      }
      out.cells.push_back(std::move(cell));
    }
  }

  // Optional stage-2 cells: gamma x budget fraction, resumed from one
  // shared base trained with the config's own stage-1 settings.
  if (!cfg.sweep.gammas.empty() && !cfg.sweep.budget_fractions.empty()) {
    std::string base_ckpt;
    try {
      StudentModel student = backbone;
      TrainConfig t = cfg.stage1;
      t.seed = run_seed(cfg, "sweep/base/stream");
      CorpusStream stream(narrow.utterances, narrow.meta, kTextSpanWords,
                          kAcousticSpanWords, t.seed);
      StageOutcome base = train_and_measure(teacher, probe, std::move(student),
                                            stream, t,
                                            StageIo{root, "sweep/base"}, mw);
      base_ckpt =
          (root / pre_decay_checkpoint(base.checkpoints, t).path).string();
    } catch (const std::exception& e) {
      base_ckpt.clear();
      SweepCellResult cell;
      cell.name = "base";
      cell.alpha = cfg.stage1.alpha;
      cell.tokens = cfg.stage1.total_tokens;
      cell.ok = false;
      cell.error = e.what();
      out.cells.push_back(std::move(cell));
    }
    if (!base_ckpt.empty()) {
      for (double gamma : cfg.sweep.gammas) {
        for (double fraction : cfg.sweep.budget_fractions) {
          SweepCellResult cell;
          cell.name = "g" + fmt_g(gamma) + "_f" + fmt_g(fraction);
          cell.alpha = cfg.stage2.alpha;
          cell.gamma = gamma;
          cell.budget_fraction = fraction;
          cell.tokens = cfg.stage2.total_tokens;
          const std::string rel = "sweep/" + cell.name;
          try {
            RunConfig cell_cfg = cfg;
            cell_cfg.selection.gamma = gamma;
            cell_cfg.selection.budget_fraction = fraction;
            Stage2Outcome s2 = stage2_into(cell_cfg, base_ckpt, rel, mw, broad,
                                           narrow, teacher, probe);
            const CellMetrics m =
                finish_cell(cfg, s2.stage, task_text, task_ilv);
            cell.misalignment = m.misalignment;
            cell.forgetting = m.forgetting;
            cell.acc_text = m.acc_text;
            cell.acc_interleaved = m.acc_interleaved;
            cell.ok = true;
          } catch (const std::exception& e) {
            cell.ok = false;
            cell.error = e.what();
          }
          out.cells.push_back(std::move(cell));
        }
      }
    }
  }

  // Regression feed: one row per successful cell. The log columns are
  // precomputed because the CSV loader applies no transforms.
  out.results_csv = "sweep/results.csv";
  {
    std::ofstream csv(root / out.results_csv);
    if (!csv) throw std::runtime_error("cannot write sweep results CSV");
    csv << "alpha,gamma,budget_fraction,tokens,log_tokens,misalignment,"
           "log_misalignment,forgetting,acc_text,acc_interleaved\n";
    for (const auto& c : out.cells) {
      if (!c.ok) continue;
      // Misalignment is a mean KL >= 0; the clamp only guards the exact-zero
      // degenerate case so the log column stays finite.
      const double m = std::max(c.misalignment, 1e-300);
      csv << fmt_g(c.alpha) << ',' << fmt_g(c.gamma) << ','
          << fmt_g(c.budget_fraction) << ',' << c.tokens << ','
          << fmt_full(std::log(static_cast<double>(c.tokens))) << ','
          << fmt_full(c.misalignment) << ',' << fmt_full(std::log(m)) << ','
          << fmt_full(c.forgetting) << ',' << fmt_full(c.acc_text) << ','
          << fmt_full(c.acc_interleaved) << '\n';
    }
  }
  mw.add(out.results_csv);

  // Per-alpha scaling curves over the stage-1 budgets.
  for (double alpha : cfg.sweep.alphas) {
    std::vector<ScalingPoint> points;
    for (const auto& c : out.cells) {
      if (!c.ok || c.gamma != 0.0 || c.budget_fraction != 0.0) continue;
      if (c.alpha != alpha) continue;
      points.push_back({static_cast<double>(c.tokens), c.misalignment});
    }
    if (points.empty()) continue;
    std::sort(points.begin(), points.end(),
              [](const ScalingPoint& a, const ScalingPoint& b) {
                return a.tokens < b.tokens;
              });
    const std::string rel = "sweep/scaling_a" + fmt_g(alpha) + ".csv";
    save_scaling_points(root / rel, points);
    out.scaling_csvs[fmt_g(alpha)] = rel;
    mw.add(rel);
  }

  // Cell-by-cell summary, failures included.
  out.summary_path = "sweep/summary.json";
  {
    ojson j;
    j["teacher_acc_text"] = out.teacher_acc_text;
    ojson cells = ojson::array();
    for (const auto& c : out.cells) {
      ojson e;
      e["name"] = c.name;
      e["alpha"] = c.alpha;
      e["gamma"] = c.gamma;
      e["budget_fraction"] = c.budget_fraction;
      e["tokens"] = c.tokens;
      e["ok"] = c.ok;
      e["error"] = c.error;
      e["misalignment"] = c.misalignment;
      e["forgetting"] = c.forgetting;
      e["acc_text"] = c.acc_text;
      e["acc_interleaved"] = c.acc_interleaved;
      cells.push_back(std::move(e));
    }
    j["cells"] = std::move(cells);
    std::ofstream sj(root / out.summary_path);
    if (!sj) throw std::runtime_error("cannot write sweep summary");
    sj << j.dump(2) << '\n';
  }
  mw.add(out.summary_path);
  mw.save();
  return out;
}

}  // namespace xmodal
