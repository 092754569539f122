#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "xmodal/corpus.hpp"
#include "xmodal/metrics.hpp"
#include "xmodal/objective.hpp"
#include "xmodal/select.hpp"

// Two-stage run driver: Stage I distills on the narrow corpus, Stage II
// resumes it with a misalignment-guided active mixture, and the sweep runs
// a budget/alpha grid whose outputs feed the scaling and regression
// analyses. Every artifact lands under one output directory with a
// digest-carrying manifest at its root, and every random choice derives
// from the single master seed, so a rerun reproduces the tree bit for bit.

namespace xmodal {

struct CorpusConfig {
  int n_domains = 4;
  std::vector<int> narrow_zero = {2, 3};  // domains absent from the narrow set
  int vocab_size = 256;
  // Half the vocabulary: a 2:1 lossy channel. Tokens covered by the narrow
  // set map to unique codes (decodable in context, like speech units), while
  // uncovered-domain tokens collide onto them, so closing the gap there
  // requires genuine cross-modal inference.
  int acoustic_codes = 128;
  std::size_t n_broad = 2000;
  std::size_t n_narrow = 1200;
  int len_lo = 40;  // utterance length range, tokens
  int len_hi = 80;
  double noise_rate = 0.2;
  double concentration = 0.9;
  int targets_per_row = 4;
};

struct SelectionConfig {
  int clusters = 16;
  double gamma = 5.0;
  double budget_fraction = 0.01;  // of narrow-corpus tokens, in (0, 0.2]
  int probe_per_cluster = 8;      // utterances probed per cluster
};

struct EvalConfig {
  std::size_t n_items = 120;
  int n_shots = 2;
};

struct SweepGrid {
  std::vector<double> alphas = {0.0, 1.0};
  std::vector<std::size_t> budgets = {1u << 17, 1u << 18};  // stage-1 tokens
  // Optional stage-2 cells: the cross product of these two lists, resumed
  // from one shared stage-1 base. Leave either empty to skip.
  std::vector<double> gammas;
  std::vector<double> budget_fractions;
};

struct RunConfig {
  CorpusConfig corpus;
  int teacher_order = 1;
  double teacher_lambda = 0.1;
  int student_dim = 16;
  int context_window = 4;  // teacher order + 3
  // Text backbone: before any speech-stage training the student is
  // distilled toward the reference on text-only contexts from the broad
  // corpus, leaving the acoustic pathway untouched. Every stage and sweep
  // cell starts from this shared state (artifact: backbone/ckpt.json).
  // total_tokens = 0 skips it and stages start from the raw random init.
  TrainConfig backbone;
  TrainConfig stage1;  // seed is overwritten with a derived one per stage
  TrainConfig stage2;
  SelectionConfig selection;
  EvalConfig eval;
  SweepGrid sweep;
  std::size_t probe_pairs = 192;  // held-out pairs for the gap metrics
  std::string out_dir = "run";
  std::uint64_t master_seed = 1;

  RunConfig();

  Vocab vocab() const;
  std::pair<int, int> len_range() const;
  void validate() const;
};

// Single UTF-8 JSON object; unknown keys are rejected, missing keys keep
// their defaults, so a minimal config file stays minimal.
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const std::filesystem::path& path, const RunConfig& cfg);

// Canonical serialization with out_dir excluded: two configs that differ
// only in where they write hash identically.
std::string canonical_config_json(const RunConfig& cfg);

// All component seeds derive from the master seed and a fixed tag.
std::uint64_t run_seed(const RunConfig& cfg, const std::string& tag);

// SHA-256, for artifact digests.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

struct RunManifest {
  std::string config_digest;
  // stage name -> checkpoint paths in token order, relative to the run root
  std::map<std::string, std::vector<std::string>> stage_checkpoints;
  std::vector<std::string> metric_logs;        // relative paths
  std::map<std::string, std::string> digests;  // relative path -> sha256
};

void save_run_manifest(const std::filesystem::path& path, const RunManifest& m);
RunManifest load_run_manifest(const std::filesystem::path& path);
// Re-hashes every digest entry; throws when a file is missing or changed.
void verify_run_manifest(const std::filesystem::path& out_dir,
                         const RunManifest& m);

// Geometric checkpoint marks: batch_tokens, x2, x2, ... capped by and
// always ending at total_tokens.
std::vector<std::size_t> checkpoint_schedule(std::size_t batch_tokens,
                                             std::size_t total_tokens);

struct CorpusPaths {
  std::string broad;
  std::string narrow;
};

// Generates both corpora under <out>/corpus and records them in the
// manifest. Existing files are overwritten (regeneration is bit-exact).
CorpusPaths prepare_corpus(const RunConfig& cfg);

struct CheckpointRef {
  std::size_t tokens_seen = 0;
  std::string path;  // relative to the run root
};

struct StageOutcome {
  std::vector<CheckpointRef> checkpoints;
  std::string final_checkpoint;
  std::vector<std::pair<std::size_t, GapReport>> gap_series;
  TrainResult train;
};

// Stage I: alpha-weighted distillation on the narrow stream, checkpoints on
// the geometric schedule, gap metrics measured at every checkpoint against
// a frozen probe set. Requires prepare_corpus output to exist.
StageOutcome run_stage1(const RunConfig& cfg);

// The checkpoint Stage II resumes from: the last one at or before the
// point where the learning-rate decay phase begins.
const CheckpointRef& pre_decay_checkpoint(std::span<const CheckpointRef> ckpts,
                                          const TrainConfig& train);

struct Stage2Outcome {
  StageOutcome stage;
  SelectionPlan plan;
  ActiveManifest active;
  ClusterMisalignment cluster_m;
  std::string clusters_path;  // relative paths
  std::string plan_path;
  std::string active_path;
};

// Stage II: cluster the broad corpus, measure per-cluster misalignment with
// the resumed model, build the plan, sample the active set, and train on
// the token-mass-weighted mixture of narrow and active data. gamma and the
// budget fraction come from cfg.selection.
Stage2Outcome run_stage2(const RunConfig& cfg, const std::string& stage1_checkpoint);

struct SweepCellResult {
  std::string name;
  double alpha = 0.0;
  double gamma = 0.0;
  double budget_fraction = 0.0;
  std::size_t tokens = 0;  // training budget of the cell
  bool ok = false;
  std::string error;  // empty when ok
  double misalignment = 0.0;
  double forgetting = 0.0;
  double acc_text = 0.0;
  double acc_interleaved = 0.0;
};

struct SweepOutcome {
  std::vector<SweepCellResult> cells;
  double teacher_acc_text = 0.0;   // shared reference accuracy
  std::string results_csv;         // regression feed, relative path
  std::map<std::string, std::string> scaling_csvs;  // alpha tag -> relative path
  std::string summary_path;
};

// One cell per grid point. A failed cell is recorded with its error and
// excluded from the CSV outputs; the sweep itself keeps going. Generates
// the corpora first when they are missing.
SweepOutcome run_sweep(const RunConfig& cfg);

}  // namespace xmodal
