#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "xmodal/corpus.hpp"
#include "xmodal/model.hpp"

// Few-shot multiple-choice evaluation: prompt assembly, normalized
// log-probability scoring, and accuracy over synthetic continuation tasks
// presented in either modality.

namespace xmodal {

// How the task presents its contexts to the model under test. Options are
// always scored as text continuations.
enum class TaskModality : std::uint8_t { text, interleaved };

const char* task_modality_name(TaskModality m);
TaskModality task_modality_from_name(const std::string& name);

struct EvalItem {
  Utterance prefix;  // underlying text fragment the context renders
  std::vector<std::vector<std::int32_t>> options;
  int gold = 0;
};

// A demonstration: prefix plus its true continuation, prepended before the
// scored item when shots are requested.
struct EvalShot {
  Utterance prefix;
  std::vector<std::int32_t> continuation;
};

struct EvalTask {
  std::string name;
  TaskModality modality = TaskModality::text;
  int n_shots = 0;
  double noise_rate = 0.0;  // acoustic encoding of interleaved prefixes
  std::uint64_t seed = 0;   // derives per-item code and interleaving seeds
  Vocab vocab;
  std::vector<EvalItem> items;
  std::vector<EvalShot> shot_pool;

  // every item has >= 2 options, a valid gold index, non-empty prefix and
  // options; n_shots >= 0
  void validate() const;
};

struct ItemResult {
  int chosen = 0;
  bool correct = false;
  int shots_used = 0;
  std::vector<double> scores;  // one normalized log-prob per option
};

struct EvalResult {
  std::string task;
  std::string modality;
  int n_shots = 0;  // requested; per-item use may be lower to fit
  double accuracy = 0.0;
  std::vector<ItemResult> per_item;

  // accuracy equals the mean of per-item correctness
  void validate() const;
};

struct EvalOptions {
  std::size_t max_elements = 2048;  // context window the assembly must fit
};

// Mean over option tokens of log P(option_i | context + option_<i>).
// The reference scorer conditions on plain text; the student scorer appends
// the option as text elements after the given context. Context non-empty.
double score_option(const TeacherModel& t, std::span<const std::int32_t> context,
                    std::span<const std::int32_t> option);
double score_option(const StudentModel& s, const InterleavedContext& context,
                    std::span<const std::int32_t> option);

// The context actually scored for one item: shots first (prefix in the
// task's modality, continuation as text), then the item prefix. Shots are
// dropped, latest first, until prefix plus longest option fits the window;
// throws if even the bare item cannot fit.
struct AssembledItem {
  InterleavedContext context;       // as the student sees it
  std::vector<std::int32_t> text;   // the same content as plain text
  int shots_used = 0;
};

AssembledItem assemble_item(const EvalTask& task, std::size_t item,
                            const EvalOptions& opts = {});

// Argmax over option scores, ties broken toward the lowest index.
EvalResult evaluate(const StudentModel& s, const EvalTask& task,
                    const EvalOptions& opts = {});
// The reference model is text-only, so it always scores the plain-text
// rendering regardless of the task's modality.
EvalResult evaluate(const TeacherModel& t, const EvalTask& task,
                    const EvalOptions& opts = {});
// Scoring-free core for injected scores: scores[i][j] is item i, option j.
EvalResult evaluate_scores(const EvalTask& task,
                           const std::vector<std::vector<double>>& scores);

// Reference accuracy on text input minus the evaluated model's accuracy.
double accuracy_gap(const EvalResult& reference_text, const EvalResult& model);

struct TaskGenConfig {
  int n_options = 4;
  int continuation_words = 2;
  int min_prefix_words = 3;
  int shot_pool_size = 5;
  int max_attempts = 20;  // whole-task regenerations allowed
};

// Continuation tasks from held-out utterances: gold is the true next words,
// distractors are continuations drawn from other domains. Returns the same
// underlying items as a {text, interleaved} pair. Tasks on which the
// reference model fails to beat chance on the text variant are regenerated
// with a fresh derived seed.
std::vector<EvalTask> make_synthetic_tasks(const std::vector<Utterance>& corpus,
                                           const TeacherModel& teacher,
                                           std::size_t n_items,
                                           double noise_rate, std::uint64_t seed,
                                           const TaskGenConfig& cfg = {});

// Persistence: single UTF-8 JSON object per file.
void save_eval_task(const std::string& path, const EvalTask& task);
EvalTask load_eval_task(const std::string& path);
void save_eval_result(const std::string& path, const EvalResult& result);
EvalResult load_eval_result(const std::string& path);

}  // namespace xmodal
