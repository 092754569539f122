#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "xmodal/corpus.hpp"
#include "xmodal/model.hpp"

// Interpolated training objective: alpha weights a distillation term
// (reference model on the text prefix vs student on the mixed context)
// against a masked next-token NLL term, plus the gradient-descent loop.

namespace xmodal {

enum class LrSchedule { constant, warmup_stable_decay };

const char* schedule_name(LrSchedule s);
LrSchedule schedule_from_name(const std::string& name);

struct TrainConfig {
  double alpha = 1.0;
  double lr_student = 1.0;  // output-head rate
  double lr_embed = 5.0;    // embedding/flag rate
  std::size_t batch_tokens = 8192;
  std::size_t total_tokens = 1u << 21;
  LrSchedule schedule = LrSchedule::warmup_stable_decay;
  int warmup_steps = 10;
  double decay_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
};

struct LossBreakdown {
  double loss_total = 0.0;
  double loss_dist = 0.0;
  double loss_nll = 0.0;
  std::size_t masked_positions = 0;
};

// Mean NLL of the true next token over masked positions (positions whose
// successor element is text). Throws if the batch has none.
LossBreakdown loss_nll(const StudentModel& s,
                       std::span<const ContextPair> batch);

// Mean KL(reference ‖ student) over masked positions; the reference always
// conditions on the pure text prefix, the student on the mixed context.
LossBreakdown loss_dist(const StudentModel& s, const TeacherModel& t,
                        std::span<const ContextPair> batch);

// Both terms plus the alpha-combined total.
LossBreakdown eval_losses(const StudentModel& s, const TeacherModel& t,
                          std::span<const ContextPair> batch, double alpha);

// eval_losses plus the exact gradient of loss_total, scaled so grad holds
// d(mean loss)/d(params). grad must be zeroed (or carry-in is summed).
LossBreakdown batch_loss_and_grad(const StudentModel& s, const TeacherModel& t,
                                  std::span<const ContextPair> batch,
                                  double alpha, StudentGrad& grad);

// Supplies training pairs; implementations must be deterministic for a
// fixed construction seed and cycle indefinitely.
class TrainStream {
 public:
  virtual ~TrainStream() = default;
  virtual ContextPair next() = 0;
};

// Seeded shuffled passes over a fixed corpus. Codes are the corpus's fixed
// encoding (from meta); the interleaving is redrawn per draw.
class CorpusStream final : public TrainStream {
 public:
  CorpusStream(std::vector<Utterance> corpus, const CorpusMeta& meta,
               SpanRange text_span, SpanRange acoustic_span,
               std::uint64_t seed);

  ContextPair next() override;

 private:
  std::vector<Utterance> corpus_;
  std::vector<std::vector<std::int32_t>> codes_;  // fixed per utterance
  SpanRange text_span_;
  SpanRange acoustic_span_;
  Rng order_rng_;
  std::uint64_t seed_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::uint64_t draw_count_ = 0;
};

struct TrainLogEntry {
  std::size_t step = 0;
  std::size_t tokens_seen = 0;
  double loss_total = 0.0;
  double loss_dist = 0.0;
  double loss_nll = 0.0;
  double lr = 0.0;  // effective output-head rate this step
};

struct TrainResult {
  std::vector<TrainLogEntry> log;
  std::size_t steps = 0;
  std::size_t tokens_seen = 0;
};

// Called after each parameter update; lets callers snapshot checkpoints.
using CheckpointHook = std::function<void(
    const StudentModel& model, std::size_t tokens_seen, std::size_t step)>;

// Plain gradient descent on the combined objective until total_tokens have
// been consumed. Aborts with an exception if the loss turns non-finite.
TrainResult train(StudentModel& s, const TeacherModel& t, TrainStream& data,
                  const TrainConfig& cfg, const CheckpointHook& hook = {});

// Schedule multiplier for 0-indexed step s out of total_steps.
double lr_multiplier(const TrainConfig& cfg, std::size_t s,
                     std::size_t total_steps);

// JSONL, one object per entry: step, tokens_seen, loss_total, loss_dist,
// loss_nll, lr.
void save_metrics_log(const std::string& path,
                      std::span<const TrainLogEntry> log);
std::vector<TrainLogEntry> load_metrics_log(const std::string& path);

}  // namespace xmodal
