#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "xmodal/corpus.hpp"

namespace xmodal {

struct NextTokenDist {
  std::vector<double> probs;

  // nonnegative, sums to 1 within 1e-9
  void validate() const;
};

// Fixed text-only reference model: smoothed order-k Markov over token ids.
// Immutable after construction so it can serve as the distillation target
// and the forgetting reference.
class TeacherModel {
 public:
  static TeacherModel train(const std::vector<Utterance>& corpus,
                            const Vocab& vocab, int order = 1,
                            double lambda = 0.1);

  // Conditional on the last `order` tokens; shorter contexts use the longest
  // seen lower order, an empty context the smoothed unigram row.
  NextTokenDist predict(std::span<const std::int32_t> text_context) const;
  void predict_into(std::span<const std::int32_t> text_context,
                    std::span<double> probs) const;

  const Vocab& vocab() const { return vocab_; }
  int order() const { return order_; }
  double lambda() const { return lambda_; }

 private:
  struct Row {
    std::vector<std::uint32_t> counts;
    std::uint64_t total = 0;
  };

  TeacherModel(Vocab vocab, int order, double lambda)
      : vocab_(vocab), order_(order), lambda_(lambda) {}

  Vocab vocab_;
  int order_;
  double lambda_;
  // one table per context length 0..order; keys pack token ids base-V
  std::vector<std::unordered_map<std::uint64_t, Row>> tables_;
};

struct StudentConfig {
  Vocab vocab;
  int d = 32;            // embedding dim
  int context_window = 4;  // elements pooled per prediction

  void validate() const;
};

// Gradient buffer with the same flat layout as the parameters.
struct StudentGrad {
  std::vector<double> flat;

  void reset() { flat.assign(flat.size(), 0.0); }
};

// Mean-pooled embedding + linear softmax head over the text vocabulary.
// Parameters live in one flat buffer:
//   [token_embed VxD | acoustic_embed AxD | flag_text D | flag_acoustic D |
//    output_weights VxD | output_bias V]
class StudentModel {
 public:
  explicit StudentModel(const StudentConfig& cfg);
  static StudentModel init_random(const StudentConfig& cfg, std::uint64_t seed,
                                  double init_scale = 0.1);

  const StudentConfig& config() const { return cfg_; }
  std::size_t n_params() const { return params_.size(); }
  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  std::span<double> token_embed();
  std::span<double> acoustic_embed();
  std::span<double> flag(Modality m);
  std::span<double> output_weights();
  std::span<double> output_bias();
  std::span<const double> token_embed() const;
  std::span<const double> acoustic_embed() const;
  std::span<const double> flag(Modality m) const;
  std::span<const double> output_weights() const;
  std::span<const double> output_bias() const;

  // true when the flat index belongs to the embedding side (embeddings and
  // modality flags) as opposed to the output head; drives the two-rate update
  bool is_embed_param(std::size_t flat_index) const;
  // flat indices [0, embed_param_count) are the embedding side
  std::size_t embed_param_count() const { return off_w_; }

  struct Forward {
    std::vector<double> pooled;  // h, length d
    std::vector<double> probs;   // softmax output, length V
    std::size_t window_begin = 0;
    std::size_t window_len = 0;
  };

  // Predicts the text token at position+1 given elements [0, position].
  Forward forward(const InterleavedContext& ctx, std::size_t position) const;
  NextTokenDist predict(const InterleavedContext& ctx,
                        std::size_t position) const;

  // Exact gradients of the logits path; upstream is dLoss/dlogits (length V).
  // The prediction position is implied by fwd's window. Parameters outside
  // the pooled window receive nothing.
  void accumulate_grad(const InterleavedContext& ctx, const Forward& fwd,
                       std::span<const double> upstream,
                       StudentGrad& grad) const;

  StudentGrad make_grad() const;

  // Copies token embeddings onto the matching acoustic rows (code = token
  // mod A) and equates the modality flags. Under a bijective noiseless
  // encoding the two conditioning paths then coincide exactly.
  void tie_modalities();

 private:
  StudentConfig cfg_;
  std::vector<double> params_;
  std::size_t off_token_, off_acoustic_, off_flag_text_, off_flag_acoustic_,
      off_w_, off_b_;
};

// Checkpoint: single JSON object {config, parameters, rng_state};
// doubles round-trip bit-exactly.
void save_student(const std::string& path, const StudentModel& model,
                  const std::array<std::uint64_t, 4>& rng_state);

struct LoadedStudent {
  StudentModel model;
  std::array<std::uint64_t, 4> rng_state;
};

LoadedStudent load_student(const std::string& path);

}  // namespace xmodal
