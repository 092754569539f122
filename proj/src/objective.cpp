#include "xmodal/objective.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include "xmodal/kernels.hpp"

namespace xmodal {

using nlohmann::json;

const char* schedule_name(LrSchedule s) {
  return s == LrSchedule::constant ? "constant" : "warmup_stable_decay";
}

LrSchedule schedule_from_name(const std::string& name) {
  if (name == "constant") return LrSchedule::constant;
  if (name == "warmup_stable_decay") return LrSchedule::warmup_stable_decay;
  throw std::invalid_argument("unknown schedule: " + name);
}

void TrainConfig::validate() const {
  if (alpha < 0.0 || alpha > 1.0)
    throw std::invalid_argument("alpha must lie in [0,1]");
  // zero rates are allowed so no-op runs can serve as controls
  if (lr_student < 0.0 || lr_embed < 0.0)
    throw std::invalid_argument("learning rates must be >= 0");
  if (batch_tokens < 1) throw std::invalid_argument("batch_tokens must be >= 1");
  if (total_tokens < 1) throw std::invalid_argument("total_tokens must be >= 1");
  if (warmup_steps < 0) throw std::invalid_argument("warmup_steps must be >= 0");
  if (decay_fraction <= 0.0 || decay_fraction >= 1.0)
    throw std::invalid_argument("decay_fraction must lie in (0,1)");
}

namespace {

struct Accum {
  double nll = 0.0;
  double dist = 0.0;
  std::size_t n = 0;
};

// Walks every masked position of the batch; position_fn(pair, i) is invoked
// with i such that element i+1 exists and is text.
template <typename Fn>
void for_each_masked(std::span<const ContextPair> batch, Fn&& position_fn) {
  for (const ContextPair& pair : batch)
    for (std::uint32_t i : pair.context.text_positions) position_fn(pair, i);
}

LossBreakdown finish(const Accum& acc, double alpha) {
  if (acc.n == 0)
    throw std::runtime_error("batch contains no masked positions");
  LossBreakdown out;
  out.masked_positions = acc.n;
  out.loss_nll = acc.nll / static_cast<double>(acc.n);
  out.loss_dist = acc.dist / static_cast<double>(acc.n);
  out.loss_total = alpha * out.loss_dist + (1.0 - alpha) * out.loss_nll;
  return out;
}

}  // namespace

LossBreakdown loss_nll(const StudentModel& s,
                       std::span<const ContextPair> batch) {
  Accum acc;
  for_each_masked(batch, [&](const ContextPair& pair, std::uint32_t i) {
    const auto fwd = s.forward(pair.context, i);
    const auto target =
        static_cast<std::size_t>(pair.utterance.tokens[i + 1]);
    acc.nll += -std::log(fwd.probs[target]);
    ++acc.n;
  });
  return finish(acc, 0.0);
}

LossBreakdown loss_dist(const StudentModel& s, const TeacherModel& t,
                        std::span<const ContextPair> batch) {
  if (t.vocab().size != s.config().vocab.size)
    throw std::invalid_argument("reference and student vocabularies differ");
  const std::size_t v = static_cast<std::size_t>(t.vocab().size);
  std::vector<double> q(v);
  Accum acc;
  for_each_masked(batch, [&](const ContextPair& pair, std::uint32_t i) {
    const auto fwd = s.forward(pair.context, i);
    t.predict_into(
        std::span<const std::int32_t>(pair.utterance.tokens.data(), i + 1), q);
    acc.dist += kernels::kl_div(q.data(), fwd.probs.data(), v);
    ++acc.n;
  });
  return finish(acc, 1.0);
}

LossBreakdown eval_losses(const StudentModel& s, const TeacherModel& t,
                          std::span<const ContextPair> batch, double alpha) {
  if (t.vocab().size != s.config().vocab.size)
    throw std::invalid_argument("reference and student vocabularies differ");
  const std::size_t v = static_cast<std::size_t>(t.vocab().size);
  std::vector<double> q(v);
  Accum acc;
  for_each_masked(batch, [&](const ContextPair& pair, std::uint32_t i) {
    const auto fwd = s.forward(pair.context, i);
    const auto target =
        static_cast<std::size_t>(pair.utterance.tokens[i + 1]);
    t.predict_into(
        std::span<const std::int32_t>(pair.utterance.tokens.data(), i + 1), q);
    acc.nll += -std::log(fwd.probs[target]);
    acc.dist += kernels::kl_div(q.data(), fwd.probs.data(), v);
    ++acc.n;
  });
  return finish(acc, alpha);
}

LossBreakdown batch_loss_and_grad(const StudentModel& s, const TeacherModel& t,
                                  std::span<const ContextPair> batch,
                                  double alpha, StudentGrad& grad) {
  if (t.vocab().size != s.config().vocab.size)
    throw std::invalid_argument("reference and student vocabularies differ");
  const std::size_t v = static_cast<std::size_t>(t.vocab().size);
  const auto& ops = kernels::ops();

  std::vector<double> q(v);
  std::vector<double> upstream(v);
  Accum acc;
  for_each_masked(batch, [&](const ContextPair& pair, std::uint32_t i) {
    const auto fwd = s.forward(pair.context, i);
    const auto target =
        static_cast<std::size_t>(pair.utterance.tokens[i + 1]);
    t.predict_into(
        std::span<const std::int32_t>(pair.utterance.tokens.data(), i + 1), q);
    acc.nll += -std::log(fwd.probs[target]);
    acc.dist += kernels::kl_div(q.data(), fwd.probs.data(), v);
    ++acc.n;

    // d(loss)/d(logits) before the 1/n normalization:
    //   alpha (p - q) + (1 - alpha) (p - onehot)
    for (std::size_t w = 0; w < v; ++w)
      upstream[w] = alpha * (fwd.probs[w] - q[w]) +
                    (1.0 - alpha) * fwd.probs[w];
    upstream[target] -= 1.0 - alpha;
    s.accumulate_grad(pair.context, fwd, upstream, grad);
  });

  const auto out = finish(acc, alpha);
  ops.scale(1.0 / static_cast<double>(acc.n), grad.flat.data(),
            grad.flat.size());
  return out;
}

CorpusStream::CorpusStream(std::vector<Utterance> corpus,
                           const CorpusMeta& meta, SpanRange text_span,
                           SpanRange acoustic_span, std::uint64_t seed)
    : corpus_(std::move(corpus)),
      text_span_(text_span),
      acoustic_span_(acoustic_span),
      order_rng_(derive_seed(seed, "stream/order")),
      seed_(seed) {
  if (corpus_.empty()) throw std::invalid_argument("empty training corpus");
  codes_.reserve(corpus_.size());
  for (const auto& u : corpus_)
    codes_.push_back(
        acoustic_encode(u, meta.vocab, meta.noise_rate, meta.acoustic_seed));
  order_.resize(corpus_.size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  order_rng_.shuffle(std::span<std::size_t>(order_));
}

ContextPair CorpusStream::next() {
  if (cursor_ == order_.size()) {
    cursor_ = 0;
    order_rng_.shuffle(std::span<std::size_t>(order_));
  }
  const std::size_t idx = order_[cursor_++];
  const std::uint64_t ctx_seed =
      derive_seed(seed_, "stream/ctx/" + std::to_string(draw_count_++));
  ContextPair pair;
  pair.utterance = corpus_[idx];
  pair.context = interleave(pair.utterance, codes_[idx], text_span_,
                            acoustic_span_, ctx_seed);
  return pair;
}

double lr_multiplier(const TrainConfig& cfg, std::size_t s,
                     std::size_t total_steps) {
  if (cfg.schedule == LrSchedule::constant) return 1.0;
  const std::size_t warmup = static_cast<std::size_t>(cfg.warmup_steps);
  if (s < warmup)
    return static_cast<double>(s + 1) / static_cast<double>(warmup);
  const double decay_start =
      static_cast<double>(total_steps) * (1.0 - cfg.decay_fraction);
  const double sd = static_cast<double>(s);
  if (sd < decay_start || total_steps == 0) return 1.0;
  const double span = static_cast<double>(total_steps) - decay_start;
  return (static_cast<double>(total_steps) - sd) / span;
}

TrainResult train(StudentModel& s, const TeacherModel& t, TrainStream& data,
                  const TrainConfig& cfg, const CheckpointHook& hook) {
  cfg.validate();
  const auto& ops = kernels::ops();
  const std::size_t total_steps =
      (cfg.total_tokens + cfg.batch_tokens - 1) / cfg.batch_tokens;

  TrainResult res;
  auto grad = s.make_grad();
  std::vector<ContextPair> batch;
  while (res.tokens_seen < cfg.total_tokens) {
    batch.clear();
    std::size_t batch_tok = 0;
    while (batch_tok < cfg.batch_tokens) {
      batch.push_back(data.next());
      batch_tok += batch.back().context.size();
    }

    grad.reset();
    const LossBreakdown loss =
        batch_loss_and_grad(s, t, batch, cfg.alpha, grad);
    if (!std::isfinite(loss.loss_total))
      throw std::runtime_error("training diverged: non-finite loss at step " +
                               std::to_string(res.steps));

    const double mult = lr_multiplier(cfg, res.steps, total_steps);
    const std::size_t n_embed = s.embed_param_count();
    double* p = s.params().data();
    ops.axpy(-cfg.lr_embed * mult, grad.flat.data(), p, n_embed);
    ops.axpy(-cfg.lr_student * mult, grad.flat.data() + n_embed, p + n_embed,
             s.n_params() - n_embed);

    res.tokens_seen += batch_tok;
    ++res.steps;
    res.log.push_back({res.steps, res.tokens_seen, loss.loss_total,
                       loss.loss_dist, loss.loss_nll, cfg.lr_student * mult});
    if (hook) hook(s, res.tokens_seen, res.steps);
  }
  return res;
}

void save_metrics_log(const std::string& path,
                      std::span<const TrainLogEntry> log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  for (const auto& e : log) {
    json j{{"step", e.step},
           {"tokens_seen", e.tokens_seen},
           {"loss_total", e.loss_total},
           {"loss_dist", e.loss_dist},
           {"loss_nll", e.loss_nll},
           {"lr", e.lr}};
    out << j.dump() << '\n';
  }
}

std::vector<TrainLogEntry> load_metrics_log(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<TrainLogEntry> log;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    log.push_back({j.at("step").get<std::size_t>(),
                   j.at("tokens_seen").get<std::size_t>(),
                   j.at("loss_total").get<double>(),
                   j.at("loss_dist").get<double>(),
                   j.at("loss_nll").get<double>(), j.at("lr").get<double>()});
  }
  return log;
}

}  // namespace xmodal
