#include "xmodal/model.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "xmodal/kernels.hpp"
#include "xmodal/rng.hpp"

namespace xmodal {

using nlohmann::json;

void NextTokenDist::validate() const {
  double sum = 0.0;
  for (double p : probs) {
    if (p < 0.0 || !std::isfinite(p))
      throw std::runtime_error("distribution has an invalid entry");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::runtime_error("distribution does not sum to 1");
}

TeacherModel TeacherModel::train(const std::vector<Utterance>& corpus,
                                 const Vocab& vocab, int order,
                                 double lambda) {
  vocab.validate();
  if (order < 0) throw std::invalid_argument("teacher order must be >= 0");
  if (lambda <= 0.0)
    throw std::invalid_argument("smoothing lambda must be positive");

  TeacherModel t(vocab, order, lambda);
  t.tables_.resize(static_cast<std::size_t>(order) + 1);
  const std::uint64_t v = static_cast<std::uint64_t>(vocab.size);
  for (const auto& u : corpus) {
    for (std::size_t i = 0; i < u.tokens.size(); ++i) {
      const std::int32_t next = u.tokens[i];
      if (next < 0 || next >= vocab.size)
        throw std::invalid_argument("token id out of vocab");
      for (int j = 0; j <= order; ++j) {
        if (static_cast<std::size_t>(j) > i) break;
        std::uint64_t key = 0;
        for (int b = j; b >= 1; --b)
          key = key * v + static_cast<std::uint64_t>(u.tokens[i - b]);
        Row& row = t.tables_[static_cast<std::size_t>(j)][key];
        if (row.counts.empty())
          row.counts.assign(static_cast<std::size_t>(vocab.size), 0);
        ++row.counts[static_cast<std::size_t>(next)];
        ++row.total;
      }
    }
  }
  return t;
}

void TeacherModel::predict_into(std::span<const std::int32_t> text_context,
                                std::span<double> probs) const {
  const int v = vocab_.size;
  if (probs.size() != static_cast<std::size_t>(v))
    throw std::invalid_argument("probs buffer has wrong length");
  for (std::int32_t tok : text_context)
    if (tok < 0 || tok >= v)
      throw std::invalid_argument("token id out of vocab");

  int j = order_;
  if (static_cast<std::size_t>(j) > text_context.size())
    j = static_cast<int>(text_context.size());
  const std::uint64_t vv = static_cast<std::uint64_t>(v);
  const Row* row = nullptr;
  for (; j >= 0; --j) {
    std::uint64_t key = 0;
    for (int b = j; b >= 1; --b)
      key = key * vv +
            static_cast<std::uint64_t>(text_context[text_context.size() - b]);
    const auto& table = tables_[static_cast<std::size_t>(j)];
    const auto it = table.find(key);
    if (it != table.end()) {
      row = &it->second;
      break;
    }
  }

  const double denom_lambda = lambda_ * v;
  if (row == nullptr) {
    // empty model: smoothed zero counts = uniform
    const double p = 1.0 / v;
    for (int w = 0; w < v; ++w) probs[static_cast<std::size_t>(w)] = p;
    return;
  }
  const double denom = static_cast<double>(row->total) + denom_lambda;
  for (int w = 0; w < v; ++w)
    probs[static_cast<std::size_t>(w)] =
        (static_cast<double>(row->counts[static_cast<std::size_t>(w)]) +
         lambda_) /
        denom;
}

NextTokenDist TeacherModel::predict(
    std::span<const std::int32_t> text_context) const {
  NextTokenDist out;
  out.probs.resize(static_cast<std::size_t>(vocab_.size));
  predict_into(text_context, out.probs);
  return out;
}

void StudentConfig::validate() const {
  vocab.validate();
  if (d < 1) throw std::invalid_argument("embedding dim must be >= 1");
  if (context_window < 1)
    throw std::invalid_argument("context window must be >= 1");
}

StudentModel::StudentModel(const StudentConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t v = static_cast<std::size_t>(cfg_.vocab.size);
  const std::size_t a = static_cast<std::size_t>(cfg_.vocab.acoustic_codes);
  const std::size_t d = static_cast<std::size_t>(cfg_.d);
  off_token_ = 0;
  off_acoustic_ = off_token_ + v * d;
  off_flag_text_ = off_acoustic_ + a * d;
  off_flag_acoustic_ = off_flag_text_ + d;
  off_w_ = off_flag_acoustic_ + d;
  off_b_ = off_w_ + v * d;
  params_.assign(off_b_ + v, 0.0);
}

StudentModel StudentModel::init_random(const StudentConfig& cfg,
                                       std::uint64_t seed,
                                       double init_scale) {
  StudentModel m(cfg);
  Rng rng(seed);
  for (double& p : m.params_)
    p = (2.0 * rng.next_double() - 1.0) * init_scale;
  return m;
}

std::span<double> StudentModel::token_embed() {
  return {params_.data() + off_token_, off_acoustic_ - off_token_};
}
std::span<double> StudentModel::acoustic_embed() {
  return {params_.data() + off_acoustic_, off_flag_text_ - off_acoustic_};
}
std::span<double> StudentModel::flag(Modality m) {
  const std::size_t off =
      m == Modality::text ? off_flag_text_ : off_flag_acoustic_;
  return {params_.data() + off, static_cast<std::size_t>(cfg_.d)};
}
std::span<double> StudentModel::output_weights() {
  return {params_.data() + off_w_, off_b_ - off_w_};
}
std::span<double> StudentModel::output_bias() {
  return {params_.data() + off_b_, params_.size() - off_b_};
}
std::span<const double> StudentModel::token_embed() const {
  return {params_.data() + off_token_, off_acoustic_ - off_token_};
}
std::span<const double> StudentModel::acoustic_embed() const {
  return {params_.data() + off_acoustic_, off_flag_text_ - off_acoustic_};
}
std::span<const double> StudentModel::flag(Modality m) const {
  const std::size_t off =
      m == Modality::text ? off_flag_text_ : off_flag_acoustic_;
  return {params_.data() + off, static_cast<std::size_t>(cfg_.d)};
}
std::span<const double> StudentModel::output_weights() const {
  return {params_.data() + off_w_, off_b_ - off_w_};
}
std::span<const double> StudentModel::output_bias() const {
  return {params_.data() + off_b_, params_.size() - off_b_};
}

bool StudentModel::is_embed_param(std::size_t flat_index) const {
  return flat_index < off_w_;
}

StudentModel::Forward StudentModel::forward(const InterleavedContext& ctx,
                                            std::size_t position) const {
  if (position >= ctx.size())
    throw std::out_of_range("position outside context");
  const std::size_t d = static_cast<std::size_t>(cfg_.d);
  const std::size_t v = static_cast<std::size_t>(cfg_.vocab.size);
  const std::size_t k = static_cast<std::size_t>(cfg_.context_window);

  Forward f;
  f.window_begin = position + 1 > k ? position + 1 - k : 0;
  f.window_len = position + 1 - f.window_begin;
  f.pooled.assign(d, 0.0);

  const auto& ops = kernels::ops();
  for (std::size_t j = f.window_begin; j <= position; ++j) {
    const bool text = ctx.is_text[j] != 0;
    const std::size_t id = static_cast<std::size_t>(ctx.element_ids[j]);
    const double* embed =
        text ? params_.data() + off_token_ + id * d
             : params_.data() + off_acoustic_ + id * d;
    const double* fl = text ? params_.data() + off_flag_text_
                            : params_.data() + off_flag_acoustic_;
    ops.axpy(1.0, embed, f.pooled.data(), d);
    ops.axpy(1.0, fl, f.pooled.data(), d);
  }
  ops.scale(1.0 / static_cast<double>(f.window_len), f.pooled.data(), d);

  std::vector<double> logits(v);
  ops.matvec(params_.data() + off_w_, f.pooled.data(), logits.data(), v, d);
  ops.axpy(1.0, params_.data() + off_b_, logits.data(), v);
  f.probs.resize(v);
  kernels::softmax(logits.data(), f.probs.data(), v);
  return f;
}

NextTokenDist StudentModel::predict(const InterleavedContext& ctx,
                                    std::size_t position) const {
  NextTokenDist out;
  out.probs = forward(ctx, position).probs;
  return out;
}

StudentGrad StudentModel::make_grad() const {
  StudentGrad g;
  g.flat.assign(params_.size(), 0.0);
  return g;
}

void StudentModel::accumulate_grad(const InterleavedContext& ctx,
                                   const Forward& fwd,
                                   std::span<const double> upstream,
                                   StudentGrad& grad) const {
  const std::size_t d = static_cast<std::size_t>(cfg_.d);
  const std::size_t v = static_cast<std::size_t>(cfg_.vocab.size);
  if (upstream.size() != v)
    throw std::invalid_argument("upstream gradient has wrong length");
  if (grad.flat.size() != params_.size())
    throw std::invalid_argument("gradient buffer has wrong size");

  const auto& ops = kernels::ops();
  // head: dW += g h^T, db += g
  ops.ger(grad.flat.data() + off_w_, upstream.data(), fwd.pooled.data(), 1.0,
          v, d);
  ops.axpy(1.0, upstream.data(), grad.flat.data() + off_b_, v);

  // pooled: dh = W^T g, shared 1/m by every window element
  std::vector<double> dh(d);
  ops.matvec_t(params_.data() + off_w_, upstream.data(), dh.data(), v, d);
  const double inv_m = 1.0 / static_cast<double>(fwd.window_len);
  for (std::size_t j = fwd.window_begin;
       j < fwd.window_begin + fwd.window_len; ++j) {
    const bool text = ctx.is_text[j] != 0;
    const std::size_t id = static_cast<std::size_t>(ctx.element_ids[j]);
    double* embed = text ? grad.flat.data() + off_token_ + id * d
                         : grad.flat.data() + off_acoustic_ + id * d;
    double* fl = text ? grad.flat.data() + off_flag_text_
                      : grad.flat.data() + off_flag_acoustic_;
    ops.axpy(inv_m, dh.data(), embed, d);
    ops.axpy(inv_m, dh.data(), fl, d);
  }
}

void StudentModel::tie_modalities() {
  const std::size_t d = static_cast<std::size_t>(cfg_.d);
  const std::size_t a = static_cast<std::size_t>(cfg_.vocab.acoustic_codes);
  for (std::size_t code = 0; code < a; ++code) {
    // token `code` is the projection preimage that keeps code == token
    for (std::size_t i = 0; i < d; ++i)
      params_[off_acoustic_ + code * d + i] =
          params_[off_token_ + code * d + i];
  }
  for (std::size_t i = 0; i < d; ++i)
    params_[off_flag_acoustic_ + i] = params_[off_flag_text_ + i];
}

void save_student(const std::string& path, const StudentModel& model,
                  const std::array<std::uint64_t, 4>& rng_state) {
  const auto& cfg = model.config();
  json j;
  j["config"] = {{"vocab_size", cfg.vocab.size},
                 {"acoustic_codes", cfg.vocab.acoustic_codes},
                 {"d", cfg.d},
                 {"context_window", cfg.context_window}};
  j["parameters"] = {
      {"token_embed", std::vector<double>(model.token_embed().begin(),
                                          model.token_embed().end())},
      {"acoustic_embed", std::vector<double>(model.acoustic_embed().begin(),
                                             model.acoustic_embed().end())},
      {"flag_text", std::vector<double>(model.flag(Modality::text).begin(),
                                        model.flag(Modality::text).end())},
      {"flag_acoustic",
       std::vector<double>(model.flag(Modality::acoustic).begin(),
                           model.flag(Modality::acoustic).end())},
      {"output_weights", std::vector<double>(model.output_weights().begin(),
                                             model.output_weights().end())},
      {"output_bias", std::vector<double>(model.output_bias().begin(),
                                          model.output_bias().end())}};
  j["rng_state"] = rng_state;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << j.dump() << '\n';
}

LoadedStudent load_student(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  json j = json::parse(in);
  StudentConfig cfg;
  cfg.vocab.size = j.at("config").at("vocab_size").get<int>();
  cfg.vocab.acoustic_codes = j.at("config").at("acoustic_codes").get<int>();
  cfg.d = j.at("config").at("d").get<int>();
  cfg.context_window = j.at("config").at("context_window").get<int>();

  StudentModel model(cfg);
  const auto& p = j.at("parameters");
  auto copy_into = [&](const char* key, std::span<double> dst) {
    const auto vals = p.at(key).get<std::vector<double>>();
    if (vals.size() != dst.size())
      throw std::runtime_error(std::string("checkpoint field ") + key +
                               " has wrong length");
    std::copy(vals.begin(), vals.end(), dst.begin());
  };
  copy_into("token_embed", model.token_embed());
  copy_into("acoustic_embed", model.acoustic_embed());
  copy_into("flag_text", model.flag(Modality::text));
  copy_into("flag_acoustic", model.flag(Modality::acoustic));
  copy_into("output_weights", model.output_weights());
  copy_into("output_bias", model.output_bias());

  LoadedStudent ls{std::move(model), {}};
  const auto state = j.at("rng_state").get<std::vector<std::uint64_t>>();
  if (state.size() != 4)
    throw std::runtime_error("checkpoint rng_state must have 4 words");
  std::copy(state.begin(), state.end(), ls.rng_state.begin());
  return ls;
}

}  // namespace xmodal
