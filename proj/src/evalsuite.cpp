#include "xmodal/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "xmodal/rng.hpp"

namespace xmodal {

const char* task_modality_name(TaskModality m) {
  switch (m) {
    case TaskModality::text:
      return "text";
    case TaskModality::interleaved:
      return "interleaved";
  }
  throw std::invalid_argument("unknown task modality");
}

TaskModality task_modality_from_name(const std::string& name) {
  if (name == "text") return TaskModality::text;
  if (name == "interleaved") return TaskModality::interleaved;
  throw std::invalid_argument("unknown task modality '" + name + "'");
}

namespace {

void check_tokens(const std::vector<std::int32_t>& tokens, int vocab_size,
                  const char* what) {
  if (tokens.empty()) throw std::invalid_argument(std::string(what) + " is empty");
  for (std::int32_t t : tokens) {
    if (t < 0 || t >= vocab_size) {
      throw std::invalid_argument(std::string(what) + " holds an out-of-vocab token");
    }
  }
}

}  // namespace

void EvalTask::validate() const {
  vocab.validate();
  if (n_shots < 0) throw std::invalid_argument("n_shots must be >= 0");
  if (!(noise_rate >= 0.0 && noise_rate <= 1.0)) {
    throw std::invalid_argument("noise_rate must lie in [0, 1]");
  }
  if (items.empty()) throw std::invalid_argument("task has no items");
  for (const auto& item : items) {
    check_tokens(item.prefix.tokens, vocab.size, "item prefix");
    if (item.options.size() < 2) {
      throw std::invalid_argument("every item needs at least 2 options");
    }
    if (item.gold < 0 || static_cast<std::size_t>(item.gold) >= item.options.size()) {
      throw std::invalid_argument("gold index outside the option list");
    }
    for (const auto& opt : item.options) check_tokens(opt, vocab.size, "option");
  }
  for (const auto& shot : shot_pool) {
    check_tokens(shot.prefix.tokens, vocab.size, "shot prefix");
    check_tokens(shot.continuation, vocab.size, "shot continuation");
  }
}

void EvalResult::validate() const {
  if (per_item.empty()) throw std::invalid_argument("result has no items");
  double correct = 0.0;
  for (const auto& item : per_item) {
    if (item.scores.size() < 2) throw std::invalid_argument("item has too few scores");
    if (item.chosen < 0 || static_cast<std::size_t>(item.chosen) >= item.scores.size()) {
      throw std::invalid_argument("chosen index outside the score list");
    }
    correct += item.correct ? 1.0 : 0.0;
  }
  if (std::fabs(accuracy - correct / per_item.size()) > 1e-12) {
    throw std::invalid_argument("accuracy does not match per-item correctness");
  }
}

double score_option(const TeacherModel& t, std::span<const std::int32_t> context,
                    std::span<const std::int32_t> option) {
  if (option.empty()) throw std::invalid_argument("option is empty");
  if (context.empty()) throw std::invalid_argument("context is empty");
  const int v = t.vocab().size;
  std::vector<std::int32_t> buf(context.begin(), context.end());
  buf.reserve(context.size() + option.size());
  double sum = 0.0;
  std::vector<double> probs(static_cast<std::size_t>(v));
  for (std::int32_t tok : option) {
    if (tok < 0 || tok >= v) throw std::invalid_argument("option token outside vocab");
    t.predict_into(buf, probs);
    sum += std::log(probs[static_cast<std::size_t>(tok)]);
    buf.push_back(tok);
  }
  return sum / static_cast<double>(option.size());
}

namespace {

void recompute_text_positions(InterleavedContext& ctx) {
  ctx.text_positions.clear();
  for (std::size_t i = 0; i + 1 < ctx.is_text.size(); ++i) {
    if (ctx.is_text[i + 1]) ctx.text_positions.push_back(static_cast<std::uint32_t>(i));
  }
}

// Appends src's elements after dst's; text_positions are rebuilt by the
// caller once assembly is done.
void append_context(InterleavedContext& dst, const InterleavedContext& src) {
  const auto offset = static_cast<std::uint32_t>(dst.size());
  for (Segment seg : src.segments) {
    seg.first_token += offset;
    dst.segments.push_back(seg);
  }
  dst.is_text.insert(dst.is_text.end(), src.is_text.begin(), src.is_text.end());
  dst.element_ids.insert(dst.element_ids.end(), src.element_ids.begin(),
                         src.element_ids.end());
}

void append_text_tokens(InterleavedContext& dst, std::span<const std::int32_t> tokens) {
  Segment seg;
  seg.modality = Modality::text;
  seg.first_word = 0;
  seg.n_words = 0;  // synthesized continuation, no word structure
  seg.first_token = static_cast<std::uint32_t>(dst.size());
  seg.n_tokens = static_cast<std::uint32_t>(tokens.size());
  dst.segments.push_back(seg);
  dst.is_text.insert(dst.is_text.end(), tokens.size(), 1);
  dst.element_ids.insert(dst.element_ids.end(), tokens.begin(), tokens.end());
}

InterleavedContext render_prefix(const EvalTask& task, const Utterance& u,
                                 const std::string& seed_tag) {
  if (task.modality == TaskModality::text) return text_only_context(u);
  const auto codes = acoustic_encode(u, task.vocab, task.noise_rate,
                                     derive_seed(task.seed, seed_tag + "/codes"));
  return interleave(u, codes, kTextSpanWords, kAcousticSpanWords,
                    derive_seed(task.seed, seed_tag + "/ilv"));
}

}  // namespace

double score_option(const StudentModel& s, const InterleavedContext& context,
                    std::span<const std::int32_t> option) {
  if (option.empty()) throw std::invalid_argument("option is empty");
  if (context.size() == 0) throw std::invalid_argument("context is empty");
  const int v = s.config().vocab.size;
  InterleavedContext ext = context;
  append_text_tokens(ext, option);
  const std::size_t base = context.size();
  double sum = 0.0;
  for (std::size_t k = 0; k < option.size(); ++k) {
    const std::int32_t tok = option[k];
    if (tok < 0 || tok >= v) throw std::invalid_argument("option token outside vocab");
    const StudentModel::Forward fwd = s.forward(ext, base + k - 1);
    sum += std::log(fwd.probs[static_cast<std::size_t>(tok)]);
  }
  return sum / static_cast<double>(option.size());
}

AssembledItem assemble_item(const EvalTask& task, std::size_t item,
                            const EvalOptions& opts) {
  if (item >= task.items.size()) throw std::out_of_range("item index outside task");
  const EvalItem& it = task.items[item];

  std::size_t max_option = 0;
  for (const auto& opt : it.options) max_option = std::max(max_option, opt.size());
  const std::size_t bare = it.prefix.tokens.size() + max_option;
  if (bare > opts.max_elements) {
    throw std::invalid_argument("item does not fit the context window even with 0 shots");
  }

  const int want = std::min<int>(task.n_shots, static_cast<int>(task.shot_pool.size()));
  std::size_t total = bare;
  for (int j = 0; j < want; ++j) {
    total += task.shot_pool[j].prefix.tokens.size() + task.shot_pool[j].continuation.size();
  }
  int use = want;
  while (use > 0 && total > opts.max_elements) {
    --use;
    total -= task.shot_pool[use].prefix.tokens.size() +
             task.shot_pool[use].continuation.size();
  }

  AssembledItem out;
  out.shots_used = use;
  for (int j = 0; j < use; ++j) {
    const EvalShot& shot = task.shot_pool[j];
    append_context(out.context,
                   render_prefix(task, shot.prefix, "eval/shot/" + std::to_string(j)));
    append_text_tokens(out.context, shot.continuation);
    out.text.insert(out.text.end(), shot.prefix.tokens.begin(), shot.prefix.tokens.end());
    out.text.insert(out.text.end(), shot.continuation.begin(), shot.continuation.end());
  }
  append_context(out.context,
                 render_prefix(task, it.prefix, "eval/item/" + std::to_string(item)));
  out.text.insert(out.text.end(), it.prefix.tokens.begin(), it.prefix.tokens.end());
  recompute_text_positions(out.context);
  return out;
}

namespace {

int argmax_lowest(const std::vector<double>& scores) {
  int best = 0;
  for (int j = 1; j < static_cast<int>(scores.size()); ++j) {
    if (scores[j] > scores[best]) best = j;
  }
  return best;
}

EvalResult collect(const EvalTask& task,
                   std::vector<ItemResult> per_item) {
  EvalResult r;
  r.task = task.name;
  r.modality = task_modality_name(task.modality);
  r.n_shots = task.n_shots;
  double correct = 0.0;
  for (std::size_t i = 0; i < per_item.size(); ++i) {
    per_item[i].chosen = argmax_lowest(per_item[i].scores);
    per_item[i].correct = per_item[i].chosen == task.items[i].gold;
    correct += per_item[i].correct ? 1.0 : 0.0;
  }
  r.per_item = std::move(per_item);
  r.accuracy = correct / static_cast<double>(r.per_item.size());
  return r;
}

}  // namespace

EvalResult evaluate(const StudentModel& s, const EvalTask& task,
                    const EvalOptions& opts) {
  task.validate();
  if (s.config().vocab.size != task.vocab.size ||
      s.config().vocab.acoustic_codes != task.vocab.acoustic_codes) {
    throw std::invalid_argument("student vocabulary does not match the task");
  }
  std::vector<ItemResult> per_item(task.items.size());
  for (std::size_t i = 0; i < task.items.size(); ++i) {
    const AssembledItem a = assemble_item(task, i, opts);
    per_item[i].shots_used = a.shots_used;
    for (const auto& opt : task.items[i].options) {
      per_item[i].scores.push_back(score_option(s, a.context, opt));
    }
  }
  return collect(task, std::move(per_item));
}

EvalResult evaluate(const TeacherModel& t, const EvalTask& task,
                    const EvalOptions& opts) {
  task.validate();
  if (t.vocab().size != task.vocab.size) {
    throw std::invalid_argument("reference vocabulary does not match the task");
  }
  std::vector<ItemResult> per_item(task.items.size());
  for (std::size_t i = 0; i < task.items.size(); ++i) {
    const AssembledItem a = assemble_item(task, i, opts);
    per_item[i].shots_used = a.shots_used;
    for (const auto& opt : task.items[i].options) {
      per_item[i].scores.push_back(score_option(t, a.text, opt));
    }
  }
  return collect(task, std::move(per_item));
}

EvalResult evaluate_scores(const EvalTask& task,
                           const std::vector<std::vector<double>>& scores) {
  task.validate();
  if (scores.size() != task.items.size()) {
    throw std::invalid_argument("one score vector per item required");
  }
  std::vector<ItemResult> per_item(task.items.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i].size() != task.items[i].options.size()) {
      throw std::invalid_argument("score count does not match option count");
    }
    per_item[i].scores = scores[i];
    per_item[i].shots_used = 0;
  }
  return collect(task, std::move(per_item));
}

double accuracy_gap(const EvalResult& reference_text, const EvalResult& model) {
  if (reference_text.task != model.task ||
      reference_text.per_item.size() != model.per_item.size()) {
    throw std::invalid_argument("gap requires paired results for the same task");
  }
  return reference_text.accuracy - model.accuracy;
}

namespace {

// Cuts `u` at word boundary `at_word`, keeping `n_words` words.
std::vector<std::int32_t> words_slice(const Utterance& u, std::size_t at_word,
                                      std::size_t n_words) {
  const WordSpan& first = u.words[at_word];
  const WordSpan& last = u.words[at_word + n_words - 1];
  const auto begin = u.tokens.begin() + first.begin;
  const auto end = u.tokens.begin() + last.begin + last.len;
  return std::vector<std::int32_t>(begin, end);
}

Utterance prefix_of(const Utterance& u, std::size_t n_words, std::uint64_t id) {
  Utterance p;
  p.id = id;
  p.domain_id = u.domain_id;
  p.source = u.source;
  p.words.assign(u.words.begin(), u.words.begin() + n_words);
  const WordSpan& last = p.words.back();
  p.tokens.assign(u.tokens.begin(), u.tokens.begin() + last.begin + last.len);
  return p;
}

}  // namespace

std::vector<EvalTask> make_synthetic_tasks(const std::vector<Utterance>& corpus,
                                           const TeacherModel& teacher,
                                           std::size_t n_items,
                                           double noise_rate, std::uint64_t seed,
                                           const TaskGenConfig& cfg) {
  if (corpus.empty()) throw std::invalid_argument("corpus is empty");
  if (n_items == 0) throw std::invalid_argument("n_items must be positive");
  if (cfg.n_options < 2) throw std::invalid_argument("need at least 2 options");

  const std::size_t need_words =
      static_cast<std::size_t>(cfg.min_prefix_words + cfg.continuation_words);
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (corpus[i].words.size() >= need_words) eligible.push_back(i);
  }
  if (eligible.size() < n_items) {
    throw std::invalid_argument("corpus has too few utterances long enough for items");
  }
  const std::size_t w = static_cast<std::size_t>(cfg.continuation_words);
  bool multi_domain = false;
  for (std::size_t i : eligible) {
    if (corpus[i].domain_id != corpus[eligible[0]].domain_id) {
      multi_domain = true;
      break;
    }
  }

  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    const std::uint64_t attempt_seed =
        attempt == 0 ? seed : derive_seed(seed, "retry/" + std::to_string(attempt));
    Rng rng(derive_seed(attempt_seed, "eval/gen"));

    std::vector<std::size_t> order = eligible;
    rng.shuffle(std::span<std::size_t>(order));

    EvalTask task;
    task.name = "continuation";
    task.modality = TaskModality::text;
    task.n_shots = 0;
    task.noise_rate = noise_rate;
    task.seed = derive_seed(attempt_seed, "eval/ctx");
    task.vocab = teacher.vocab();

    std::uint64_t next_id = 0;
    bool ok = true;
    for (std::size_t i = 0; ok && i < n_items; ++i) {
      const Utterance& u = corpus[order[i]];
      EvalItem item;
      const std::size_t max_prefix = u.words.size() - w;
      const std::size_t p =
          static_cast<std::size_t>(cfg.min_prefix_words) +
          rng.uniform_u64(max_prefix - cfg.min_prefix_words + 1);
      item.prefix = prefix_of(u, p, next_id++);
      const std::vector<std::int32_t> gold_tokens = words_slice(u, p, w);

      item.options.assign(static_cast<std::size_t>(cfg.n_options), {});
      item.gold = static_cast<int>(rng.uniform_u64(cfg.n_options));
      item.options[static_cast<std::size_t>(item.gold)] = gold_tokens;
      for (int j = 0; ok && j < cfg.n_options; ++j) {
        if (j == item.gold) continue;
        bool found = false;
        for (int tries = 0; tries < 100; ++tries) {
          const Utterance& v = corpus[eligible[rng.uniform_u64(eligible.size())]];
          if (multi_domain && v.domain_id == u.domain_id) continue;
          const std::size_t q = rng.uniform_u64(v.words.size() - w + 1);
          std::vector<std::int32_t> cand = words_slice(v, q, w);
          const bool duplicate =
              std::any_of(item.options.begin(), item.options.end(),
                          [&](const auto& o) { return !o.empty() && o == cand; });
          if (duplicate) continue;
          item.options[static_cast<std::size_t>(j)] = std::move(cand);
          found = true;
          break;
        }
        ok = found;
      }
      task.items.push_back(std::move(item));
    }
    if (!ok) continue;

    const std::size_t pool =
        std::min<std::size_t>(cfg.shot_pool_size, eligible.size() - n_items);
    for (std::size_t j = 0; j < pool; ++j) {
      const Utterance& u = corpus[order[n_items + j]];
      EvalShot shot;
      shot.prefix =
          prefix_of(u, static_cast<std::size_t>(cfg.min_prefix_words), next_id++);
      shot.continuation = words_slice(u, shot.prefix.words.size(), w);
      task.shot_pool.push_back(std::move(shot));
    }

    // the reference model must beat chance on the text variant, otherwise
    // the distractors were not separable and the task is regenerated
    const EvalResult probe = evaluate(teacher, task);
    if (probe.accuracy <= 1.0 / cfg.n_options) continue;

    EvalTask interleaved = task;
    interleaved.modality = TaskModality::interleaved;
    return {std::move(task), std::move(interleaved)};
  }
  throw std::runtime_error("task generation kept failing the above-chance check");
}

using nlohmann::json;

namespace {

json utterance_to_json(const Utterance& u) {
  json spans = json::array();
  for (const auto& w : u.words) spans.push_back({w.begin, w.len});
  return json{{"id", u.id},
              {"domain_id", u.domain_id},
              {"source", source_name(u.source)},
              {"tokens", u.tokens},
              {"word_spans", spans}};
}

Utterance utterance_from_json(const json& j) {
  Utterance u;
  u.id = j.at("id").get<std::uint64_t>();
  u.domain_id = j.at("domain_id").get<int>();
  u.source = source_from_name(j.at("source").get<std::string>());
  u.tokens = j.at("tokens").get<std::vector<std::int32_t>>();
  for (const auto& s : j.at("word_spans")) {
    u.words.push_back({s.at(0).get<std::uint32_t>(), s.at(1).get<std::uint32_t>()});
  }
  return u;
}

}  // namespace

void save_eval_task(const std::string& path, const EvalTask& task) {
  task.validate();
  json items = json::array();
  for (const auto& item : task.items) {
    items.push_back(json{{"prefix", utterance_to_json(item.prefix)},
                         {"options", item.options},
                         {"gold", item.gold}});
  }
  json pool = json::array();
  for (const auto& shot : task.shot_pool) {
    pool.push_back(json{{"prefix", utterance_to_json(shot.prefix)},
                        {"continuation", shot.continuation}});
  }
  json j{{"name", task.name},
         {"modality", task_modality_name(task.modality)},
         {"n_shots", task.n_shots},
         {"noise_rate", task.noise_rate},
         {"seed", task.seed},
         {"vocab", {{"size", task.vocab.size}, {"acoustic_codes", task.vocab.acoustic_codes}}},
         {"items", std::move(items)},
         {"shot_pool", std::move(pool)}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

EvalTask load_eval_task(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  json j = json::parse(in);
  EvalTask task;
  task.name = j.at("name").get<std::string>();
  task.modality = task_modality_from_name(j.at("modality").get<std::string>());
  task.n_shots = j.at("n_shots").get<int>();
  task.noise_rate = j.at("noise_rate").get<double>();
  task.seed = j.at("seed").get<std::uint64_t>();
  task.vocab.size = j.at("vocab").at("size").get<int>();
  task.vocab.acoustic_codes = j.at("vocab").at("acoustic_codes").get<int>();
  for (const auto& item_j : j.at("items")) {
    EvalItem item;
    item.prefix = utterance_from_json(item_j.at("prefix"));
    item.options = item_j.at("options").get<std::vector<std::vector<std::int32_t>>>();
    item.gold = item_j.at("gold").get<int>();
    task.items.push_back(std::move(item));
  }
  for (const auto& shot_j : j.at("shot_pool")) {
    EvalShot shot;
    shot.prefix = utterance_from_json(shot_j.at("prefix"));
    shot.continuation = shot_j.at("continuation").get<std::vector<std::int32_t>>();
    task.shot_pool.push_back(std::move(shot));
  }
  task.validate();
  return task;
}

void save_eval_result(const std::string& path, const EvalResult& result) {
  result.validate();
  json items = json::array();
  for (const auto& item : result.per_item) {
    items.push_back(json{{"chosen", item.chosen},
                         {"correct", item.correct},
                         {"shots_used", item.shots_used},
                         {"scores", item.scores}});
  }
  json j{{"task", result.task},
         {"modality", result.modality},
         {"n_shots", result.n_shots},
         {"accuracy", result.accuracy},
         {"per_item", std::move(items)}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

EvalResult load_eval_result(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  json j = json::parse(in);
  EvalResult result;
  result.task = j.at("task").get<std::string>();
  result.modality = j.at("modality").get<std::string>();
  result.n_shots = j.at("n_shots").get<int>();
  result.accuracy = j.at("accuracy").get<double>();
  for (const auto& item_j : j.at("per_item")) {
    ItemResult item;
    item.chosen = item_j.at("chosen").get<int>();
    item.correct = item_j.at("correct").get<bool>();
    item.shots_used = item_j.at("shots_used").get<int>();
    item.scores = item_j.at("scores").get<std::vector<double>>();
    result.per_item.push_back(std::move(item));
  }
  result.validate();
  return result;
}

}  // namespace xmodal
