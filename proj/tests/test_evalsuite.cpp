#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "xmodal/corpus.hpp"
#include "xmodal/evalsuite.hpp"
#include "xmodal/model.hpp"
#include "xmodal/rng.hpp"

using namespace xmodal;

namespace {

Utterance tiny_utterance(std::vector<std::int32_t> tokens, std::uint64_t id = 0,
                         int domain = 0) {
  Utterance u;
  u.id = id;
  u.domain_id = domain;
  u.tokens = std::move(tokens);
  for (std::uint32_t i = 0; i < u.tokens.size(); ++i) u.words.push_back({i, 1});
  return u;
}

// Teacher whose every conditional is exactly (1/2, 1/2): both successor
// rows are count-balanced, and lambda smoothing preserves the balance.
TeacherModel coin_teacher() {
  const Vocab vocab{2, 2};
  std::vector<Utterance> corpus;
  corpus.push_back(tiny_utterance({0, 0, 1}));
  corpus.push_back(tiny_utterance({1, 1, 0}, 1));
  return TeacherModel::train(corpus, vocab, 1, 0.1);
}

struct GenFixture {
  Vocab vocab{256, 64};
  std::vector<DomainSpec> specs;
  std::vector<Utterance> corpus;
  TeacherModel teacher;

  explicit GenFixture(std::uint64_t seed = 505, std::size_t n = 80)
      : specs(make_domain_specs(2, vocab, 4040, {})),
        corpus(gen_corpus(specs, vocab, n, {24, 60}, Source::broad,
                          WeightColumn::broad, seed)),
        teacher(TeacherModel::train(corpus, vocab, 1, 0.1)) {}
};

}  // namespace

TEST_CASE("normalized score of a coin-flip reference is ln(1/2)") {
  const TeacherModel t = coin_teacher();
  const std::vector<std::int32_t> ctx{0};
  const std::vector<std::int32_t> one{0};
  const std::vector<std::int32_t> three{0, 1, 0};
  CHECK(score_option(t, ctx, one) == doctest::Approx(std::log(0.5)).epsilon(1e-12));
  // every conditional is 1/2, so the mean log-prob is length-invariant
  CHECK(score_option(t, ctx, three) == doctest::Approx(std::log(0.5)).epsilon(1e-12));

  CHECK_THROWS_AS(score_option(t, ctx, std::vector<std::int32_t>{}),
                  std::invalid_argument);
  CHECK_THROWS_AS(score_option(t, std::vector<std::int32_t>{}, one),
                  std::invalid_argument);
  CHECK_THROWS_AS(score_option(t, ctx, std::vector<std::int32_t>{7}),
                  std::invalid_argument);
}

TEST_CASE("length normalization removes the length bias under a uniform model") {
  StudentConfig cfg;
  cfg.vocab = Vocab{256, 64};
  cfg.d = 16;
  cfg.context_window = 4;
  const StudentModel uniform(cfg);  // zero parameters -> uniform softmax

  const InterleavedContext ctx = text_only_context(tiny_utterance({3, 7, 11}));
  const double s1 = score_option(uniform, ctx, std::vector<std::int32_t>{5});
  const double s3 = score_option(uniform, ctx, std::vector<std::int32_t>{5, 9, 200});
  CHECK(s1 == doctest::Approx(-std::log(256.0)).epsilon(1e-12));
  CHECK(s3 == doctest::Approx(-std::log(256.0)).epsilon(1e-12));
  CHECK(s1 == doctest::Approx(s3).epsilon(1e-12));
}

TEST_CASE("ties break toward the lowest option index") {
  EvalTask task;
  task.name = "tie";
  task.vocab = Vocab{16, 4};
  EvalItem item;
  item.prefix = tiny_utterance({1});
  item.options = {{2}, {3}};
  item.gold = 1;
  task.items.push_back(item);

  const EvalResult r = evaluate_scores(task, {{-1.0, -1.0}});
  CHECK(r.per_item[0].chosen == 0);
  CHECK_FALSE(r.per_item[0].correct);
  CHECK(r.accuracy == 0.0);

  // identical options under a real scorer: identical scores, same rule
  const TeacherModel t = coin_teacher();
  EvalTask dup;
  dup.name = "dup";
  dup.vocab = Vocab{2, 2};
  EvalItem d;
  d.prefix = tiny_utterance({0});
  d.options = {{1, 0}, {1, 0}};
  d.gold = 0;
  dup.items.push_back(d);
  const EvalResult rd = evaluate(t, dup);
  CHECK(rd.per_item[0].scores[0] == rd.per_item[0].scores[1]);
  CHECK(rd.per_item[0].chosen == 0);
  CHECK(rd.accuracy == 1.0);
}

TEST_CASE("random scores hit chance accuracy on a large task") {
  EvalTask task;
  task.name = "chance";
  task.vocab = Vocab{16, 4};
  Rng gold_rng(derive_seed(909, "eval/gold"));
  for (int i = 0; i < 1000; ++i) {
    EvalItem item;
    item.prefix = tiny_utterance({1}, static_cast<std::uint64_t>(i));
    item.options = {{2}, {3}, {4}, {5}};
    item.gold = static_cast<int>(gold_rng.uniform_u64(4));
    task.items.push_back(std::move(item));
  }

  Rng rng(derive_seed(909, "eval/scores"));
  std::vector<std::vector<double>> scores(1000);
  for (auto& row : scores) {
    for (int j = 0; j < 4; ++j) row.push_back(rng.next_double());
  }
  const EvalResult r = evaluate_scores(task, scores);
  CHECK(std::fabs(r.accuracy - 0.25) <= 0.05);
  r.validate();

  CHECK_THROWS_AS(evaluate_scores(task, {{1.0, 2.0}}), std::invalid_argument);
}

TEST_CASE("reference model aces a task built along its own argmax path") {
  // Deterministic cycle 5 -> 6 -> 7 -> 8 -> 9 -> 5 dominates the reference;
  // gold continuations follow the cycle, distractors leave it.
  const Vocab vocab{16, 4};
  std::vector<Utterance> cycle_corpus;
  std::vector<std::int32_t> cyc;
  for (int rep = 0; rep < 40; ++rep) {
    for (std::int32_t v = 5; v <= 9; ++v) cyc.push_back(v);
  }
  cycle_corpus.push_back(tiny_utterance(cyc));
  const TeacherModel t = TeacherModel::train(cycle_corpus, vocab, 1, 0.1);

  EvalTask task;
  task.name = "argmax_path";
  task.vocab = vocab;
  for (int i = 0; i < 10; ++i) {
    EvalItem item;
    const std::int32_t start = 5 + (i % 5);
    const std::int32_t a = 5 + ((i + 1) % 5);
    const std::int32_t b = 5 + ((i + 2) % 5);
    item.prefix = tiny_utterance({start, a}, static_cast<std::uint64_t>(i));
    item.gold = i % 3;
    item.options = {{0, 1}, {1, 2}, {2, 3}};
    item.options[static_cast<std::size_t>(item.gold)] = {b, static_cast<std::int32_t>(
                                                                5 + ((i + 3) % 5))};
    task.items.push_back(std::move(item));
  }
  const EvalResult r = evaluate(t, task);
  CHECK(r.accuracy == 1.0);
}

TEST_CASE("synthetic task generation pairs both modalities over shared items") {
  const GenFixture fx;
  const auto tasks = make_synthetic_tasks(fx.corpus, fx.teacher, 12, 0.1, 7070);
  REQUIRE(tasks.size() == 2);
  const EvalTask& text = tasks[0];
  const EvalTask& mixed = tasks[1];
  CHECK(text.modality == TaskModality::text);
  CHECK(mixed.modality == TaskModality::interleaved);
  CHECK(text.name == mixed.name);
  CHECK(text.seed == mixed.seed);

  REQUIRE(text.items.size() == 12);
  REQUIRE(mixed.items.size() == 12);
  bool some_other_gold = false;
  for (std::size_t i = 0; i < text.items.size(); ++i) {
    CHECK(text.items[i].gold == mixed.items[i].gold);
    CHECK(text.items[i].prefix.tokens == mixed.items[i].prefix.tokens);
    CHECK(text.items[i].options == mixed.items[i].options);
    // options pairwise distinct
    const auto& opts = text.items[i].options;
    for (std::size_t a = 0; a < opts.size(); ++a) {
      for (std::size_t b = a + 1; b < opts.size(); ++b) CHECK(opts[a] != opts[b]);
    }
    if (text.items[i].gold != 0) some_other_gold = true;
  }
  CHECK(some_other_gold);  // gold position is not pinned to index 0

  // generation regenerates until the reference model beats chance on text
  const EvalResult probe = evaluate(fx.teacher, text);
  CHECK(probe.accuracy > 0.25);

  // determinism: same inputs, same tasks
  const auto again = make_synthetic_tasks(fx.corpus, fx.teacher, 12, 0.1, 7070);
  REQUIRE(again[0].items.size() == text.items.size());
  for (std::size_t i = 0; i < text.items.size(); ++i) {
    CHECK(again[0].items[i].prefix.tokens == text.items[i].prefix.tokens);
    CHECK(again[0].items[i].options == text.items[i].options);
    CHECK(again[0].items[i].gold == text.items[i].gold);
  }
  CHECK(again[0].seed == text.seed);

  // a different seed moves the items
  const auto moved = make_synthetic_tasks(fx.corpus, fx.teacher, 12, 0.1, 7071);
  bool any_diff = false;
  for (std::size_t i = 0; i < text.items.size(); ++i) {
    if (moved[0].items[i].prefix.tokens != text.items[i].prefix.tokens) any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("shots are prepended and dropped to fit the window") {
  const GenFixture fx;
  auto tasks = make_synthetic_tasks(fx.corpus, fx.teacher, 6, 0.1, 8080);
  EvalTask task = tasks[0];
  REQUIRE(task.shot_pool.size() == 5);
  task.n_shots = 3;

  SUBCASE("wide window keeps all requested shots") {
    const AssembledItem a = assemble_item(task, 0, EvalOptions{4096});
    CHECK(a.shots_used == 3);
    // the text view is the shot prefixes + continuations then the item prefix
    std::vector<std::int32_t> expect;
    for (int j = 0; j < 3; ++j) {
      const EvalShot& s = task.shot_pool[j];
      expect.insert(expect.end(), s.prefix.tokens.begin(), s.prefix.tokens.end());
      expect.insert(expect.end(), s.continuation.begin(), s.continuation.end());
    }
    const auto& p = task.items[0].prefix.tokens;
    expect.insert(expect.end(), p.begin(), p.end());
    CHECK(a.text == expect);
    CHECK(a.context.size() == expect.size());
  }
  SUBCASE("tight window drops shots, latest first") {
    std::size_t max_opt = 0;
    for (const auto& o : task.items[0].options) max_opt = std::max(max_opt, o.size());
    const std::size_t bare = task.items[0].prefix.tokens.size() + max_opt;
    const std::size_t first_shot = task.shot_pool[0].prefix.tokens.size() +
                                   task.shot_pool[0].continuation.size();

    const AssembledItem none = assemble_item(task, 0, EvalOptions{bare});
    CHECK(none.shots_used == 0);
    CHECK(none.text == task.items[0].prefix.tokens);

    const AssembledItem one = assemble_item(task, 0, EvalOptions{bare + first_shot});
    CHECK(one.shots_used == 1);
    CHECK(one.text.size() == bare - max_opt + first_shot);

    CHECK_THROWS_AS(assemble_item(task, 0, EvalOptions{1}), std::invalid_argument);
  }
  SUBCASE("assembled contexts never exceed the window") {
    std::size_t min_w = 0;  // the largest bare item must always fit
    for (const auto& item : task.items) {
      std::size_t max_opt = 0;
      for (const auto& o : item.options) max_opt = std::max(max_opt, o.size());
      min_w = std::max(min_w, item.prefix.tokens.size() + max_opt);
    }
    for (std::size_t w : {min_w, min_w + 25, min_w + 120}) {
      for (std::size_t i = 0; i < task.items.size(); ++i) {
        std::size_t max_opt = 0;
        for (const auto& o : task.items[i].options) max_opt = std::max(max_opt, o.size());
        const AssembledItem a = assemble_item(task, i, EvalOptions{w});
        CHECK(a.context.size() + max_opt <= w);
      }
    }
  }
  SUBCASE("both variants share the text view; the mixed one renders acoustics") {
    EvalTask mixed = tasks[1];
    mixed.n_shots = 3;
    bool any_acoustic = false;
    for (std::size_t i = 0; i < task.items.size(); ++i) {
      const AssembledItem at = assemble_item(task, i, EvalOptions{4096});
      const AssembledItem am = assemble_item(mixed, i, EvalOptions{4096});
      CHECK(at.text == am.text);
      CHECK(at.context.size() == am.context.size());
      for (std::uint8_t f : am.context.is_text) {
        if (!f) any_acoustic = true;
      }
      for (std::uint8_t f : at.context.is_text) CHECK(f == 1);
    }
    CHECK(any_acoustic);
  }
}

TEST_CASE("text-modality evaluation ignores acoustic parameters") {
  const GenFixture fx;
  const auto tasks = make_synthetic_tasks(fx.corpus, fx.teacher, 8, 0.15, 9090);

  StudentConfig cfg;
  cfg.vocab = fx.vocab;
  cfg.d = 24;
  cfg.context_window = 4;
  StudentModel base = StudentModel::init_random(cfg, 1234);
  StudentModel poked = base;
  for (double& p : poked.acoustic_embed()) p += 1.0;
  for (double& p : poked.flag(Modality::acoustic)) p -= 0.5;

  const EvalResult a = evaluate(base, tasks[0]);
  const EvalResult b = evaluate(poked, tasks[0]);
  REQUIRE(a.per_item.size() == b.per_item.size());
  for (std::size_t i = 0; i < a.per_item.size(); ++i) {
    for (std::size_t j = 0; j < a.per_item[i].scores.size(); ++j) {
      CHECK(a.per_item[i].scores[j] == b.per_item[i].scores[j]);  // bit-identical
    }
    CHECK(a.per_item[i].chosen == b.per_item[i].chosen);
  }
  CHECK(a.accuracy == b.accuracy);

  // the interleaved variant does consult them
  const EvalResult ma = evaluate(base, tasks[1]);
  const EvalResult mb = evaluate(poked, tasks[1]);
  bool any_moved = false;
  for (std::size_t i = 0; i < ma.per_item.size(); ++i) {
    for (std::size_t j = 0; j < ma.per_item[i].scores.size(); ++j) {
      if (ma.per_item[i].scores[j] != mb.per_item[i].scores[j]) any_moved = true;
    }
  }
  CHECK(any_moved);
}

TEST_CASE("task and result survive JSON round-trips") {
  const GenFixture fx;
  auto tasks = make_synthetic_tasks(fx.corpus, fx.teacher, 6, 0.2, 111);
  tasks[1].n_shots = 2;

  const auto dir = std::filesystem::temp_directory_path() / "xmodal_eval_test";
  std::filesystem::create_directories(dir);
  const auto task_path = (dir / "task.json").string();
  save_eval_task(task_path, tasks[1]);
  const EvalTask loaded = load_eval_task(task_path);

  StudentConfig cfg;
  cfg.vocab = fx.vocab;
  cfg.d = 16;
  cfg.context_window = 4;
  const StudentModel model = StudentModel::init_random(cfg, 77);
  const EvalResult before = evaluate(model, tasks[1]);
  const EvalResult after = evaluate(model, loaded);
  REQUIRE(before.per_item.size() == after.per_item.size());
  for (std::size_t i = 0; i < before.per_item.size(); ++i) {
    for (std::size_t j = 0; j < before.per_item[i].scores.size(); ++j) {
      CHECK(before.per_item[i].scores[j] == after.per_item[i].scores[j]);
    }
    CHECK(before.per_item[i].shots_used == after.per_item[i].shots_used);
  }

  const auto result_path = (dir / "result.json").string();
  save_eval_result(result_path, before);
  const EvalResult back = load_eval_result(result_path);
  CHECK(back.accuracy == before.accuracy);
  CHECK(back.task == before.task);
  CHECK(back.modality == before.modality);
  for (std::size_t i = 0; i < before.per_item.size(); ++i) {
    CHECK(back.per_item[i].scores == before.per_item[i].scores);
    CHECK(back.per_item[i].chosen == before.per_item[i].chosen);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("result validation recomputes accuracy from the per-item log") {
  EvalResult r;
  r.task = "t";
  r.modality = "text";
  ItemResult a;
  a.chosen = 0;
  a.correct = true;
  a.scores = {-0.5, -1.0};
  ItemResult b;
  b.chosen = 1;
  b.correct = false;
  b.scores = {-0.5, -0.4};
  r.per_item = {a, b};
  r.accuracy = 0.5;
  r.validate();
  r.accuracy = 0.75;
  CHECK_THROWS_AS(r.validate(), std::invalid_argument);
}

TEST_CASE("accuracy gap is the paired difference") {
  EvalTask task;
  task.name = "gap";
  task.vocab = Vocab{16, 4};
  for (int i = 0; i < 20; ++i) {
    EvalItem item;
    item.prefix = tiny_utterance({1}, static_cast<std::uint64_t>(i));
    item.options = {{2}, {3}};
    item.gold = 0;
    task.items.push_back(std::move(item));
  }
  // reference gets 16/20, the other 15/20
  std::vector<std::vector<double>> ref_scores, model_scores;
  for (int i = 0; i < 20; ++i) {
    ref_scores.push_back(i < 16 ? std::vector<double>{0.0, -1.0}
                                : std::vector<double>{-1.0, 0.0});
    model_scores.push_back(i < 15 ? std::vector<double>{0.0, -1.0}
                                  : std::vector<double>{-1.0, 0.0});
  }
  const EvalResult ref = evaluate_scores(task, ref_scores);
  const EvalResult model = evaluate_scores(task, model_scores);
  CHECK(ref.accuracy == doctest::Approx(0.80).epsilon(1e-12));
  CHECK(model.accuracy == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(accuracy_gap(ref, model) == doctest::Approx(0.05).epsilon(1e-12));

  EvalResult other = model;
  other.task = "different";
  CHECK_THROWS_AS(accuracy_gap(ref, other), std::invalid_argument);
}

TEST_CASE("task validation catches malformed tasks") {
  EvalTask task;
  task.vocab = Vocab{16, 4};
  CHECK_THROWS_AS(task.validate(), std::invalid_argument);  // no items

  EvalItem item;
  item.prefix = tiny_utterance({1});
  item.options = {{2}};
  item.gold = 0;
  task.items.push_back(item);
  CHECK_THROWS_AS(task.validate(), std::invalid_argument);  // one option

  task.items[0].options = {{2}, {3}};
  task.items[0].gold = 2;
  CHECK_THROWS_AS(task.validate(), std::invalid_argument);  // gold outside

  task.items[0].gold = 0;
  task.items[0].options[1] = {99};
  CHECK_THROWS_AS(task.validate(), std::invalid_argument);  // out of vocab

  task.items[0].options[1] = {3};
  task.validate();
  task.n_shots = -1;
  CHECK_THROWS_AS(task.validate(), std::invalid_argument);
}
