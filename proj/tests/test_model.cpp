#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <vector>

#include "xmodal/corpus.hpp"
#include "xmodal/kernels.hpp"
#include "xmodal/model.hpp"
#include "xmodal/rng.hpp"

using namespace xmodal;

namespace {

Utterance text_utterance(std::vector<std::int32_t> tokens) {
  Utterance u;
  u.id = 1;
  u.tokens = std::move(tokens);
  std::uint32_t pos = 0;
  while (pos < u.tokens.size()) {
    const std::uint32_t len =
        std::min<std::uint32_t>(2, static_cast<std::uint32_t>(u.tokens.size()) - pos);
    u.words.push_back({pos, len});
    pos += len;
  }
  return u;
}

}  // namespace

TEST_CASE("reference model matches hand-computed smoothed counts") {
  Vocab vocab{3, 2};
  std::vector<Utterance> corpus{text_utterance({0, 1, 0, 2})};
  const auto t = TeacherModel::train(corpus, vocab, 1, 0.1);

  // unigram counts 2,1,1 over 4 tokens
  const auto uni = t.predict({});
  uni.validate();
  CHECK(uni.probs[0] == doctest::Approx(2.1 / 4.3).epsilon(1e-12));
  CHECK(uni.probs[1] == doctest::Approx(1.1 / 4.3).epsilon(1e-12));
  CHECK(uni.probs[2] == doctest::Approx(1.1 / 4.3).epsilon(1e-12));

  // after 0: successors 1 and 2, once each
  std::vector<std::int32_t> c0{0};
  const auto p0 = t.predict(c0);
  CHECK(p0.probs[0] == doctest::Approx(0.1 / 2.3).epsilon(1e-12));
  CHECK(p0.probs[1] == doctest::Approx(1.1 / 2.3).epsilon(1e-12));
  CHECK(p0.probs[2] == doctest::Approx(1.1 / 2.3).epsilon(1e-12));

  // 2 is never continued: falls back to the unigram row
  std::vector<std::int32_t> c2{2};
  const auto p2 = t.predict(c2);
  for (int w = 0; w < 3; ++w)
    CHECK(p2.probs[static_cast<std::size_t>(w)] ==
          doctest::Approx(uni.probs[static_cast<std::size_t>(w)]).epsilon(1e-12));

  // only the last `order` tokens matter
  std::vector<std::int32_t> clong{2, 1, 0};
  const auto plong = t.predict(clong);
  for (int w = 0; w < 3; ++w)
    CHECK(plong.probs[static_cast<std::size_t>(w)] ==
          doctest::Approx(p0.probs[static_cast<std::size_t>(w)]).epsilon(1e-12));

  std::vector<std::int32_t> bad{7};
  CHECK_THROWS(t.predict(bad));
}

TEST_CASE("reference model converges to the generating transitions") {
  // small vocab so every row is visited tens of thousands of times in 1e6
  // tokens; with the pinned seed the largest entry error is about 0.004
  Vocab vocab{8, 4};
  const auto specs = make_domain_specs(1, vocab, 21, {}, 0.7);
  const auto corpus = gen_corpus(specs, vocab, 4000, {250, 250}, Source::broad,
                                 WeightColumn::broad, 77);
  REQUIRE(total_tokens(corpus) == 1000000);

  const auto t = TeacherModel::train(corpus, vocab, 1, 1e-4);
  double max_dev = 0.0;
  for (std::int32_t prev = 0; prev < vocab.size; ++prev) {
    std::vector<std::int32_t> ctx{prev};
    const auto pred = t.predict(ctx);
    pred.validate();
    for (int w = 0; w < vocab.size; ++w) {
      const double truth =
          specs[0].transition[static_cast<std::size_t>(prev) *
                                  static_cast<std::size_t>(vocab.size) +
                              static_cast<std::size_t>(w)];
      max_dev = std::max(max_dev,
                         std::abs(pred.probs[static_cast<std::size_t>(w)] - truth));
    }
  }
  CHECK(max_dev < 0.01);
}

TEST_CASE("fresh zero-parameter predictor is uniform") {
  StudentConfig cfg{{16, 8}, 4, 3};
  StudentModel m(cfg);
  const auto u = text_utterance({0, 5, 11, 3, 7, 2});
  const auto ctx = text_only_context(u);
  for (std::size_t pos : {0u, 2u, 5u}) {
    const auto pred = m.predict(ctx, pos);
    pred.validate();
    for (double p : pred.probs)
      CHECK(p == doctest::Approx(1.0 / 16.0).epsilon(1e-12));
  }
  CHECK_THROWS(m.forward(ctx, 6));
}

TEST_CASE("forward pass matches a hand-worked example") {
  StudentConfig cfg{{3, 2}, 2, 2};
  StudentModel m(cfg);
  // E0=(0.1,0.2) E1=(-0.3,0.4) E2=(0.5,0.0); ft=(0.01,-0.02)
  const double te[] = {0.1, 0.2, -0.3, 0.4, 0.5, 0.0};
  std::copy(std::begin(te), std::end(te), m.token_embed().begin());
  m.flag(Modality::text)[0] = 0.01;
  m.flag(Modality::text)[1] = -0.02;
  const double w[] = {1.0, 0.0, 0.0, 1.0, 0.5, 0.5};
  std::copy(std::begin(w), std::end(w), m.output_weights().begin());
  const double b[] = {0.0, 0.1, -0.1};
  std::copy(std::begin(b), std::end(b), m.output_bias().begin());

  const auto u = text_utterance({0, 1});
  const auto ctx = text_only_context(u);

  // position 1: h = ((E0+ft)+(E1+ft))/2 = (-0.09, 0.28)
  const auto f = m.forward(ctx, 1);
  CHECK(f.window_begin == 0);
  CHECK(f.window_len == 2);
  CHECK(f.pooled[0] == doctest::Approx(-0.09).epsilon(1e-12));
  CHECK(f.pooled[1] == doctest::Approx(0.28).epsilon(1e-12));
  // logits = (-0.09, 0.38, -0.005), softmaxed
  const double z = std::exp(-0.09) + std::exp(0.38) + std::exp(-0.005);
  CHECK(f.probs[0] == doctest::Approx(std::exp(-0.09) / z).epsilon(1e-12));
  CHECK(f.probs[1] == doctest::Approx(std::exp(0.38) / z).epsilon(1e-12));
  CHECK(f.probs[2] == doctest::Approx(std::exp(-0.005) / z).epsilon(1e-12));
  CHECK(f.probs[1] == doctest::Approx(0.433754).epsilon(1e-5));

  // position 0: window holds only element 0, h = E0+ft = (0.11, 0.18)
  const auto f0 = m.forward(ctx, 0);
  CHECK(f0.window_len == 1);
  CHECK(f0.pooled[0] == doctest::Approx(0.11).epsilon(1e-12));
  CHECK(f0.pooled[1] == doctest::Approx(0.18).epsilon(1e-12));
}

TEST_CASE("tied modalities with a lossless encoding predict identically") {
  Vocab vocab{16, 16};
  const auto specs = make_domain_specs(2, vocab, 5, {});
  const auto corpus = gen_corpus(specs, vocab, 4, {120, 200}, Source::probe,
                                 WeightColumn::broad, 31);

  StudentConfig cfg{vocab, 8, 4};
  auto m = StudentModel::init_random(cfg, 42);
  m.tie_modalities();

  for (const auto& u : corpus) {
    const auto codes = acoustic_encode(u, vocab, 0.0, 3);
    REQUIRE(codes == u.tokens);  // bijective and noiseless
    const auto mixed = interleave(u, codes, kTextSpanWords,
                                  kAcousticSpanWords, u.id);
    const auto text = text_only_context(u);
    for (std::size_t pos = 0; pos + 1 < text.size(); ++pos) {
      const auto pm = m.forward(mixed, pos);
      const auto pt = m.forward(text, pos);
      // identical arithmetic on identical values: exact equality expected
      for (std::size_t wtok = 0; wtok < pm.probs.size(); ++wtok)
        CHECK(pm.probs[wtok] == pt.probs[wtok]);
      CHECK(kernels::kl_div(pt.probs.data(), pm.probs.data(),
                            pt.probs.size()) == 0.0);
    }
  }
}

TEST_CASE("analytic gradients agree with central differences") {
  Vocab vocab{12, 6};
  const auto specs = make_domain_specs(2, vocab, 9, {});
  StudentConfig cfg{vocab, 4, 3};

  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    auto m = StudentModel::init_random(cfg, 100 + trial, 0.3);
    const auto corpus = gen_corpus(specs, vocab, 1, {30, 40}, Source::broad,
                                   WeightColumn::broad, 200 + trial);
    const auto codes = acoustic_encode(corpus[0], vocab, 0.2, trial);
    const auto ctx = interleave(corpus[0], codes, {3, 6}, {2, 5}, trial);

    Rng rng(300 + trial);
    const std::size_t pos = 1 + rng.uniform_u64(ctx.size() - 1);
    std::vector<double> upstream(static_cast<std::size_t>(vocab.size));
    for (double& g : upstream) g = rng.normal(0.0, 1.0);

    const auto fwd = m.forward(ctx, pos);
    auto grad = m.make_grad();
    m.accumulate_grad(ctx, fwd, upstream, grad);

    // loss = upstream . logits; probs are enough to recover logit diffs but
    // simpler to recompute logits from pooled h directly
    auto loss_at = [&](StudentModel& model) {
      const auto f = model.forward(ctx, pos);
      const std::size_t v = static_cast<std::size_t>(vocab.size);
      const std::size_t d = static_cast<std::size_t>(cfg.d);
      std::vector<double> logits(v);
      kernels::ops().matvec(model.output_weights().data(), f.pooled.data(),
                            logits.data(), v, d);
      kernels::ops().axpy(1.0, model.output_bias().data(), logits.data(), v);
      double loss = 0.0;
      for (std::size_t i = 0; i < v; ++i) loss += upstream[i] * logits[i];
      return loss;
    };

    const double eps = 1e-5;
    double worst = 0.0;
    for (std::size_t i = 0; i < m.n_params(); ++i) {
      const double saved = m.params()[i];
      m.params()[i] = saved + eps;
      const double up = loss_at(m);
      m.params()[i] = saved - eps;
      const double dn = loss_at(m);
      m.params()[i] = saved;
      const double fd = (up - dn) / (2.0 * eps);
      const double denom = std::max(1.0, std::abs(fd));
      worst = std::max(worst, std::abs(grad.flat[i] - fd) / denom);
    }
    CHECK(worst < 1e-7);
  }
}

TEST_CASE("gradients only touch parameters inside the window") {
  Vocab vocab{10, 5};
  StudentConfig cfg{vocab, 4, 2};
  auto m = StudentModel::init_random(cfg, 1);

  const auto u = text_utterance({1, 2, 3, 4, 5, 6});
  const auto ctx = text_only_context(u);  // no acoustic elements anywhere
  const auto fwd = m.forward(ctx, 3);     // window = {2, 3} -> tokens 3, 4

  std::vector<double> upstream(10, 0.1);
  auto grad = m.make_grad();
  m.accumulate_grad(ctx, fwd, upstream, grad);

  const std::size_t d = 4;
  auto row_untouched = [&](std::span<const double> g, std::size_t row) {
    for (std::size_t i = 0; i < d; ++i)
      if (g[row * d + i] != 0.0) return false;
    return true;
  };

  StudentModel probe(cfg);  // reuse layout offsets via spans over grad.flat
  std::span<const double> gtok(grad.flat.data(), 10 * d);
  std::span<const double> gaco(grad.flat.data() + 10 * d, 5 * d);
  CHECK(!row_untouched(gtok, 3));
  CHECK(!row_untouched(gtok, 4));
  for (std::size_t row : {0u, 1u, 2u, 5u, 6u, 7u, 8u, 9u})
    CHECK(row_untouched(gtok, row));
  for (std::size_t row = 0; row < 5; ++row) CHECK(row_untouched(gaco, row));
  // acoustic flag untouched too
  for (std::size_t i = 0; i < d; ++i)
    CHECK(grad.flat[10 * d + 5 * d + d + i] == 0.0);
}

TEST_CASE("checkpoints restore parameters bit for bit") {
  StudentConfig cfg{{32, 8}, 6, 4};
  const auto m = StudentModel::init_random(cfg, 555, 0.2);
  Rng rng(777);
  rng.next_u64();
  const auto state = rng.state();

  const std::string path = "test_student_ckpt.json";
  save_student(path, m, state);
  const auto loaded = load_student(path);
  std::remove(path.c_str());

  CHECK(loaded.model.config().vocab.size == 32);
  CHECK(loaded.model.config().vocab.acoustic_codes == 8);
  CHECK(loaded.model.config().d == 6);
  CHECK(loaded.model.config().context_window == 4);
  CHECK(loaded.rng_state == state);

  REQUIRE(loaded.model.n_params() == m.n_params());
  CHECK(std::memcmp(loaded.model.params().data(), m.params().data(),
                    m.n_params() * sizeof(double)) == 0);
}

TEST_CASE("embedding-side parameter classification") {
  StudentConfig cfg{{8, 4}, 2, 2};
  StudentModel m(cfg);
  // layout: 8*2 + 4*2 + 2 + 2 = 28 embed-side params, then 8*2 + 8 head
  for (std::size_t i = 0; i < 28; ++i) CHECK(m.is_embed_param(i));
  for (std::size_t i = 28; i < m.n_params(); ++i) CHECK(!m.is_embed_param(i));
  CHECK(m.n_params() == 28 + 16 + 8);
}
