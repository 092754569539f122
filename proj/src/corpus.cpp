#include "xmodal/corpus.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace xmodal {

using nlohmann::json;

void Vocab::validate() const {
  if (size < 2) throw std::invalid_argument("vocab size must be >= 2");
  if (acoustic_codes < 2)
    throw std::invalid_argument("acoustic_codes must be >= 2");
  if (acoustic_codes > size)
    throw std::invalid_argument("acoustic_codes must be <= vocab size");
}

void validate_domain_specs(const std::vector<DomainSpec>& specs,
                           const Vocab& vocab) {
  if (specs.empty()) throw std::invalid_argument("empty domain spec list");
  const std::size_t v = static_cast<std::size_t>(vocab.size);
  double broad = 0.0;
  double narrow = 0.0;
  for (const auto& s : specs) {
    if (s.initial.size() != v || s.transition.size() != v * v)
      throw std::invalid_argument("domain table has wrong dimensions");
    if (s.weight_broad < 0.0 || s.weight_broad > 1.0 || s.weight_narrow < 0.0 ||
        s.weight_narrow > 1.0)
      throw std::invalid_argument("domain weights must lie in [0,1]");
    broad += s.weight_broad;
    narrow += s.weight_narrow;
    double init_sum = 0.0;
    for (double p : s.initial) init_sum += p;
    if (std::abs(init_sum - 1.0) > 1e-9)
      throw std::invalid_argument("initial distribution not normalized");
    for (std::size_t r = 0; r < v; ++r) {
      double row = 0.0;
      for (std::size_t c = 0; c < v; ++c) row += s.transition[r * v + c];
      if (std::abs(row - 1.0) > 1e-9)
        throw std::invalid_argument("transition row not normalized");
    }
  }
  if (std::abs(broad - 1.0) > 1e-9 || std::abs(narrow - 1.0) > 1e-9)
    throw std::invalid_argument("domain weight columns must each sum to 1");
}

std::vector<DomainSpec> make_domain_specs(int n_domains, const Vocab& vocab,
                                          std::uint64_t seed,
                                          const std::vector<int>& narrow_zero,
                                          double concentration,
                                          int targets_per_row) {
  if (n_domains < 1) throw std::invalid_argument("need at least one domain");
  vocab.validate();
  const int v = vocab.size;
  const int block = v / n_domains;
  if (block < 1) throw std::invalid_argument("more domains than tokens");

  std::vector<DomainSpec> specs(static_cast<std::size_t>(n_domains));
  int n_narrow = 0;
  for (int d = 0; d < n_domains; ++d) {
    bool zero = false;
    for (int z : narrow_zero) zero |= (z == d);
    if (!zero) ++n_narrow;
  }
  if (n_narrow == 0)
    throw std::invalid_argument("all domains excluded from the narrow corpus");

  for (int d = 0; d < n_domains; ++d) {
    Rng rng(derive_seed(seed, "domain/" + std::to_string(d)));
    DomainSpec& s = specs[static_cast<std::size_t>(d)];
    s.domain_id = d;
    const int lo = d * block;
    const int hi = (d + 1 == n_domains) ? v : lo + block;

    s.initial.assign(static_cast<std::size_t>(v), 0.0);
    for (int t = lo; t < hi; ++t)
      s.initial[static_cast<std::size_t>(t)] = 1.0 / (hi - lo);

    s.transition.assign(static_cast<std::size_t>(v) * v, 0.0);
    const double floor_mass = 1.0 - concentration;
    for (int r = 0; r < v; ++r) {
      double* row = s.transition.data() + static_cast<std::size_t>(r) * v;
      for (int c = 0; c < v; ++c) row[c] = floor_mass / v;
      // concentrated mass on a few in-block targets, drawn per (domain, row)
      std::vector<int> targets;
      targets.reserve(static_cast<std::size_t>(targets_per_row));
      while (static_cast<int>(targets.size()) < targets_per_row) {
        const int t = lo + static_cast<int>(rng.uniform_u64(
                               static_cast<std::uint64_t>(hi - lo)));
        bool dup = false;
        for (int u : targets) dup |= (u == t);
        if (!dup) targets.push_back(t);
      }
      // uneven split so rows have a clear argmax
      double remaining = concentration;
      for (std::size_t k = 0; k < targets.size(); ++k) {
        const bool last = (k + 1 == targets.size());
        const double share = last ? remaining : remaining * 0.6;
        row[targets[k]] += share;
        remaining -= share;
      }
    }

    bool zero = false;
    for (int z : narrow_zero) zero |= (z == d);
    s.weight_broad = 1.0 / n_domains;
    s.weight_narrow = zero ? 0.0 : 1.0 / n_narrow;
  }
  return specs;
}

const char* source_name(Source s) {
  switch (s) {
    case Source::narrow: return "narrow";
    case Source::broad: return "broad";
    case Source::probe: return "probe";
  }
  return "broad";
}

Source source_from_name(const std::string& name) {
  if (name == "narrow") return Source::narrow;
  if (name == "broad") return Source::broad;
  if (name == "probe") return Source::probe;
  throw std::invalid_argument("unknown source tag: " + name);
}

namespace {

std::vector<WordSpan> draw_word_spans(std::size_t n_tokens, Rng& rng) {
  std::vector<WordSpan> words;
  std::uint32_t pos = 0;
  while (pos < n_tokens) {
    const std::uint32_t remaining = static_cast<std::uint32_t>(n_tokens) - pos;
    std::uint32_t len =
        static_cast<std::uint32_t>(1 + rng.uniform_u64(4));  // 1..4
    if (len > remaining) len = remaining;
    words.push_back({pos, len});
    pos += len;
  }
  return words;
}

}  // namespace

std::vector<Utterance> gen_corpus(const std::vector<DomainSpec>& specs,
                                  const Vocab& vocab, std::size_t n_utterances,
                                  std::pair<int, int> utterance_len_range,
                                  Source source, WeightColumn column,
                                  std::uint64_t seed, std::uint64_t first_id) {
  validate_domain_specs(specs, vocab);
  if (n_utterances < 1)
    throw std::invalid_argument("n_utterances must be >= 1");
  const auto [len_lo, len_hi] = utterance_len_range;
  if (len_lo < 16 || len_hi > 4096 || len_lo > len_hi)
    throw std::invalid_argument("utterance length range must lie in [16,4096]");

  const int v = vocab.size;
  std::vector<double> weights(specs.size());
  for (std::size_t d = 0; d < specs.size(); ++d)
    weights[d] = column == WeightColumn::broad ? specs[d].weight_broad
                                               : specs[d].weight_narrow;

  Rng rng(seed);
  std::vector<Utterance> out;
  out.reserve(n_utterances);
  for (std::size_t i = 0; i < n_utterances; ++i) {
    Utterance u;
    u.id = first_id + i;
    u.source = source;
    const std::size_t d = rng.categorical(weights);
    u.domain_id = specs[d].domain_id;
    const int len =
        static_cast<int>(rng.uniform_int(len_lo, len_hi));
    u.tokens.resize(static_cast<std::size_t>(len));
    const DomainSpec& spec = specs[d];
    int prev = static_cast<int>(rng.categorical(spec.initial));
    u.tokens[0] = prev;
    for (int t = 1; t < len; ++t) {
      const double* row =
          spec.transition.data() + static_cast<std::size_t>(prev) * v;
      prev = static_cast<int>(
          rng.categorical(std::span<const double>(row, static_cast<std::size_t>(v))));
      u.tokens[static_cast<std::size_t>(t)] = prev;
    }
    u.words = draw_word_spans(u.tokens.size(), rng);
    out.push_back(std::move(u));
  }
  return out;
}

std::vector<std::int32_t> acoustic_encode(const Utterance& u,
                                          const Vocab& vocab,
                                          double noise_rate,
                                          std::uint64_t seed) {
  vocab.validate();
  if (noise_rate < 0.0 || noise_rate >= 0.5)
    throw std::invalid_argument("noise_rate must lie in [0, 0.5)");
  const int a = vocab.acoustic_codes;
  Rng rng(derive_seed(seed, "acoustic/" + std::to_string(u.id)));
  std::vector<std::int32_t> codes(u.tokens.size());
  for (std::size_t i = 0; i < u.tokens.size(); ++i) {
    std::int32_t code = u.tokens[i] % a;
    if (noise_rate > 0.0 && rng.next_double() < noise_rate)
      code = static_cast<std::int32_t>(rng.uniform_u64(static_cast<std::uint64_t>(a)));
    codes[i] = code;
  }
  return codes;
}

InterleavedContext interleave(const Utterance& u,
                              const std::vector<std::int32_t>& codes,
                              SpanRange text_span, SpanRange acoustic_span,
                              std::uint64_t seed) {
  if (u.words.empty()) throw std::invalid_argument("utterance has no words");
  if (codes.size() != u.tokens.size())
    throw std::invalid_argument("code sequence length mismatch");

  Rng rng(seed);
  InterleavedContext ctx;
  ctx.is_text.resize(u.tokens.size());
  ctx.element_ids.resize(u.tokens.size());

  Modality mod = rng.uniform_u64(2) == 0 ? Modality::text : Modality::acoustic;
  const std::uint32_t n_words = static_cast<std::uint32_t>(u.words.size());
  std::uint32_t word = 0;
  while (word < n_words) {
    const SpanRange& range =
        mod == Modality::text ? text_span : acoustic_span;
    const std::uint32_t remaining = n_words - word;
    std::uint32_t take;
    if (remaining < static_cast<std::uint32_t>(range.lo)) {
      take = remaining;  // final remainder segment
    } else {
      const std::uint32_t drawn = static_cast<std::uint32_t>(
          rng.uniform_int(range.lo, range.hi));
      take = drawn < remaining ? drawn : remaining;
    }
    Segment seg;
    seg.modality = mod;
    seg.first_word = word;
    seg.n_words = take;
    seg.first_token = u.words[word].begin;
    const WordSpan& last = u.words[word + take - 1];
    seg.n_tokens = last.begin + last.len - seg.first_token;
    for (std::uint32_t t = seg.first_token; t < seg.first_token + seg.n_tokens;
         ++t) {
      const bool is_text = mod == Modality::text;
      ctx.is_text[t] = is_text ? 1 : 0;
      ctx.element_ids[t] = is_text ? u.tokens[t] : codes[t];
    }
    ctx.segments.push_back(seg);
    word += take;
    mod = mod == Modality::text ? Modality::acoustic : Modality::text;
  }

  for (std::uint32_t i = 0; i + 1 < ctx.size(); ++i)
    if (ctx.is_text[i + 1]) ctx.text_positions.push_back(i);
  return ctx;
}

InterleavedContext text_only_context(const Utterance& u) {
  InterleavedContext ctx;
  const std::uint32_t n = static_cast<std::uint32_t>(u.tokens.size());
  ctx.is_text.assign(n, 1);
  ctx.element_ids.assign(u.tokens.begin(), u.tokens.end());
  Segment seg;
  seg.modality = Modality::text;
  seg.first_word = 0;
  seg.n_words = static_cast<std::uint32_t>(u.words.size());
  seg.first_token = 0;
  seg.n_tokens = n;
  ctx.segments.push_back(seg);
  for (std::uint32_t i = 0; i + 1 < n; ++i) ctx.text_positions.push_back(i);
  return ctx;
}

void save_corpus(const std::string& path, const std::vector<Utterance>& utts,
                 const CorpusMeta& meta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  for (const auto& u : utts) {
    json spans = json::array();
    for (const auto& w : u.words) spans.push_back({w.begin, w.len});
    json j{{"id", u.id},
           {"domain_id", u.domain_id},
           {"source", source_name(u.source)},
           {"tokens", u.tokens},
           {"word_spans", spans}};
    out << j.dump() << '\n';
  }
  json m{{"vocab", {{"size", meta.vocab.size},
                    {"acoustic_codes", meta.vocab.acoustic_codes}}},
         {"noise_rate", meta.noise_rate},
         {"acoustic_seed", meta.acoustic_seed}};
  std::ofstream mout(path + ".meta.json", std::ios::binary);
  if (!mout) throw std::runtime_error("cannot write corpus meta for " + path);
  mout << m.dump(2) << '\n';
}

LoadedCorpus load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  LoadedCorpus lc;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    Utterance u;
    u.id = j.at("id").get<std::uint64_t>();
    u.domain_id = j.at("domain_id").get<int>();
    u.source = source_from_name(j.at("source").get<std::string>());
    u.tokens = j.at("tokens").get<std::vector<std::int32_t>>();
    for (const auto& s : j.at("word_spans"))
      u.words.push_back({s.at(0).get<std::uint32_t>(), s.at(1).get<std::uint32_t>()});
    lc.utterances.push_back(std::move(u));
  }
  std::ifstream min(path + ".meta.json", std::ios::binary);
  if (!min) throw std::runtime_error("missing corpus meta for " + path);
  json m = json::parse(min);
  lc.meta.vocab.size = m.at("vocab").at("size").get<int>();
  lc.meta.vocab.acoustic_codes = m.at("vocab").at("acoustic_codes").get<int>();
  lc.meta.noise_rate = m.at("noise_rate").get<double>();
  lc.meta.acoustic_seed = m.at("acoustic_seed").get<std::uint64_t>();
  return lc;
}

std::size_t total_tokens(const std::vector<Utterance>& utts) {
  std::size_t n = 0;
  for (const auto& u : utts) n += u.tokens.size();
  return n;
}

}  // namespace xmodal
