#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "xmodal/rng.hpp"

// Synthetic multi-domain corpus with a text modality and a lossy surrogate
// acoustic modality, plus the interleaving that builds training contexts.

namespace xmodal {

struct Vocab {
  int size = 256;
  int acoustic_codes = 64;

  void validate() const;
};

// One order-1 Markov table per domain. Rows are conditional distributions
// over the next token; initial holds the start-token distribution.
struct DomainSpec {
  int domain_id = 0;
  std::vector<double> initial;     // size V
  std::vector<double> transition;  // V x V row-major
  double weight_broad = 0.0;
  double weight_narrow = 0.0;
};

// Validates row sums, weight ranges and the two weight-column sums.
void validate_domain_specs(const std::vector<DomainSpec>& specs,
                           const Vocab& vocab);

// Seeded generator for a family of distinguishable domains: domain d keeps
// most transition mass inside its own token block, with a small uniform
// floor everywhere. Domains listed in narrow_zero get weight_narrow = 0,
// mirroring the coverage gap between broad text and narrow speech corpora.
std::vector<DomainSpec> make_domain_specs(int n_domains, const Vocab& vocab,
                                          std::uint64_t seed,
                                          const std::vector<int>& narrow_zero,
                                          double concentration = 0.9,
                                          int targets_per_row = 4);

enum class Source : std::uint8_t { narrow, broad, probe };

const char* source_name(Source s);
Source source_from_name(const std::string& name);

struct WordSpan {
  std::uint32_t begin = 0;  // token index
  std::uint32_t len = 0;    // 1..4 tokens
};

struct Utterance {
  std::uint64_t id = 0;
  std::vector<std::int32_t> tokens;
  std::vector<WordSpan> words;  // contiguous cover of tokens
  int domain_id = 0;
  Source source = Source::broad;
};

// Which weight column gen_corpus samples domains from.
enum class WeightColumn { broad, narrow };

std::vector<Utterance> gen_corpus(const std::vector<DomainSpec>& specs,
                                  const Vocab& vocab, std::size_t n_utterances,
                                  std::pair<int, int> utterance_len_range,
                                  Source source, WeightColumn column,
                                  std::uint64_t seed,
                                  std::uint64_t first_id = 0);

// Fixed many-to-one projection token % acoustic_codes, then each code is
// independently resampled uniformly with probability noise_rate.
std::vector<std::int32_t> acoustic_encode(const Utterance& u,
                                          const Vocab& vocab,
                                          double noise_rate,
                                          std::uint64_t seed);

enum class Modality : std::uint8_t { text, acoustic };

struct Segment {
  Modality modality = Modality::text;
  std::uint32_t first_word = 0;
  std::uint32_t n_words = 0;
  std::uint32_t first_token = 0;  // == first element index
  std::uint32_t n_tokens = 0;
};

// Element i of the context corresponds to token i of the source utterance:
// a text element carries the token id, an acoustic element the code id.
// text_positions lists the i whose element i+1 exists and is text, i.e. the
// positions where next-token losses apply.
struct InterleavedContext {
  std::vector<Segment> segments;
  std::vector<std::uint8_t> is_text;       // per element
  std::vector<std::int32_t> element_ids;   // token id or code id per element
  std::vector<std::uint32_t> text_positions;

  std::size_t size() const { return element_ids.size(); }
};

struct SpanRange {
  int lo = 0;
  int hi = 0;
};

inline constexpr SpanRange kTextSpanWords{10, 30};
inline constexpr SpanRange kAcousticSpanWords{5, 15};

// Alternating random-length spans in words; starting modality uniform.
// Remainder policy: once fewer words remain than the current modality's
// span minimum, they are emitted as one final segment of that modality.
InterleavedContext interleave(const Utterance& u,
                              const std::vector<std::int32_t>& codes,
                              SpanRange text_span, SpanRange acoustic_span,
                              std::uint64_t seed);

// All-text view of the same utterance; used for text-conditioned metrics.
InterleavedContext text_only_context(const Utterance& u);

// An utterance together with one frozen interleaving of it. The unit that
// training batches and probe sets are made of.
struct ContextPair {
  Utterance utterance;
  InterleavedContext context;
};

// Persistence: JSONL, one object per utterance, with a sidecar meta file
// recording vocab and the (noise_rate, seed) that regenerate the codes.
struct CorpusMeta {
  Vocab vocab;
  double noise_rate = 0.0;
  std::uint64_t acoustic_seed = 0;
};

void save_corpus(const std::string& path, const std::vector<Utterance>& utts,
                 const CorpusMeta& meta);

struct LoadedCorpus {
  std::vector<Utterance> utterances;
  CorpusMeta meta;
};

LoadedCorpus load_corpus(const std::string& path);

std::size_t total_tokens(const std::vector<Utterance>& utts);

}  // namespace xmodal
