#include "xmodal/metrics.hpp"

#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "xmodal/kernels.hpp"

namespace xmodal {

using nlohmann::json;

ProbeSet make_probe_set(const std::vector<DomainSpec>& specs,
                        const Vocab& vocab, std::size_t n_pairs,
                        std::pair<int, int> len_range, WeightColumn column,
                        double noise_rate, std::uint64_t seed,
                        std::string split) {
  const auto utts =
      gen_corpus(specs, vocab, n_pairs, len_range, Source::probe, column,
                 derive_seed(seed, "probe/gen"));
  ProbeSet probe;
  probe.split = std::move(split);
  probe.pairs.reserve(utts.size());
  const std::uint64_t code_seed = derive_seed(seed, "probe/codes");
  for (const auto& u : utts) {
    const auto codes = acoustic_encode(u, vocab, noise_rate, code_seed);
    ContextPair pair;
    pair.context =
        interleave(u, codes, kTextSpanWords, kAcousticSpanWords,
                   derive_seed(seed, "probe/ctx/" + std::to_string(u.id)));
    pair.utterance = u;
    probe.pairs.push_back(std::move(pair));
  }
  return probe;
}

MisalignmentResult measure_misalignment(const StudentModel& s,
                                        const ProbeSet& probe) {
  if (probe.pairs.empty()) throw std::invalid_argument("empty probe set");
  MisalignmentResult res;
  double sum = 0.0;
  for (const ContextPair& pair : probe.pairs) {
    const auto text = text_only_context(pair.utterance);
    for (std::uint32_t i : pair.context.text_positions) {
      const auto pt = s.forward(text, i);
      const auto pm = s.forward(pair.context, i);
      const double kl =
          kernels::kl_div(pt.probs.data(), pm.probs.data(), pt.probs.size());
      res.per_position.push_back(kl);
      sum += kl;
    }
  }
  if (!res.per_position.empty())
    res.mean = sum / static_cast<double>(res.per_position.size());
  return res;
}

double measure_forgetting(const StudentModel& s, const TeacherModel& t,
                          const ProbeSet& probe) {
  if (probe.pairs.empty()) throw std::invalid_argument("empty probe set");
  if (t.vocab().size != s.config().vocab.size)
    throw std::invalid_argument("reference and student vocabularies differ");
  const std::size_t v = static_cast<std::size_t>(t.vocab().size);
  std::vector<double> q(v);
  double sum = 0.0;
  std::size_t n = 0;
  for (const ContextPair& pair : probe.pairs) {
    const auto text = text_only_context(pair.utterance);
    for (std::uint32_t i : pair.context.text_positions) {
      t.predict_into(std::span<const std::int32_t>(
                         pair.utterance.tokens.data(), i + 1),
                     q);
      const auto pt = s.forward(text, i);
      sum += kernels::kl_div(q.data(), pt.probs.data(), v);
      ++n;
    }
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

GapReport measure_gap(const StudentModel& s, const TeacherModel& t,
                      const ProbeSet& probe) {
  if (probe.pairs.empty()) throw std::invalid_argument("empty probe set");
  if (t.vocab().size != s.config().vocab.size)
    throw std::invalid_argument("reference and student vocabularies differ");
  const std::size_t v = static_cast<std::size_t>(t.vocab().size);
  std::vector<double> q(v);

  struct Sums {
    double m = 0.0;
    double f = 0.0;
    std::size_t n = 0;
  };
  std::map<int, Sums> by_domain;
  Sums global;

  for (const ContextPair& pair : probe.pairs) {
    const auto text = text_only_context(pair.utterance);
    Sums& dom = by_domain[pair.utterance.domain_id];
    for (std::uint32_t i : pair.context.text_positions) {
      const auto pt = s.forward(text, i);
      const auto pm = s.forward(pair.context, i);
      const double m =
          kernels::kl_div(pt.probs.data(), pm.probs.data(), v);
      t.predict_into(std::span<const std::int32_t>(
                         pair.utterance.tokens.data(), i + 1),
                     q);
      const double f = kernels::kl_div(q.data(), pt.probs.data(), v);
      dom.m += m;
      dom.f += f;
      ++dom.n;
      global.m += m;
      global.f += f;
      ++global.n;
    }
  }

  GapReport report;
  report.n_positions = global.n;
  if (global.n > 0) {
    report.misalignment = global.m / static_cast<double>(global.n);
    report.forgetting = global.f / static_cast<double>(global.n);
  }
  for (const auto& [domain, sums] : by_domain) {
    DomainGap gap;
    gap.n_positions = sums.n;
    if (sums.n > 0) {
      gap.misalignment = sums.m / static_cast<double>(sums.n);
      gap.forgetting = sums.f / static_cast<double>(sums.n);
    }
    report.per_domain.emplace(domain, gap);
  }
  return report;
}

ClusterMisalignment cluster_misalignment(const StudentModel& s,
                                         const TeacherModel& t,
                                         const ProbeSet& probe,
                                         std::span<const int> assignment,
                                         int n_clusters) {
  if (probe.pairs.empty()) throw std::invalid_argument("empty probe set");
  if (assignment.size() != probe.pairs.size())
    throw std::invalid_argument("assignment length != probe size");
  if (n_clusters < 1) throw std::invalid_argument("n_clusters must be >= 1");
  if (t.vocab().size != s.config().vocab.size)
    throw std::invalid_argument("reference and student vocabularies differ");
  const std::size_t v = static_cast<std::size_t>(t.vocab().size);

  ClusterMisalignment out;
  const std::size_t k = static_cast<std::size_t>(n_clusters);
  out.value.assign(k, 0.0);
  out.defined.assign(k, 0);
  out.n_pairs.assign(k, 0);
  std::vector<double> sums(k, 0.0);
  std::vector<std::size_t> positions(k, 0);
  std::vector<double> q(v);

  for (std::size_t p = 0; p < probe.pairs.size(); ++p) {
    const int c = assignment[p];
    if (c < 0 || c >= n_clusters)
      throw std::invalid_argument("cluster id out of range");
    const ContextPair& pair = probe.pairs[p];
    ++out.n_pairs[static_cast<std::size_t>(c)];
    for (std::uint32_t i : pair.context.text_positions) {
      const auto pm = s.forward(pair.context, i);
      t.predict_into(std::span<const std::int32_t>(
                         pair.utterance.tokens.data(), i + 1),
                     q);
      sums[static_cast<std::size_t>(c)] +=
          kernels::kl_div(q.data(), pm.probs.data(), v);
      ++positions[static_cast<std::size_t>(c)];
    }
  }

  for (std::size_t c = 0; c < k; ++c) {
    if (positions[c] > 0) {
      out.defined[c] = 1;
      out.value[c] = sums[c] / static_cast<double>(positions[c]);
    }
  }
  return out;
}

namespace {

json gap_to_json(const GapReport& report) {
  json per;
  for (const auto& [domain, gap] : report.per_domain)
    per[std::to_string(domain)] = {{"misalignment", gap.misalignment},
                                   {"forgetting", gap.forgetting},
                                   {"n_positions", gap.n_positions}};
  return json{{"misalignment", report.misalignment},
              {"forgetting", report.forgetting},
              {"n_positions", report.n_positions},
              {"per_domain", per.is_null() ? json::object() : per}};
}

GapReport gap_from_json(const json& j) {
  GapReport report;
  report.misalignment = j.at("misalignment").get<double>();
  report.forgetting = j.at("forgetting").get<double>();
  report.n_positions = j.at("n_positions").get<std::size_t>();
  for (const auto& [key, val] : j.at("per_domain").items()) {
    DomainGap gap;
    gap.misalignment = val.at("misalignment").get<double>();
    gap.forgetting = val.at("forgetting").get<double>();
    gap.n_positions = val.at("n_positions").get<std::size_t>();
    report.per_domain.emplace(std::stoi(key), gap);
  }
  return report;
}

}  // namespace

void save_gap_report(const std::string& path, const GapReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << gap_to_json(report).dump(2) << '\n';
}

GapReport load_gap_report(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return gap_from_json(json::parse(in));
}

void append_gap_report(const std::string& path, std::size_t tokens_seen,
                       const GapReport& report) {
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw std::runtime_error("cannot open " + path + " for append");
  json j = gap_to_json(report);
  j["tokens_seen"] = tokens_seen;
  out << j.dump() << '\n';
}

}  // namespace xmodal
