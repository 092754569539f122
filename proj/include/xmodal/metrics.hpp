#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "xmodal/corpus.hpp"
#include "xmodal/model.hpp"

// Held-out measurement of the two gap metrics: misalignment (the student
// disagreeing with itself across text and mixed conditioning) and
// forgetting (the student drifting from the reference model on text).

namespace xmodal {

// Matched pairs with frozen interleavings so repeated measurement of the
// same checkpoint is bit-identical and time series are comparable.
struct ProbeSet {
  std::vector<ContextPair> pairs;
  std::string split;
};

// Fresh held-out pairs: generation, encoding and interleaving seeds are all
// derived from `seed`, disjoint from any training stream seeded differently.
ProbeSet make_probe_set(const std::vector<DomainSpec>& specs,
                        const Vocab& vocab, std::size_t n_pairs,
                        std::pair<int, int> len_range, WeightColumn column,
                        double noise_rate, std::uint64_t seed,
                        std::string split);

struct DomainGap {
  double misalignment = 0.0;
  double forgetting = 0.0;
  std::size_t n_positions = 0;
};

struct GapReport {
  double misalignment = 0.0;  // nats per masked position
  double forgetting = 0.0;
  std::map<int, DomainGap> per_domain;
  std::size_t n_positions = 0;
};

struct MisalignmentResult {
  std::vector<double> per_position;  // one KL per masked position, in order
  double mean = 0.0;
};

// KL(text-conditioned ‖ mixed-conditioned) of the student's own predictions
// at every masked position. Zero exactly when the two conditionings see
// identical inputs (all-text contexts, or tied modalities under a lossless
// encoding).
MisalignmentResult measure_misalignment(const StudentModel& s,
                                        const ProbeSet& probe);

// Mean KL(reference ‖ student) with both conditioned on the pure text
// prefix, evaluated at the same masked positions.
double measure_forgetting(const StudentModel& s, const TeacherModel& t,
                          const ProbeSet& probe);

// Both metrics plus the per-domain breakdown; the position-weighted domain
// means reassemble the global values exactly.
GapReport measure_gap(const StudentModel& s, const TeacherModel& t,
                      const ProbeSet& probe);

// Per-cluster mean of the distillation loss (reference on text prefix vs
// student on mixed context), given an assignment of each probe pair to a
// cluster. Clusters with no probe pairs are flagged undefined, never zero.
struct ClusterMisalignment {
  std::vector<double> value;         // size n_clusters; meaningful iff defined
  std::vector<std::uint8_t> defined;
  std::vector<std::size_t> n_pairs;
};

ClusterMisalignment cluster_misalignment(const StudentModel& s,
                                         const TeacherModel& t,
                                         const ProbeSet& probe,
                                         std::span<const int> assignment,
                                         int n_clusters);

// Persistence: a single report as JSON, and per-checkpoint reports appended
// to a run-level JSONL keyed by tokens_seen.
void save_gap_report(const std::string& path, const GapReport& report);
GapReport load_gap_report(const std::string& path);
void append_gap_report(const std::string& path, std::size_t tokens_seen,
                       const GapReport& report);

}  // namespace xmodal
