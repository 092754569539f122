#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "xmodal/corpus.hpp"
#include "xmodal/objective.hpp"
#include "xmodal/rng.hpp"

// Targeted data selection: cluster the broad corpus, reweight cluster mass
// by measured per-cluster misalignment, and sample a budgeted active set
// for the second training stage.

namespace xmodal {

inline constexpr int kEmbedDim = 32;
inline constexpr int kDefaultClusters = 128;
// Probe utterances drawn per cluster when measuring cluster misalignment.
inline constexpr int kDefaultProbePerCluster = 32;

// Surrogate sentence embedding: the utterance's normalized token-unigram
// frequency vector pushed through a fixed seeded random projection to
// kEmbedDim. Identical token multisets embed identically. Throws on an
// empty utterance or out-of-range token ids.
std::vector<std::vector<double>> embed_items(std::span<const Utterance> utterances,
                                             const Vocab& vocab, std::uint64_t seed);

struct ClusterModel {
  int k = 0;
  std::vector<std::vector<double>> centroids;  // k x dim
  std::vector<int> assignment;                 // item index -> cluster id
  std::vector<int> sizes;                      // per-cluster counts
};

// Size-constrained k-means: k-means++ seeding, then Lloyd iterations whose
// assignment step is a greedy fill in decreasing cost-margin order with
// per-cluster capacity ceil(N/K), followed by a repair pass that lifts any
// cluster to floor(N/K). Every size therefore lands in
// [floor(N/K), ceil(N/K)], so max - min <= 1 always. Ties break on the
// lower item id, so the result is a pure function of (embeddings, k, seed).
// Requires N >= k >= 1 and equal embedding dimensions.
ClusterModel balanced_kmeans(std::span<const std::vector<double>> embeddings, int k,
                             std::uint64_t seed);

// Fraction of items per cluster; the sampling distribution of an
// unweighted pass over the clustered corpus.
std::vector<double> cluster_mass(const ClusterModel& model);

struct SelectionPlan {
  std::vector<double> p_web;   // cluster mass in the broad corpus
  std::vector<double> m_c;     // per-cluster misalignment after imputation
  double gamma = 0.0;
  std::vector<double> p_target;  // p_web reweighted by m_c^gamma, normalized
  std::vector<double> w_gamma;   // m_c^gamma / sum_c p_web(c) m_c(c)^gamma
  std::uint64_t budget_tokens = 0;
  // All usable m_c were zero while gamma > 0: reweighting is undefined, so
  // p_target fell back to p_web (and w_gamma to 1).
  bool degenerate_uniform = false;
};

// Builds the target distribution p_target(c) ∝ p_web(c) * m_c(c)^gamma.
// NaN entries of m_c mean "no probe data for this cluster" and are imputed
// with the median of the defined values. gamma = 0 returns p_target as a
// bitwise copy of p_web and unit weights, with no arithmetic applied.
SelectionPlan make_plan(std::span<const double> p_web, std::span<const double> m_c,
                        double gamma, std::uint64_t budget_tokens);

struct ManifestEntry {
  int cluster = 0;
  std::uint64_t utterance_id = 0;
  std::uint64_t tokens = 0;
};

struct ActiveManifest {
  std::vector<ManifestEntry> entries;
  std::uint64_t total_tokens = 0;
  std::uint64_t seed = 0;
  // Clusters whose pool ran out, after which draws in them fall back to
  // sampling with replacement.
  std::vector<int> exhausted;
};

// Repeatedly draws a cluster from p_target and an utterance uniformly
// without replacement inside it, until total_tokens reaches the budget, so
// the manifest overshoots by at most one utterance. Deterministic given
// (plan, clustering, corpus order, seed). Throws when a cluster with
// positive target mass has no items. Budget 0 yields an empty manifest.
ActiveManifest sample_active(const SelectionPlan& plan, const ClusterModel& clusters,
                             std::span<const Utterance> corpus, std::uint64_t seed);

// Training stream drawing each item from one of several component streams.
// Sources are non-owning; callers keep them alive for the stream's life.
// The default mixture is equal probability over the provided sources.
class MixStream final : public TrainStream {
 public:
  MixStream(std::vector<TrainStream*> sources, std::uint64_t seed);
  MixStream(std::vector<TrainStream*> sources, std::vector<double> mixture,
            std::uint64_t seed);

  ContextPair next() override;

 private:
  std::vector<TrainStream*> sources_;
  std::vector<double> mixture_;
  Rng rng_;
};

// UTF-8 JSON round-trips.
void save_cluster_model(const std::filesystem::path& path, const ClusterModel& model);
ClusterModel load_cluster_model(const std::filesystem::path& path);
void save_plan(const std::filesystem::path& path, const SelectionPlan& plan);
SelectionPlan load_plan(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const ActiveManifest& manifest);
ActiveManifest load_manifest(const std::filesystem::path& path);

}  // namespace xmodal
