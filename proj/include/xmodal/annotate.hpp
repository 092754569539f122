#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "xmodal/corpus.hpp"
#include "xmodal/select.hpp"

// Cluster annotation client: an Explain phase that asks a chat endpoint to
// describe each cluster from prototypical members, and a Judge phase that
// validates the resulting catalog by classifying holdout texts. All network
// behavior sits behind an injectable client so the module tests offline.

namespace xmodal {

class ChatClient {
 public:
  virtual ~ChatClient() = default;
  // One completion turn; `system` may be empty. Throws on transport errors.
  virtual std::string complete(const std::string& system, const std::string& user) = 0;
};

// Replays canned responses in order and records every prompt it saw.
class ScriptedChatClient final : public ChatClient {
 public:
  explicit ScriptedChatClient(std::vector<std::string> responses)
      : responses_(std::move(responses)) {}

  std::string complete(const std::string& system, const std::string& user) override;

  struct Call {
    std::string system;
    std::string user;
  };
  const std::vector<Call>& calls() const { return calls_; }

 private:
  std::vector<std::string> responses_;
  std::vector<Call> calls_;
};

// Wraps an arbitrary function; for mocks that need to read the payload.
class FunctionChatClient final : public ChatClient {
 public:
  using Fn = std::function<std::string(const std::string&, const std::string&)>;
  explicit FunctionChatClient(Fn fn) : fn_(std::move(fn)) {}

  std::string complete(const std::string& system, const std::string& user) override {
    ++n_calls_;
    return fn_(system, user);
  }
  std::size_t n_calls() const { return n_calls_; }

 private:
  Fn fn_;
  std::size_t n_calls_ = 0;
};

// Minimal chat-completions HTTP client (POST url, bearer auth, first choice).
struct HttpChatConfig {
  std::string url;    // e.g. http://host:port/v1/chat/completions
  std::string model;
  std::string api_key;  // empty -> no Authorization header
  int timeout_s = 60;
};

class HttpChatClient final : public ChatClient {
 public:
  explicit HttpChatClient(HttpChatConfig cfg);
  std::string complete(const std::string& system, const std::string& user) override;

 private:
  HttpChatConfig cfg_;
};

// Reads XMODAL_CHAT_URL, XMODAL_CHAT_MODEL, XMODAL_CHAT_API_KEY.
HttpChatConfig http_config_from_env();

struct AnnotateConfig {
  int k_positives = 8;
  int n_negatives = 8;
  int m_neighbor_clusters = 3;
  int retries = 3;  // extra attempts after the first, per request
  std::string distance_metric = "cosine";  // or "l2"
};

struct ClusterAnnotation {
  int cluster_id = 0;
  std::string short_title;
  std::string label;
  std::string inclusion_criteria;
  std::string exclusion_criteria;
  double confidence = 0.0;
  bool failed = false;  // malformed responses exhausted the retries
};

struct ClusterExample {
  std::uint64_t id = 0;
  int from_cluster = 0;
  double distance = 0.0;
  std::string text;
};

// Payload builders; key order matches the documented prompt structures so
// serialized payloads are byte-stable.
std::string explain_system_prompt();
std::string build_explain_payload(int cluster_id, const std::string& metric,
                                  std::span<const ClusterExample> positives,
                                  std::span<const ClusterExample> negatives);

struct CatalogEntry {
  int id = 0;
  std::string title;
  std::string description;
};

std::string build_judge_payload(std::span<const CatalogEntry> catalog,
                                const std::string& sample_text);

// Catalog rows for the judge phase: id from the cluster, title from
// short_title, description from label. Failed annotations are skipped.
std::vector<CatalogEntry> catalog_from_annotations(
    const std::vector<ClusterAnnotation>& annotations);

// Tokens rendered as space-separated ids; the surrogate "text" shown to the
// annotator.
std::string render_tokens(std::span<const std::int32_t> tokens);

// Distance of `x` to `centroid` under cfg.distance_metric.
double annotate_distance(std::span<const double> x, std::span<const double> centroid,
                         const std::string& metric);

// Explain one cluster: the k members closest to the centroid become the
// positives (ascending distance), and the n members of the M nearest other
// clusters closest to this centroid become the negatives. Malformed
// responses are retried; exhausting the retries yields failed=true.
ClusterAnnotation explain_cluster(const ClusterModel& clusters,
                                  const std::vector<std::vector<double>>& embeddings,
                                  const std::vector<Utterance>& items, int cluster_id,
                                  ChatClient& client, const AnnotateConfig& cfg = {});

struct HoldoutSample {
  std::uint64_t id = 0;
  std::string text;
  int true_cluster = 0;
};

struct JudgeVerdict {
  std::uint64_t sample_id = 0;
  int predicted_cluster = -1;
  int true_cluster = 0;
  bool in_catalog = false;  // false predictions count as incorrect, flagged
};

struct JudgeOutcome {
  std::vector<JudgeVerdict> verdicts;  // resumed first, then newly judged
  double overall_accuracy = 0.0;
  std::map<int, double> per_cluster_accuracy;  // keyed by true cluster
  std::size_t requests_issued = 0;             // client calls this run
};

// Judge every sample not already present in the resume file (append-only
// JSONL, one verdict per line; created if missing). A response that stays
// malformed after the retries, or that names an id outside the catalog,
// becomes an incorrect flagged verdict and the run continues.
JudgeOutcome judge_samples(std::span<const CatalogEntry> catalog,
                           std::span<const HoldoutSample> samples,
                           ChatClient& client, const std::string& resume_path,
                           const AnnotateConfig& cfg = {});

// Annotation catalog persistence (JSON array).
void save_annotations(const std::string& path,
                      const std::vector<ClusterAnnotation>& annotations);
std::vector<ClusterAnnotation> load_annotations(const std::string& path);

}  // namespace xmodal
