#include "xmodal/annotate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_set>
#include <utility>

#include "httplib.h"
#include "json.hpp"
#include "xmodal/kernels.hpp"

namespace xmodal {

// ordered_json keeps insertion order, so dumped payloads follow the
// documented field order byte for byte.
using ojson = nlohmann::ordered_json;
using njson = nlohmann::json;

// ---------------------------------------------------------------------------
// Clients

std::string ScriptedChatClient::complete(const std::string& system,
                                         const std::string& user) {
  if (calls_.size() >= responses_.size()) {
    throw std::runtime_error("scripted chat client exhausted after " +
                             std::to_string(responses_.size()) + " responses");
  }
  calls_.push_back(Call{system, user});
  return responses_[calls_.size() - 1];
}

HttpChatClient::HttpChatClient(HttpChatConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.url.empty()) throw std::invalid_argument("chat endpoint url is empty");
}

namespace {

// "http://host:port/some/path" -> base "http://host:port", path "/some/path".
void split_url(const std::string& url, std::string& base, std::string& path) {
  auto scheme_end = url.find("://");
  std::size_t host_begin = scheme_end == std::string::npos ? 0 : scheme_end + 3;
  auto slash = url.find('/', host_begin);
  if (slash == std::string::npos) {
    base = url;
    path = "/";
  } else {
    base = url.substr(0, slash);
    path = url.substr(slash);
  }
}

}  // namespace

std::string HttpChatClient::complete(const std::string& system,
                                     const std::string& user) {
  std::string base, path;
  split_url(cfg_.url, base, path);

  httplib::Client cli(base);
  cli.set_connection_timeout(cfg_.timeout_s, 0);
  cli.set_read_timeout(cfg_.timeout_s, 0);
  cli.set_write_timeout(cfg_.timeout_s, 0);

  ojson body;
  body["model"] = cfg_.model;
  body["messages"] = ojson::array();
  if (!system.empty()) {
    body["messages"].push_back({{"role", "system"}, {"content", system}});
  }
  body["messages"].push_back({{"role", "user"}, {"content", user}});

  httplib::Headers headers;
  if (!cfg_.api_key.empty()) {
    headers.emplace("Authorization", "Bearer " + cfg_.api_key);
  }

  auto res = cli.Post(path, headers, body.dump(), "application/json");
  if (!res) {
    throw std::runtime_error("chat request to " + cfg_.url + " failed: " +
                             httplib::to_string(res.error()));
  }
  if (res->status != 200) {
    throw std::runtime_error("chat endpoint returned status " +
                             std::to_string(res->status));
  }
  njson reply = njson::parse(res->body, nullptr, false);
  if (reply.is_discarded() || !reply.contains("choices") ||
      !reply["choices"].is_array() || reply["choices"].empty()) {
    throw std::runtime_error("chat endpoint returned an unrecognized body");
  }
  const njson& choice = reply["choices"][0];
  if (!choice.contains("message") || !choice["message"].contains("content") ||
      !choice["message"]["content"].is_string()) {
    throw std::runtime_error("chat endpoint reply lacks message content");
  }
  return choice["message"]["content"].get<std::string>();
}

HttpChatConfig http_config_from_env() {
  HttpChatConfig cfg;
  if (const char* v = std::getenv("XMODAL_CHAT_URL")) cfg.url = v;
  if (const char* v = std::getenv("XMODAL_CHAT_MODEL")) cfg.model = v;
  if (const char* v = std::getenv("XMODAL_CHAT_API_KEY")) cfg.api_key = v;
  return cfg;
}

// ---------------------------------------------------------------------------
// Payloads

std::string explain_system_prompt() {
  return "You are an expert at explaining clusters of short texts.\n"
         "Return STRICT JSON with fields:\n"
         "  short_title, label, inclusion_criteria, exclusion_criteria, "
         "confidence";
}

std::string build_explain_payload(int cluster_id, const std::string& metric,
                                  std::span<const ClusterExample> positives,
                                  std::span<const ClusterExample> negatives) {
  ojson j;
  j["cluster_id"] = cluster_id;
  j["distance_metric"] = metric;
  ojson pos = ojson::array();
  for (const auto& p : positives) {
    ojson e;
    e["id"] = p.id;
    e["distance"] = p.distance;
    e["text"] = p.text;
    pos.push_back(std::move(e));
  }
  j["positives"] = std::move(pos);
  ojson neg = ojson::array();
  for (const auto& n : negatives) {
    ojson e;
    e["id"] = n.id;
    e["from_cluster"] = n.from_cluster;
    e["distance"] = n.distance;
    e["text"] = n.text;
    neg.push_back(std::move(e));
  }
  j["negatives"] = std::move(neg);
  j["instructions"] =
      "Name and describe ONLY the positive cluster concept. Use distances as "
      "prototypicality cues.";
  return j.dump();
}

std::string build_judge_payload(std::span<const CatalogEntry> catalog,
                                const std::string& sample_text) {
  ojson j;
  ojson cats = ojson::array();
  for (const auto& c : catalog) {
    ojson e;
    e["id"] = c.id;
    e["title"] = c.title;
    e["description"] = c.description;
    cats.push_back(std::move(e));
  }
  j["categories"] = std::move(cats);
  j["sample"] = ojson{{"text", sample_text}};
  j["instructions"] = "Pick exactly one best-matching category id.";
  return j.dump();
}

std::string render_tokens(std::span<const std::int32_t> tokens) {
  std::string out;
  char buf[16];
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out += ' ';
    std::snprintf(buf, sizeof(buf), "%d", tokens[i]);
    out += buf;
  }
  return out;
}

std::vector<CatalogEntry> catalog_from_annotations(
    const std::vector<ClusterAnnotation>& annotations) {
  std::vector<CatalogEntry> catalog;
  for (const auto& a : annotations) {
    if (a.failed) continue;
    catalog.push_back(CatalogEntry{a.cluster_id, a.short_title, a.label});
  }
  return catalog;
}

// ---------------------------------------------------------------------------
// Distances

double annotate_distance(std::span<const double> x, std::span<const double> centroid,
                         const std::string& metric) {
  if (x.size() != centroid.size()) {
    throw std::invalid_argument("distance operands have different dimensions");
  }
  const auto& ops = kernels::ops();
  if (metric == "l2") {
    return std::sqrt(ops.sq_dist(x.data(), centroid.data(), x.size()));
  }
  if (metric != "cosine") {
    throw std::invalid_argument("unknown distance metric '" + metric +
                                "'; expected cosine or l2");
  }
  double nx = ops.dot(x.data(), x.data(), x.size());
  double nc = ops.dot(centroid.data(), centroid.data(), centroid.size());
  if (nx <= 0.0 || nc <= 0.0) return 1.0;  // zero vector: treat as orthogonal
  double cosine = ops.dot(x.data(), centroid.data(), x.size()) / std::sqrt(nx * nc);
  cosine = std::clamp(cosine, -1.0, 1.0);
  return 1.0 - cosine;
}

// ---------------------------------------------------------------------------
// Explain

namespace {

bool parse_explain_response(const std::string& body, ClusterAnnotation& out) {
  njson j = njson::parse(body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return false;
  for (const char* f :
       {"short_title", "label", "inclusion_criteria", "exclusion_criteria"}) {
    if (!j.contains(f) || !j[f].is_string() || j[f].get<std::string>().empty()) {
      return false;
    }
  }
  if (!j.contains("confidence") || !j["confidence"].is_number()) return false;
  double c = j["confidence"].get<double>();
  if (!(c >= 0.0 && c <= 1.0)) return false;
  out.short_title = j["short_title"].get<std::string>();
  out.label = j["label"].get<std::string>();
  out.inclusion_criteria = j["inclusion_criteria"].get<std::string>();
  out.exclusion_criteria = j["exclusion_criteria"].get<std::string>();
  out.confidence = c;
  return true;
}

void check_annotate_config(const AnnotateConfig& cfg) {
  if (cfg.k_positives < 1) throw std::invalid_argument("k_positives must be >= 1");
  if (cfg.n_negatives < 0) throw std::invalid_argument("n_negatives must be >= 0");
  if (cfg.m_neighbor_clusters < 0) {
    throw std::invalid_argument("m_neighbor_clusters must be >= 0");
  }
  if (cfg.retries < 0) throw std::invalid_argument("retries must be >= 0");
  if (cfg.distance_metric != "cosine" && cfg.distance_metric != "l2") {
    throw std::invalid_argument("unknown distance metric '" + cfg.distance_metric +
                                "'; expected cosine or l2");
  }
}

}  // namespace

ClusterAnnotation explain_cluster(const ClusterModel& clusters,
                                  const std::vector<std::vector<double>>& embeddings,
                                  const std::vector<Utterance>& items, int cluster_id,
                                  ChatClient& client, const AnnotateConfig& cfg) {
  check_annotate_config(cfg);
  if (cluster_id < 0 || cluster_id >= clusters.k) {
    throw std::invalid_argument("cluster id " + std::to_string(cluster_id) +
                                " is out of range for k=" + std::to_string(clusters.k));
  }
  if (embeddings.size() != items.size() ||
      clusters.assignment.size() != items.size()) {
    throw std::invalid_argument(
        "embeddings, items, and cluster assignment must align");
  }
  if (clusters.sizes[cluster_id] == 0) {
    throw std::invalid_argument("cluster " + std::to_string(cluster_id) +
                                " is empty");
  }

  const std::vector<double>& centroid = clusters.centroids[cluster_id];

  // Positives: own members sorted by ascending distance to the centroid.
  std::vector<std::pair<double, std::size_t>> members;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (clusters.assignment[i] != cluster_id) continue;
    members.emplace_back(
        annotate_distance(embeddings[i], centroid, cfg.distance_metric), i);
  }
  std::sort(members.begin(), members.end());
  std::vector<ClusterExample> positives;
  for (std::size_t r = 0;
       r < members.size() && r < static_cast<std::size_t>(cfg.k_positives); ++r) {
    std::size_t i = members[r].second;
    positives.push_back(ClusterExample{items[i].id, cluster_id, members[r].first,
                                       render_tokens(items[i].tokens)});
  }

  // Neighbor clusters by centroid distance, then the members of those
  // clusters closest to the target centroid become the negatives.
  std::vector<std::pair<double, int>> neighbors;
  for (int c = 0; c < clusters.k; ++c) {
    if (c == cluster_id || clusters.sizes[c] == 0) continue;
    neighbors.emplace_back(
        annotate_distance(clusters.centroids[c], centroid, cfg.distance_metric), c);
  }
  std::sort(neighbors.begin(), neighbors.end());
  std::unordered_set<int> neighbor_set;
  for (std::size_t r = 0;
       r < neighbors.size() && r < static_cast<std::size_t>(cfg.m_neighbor_clusters);
       ++r) {
    neighbor_set.insert(neighbors[r].second);
  }
  std::vector<std::pair<double, std::size_t>> candidates;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (!neighbor_set.contains(clusters.assignment[i])) continue;
    candidates.emplace_back(
        annotate_distance(embeddings[i], centroid, cfg.distance_metric), i);
  }
  std::sort(candidates.begin(), candidates.end());
  std::vector<ClusterExample> negatives;
  for (std::size_t r = 0;
       r < candidates.size() && r < static_cast<std::size_t>(cfg.n_negatives); ++r) {
    std::size_t i = candidates[r].second;
    negatives.push_back(ClusterExample{items[i].id, clusters.assignment[i],
                                       candidates[r].first,
                                       render_tokens(items[i].tokens)});
  }

  std::string payload =
      build_explain_payload(cluster_id, cfg.distance_metric, positives, negatives);

  ClusterAnnotation out;
  out.cluster_id = cluster_id;
  for (int attempt = 0; attempt <= cfg.retries; ++attempt) {
    std::string body;
    try {
      body = client.complete(explain_system_prompt(), payload);
    } catch (const std::exception&) {
      continue;  // transport errors burn an attempt like malformed replies
    }
    if (parse_explain_response(body, out)) return out;
  }
  out.failed = true;
  return out;
}

// ---------------------------------------------------------------------------
// Judge

namespace {

std::string verdict_line(const JudgeVerdict& v) {
  ojson j;
  j["sample_id"] = v.sample_id;
  j["predicted_cluster"] = v.predicted_cluster;
  j["true_cluster"] = v.true_cluster;
  j["in_catalog"] = v.in_catalog;
  return j.dump();
}

std::vector<JudgeVerdict> load_resume(const std::string& path) {
  std::vector<JudgeVerdict> out;
  std::ifstream in(path);
  if (!in) return out;  // absent file: nothing judged yet
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    njson j = njson::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("sample_id") ||
        !j.contains("predicted_cluster") || !j.contains("true_cluster") ||
        !j.contains("in_catalog")) {
      throw std::runtime_error("resume file " + path + " line " +
                               std::to_string(line_no) + " is not a verdict");
    }
    JudgeVerdict v;
    v.sample_id = j["sample_id"].get<std::uint64_t>();
    v.predicted_cluster = j["predicted_cluster"].get<int>();
    v.true_cluster = j["true_cluster"].get<int>();
    v.in_catalog = j["in_catalog"].get<bool>();
    out.push_back(v);
  }
  return out;
}

}  // namespace

JudgeOutcome judge_samples(std::span<const CatalogEntry> catalog,
                           std::span<const HoldoutSample> samples,
                           ChatClient& client, const std::string& resume_path,
                           const AnnotateConfig& cfg) {
  check_annotate_config(cfg);
  if (catalog.empty()) throw std::invalid_argument("judge catalog is empty");
  std::set<int> catalog_ids;
  for (const auto& c : catalog) {
    if (!catalog_ids.insert(c.id).second) {
      throw std::invalid_argument("judge catalog repeats id " +
                                  std::to_string(c.id));
    }
    if (c.title.empty()) {
      throw std::invalid_argument("judge catalog entry " + std::to_string(c.id) +
                                  " has an empty title");
    }
  }
  for (const auto& s : samples) {
    if (!catalog_ids.contains(s.true_cluster)) {
      throw std::invalid_argument("catalog lacks an entry for cluster " +
                                  std::to_string(s.true_cluster) +
                                  " present in the holdout set");
    }
  }

  JudgeOutcome outcome;
  std::unordered_set<std::uint64_t> judged;
  if (!resume_path.empty()) {
    for (const auto& v : load_resume(resume_path)) {
      if (judged.insert(v.sample_id).second) outcome.verdicts.push_back(v);
    }
  }

  std::ofstream append;
  if (!resume_path.empty()) {
    append.open(resume_path, std::ios::app);
    if (!append) {
      throw std::runtime_error("cannot open resume file " + resume_path +
                               " for appending");
    }
  }

  for (const auto& s : samples) {
    if (!judged.insert(s.id).second) continue;  // resumed or duplicate
    std::string payload = build_judge_payload(catalog, s.text);
    int predicted = -1;
    bool parsed = false;
    for (int attempt = 0; attempt <= cfg.retries; ++attempt) {
      ++outcome.requests_issued;
      std::string body;
      try {
        body = client.complete("", payload);
      } catch (const std::exception&) {
        continue;
      }
      njson j = njson::parse(body, nullptr, false);
      if (j.is_discarded() || !j.is_object() || !j.contains("id") ||
          !j["id"].is_number_integer()) {
        continue;
      }
      predicted = j["id"].get<int>();
      parsed = true;
      break;
    }
    JudgeVerdict v;
    v.sample_id = s.id;
    v.predicted_cluster = parsed ? predicted : -1;
    v.true_cluster = s.true_cluster;
    v.in_catalog = parsed && catalog_ids.contains(predicted);
    if (append.is_open()) append << verdict_line(v) << '\n' << std::flush;
    outcome.verdicts.push_back(v);
  }

  std::map<int, std::pair<std::size_t, std::size_t>> per_cluster;  // correct, total
  std::size_t correct = 0;
  for (const auto& v : outcome.verdicts) {
    bool hit = v.in_catalog && v.predicted_cluster == v.true_cluster;
    correct += hit ? 1 : 0;
    auto& [c, t] = per_cluster[v.true_cluster];
    c += hit ? 1 : 0;
    ++t;
  }
  outcome.overall_accuracy =
      outcome.verdicts.empty()
          ? 0.0
          : static_cast<double>(correct) / static_cast<double>(outcome.verdicts.size());
  for (const auto& [cluster, counts] : per_cluster) {
    outcome.per_cluster_accuracy[cluster] =
        static_cast<double>(counts.first) / static_cast<double>(counts.second);
  }
  return outcome;
}

// ---------------------------------------------------------------------------
// Persistence

void save_annotations(const std::string& path,
                      const std::vector<ClusterAnnotation>& annotations) {
  ojson arr = ojson::array();
  for (const auto& a : annotations) {
    ojson j;
    j["cluster_id"] = a.cluster_id;
    j["short_title"] = a.short_title;
    j["label"] = a.label;
    j["inclusion_criteria"] = a.inclusion_criteria;
    j["exclusion_criteria"] = a.exclusion_criteria;
    j["confidence"] = a.confidence;
    j["failed"] = a.failed;
    arr.push_back(std::move(j));
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << arr.dump(2) << '\n';
}

std::vector<ClusterAnnotation> load_annotations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  njson arr = njson::parse(in);
  if (!arr.is_array()) {
    throw std::runtime_error(path + " does not hold an annotation array");
  }
  std::vector<ClusterAnnotation> out;
  for (const auto& j : arr) {
    ClusterAnnotation a;
    a.cluster_id = j.at("cluster_id").get<int>();
    a.short_title = j.at("short_title").get<std::string>();
    a.label = j.at("label").get<std::string>();
    a.inclusion_criteria = j.at("inclusion_criteria").get<std::string>();
    a.exclusion_criteria = j.at("exclusion_criteria").get<std::string>();
    a.confidence = j.at("confidence").get<double>();
    a.failed = j.at("failed").get<bool>();
    if (a.confidence < 0.0 || a.confidence > 1.0) {
      throw std::runtime_error("annotation for cluster " +
                               std::to_string(a.cluster_id) +
                               " has confidence outside [0,1]");
    }
    if (!a.failed && (a.short_title.empty() || a.label.empty() ||
                      a.inclusion_criteria.empty() || a.exclusion_criteria.empty())) {
      throw std::runtime_error("annotation for cluster " +
                               std::to_string(a.cluster_id) +
                               " has empty text fields");
    }
    out.push_back(std::move(a));
  }
  return out;
}

}  // namespace xmodal
