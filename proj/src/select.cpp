#include "xmodal/select.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "xmodal/kernels.hpp"

namespace xmodal {

std::vector<std::vector<double>> embed_items(std::span<const Utterance> utterances,
                                             const Vocab& vocab, std::uint64_t seed) {
  vocab.validate();
  const std::size_t v = static_cast<std::size_t>(vocab.size);

  // One projection shared by every item; row-major kEmbedDim x V.
  Rng proj_rng(derive_seed(seed, "embed/projection"));
  std::vector<double> proj(static_cast<std::size_t>(kEmbedDim) * v);
  for (double& x : proj) x = proj_rng.normal(0.0, 1.0);

  std::vector<std::vector<double>> out;
  out.reserve(utterances.size());
  std::vector<double> freq(v);
  for (const Utterance& u : utterances) {
    if (u.tokens.empty()) {
      throw std::invalid_argument("embed_items: utterance " + std::to_string(u.id) +
                                  " has no tokens");
    }
    std::fill(freq.begin(), freq.end(), 0.0);
    for (std::int32_t t : u.tokens) {
      if (t < 0 || t >= vocab.size) {
        throw std::invalid_argument("embed_items: token out of vocab range in utterance " +
                                    std::to_string(u.id));
      }
      freq[static_cast<std::size_t>(t)] += 1.0;
    }
    const double inv = 1.0 / static_cast<double>(u.tokens.size());
    kernels::ops().scale(inv, freq.data(), v);

    std::vector<double> e(kEmbedDim);
    kernels::ops().matvec(proj.data(), freq.data(), e.data(), kEmbedDim, v);
    out.push_back(std::move(e));
  }
  return out;
}

namespace {

double sqd(const std::vector<double>& a, const std::vector<double>& b) {
  return kernels::ops().sq_dist(a.data(), b.data(), a.size());
}

}  // namespace

ClusterModel balanced_kmeans(std::span<const std::vector<double>> embeddings, int k,
                             std::uint64_t seed) {
  const std::size_t n = embeddings.size();
  if (k < 1) throw std::invalid_argument("balanced_kmeans: k must be >= 1");
  if (n < static_cast<std::size_t>(k)) {
    throw std::invalid_argument("balanced_kmeans: need at least k items, got " +
                                std::to_string(n));
  }
  const std::size_t dim = embeddings[0].size();
  if (dim == 0) throw std::invalid_argument("balanced_kmeans: empty embedding");
  for (const auto& e : embeddings) {
    if (e.size() != dim) {
      throw std::invalid_argument("balanced_kmeans: inconsistent embedding dimensions");
    }
  }
  const std::size_t ku = static_cast<std::size_t>(k);
  const int cap = static_cast<int>((n + ku - 1) / ku);
  const int floor_sz = static_cast<int>(n / ku);

  // k-means++ seeding: each next centroid drawn with probability
  // proportional to squared distance from the chosen set.
  Rng rng(derive_seed(seed, "kmeans/init"));
  std::vector<std::vector<double>> centroids;
  centroids.reserve(ku);
  std::vector<char> is_centroid(n, 0);
  {
    const std::size_t first = rng.uniform_u64(n);
    centroids.push_back(embeddings[first]);
    is_centroid[first] = 1;
    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) d2[i] = sqd(embeddings[i], centroids[0]);
    while (centroids.size() < ku) {
      double total = 0.0;
      for (double x : d2) total += x;
      std::size_t pick;
      if (total > 0.0) {
        pick = rng.categorical(d2);
      } else {
        // all remaining points coincide with a centroid; take the lowest id
        pick = 0;
        while (pick < n && is_centroid[pick]) ++pick;
      }
      is_centroid[pick] = 1;
      centroids.push_back(embeddings[pick]);
      for (std::size_t i = 0; i < n; ++i) {
        d2[i] = std::min(d2[i], sqd(embeddings[i], centroids.back()));
      }
    }
  }

  std::vector<int> assignment(n, -1);
  std::vector<int> prev(n, -2);
  std::vector<int> sizes(ku, 0);
  std::vector<double> cost(n * ku);
  std::vector<std::size_t> order(n);
  std::vector<int> pref(ku);

  for (int iter = 0; iter < 100; ++iter) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < ku; ++c) cost[i * ku + c] = sqd(embeddings[i], centroids[c]);
    }

    // Greedy capacity-constrained assignment: items whose best choice
    // matters most (largest best-to-second-best margin) claim slots first.
    std::vector<double> margin(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      double second = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < ku; ++c) {
        const double d = cost[i * ku + c];
        if (d < best) {
          second = best;
          best = d;
        } else if (d < second) {
          second = d;
        }
      }
      margin[i] = ku > 1 ? second - best : 0.0;
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (margin[a] != margin[b]) return margin[a] > margin[b];
      return a < b;
    });

    std::fill(sizes.begin(), sizes.end(), 0);
    for (std::size_t oi = 0; oi < n; ++oi) {
      const std::size_t i = order[oi];
      std::iota(pref.begin(), pref.end(), 0);
      std::sort(pref.begin(), pref.end(), [&](int a, int b) {
        const double da = cost[i * ku + static_cast<std::size_t>(a)];
        const double db = cost[i * ku + static_cast<std::size_t>(b)];
        if (da != db) return da < db;
        return a < b;
      });
      for (int c : pref) {
        if (sizes[static_cast<std::size_t>(c)] < cap) {
          assignment[i] = c;
          ++sizes[static_cast<std::size_t>(c)];
          break;
        }
      }
    }

    // Repair: no cluster may sit below floor(N/K); pull in the cheapest
    // item from any cluster above the floor. Keeps all sizes within
    // [floor, ceil], i.e. max - min <= 1.
    for (std::size_t b = 0; b < ku; ++b) {
      while (sizes[b] < floor_sz) {
        std::size_t best_i = n;
        double best_delta = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) {
          const auto from = static_cast<std::size_t>(assignment[i]);
          if (from == b || sizes[from] <= floor_sz) continue;
          const double delta = cost[i * ku + b] - cost[i * ku + from];
          if (delta < best_delta || (delta == best_delta && i < best_i)) {
            best_delta = delta;
            best_i = i;
          }
        }
        if (best_i == n) break;  // nothing movable; cannot happen with n >= k
        --sizes[static_cast<std::size_t>(assignment[best_i])];
        assignment[best_i] = static_cast<int>(b);
        ++sizes[b];
      }
    }

    if (assignment == prev) break;
    prev = assignment;

    for (std::size_t c = 0; c < ku; ++c) {
      std::fill(centroids[c].begin(), centroids[c].end(), 0.0);
    }
    for (std::size_t i = 0; i < n; ++i) {
      kernels::ops().axpy(1.0, embeddings[i].data(),
                          centroids[static_cast<std::size_t>(assignment[i])].data(), dim);
    }
    for (std::size_t c = 0; c < ku; ++c) {
      if (sizes[c] > 0) {
        kernels::ops().scale(1.0 / static_cast<double>(sizes[c]), centroids[c].data(), dim);
      }
    }
  }

  ClusterModel model;
  model.k = k;
  model.centroids = std::move(centroids);
  model.assignment = std::move(assignment);
  model.sizes = std::move(sizes);
  return model;
}

std::vector<double> cluster_mass(const ClusterModel& model) {
  const double n = static_cast<double>(model.assignment.size());
  if (n == 0.0) throw std::invalid_argument("cluster_mass: empty model");
  std::vector<double> mass(model.sizes.size());
  for (std::size_t c = 0; c < mass.size(); ++c) {
    mass[c] = static_cast<double>(model.sizes[c]) / n;
  }
  return mass;
}

SelectionPlan make_plan(std::span<const double> p_web, std::span<const double> m_c,
                        double gamma, std::uint64_t budget_tokens) {
  const std::size_t k = p_web.size();
  if (k == 0) throw std::invalid_argument("make_plan: empty p_web");
  if (m_c.size() != k) throw std::invalid_argument("make_plan: p_web and m_c sizes differ");
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) {
    throw std::invalid_argument("make_plan: gamma must be finite and >= 0");
  }
  double mass = 0.0;
  for (double p : p_web) {
    if (!(p >= 0.0) || !std::isfinite(p)) {
      throw std::invalid_argument("make_plan: p_web entries must be finite and >= 0");
    }
    mass += p;
  }
  if (std::fabs(mass - 1.0) > 1e-9) {
    throw std::invalid_argument("make_plan: p_web must sum to 1");
  }

  // NaN marks a cluster with no probe measurements; impute the median of
  // the measured values so such clusters neither vanish nor dominate.
  std::vector<double> defined;
  for (double m : m_c) {
    if (std::isnan(m)) continue;
    if (!(m >= 0.0) || !std::isfinite(m)) {
      throw std::invalid_argument("make_plan: m_c entries must be NaN or finite >= 0");
    }
    defined.push_back(m);
  }
  double median = 0.0;
  if (!defined.empty()) {
    const std::size_t mid = defined.size() / 2;
    std::nth_element(defined.begin(), defined.begin() + static_cast<std::ptrdiff_t>(mid),
                     defined.end());
    median = defined[mid];
    if (defined.size() % 2 == 0) {
      const double lower =
          *std::max_element(defined.begin(), defined.begin() + static_cast<std::ptrdiff_t>(mid));
      median = 0.5 * (lower + median);
    }
  }

  SelectionPlan plan;
  plan.gamma = gamma;
  plan.budget_tokens = budget_tokens;
  plan.p_web.assign(p_web.begin(), p_web.end());
  plan.m_c.assign(m_c.begin(), m_c.end());
  for (double& m : plan.m_c) {
    if (std::isnan(m)) m = median;
  }

  if (gamma == 0.0) {
    // exact reduction to web sampling, no float arithmetic in between
    plan.p_target = plan.p_web;
    plan.w_gamma.assign(k, 1.0);
    return plan;
  }

  std::vector<double> f(k);
  double z = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    f[c] = std::pow(plan.m_c[c], gamma);
    z += plan.p_web[c] * f[c];
  }
  if (!(z > 0.0) || !std::isfinite(z)) {
    plan.degenerate_uniform = true;
    plan.p_target = plan.p_web;
    plan.w_gamma.assign(k, 1.0);
    return plan;
  }
  plan.w_gamma.resize(k);
  plan.p_target.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    plan.w_gamma[c] = f[c] / z;
    plan.p_target[c] = plan.p_web[c] * plan.w_gamma[c];
  }
  return plan;
}

ActiveManifest sample_active(const SelectionPlan& plan, const ClusterModel& clusters,
                             std::span<const Utterance> corpus, std::uint64_t seed) {
  const std::size_t k = plan.p_target.size();
  if (static_cast<std::size_t>(clusters.k) != k) {
    throw std::invalid_argument("sample_active: plan and cluster model disagree on K");
  }
  if (clusters.assignment.size() != corpus.size()) {
    throw std::invalid_argument("sample_active: assignment does not cover the corpus");
  }

  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const int c = clusters.assignment[i];
    if (c < 0 || static_cast<std::size_t>(c) >= k) {
      throw std::invalid_argument("sample_active: assignment id out of range");
    }
    members[static_cast<std::size_t>(c)].push_back(i);
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (plan.p_target[c] > 0.0 && members[c].empty()) {
      throw std::invalid_argument("sample_active: cluster " + std::to_string(c) +
                                  " has target mass but no items");
    }
  }

  // Pre-shuffled pools give uniform-without-replacement order per cluster.
  std::vector<std::vector<std::size_t>> pools = members;
  for (std::size_t c = 0; c < k; ++c) {
    Rng pool_rng(derive_seed(seed, "sample/pool/" + std::to_string(c)));
    pool_rng.shuffle(std::span<std::size_t>(pools[c]));
  }

  ActiveManifest manifest;
  manifest.seed = seed;
  std::vector<char> exhausted(k, 0);
  Rng rng(derive_seed(seed, "sample/draw"));
  while (manifest.total_tokens < plan.budget_tokens) {
    const std::size_t c = rng.categorical(plan.p_target);
    std::size_t idx;
    if (!pools[c].empty()) {
      idx = pools[c].back();
      pools[c].pop_back();
    } else {
      exhausted[c] = 1;
      idx = members[c][rng.uniform_u64(members[c].size())];
    }
    const Utterance& u = corpus[idx];
    manifest.entries.push_back(
        ManifestEntry{static_cast<int>(c), u.id, u.tokens.size()});
    manifest.total_tokens += u.tokens.size();
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (exhausted[c]) manifest.exhausted.push_back(static_cast<int>(c));
  }
  return manifest;
}

MixStream::MixStream(std::vector<TrainStream*> sources, std::uint64_t seed)
    : MixStream(std::move(sources), {}, seed) {}

MixStream::MixStream(std::vector<TrainStream*> sources, std::vector<double> mixture,
                     std::uint64_t seed)
    : sources_(std::move(sources)),
      mixture_(std::move(mixture)),
      rng_(derive_seed(seed, "mix/source")) {
  if (sources_.empty()) throw std::invalid_argument("MixStream: no sources");
  for (TrainStream* s : sources_) {
    if (s == nullptr) throw std::invalid_argument("MixStream: null source");
  }
  if (mixture_.empty()) {
    mixture_.assign(sources_.size(), 1.0);
  }
  if (mixture_.size() != sources_.size()) {
    throw std::invalid_argument("MixStream: mixture size does not match sources");
  }
  double total = 0.0;
  for (double w : mixture_) {
    if (!(w >= 0.0) || !std::isfinite(w)) {
      throw std::invalid_argument("MixStream: mixture weights must be finite and >= 0");
    }
    total += w;
  }
  if (!(total > 0.0)) throw std::invalid_argument("MixStream: mixture has zero mass");
}

ContextPair MixStream::next() { return sources_[rng_.categorical(mixture_)]->next(); }

using nlohmann::json;

void save_cluster_model(const std::filesystem::path& path, const ClusterModel& model) {
  json j{{"k", model.k},
         {"centroids", model.centroids},
         {"assignment", model.assignment},
         {"sizes", model.sizes}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << j.dump() << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

ClusterModel load_cluster_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  json j = json::parse(in);
  ClusterModel model;
  model.k = j.at("k").get<int>();
  model.centroids = j.at("centroids").get<std::vector<std::vector<double>>>();
  model.assignment = j.at("assignment").get<std::vector<int>>();
  model.sizes = j.at("sizes").get<std::vector<int>>();
  return model;
}

void save_plan(const std::filesystem::path& path, const SelectionPlan& plan) {
  json j{{"p_web", plan.p_web},
         {"m_c", plan.m_c},
         {"gamma", plan.gamma},
         {"p_target", plan.p_target},
         {"w_gamma", plan.w_gamma},
         {"budget_tokens", plan.budget_tokens},
         {"degenerate_uniform", plan.degenerate_uniform}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

SelectionPlan load_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  json j = json::parse(in);
  SelectionPlan plan;
  plan.p_web = j.at("p_web").get<std::vector<double>>();
  plan.m_c = j.at("m_c").get<std::vector<double>>();
  plan.gamma = j.at("gamma").get<double>();
  plan.p_target = j.at("p_target").get<std::vector<double>>();
  plan.w_gamma = j.at("w_gamma").get<std::vector<double>>();
  plan.budget_tokens = j.at("budget_tokens").get<std::uint64_t>();
  plan.degenerate_uniform = j.at("degenerate_uniform").get<bool>();
  return plan;
}

void save_manifest(const std::filesystem::path& path, const ActiveManifest& manifest) {
  json entries = json::array();
  for (const ManifestEntry& e : manifest.entries) {
    entries.push_back(json::array({e.cluster, e.utterance_id, e.tokens}));
  }
  json j{{"entries", std::move(entries)},
         {"total_tokens", manifest.total_tokens},
         {"seed", manifest.seed},
         {"exhausted", manifest.exhausted}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << j.dump() << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

ActiveManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  json j = json::parse(in);
  ActiveManifest manifest;
  for (const json& e : j.at("entries")) {
    if (!e.is_array() || e.size() != 3) {
      throw std::runtime_error("manifest entry must be [cluster, utterance_id, tokens]");
    }
    manifest.entries.push_back(ManifestEntry{e[0].get<int>(), e[1].get<std::uint64_t>(),
                                             e[2].get<std::uint64_t>()});
  }
  manifest.total_tokens = j.at("total_tokens").get<std::uint64_t>();
  manifest.seed = j.at("seed").get<std::uint64_t>();
  manifest.exhausted = j.at("exhausted").get<std::vector<int>>();
  return manifest;
}

}  // namespace xmodal
