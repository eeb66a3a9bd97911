#include "kne/selection.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace kne {

using nlohmann::json;

long KnowledgeNeuronalEnsemble::total_selected() const {
  long n = 0;
  for (const auto& [path, idx] : paths) n += static_cast<long>(idx.size());
  return n;
}

namespace {

long target_count_for(double keep_fraction, long total) {
  check(keep_fraction > 0.0 && keep_fraction <= 1.0,
        "selection: keep_fraction must be in (0, 1], got ", keep_fraction);
  check(total >= 1, "selection: no scores to select from");
  long k = static_cast<long>(std::ceil(keep_fraction * static_cast<double>(total)));
  return std::min(std::max(k, 1L), total);
}

void check_finite(const AttributionScores& scores) {
  for (const auto& [path, v] : scores.scores)
    for (double s : v)
      check(std::isfinite(s), "selection: non-finite score in '", path, "'");
}

double kth_largest(std::vector<double> pool, long k) {
  std::nth_element(pool.begin(), pool.begin() + (k - 1), pool.end(), std::greater<double>());
  return pool[static_cast<size_t>(k - 1)];
}

}  // namespace

double quantile_threshold(const AttributionScores& scores, double keep_fraction) {
  check_finite(scores);
  std::vector<double> pool;
  pool.reserve(static_cast<size_t>(scores.total_neurons()));
  for (const auto& [path, v] : scores.scores) pool.insert(pool.end(), v.begin(), v.end());
  long k = target_count_for(keep_fraction, static_cast<long>(pool.size()));
  return kth_largest(std::move(pool), k);
}

KnowledgeNeuronalEnsemble select_ensemble(const AttributionScores& scores, double t_p,
                                          long target_count) {
  check(std::isfinite(t_p), "select_ensemble: threshold must be finite");
  check_finite(scores);
  KnowledgeNeuronalEnsemble ens;
  ens.threshold = t_p;
  long above = 0;  // strictly above t_p
  for (const auto& [path, v] : scores.scores) {
    std::vector<long> idx;
    for (size_t k = 0; k < v.size(); ++k)
      if (v[k] >= t_p) idx.push_back(static_cast<long>(k));
    for (size_t k = 0; k < v.size(); ++k)
      if (v[k] > t_p) ++above;
    if (!idx.empty()) ens.paths.emplace(path, std::move(idx));
  }
  check(ens.total_selected() > 0,
        "select_ensemble: threshold ", t_p,
        " exceeds every score; use a larger keep_fraction");

  if (target_count >= 0 && ens.total_selected() > target_count) {
    check(above <= target_count, "select_ensemble: ", above,
          " scores strictly above threshold but target is ", target_count);
    // Keep ties at t_p in (path lexicographic, index ascending) order until
    // the target count is reached.
    long tie_budget = target_count - above;
    for (auto& [path, idx] : ens.paths) {
      const auto& v = scores.scores.at(path);
      std::vector<long> kept;
      for (long k : idx) {
        if (v[static_cast<size_t>(k)] > t_p) {
          kept.push_back(k);
        } else if (tie_budget > 0) {
          kept.push_back(k);
          --tie_budget;
        }
      }
      idx = std::move(kept);
    }
    for (auto it = ens.paths.begin(); it != ens.paths.end();)
      it = it->second.empty() ? ens.paths.erase(it) : std::next(it);
  }
  return ens;
}

namespace {

std::string layer_of(const std::string& path) {
  // "layers.{l}.rest" -> "layers.{l}"; anything else is its own group.
  if (path.rfind("layers.", 0) != 0) return path;
  size_t dot = path.find('.', 7);
  return dot == std::string::npos ? path : path.substr(0, dot);
}

}  // namespace

KnowledgeNeuronalEnsemble build_ensemble(const AttributionScores& scores,
                                         const SelectionConfig& config) {
  if (config.scope == SelectionScope::kGlobal) {
    long total = scores.total_neurons();
    long target = target_count_for(config.keep_fraction, total);
    double t_p = quantile_threshold(scores, config.keep_fraction);
    KnowledgeNeuronalEnsemble ens = select_ensemble(scores, t_p, target);
    ens.keep_fraction = config.keep_fraction;
    ens.source = "scope=global";
    return ens;
  }

  // Per-layer: one threshold per layer group, same keep fraction each.
  std::map<std::string, AttributionScores> by_layer;
  for (const auto& [path, v] : scores.scores) {
    AttributionScores& group = by_layer[layer_of(path)];
    group.scores.emplace(path, v);
  }
  KnowledgeNeuronalEnsemble ens;
  ens.keep_fraction = config.keep_fraction;
  double min_threshold = std::numeric_limits<double>::infinity();
  std::string note = "scope=per_layer";
  for (const auto& [layer, group] : by_layer) {
    long target = target_count_for(config.keep_fraction, group.total_neurons());
    double t = quantile_threshold(group, config.keep_fraction);
    KnowledgeNeuronalEnsemble part = select_ensemble(group, t, target);
    for (auto& [path, idx] : part.paths) ens.paths.emplace(path, std::move(idx));
    min_threshold = std::min(min_threshold, t);
    note += ";" + layer + ":t=" + std::to_string(t);
  }
  ens.threshold = min_threshold;
  ens.source = note;
  return ens;
}

double ensemble_stats(const KnowledgeNeuronalEnsemble& ensemble, const NamedParams& params) {
  long editable = 0;
  for (const auto& [path, idx] : ensemble.paths) {
    const Tensor& w = param(params, path);
    check(w.ndim() == 2, "ensemble_stats: '", path, "' is not a matrix");
    for (long k : idx)
      check(k >= 0 && k < w.rows(), "ensemble_stats: index ", k, " out of range for '", path,
            "'");
    editable += static_cast<long>(idx.size()) * w.cols();
  }
  return static_cast<double>(editable) / static_cast<double>(total_param_count(params));
}

void save_ensemble_json(const std::string& path, const KnowledgeNeuronalEnsemble& ensemble) {
  json paths = json::object();
  for (const auto& [p, idx] : ensemble.paths) paths[p] = idx;
  json j = {{"threshold", ensemble.threshold},
            {"keep_fraction", ensemble.keep_fraction},
            {"paths", paths}};
  std::ofstream os(path);
  check(os.good(), "save_ensemble_json: cannot open '", path, "' for writing");
  os << j.dump(2) << "\n";
  check(os.good(), "save_ensemble_json: write failed");
}

KnowledgeNeuronalEnsemble load_ensemble_json(const std::string& path) {
  std::ifstream is(path);
  check(is.good(), "load_ensemble_json: cannot open '", path, "'");
  json j = json::parse(is);
  KnowledgeNeuronalEnsemble ens;
  ens.threshold = j.at("threshold").get<double>();
  ens.keep_fraction = j.at("keep_fraction").get<double>();
  for (const auto& [p, idx] : j.at("paths").items()) {
    std::vector<long> v = idx.get<std::vector<long>>();
    check(std::is_sorted(v.begin(), v.end()), "load_ensemble_json: indices for '", p,
          "' are not ascending");
    ens.paths.emplace(p, std::move(v));
  }
  return ens;
}

}  // namespace kne
