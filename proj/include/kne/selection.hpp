#pragma once

#include <map>
#include <string>
#include <vector>

#include "kne/attribution.hpp"
#include "kne/model.hpp"

namespace kne {

enum class SelectionScope { kGlobal, kPerLayer };

struct SelectionConfig {
  double keep_fraction = 0.01;  // fraction of neurons retained
  SelectionScope scope = SelectionScope::kGlobal;
};

struct KnowledgeNeuronalEnsemble {
  std::map<std::string, std::vector<long>> paths;  // path -> ascending neuron indices
  double threshold = 0.0;                          // t_p (global scope)
  double keep_fraction = 0.0;
  std::string source;  // free-form provenance note (scope, per-layer thresholds)

  long total_selected() const;
};

// The ceil(keep_fraction * T)-th largest score over all paths and layers
// pooled. Errors on non-finite scores.
double quantile_threshold(const AttributionScores& scores, double keep_fraction);

// All neurons with score >= t_p, per path, indices ascending. When
// target_count >= 0, ties exactly at t_p are kept in (path lexicographic,
// index ascending) order and trimmed so the total equals target_count.
KnowledgeNeuronalEnsemble select_ensemble(const AttributionScores& scores, double t_p,
                                          long target_count = -1);

// quantile_threshold + select_ensemble with the exact-count tie rule; the
// per-layer scope applies the same keep fraction within each layer.
KnowledgeNeuronalEnsemble build_ensemble(const AttributionScores& scores,
                                         const SelectionConfig& config);

// Fraction of all model parameters covered by the selected rows:
// sum over paths of n_path * d1_path, divided by the total parameter count.
double ensemble_stats(const KnowledgeNeuronalEnsemble& ensemble, const NamedParams& params);

void save_ensemble_json(const std::string& path, const KnowledgeNeuronalEnsemble& ensemble);
KnowledgeNeuronalEnsemble load_ensemble_json(const std::string& path);

}  // namespace kne
