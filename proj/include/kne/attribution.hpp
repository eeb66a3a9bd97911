#pragma once

#include <map>
#include <string>
#include <vector>

#include "kne/data.hpp"
#include "kne/model.hpp"

namespace kne {

struct AttributionConfig {
  int riemann_steps = 20;
  // Patterns over parameter paths; '*' matches any run of characters. Only
  // projection matrices (self_attn.* / mlp.*) are attributable.
  std::vector<std::string> target_paths = {"layers.*.self_attn.*_proj", "layers.*.mlp.*_proj"};
  long localization_subset_size = -1;  // -1 or >= |edits|: use all edits
  bool exact_mode = false;             // literal per-row scaling (slow, oracle-grade)
  uint64_t subsample_seed = 0;
};

// One gradient attribution score per output neuron (row) of each target path.
struct AttributionScores {
  std::map<std::string, std::vector<double>> scores;  // path -> length d2
  int riemann_steps = 0;
  std::vector<long> edit_ids;
  std::string mode;  // "joint" or "exact"

  long total_neurons() const;
};

// Expands target-path patterns against the model's projection matrices.
// Every pattern must match at least one path.
std::vector<std::string> resolve_target_paths(const std::vector<std::string>& patterns,
                                              const NamedParams& params);

// p(y_j | x, y_<j) evaluated with row k of `path` replaced by scale * (its
// original value); everything else untouched. token_index is 0-based into
// the edit's attribution answer.
double scaled_answer_probability(const ModelConfig& config, const ParamView& pv,
                                 const TokenizedEdit& edit, const std::string& path, long k,
                                 double scale_factor, int token_index);

// Riemann-approximated integrated gradient for one neuron row: the literal
// per-row definition, other rows held at full value. Sums over the answer
// tokens and averages over m scale points i/m, i = 1..m.
double neuron_attribution(const ModelConfig& config, const ParamView& pv,
                          const TokenizedEdit& edit, const std::string& path, long k, int m);

// Scores for a whole edit set. Default (joint) mode scales every target
// matrix to (i/m) of its original value at once and reads all row scores
// from one backward pass per (edit, answer token, scale step); exact mode
// loops neuron_attribution over every row. Per-edit partial sums are
// accumulated in edit order, so scores are additive over edits.
AttributionScores attribute_edit_set(const ModelConfig& config, const ParamView& pv,
                                     const std::vector<TokenizedEdit>& edits,
                                     const AttributionConfig& acfg);

void save_scores_json(const std::string& path, const AttributionScores& scores);
AttributionScores load_scores_json(const std::string& path);

}  // namespace kne
