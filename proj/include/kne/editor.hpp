#pragma once

#include <map>
#include <string>
#include <vector>

#include "kne/data.hpp"
#include "kne/model.hpp"
#include "kne/selection.hpp"

namespace kne {

struct EditConfig {
  double alpha = 1.0;           // scaling hyperparameter in alpha/sqrt(n)
  long max_steps = 100;
  double lr = 5e-2;
  double early_stop_prob = 0.95;  // stop when every edit's answer probability exceeds this
  int batch_size = 25;            // edits optimized jointly per batch
  bool debug_check_frozen = false;  // re-hash frozen rows after every step

  void validate() const;
};

// Compact trainable block for one path: the selected rows and their indices.
struct DeltaEntry {
  Tensor w_kne;              // [n x d1], zero-initialized
  std::vector<long> indices;  // M_kne, ascending, < d2
  long d2 = 0;
};

using DeltaParams = std::map<std::string, DeltaEntry>;

DeltaParams init_delta(const KnowledgeNeuronalEnsemble& ensemble, const NamedParams& params);

// Zero matrix of the full [d2 x d1] shape with the delta's rows scattered
// into the selected positions.
Tensor expand_delta(const DeltaParams& delta, const std::string& path);

// W_hat = W + (alpha / sqrt(n)) * delta_w, n >= 1. Rows outside the scatter
// indices are bit-identical to W.
Tensor apply_update(const Tensor& w, const Tensor& delta_w, double alpha, long n);

struct TraceStep {
  long step = 0;
  double loss = 0.0;
  double mean_target_prob = 0.0;
};

struct OptimizationTrace {
  std::vector<TraceStep> steps;
  bool early_stopped = false;
  bool no_improvement = false;  // best loss never dropped below the initial loss
  long best_step = 0;
};

struct EditResult {
  EditedModel model;
  OptimizationTrace trace;
};

// Optimizes the mean per-token negative log-likelihood of the target answers
// over the W_kne blocks only; every other parameter (and every non-selected
// row) stays frozen. The live model at each step is
// base + (alpha/sqrt(n_path)) * expand(W_kne) per path.
EditResult edit(const ModelConfig& config, const NamedParams& base,
                const KnowledgeNeuronalEnsemble& ensemble,
                const std::vector<TokenizedEdit>& edits, const EditConfig& ecfg);

struct BatchEditStep {
  std::vector<long> edit_ids;
  OptimizationTrace trace;
  NamedParams overlay_after;  // cumulative overlay relative to the original base
};

struct BatchEditResult {
  EditedModel final_model;
  std::vector<BatchEditStep> batches;
};

// Splits the edit set into consecutive batches of ecfg.batch_size and edits
// them sequentially, each against the model state left by the previous batch.
BatchEditResult edit_batch_stream(const ModelConfig& config, const NamedParams& base,
                                  const KnowledgeNeuronalEnsemble& ensemble,
                                  const std::vector<TokenizedEdit>& edits,
                                  const EditConfig& ecfg);

// ---- Edited-model container ---------------------------------------------------

struct EditedModelFile {
  std::string base_checkpoint;  // path reference, not a copy
  uint64_t base_hash = 0;
  NamedParams overlay;
  std::string config_json;  // edit configuration + provenance
  std::string trace_json;
};

void save_edited_model(const std::string& path, const EditedModelFile& file);
EditedModelFile load_edited_model(const std::string& path);

}  // namespace kne
