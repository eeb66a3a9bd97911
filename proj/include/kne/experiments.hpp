#pragma once

#include <json.hpp>

#include <string>
#include <vector>

#include "kne/attribution.hpp"
#include "kne/data.hpp"
#include "kne/editor.hpp"
#include "kne/metrics.hpp"
#include "kne/model.hpp"
#include "kne/selection.hpp"

namespace kne {

struct StageConfigs {
  AttributionConfig attribution;
  SelectionConfig selection;
  EditConfig edit;
  FluencyConfig fluency;
  uint64_t seed = 0;
};

struct PipelineOutcome {
  nlohmann::json report;
  AttributionScores scores;
  KnowledgeNeuronalEnsemble ensemble;
  EditedModel edited;
  OptimizationTrace trace;
  double editable_fraction = 0.0;
};

// attribute -> select -> edit -> evaluate. Locality references are refreshed
// from the unedited model before evaluation. When out_dir is non-empty every
// intermediate artifact is persisted there. Provenance strings (input paths)
// are recorded verbatim in the report together with content hashes.
PipelineOutcome run_pipeline(const Model& model, const std::vector<EditRecord>& records,
                             const StageConfigs& cfg, const std::string& out_dir,
                             const std::string& model_path = "",
                             const std::string& edits_path = "");

// One pipeline per projection family (gate/up/down/q/k/v/o), attribution and
// editing restricted to that family's matrices. Emits location_study.csv.
nlohmann::json run_location_study(const Model& model, const std::vector<EditRecord>& records,
                                  const StageConfigs& cfg, const std::string& out_dir);

// Attribution on seeded subsets of the edit set of each given size; editing
// and evaluation always use the full set. Emits subset_localization.csv.
nlohmann::json run_subset_localization(const Model& model,
                                       const std::vector<EditRecord>& records,
                                       const StageConfigs& cfg,
                                       const std::vector<long>& subset_sizes,
                                       const std::string& out_dir);

// Full pipeline per keep_fraction value. Emits keep_fraction_sweep.csv and
// records the trade-off direction observed across the grid.
nlohmann::json run_keep_fraction_sweep(const Model& model,
                                       const std::vector<EditRecord>& records,
                                       const StageConfigs& cfg,
                                       const std::vector<double>& keep_fractions,
                                       const std::string& out_dir);

// Shared attribution/selection, then a sequential batch-edit stream per
// batch size. Emits batch_size_sweep.csv (aggregate) and
// batch_size_sweep_batches.csv (per batch), and flags a deviation when ES
// at batch size 1 is below ES at the largest size.
nlohmann::json run_batch_size_sweep(const Model& model,
                                    const std::vector<EditRecord>& records,
                                    const StageConfigs& cfg,
                                    const std::vector<int>& batch_sizes,
                                    const std::string& out_dir);

// Required report keys with their types; throws on violation.
void validate_report_schema(const nlohmann::json& report);

nlohmann::json report_to_json(const EditReport& report, const nlohmann::json& config);

uint64_t file_hash(const std::string& path);

}  // namespace kne
