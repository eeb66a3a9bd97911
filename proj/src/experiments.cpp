#include "kne/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace kne {

using nlohmann::json;

namespace fs = std::filesystem;

uint64_t file_hash(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(is.good(), "file_hash: cannot open '", path, "'");
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return fnv1a64(bytes.data(), bytes.size());
}

void validate_report_schema(const json& report) {
  check(report.is_object(), "report schema: not an object");
  for (const char* key : {"edit_success", "locality", "fluency"})
    check(report.contains(key) && report.at(key).is_number(), "report schema: missing numeric '",
          key, "'");
  check(report.contains("portability") &&
            (report.at("portability").is_number() || report.at("portability").is_null()),
        "report schema: 'portability' must be a number or null");
  check(report.contains("per_record") && report.at("per_record").is_array(),
        "report schema: missing array 'per_record'");
  check(report.contains("config") && report.at("config").is_object(),
        "report schema: missing object 'config'");
}

json report_to_json(const EditReport& report, const json& config) {
  json per_record = json::array();
  for (const PerRecordMetrics& pr : report.per_record) {
    json j = {{"id", pr.id}, {"edit_success", pr.edit_success}};
    j["portability"] = pr.portability ? json(*pr.portability) : json(nullptr);
    j["locality"] = pr.locality ? json(*pr.locality) : json(nullptr);
    per_record.push_back(j);
  }
  json out = {{"edit_success", report.edit_success},
              {"portability", report.portability ? json(*report.portability) : json(nullptr)},
              {"locality", report.locality},
              {"fluency", report.fluency},
              {"fluency_original", report.fluency_original},
              {"per_record", per_record},
              {"config", config}};
  validate_report_schema(out);
  return out;
}

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  check(os.good(), "cannot open '", path, "' for writing");
  os << text;
  check(os.good(), "write to '", path, "' failed");
}

std::string csv_num(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

std::string csv_opt(const std::optional<double>& v) { return v ? csv_num(*v) : "n/a"; }

json stage_config_json(const StageConfigs& cfg, const Model& model,
                       const std::string& model_path, const std::string& edits_path,
                       size_t n_records) {
  json attribution = {{"riemann_steps", cfg.attribution.riemann_steps},
                      {"target_paths", cfg.attribution.target_paths},
                      {"localization_subset_size", cfg.attribution.localization_subset_size},
                      {"mode", cfg.attribution.exact_mode ? "exact" : "joint"},
                      {"subsample_seed", cfg.attribution.subsample_seed}};
  json selection = {{"keep_fraction", cfg.selection.keep_fraction},
                    {"scope", cfg.selection.scope == SelectionScope::kGlobal ? "global"
                                                                             : "per_layer"}};
  json edit_cfg = {{"alpha", cfg.edit.alpha},
                   {"max_steps", cfg.edit.max_steps},
                   {"lr", cfg.edit.lr},
                   {"early_stop_prob", cfg.edit.early_stop_prob},
                   {"batch_size", cfg.edit.batch_size},
                   {"optimizer", "adam(beta1=0.9,beta2=0.999,eps=1e-8)"}};
  json fluency_cfg = {{"gen_len", cfg.fluency.gen_len},
                      {"seed", cfg.fluency.seed},
                      {"bigram_weight", cfg.fluency.bigram_weight},
                      {"trigram_weight", cfg.fluency.trigram_weight},
                      {"entropy_unit", "nats"}};
  json model_cfg = {{"n_layers", model.config.n_layers},
                    {"d_model", model.config.d_model},
                    {"d_ff", model.config.d_ff},
                    {"n_heads", model.config.n_heads},
                    {"vocab_size", model.config.vocab_size},
                    {"max_seq_len", model.config.max_seq_len},
                    {"pretrain_seed", model.config.seed},
                    {"params_hash", hex64(params_hash(model.params))}};
  if (!model_path.empty()) {
    model_cfg["path"] = model_path;
    model_cfg["file_hash"] = hex64(file_hash(model_path));
  }
  json edits_cfg = {{"count", n_records}};
  if (!edits_path.empty()) {
    edits_cfg["path"] = edits_path;
    edits_cfg["file_hash"] = hex64(file_hash(edits_path));
  }
  return json{{"attribution", attribution}, {"selection", selection},
              {"edit", edit_cfg},           {"fluency", fluency_cfg},
              {"model", model_cfg},         {"edits", edits_cfg},
              {"seed", cfg.seed}};
}

json trace_to_json(const OptimizationTrace& trace) {
  json steps = json::array();
  for (const TraceStep& s : trace.steps)
    steps.push_back({{"step", s.step}, {"loss", s.loss}, {"mean_target_prob", s.mean_target_prob}});
  return json{{"steps", steps},
              {"early_stopped", trace.early_stopped},
              {"no_improvement", trace.no_improvement},
              {"best_step", trace.best_step}};
}

void ensure_dir(const std::string& dir) {
  if (dir.empty()) return;
  std::error_code ec;
  fs::create_directories(dir, ec);
  check(!ec, "cannot create directory '", dir, "': ", ec.message());
}

template <typename Fn>
auto stage(const char* name, Fn&& fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    fail("stage ", name, ": ", e.what());
  }
}

}  // namespace

PipelineOutcome run_pipeline(const Model& model, const std::vector<EditRecord>& records,
                             const StageConfigs& cfg, const std::string& out_dir,
                             const std::string& model_path, const std::string& edits_path) {
  check(!records.empty(), "run_pipeline: no edit records");
  ensure_dir(out_dir);
  ParamView original(model.params);
  std::vector<TokenizedEdit> edits = tokenize_edits(records, model.vocab);

  PipelineOutcome out;
  out.scores = stage("attribute", [&] {
    return attribute_edit_set(model.config, original, edits, cfg.attribution);
  });
  out.ensemble = stage("select", [&] { return build_ensemble(out.scores, cfg.selection); });
  out.editable_fraction =
      stage("select", [&] { return ensemble_stats(out.ensemble, model.params); });
  EditResult er = stage("edit", [&] {
    if (static_cast<long>(edits.size()) <= cfg.edit.batch_size)
      return edit(model.config, model.params, out.ensemble, edits, cfg.edit);
    BatchEditResult stream =
        edit_batch_stream(model.config, model.params, out.ensemble, edits, cfg.edit);
    OptimizationTrace merged;
    for (const BatchEditStep& b : stream.batches) {
      for (const TraceStep& s : b.trace.steps) merged.steps.push_back(s);
      merged.early_stopped = b.trace.early_stopped;
      merged.no_improvement = merged.no_improvement || b.trace.no_improvement;
    }
    return EditResult{std::move(stream.final_model), std::move(merged)};
  });
  out.edited = std::move(er.model);
  out.trace = std::move(er.trace);

  std::vector<EditRecord> refreshed = records;
  EditReport report = stage("evaluate", [&] {
    fill_locality_references(model.config, original, refreshed, model.vocab);
    return evaluate(model.config, original, out.edited.view(), refreshed, model.vocab,
                    cfg.fluency);
  });

  json config = stage_config_json(cfg, model, model_path, edits_path, records.size());
  config["selection"]["threshold"] = out.ensemble.threshold;
  config["selection"]["selected_neurons"] = out.ensemble.total_selected();
  config["selection"]["editable_fraction"] = out.editable_fraction;
  config["trace"] = {{"steps_recorded", out.trace.steps.size()},
                     {"final_loss", out.trace.steps.empty() ? 0.0 : out.trace.steps.back().loss},
                     {"early_stopped", out.trace.early_stopped},
                     {"no_improvement", out.trace.no_improvement}};
  out.report = report_to_json(report, config);

  if (!out_dir.empty()) {
    save_scores_json(out_dir + "/scores.json", out.scores);
    save_ensemble_json(out_dir + "/ensemble.json", out.ensemble);
    EditedModelFile file;
    file.base_checkpoint = model_path;
    file.base_hash = params_hash(model.params);
    file.overlay = out.edited.overlay;
    file.config_json = config.dump();
    file.trace_json = trace_to_json(out.trace).dump();
    save_edited_model(out_dir + "/edited.bin", file);
    write_text(out_dir + "/report.json", out.report.dump(2) + "\n");
  }
  return out;
}

nlohmann::json run_location_study(const Model& model, const std::vector<EditRecord>& records,
                                  const StageConfigs& cfg, const std::string& out_dir) {
  ensure_dir(out_dir);
  const std::vector<std::pair<std::string, std::string>> families = {
      {"gate_proj", "layers.*.mlp.gate_proj"}, {"up_proj", "layers.*.mlp.up_proj"},
      {"down_proj", "layers.*.mlp.down_proj"}, {"q_proj", "layers.*.self_attn.q_proj"},
      {"k_proj", "layers.*.self_attn.k_proj"}, {"v_proj", "layers.*.self_attn.v_proj"},
      {"o_proj", "layers.*.self_attn.o_proj"}};
  std::string csv = "family,edit_success,portability,locality,fluency\n";
  json rows = json::array();
  for (const auto& [family, pattern] : families) {
    StageConfigs fam_cfg = cfg;
    fam_cfg.attribution.target_paths = {pattern};
    std::string fam_dir = out_dir.empty() ? "" : out_dir + "/" + family;
    PipelineOutcome outcome = run_pipeline(model, records, fam_cfg, fam_dir);
    const json& r = outcome.report;
    csv += family + "," + csv_num(r.at("edit_success").get<double>()) + "," +
           (r.at("portability").is_null() ? "n/a" : csv_num(r.at("portability").get<double>())) +
           "," + csv_num(r.at("locality").get<double>()) + "," +
           csv_num(r.at("fluency").get<double>()) + "\n";
    rows.push_back({{"family", family},
                    {"edit_success", r.at("edit_success")},
                    {"portability", r.at("portability")},
                    {"locality", r.at("locality")},
                    {"fluency", r.at("fluency")}});
  }
  json result = {{"kind", "location-study"}, {"rows", rows}};
  // Observed direction, recorded rather than asserted: do FFN families beat
  // attention families on edit success at this scale?
  double ffn_best = 0.0, attn_best = 0.0;
  for (const json& row : rows) {
    const std::string family = row.at("family").get<std::string>();
    double es = row.at("edit_success").get<double>();
    if (family == "gate_proj" || family == "up_proj" || family == "down_proj")
      ffn_best = std::max(ffn_best, es);
    else
      attn_best = std::max(attn_best, es);
  }
  result["ffn_best_edit_success"] = ffn_best;
  result["attn_best_edit_success"] = attn_best;
  result["ffn_beats_attention"] = ffn_best >= attn_best;
  if (!out_dir.empty()) {
    write_text(out_dir + "/location_study.csv", csv);
    write_text(out_dir + "/location_study.json", result.dump(2) + "\n");
  }
  return result;
}

nlohmann::json run_subset_localization(const Model& model,
                                       const std::vector<EditRecord>& records,
                                       const StageConfigs& cfg,
                                       const std::vector<long>& subset_sizes,
                                       const std::string& out_dir) {
  check(!subset_sizes.empty(), "run_subset_localization: empty grid");
  ensure_dir(out_dir);
  std::string csv = "subset_size,edit_success,portability,locality,fluency\n";
  json rows = json::array();
  for (long size : subset_sizes) {
    check(size >= 1 && size <= static_cast<long>(records.size()),
          "run_subset_localization: subset size ", size, " outside [1, ", records.size(), "]");
    StageConfigs sub_cfg = cfg;
    sub_cfg.attribution.localization_subset_size = size;
    std::string dir = out_dir.empty() ? "" : out_dir + "/subset_" + std::to_string(size);
    PipelineOutcome outcome = run_pipeline(model, records, sub_cfg, dir);
    const json& r = outcome.report;
    csv += std::to_string(size) + "," + csv_num(r.at("edit_success").get<double>()) + "," +
           (r.at("portability").is_null() ? "n/a" : csv_num(r.at("portability").get<double>())) +
           "," + csv_num(r.at("locality").get<double>()) + "," +
           csv_num(r.at("fluency").get<double>()) + "\n";
    rows.push_back({{"subset_size", size},
                    {"edit_success", r.at("edit_success")},
                    {"portability", r.at("portability")},
                    {"locality", r.at("locality")},
                    {"fluency", r.at("fluency")}});
  }
  json result = {{"kind", "subset-localization"}, {"rows", rows}};
  // Desk-scale analog of the partial-localization finding, recorded only.
  double full_es = rows.back().at("edit_success").get<double>();
  double quarter_es = rows.front().at("edit_success").get<double>();
  result["smallest_subset_within_5_points_of_full"] =
      std::fabs(full_es - quarter_es) <= 0.05;
  if (!out_dir.empty()) {
    write_text(out_dir + "/subset_localization.csv", csv);
    write_text(out_dir + "/subset_localization.json", result.dump(2) + "\n");
  }
  return result;
}

nlohmann::json run_keep_fraction_sweep(const Model& model,
                                       const std::vector<EditRecord>& records,
                                       const StageConfigs& cfg,
                                       const std::vector<double>& keep_fractions,
                                       const std::string& out_dir) {
  check(!keep_fractions.empty(), "run_keep_fraction_sweep: empty grid");
  ensure_dir(out_dir);
  std::string csv = "keep_fraction,editable_fraction,edit_success,portability,locality,fluency\n";
  json rows = json::array();
  for (double keep : keep_fractions) {
    StageConfigs sweep_cfg = cfg;
    sweep_cfg.selection.keep_fraction = keep;
    std::ostringstream tag;
    tag << "keep_" << keep;
    std::string dir = out_dir.empty() ? "" : out_dir + "/" + tag.str();
    PipelineOutcome outcome = run_pipeline(model, records, sweep_cfg, dir);
    const json& r = outcome.report;
    csv += csv_num(keep) + "," + csv_num(outcome.editable_fraction) + "," +
           csv_num(r.at("edit_success").get<double>()) + "," +
           (r.at("portability").is_null() ? "n/a" : csv_num(r.at("portability").get<double>())) +
           "," + csv_num(r.at("locality").get<double>()) + "," +
           csv_num(r.at("fluency").get<double>()) + "\n";
    rows.push_back({{"keep_fraction", keep},
                    {"editable_fraction", outcome.editable_fraction},
                    {"edit_success", r.at("edit_success")},
                    {"portability", r.at("portability")},
                    {"locality", r.at("locality")},
                    {"fluency", r.at("fluency")}});
  }
  json result = {{"kind", "keep-fraction-sweep"}, {"rows", rows}};
  result["edit_success_increases_with_parameters"] =
      rows.back().at("edit_success").get<double>() >= rows.front().at("edit_success").get<double>();
  result["locality_decreases_with_parameters"] =
      rows.back().at("locality").get<double>() <= rows.front().at("locality").get<double>();
  if (!out_dir.empty()) {
    write_text(out_dir + "/keep_fraction_sweep.csv", csv);
    write_text(out_dir + "/keep_fraction_sweep.json", result.dump(2) + "\n");
  }
  return result;
}

nlohmann::json run_batch_size_sweep(const Model& model,
                                    const std::vector<EditRecord>& records,
                                    const StageConfigs& cfg,
                                    const std::vector<int>& batch_sizes,
                                    const std::string& out_dir) {
  check(!batch_sizes.empty(), "run_batch_size_sweep: empty grid");
  ensure_dir(out_dir);
  ParamView original(model.params);
  std::vector<TokenizedEdit> edits = tokenize_edits(records, model.vocab);

  // Attribution and selection are shared: only the batch size varies.
  AttributionScores scores = attribute_edit_set(model.config, original, edits, cfg.attribution);
  KnowledgeNeuronalEnsemble ensemble = build_ensemble(scores, cfg.selection);

  std::vector<EditRecord> refreshed = records;
  fill_locality_references(model.config, original, refreshed, model.vocab);

  std::string csv = "batch_size,n_batches,edit_success,portability,locality,fluency\n";
  std::string batch_csv = "batch_size,batch_index,n_edits,edit_success\n";
  json rows = json::array();
  for (int batch_size : batch_sizes) {
    StageConfigs bs_cfg = cfg;
    bs_cfg.edit.batch_size = batch_size;
    BatchEditResult stream =
        edit_batch_stream(model.config, model.params, ensemble, edits, bs_cfg.edit);
    EditReport report = evaluate(model.config, original, stream.final_model.view(), refreshed,
                                 model.vocab, cfg.fluency);
    csv += std::to_string(batch_size) + "," + std::to_string(stream.batches.size()) + "," +
           csv_num(report.edit_success) + "," + csv_opt(report.portability) + "," +
           csv_num(report.locality) + "," + csv_num(report.fluency) + "\n";
    json batch_rows = json::array();
    for (size_t b = 0; b < stream.batches.size(); ++b) {
      std::vector<EditRecord> batch_records;
      for (long id : stream.batches[b].edit_ids)
        for (const EditRecord& rec : refreshed)
          if (rec.id == id) batch_records.push_back(rec);
      double batch_es =
          edit_success(model.config, stream.final_model.view(), batch_records, model.vocab);
      batch_csv += std::to_string(batch_size) + "," + std::to_string(b) + "," +
                   std::to_string(batch_records.size()) + "," + csv_num(batch_es) + "\n";
      batch_rows.push_back({{"batch_index", b},
                            {"n_edits", batch_records.size()},
                            {"edit_success", batch_es}});
    }
    rows.push_back({{"batch_size", batch_size},
                    {"n_batches", stream.batches.size()},
                    {"edit_success", report.edit_success},
                    {"portability",
                     report.portability ? json(*report.portability) : json(nullptr)},
                    {"locality", report.locality},
                    {"fluency", report.fluency},
                    {"batches", batch_rows}});
  }
  json result = {{"kind", "batch-size-sweep"}, {"rows", rows}};
  double es_first = rows.front().at("edit_success").get<double>();
  double es_last = rows.back().at("edit_success").get<double>();
  result["es_batch1_ge_es_batch_max"] = es_first >= es_last;
  if (es_first < es_last)
    result["deviation"] = "edit success at the smallest batch size is below the largest";
  if (!out_dir.empty()) {
    write_text(out_dir + "/batch_size_sweep.csv", csv);
    write_text(out_dir + "/batch_size_sweep_batches.csv", batch_csv);
    write_text(out_dir + "/batch_size_sweep.json", result.dump(2) + "\n");
  }
  return result;
}

}  // namespace kne
