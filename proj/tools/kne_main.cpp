// kne - knowledge-editing laboratory for toy GPT-style transformers.
//
// Verbs: make-dataset, pretrain, attribute, select, edit, evaluate,
// experiment <kind>. Every stage reads/writes plain files so runs can be
// resumed and reproduced; all randomness is seeded.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "kne/attribution.hpp"
#include "kne/data.hpp"
#include "kne/editor.hpp"
#include "kne/experiments.hpp"
#include "kne/metrics.hpp"
#include "kne/model.hpp"
#include "kne/selection.hpp"

using namespace kne;
using nlohmann::json;

namespace {

json load_json_file(const std::string& path) {
  std::ifstream is(path);
  check(is.good(), "cannot open config file '", path, "'");
  return json::parse(is);
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream os(path);
  check(os.good(), "cannot open '", path, "' for writing");
  os << j.dump(2) << "\n";
  check(os.good(), "write to '", path, "' failed");
}

ModelConfig model_config_from_json(const json& j, int vocab_size, uint64_t seed) {
  ModelConfig cfg;
  cfg.n_layers = j.value("n_layers", cfg.n_layers);
  cfg.d_model = j.value("d_model", cfg.d_model);
  cfg.d_ff = j.value("d_ff", cfg.d_ff);
  cfg.n_heads = j.value("n_heads", cfg.n_heads);
  cfg.max_seq_len = j.value("max_seq_len", cfg.max_seq_len);
  cfg.vocab_size = vocab_size;
  cfg.seed = seed;
  return cfg;
}

struct DatasetArgs {
  int entities = 40;
  int relations = 8;
  double density = 0.8;
  int edits = 10;
  uint64_t seed = 0;
  std::string out_dir = ".";
};

void cmd_make_dataset(const DatasetArgs& args) {
  std::filesystem::create_directories(args.out_dir);
  SyntheticWorld world = generate_world(args.entities, args.relations, args.density, args.seed);
  Corpus corpus = world_to_corpus(world, default_templates());
  std::vector<EditRecord> records = make_edit_set(world, args.edits, args.seed + 1);
  save_world_json(args.out_dir + "/world.json", world);
  save_corpus_jsonl(args.out_dir + "/corpus.jsonl", corpus.lines);
  save_edits_jsonl(args.out_dir + "/edits.jsonl", records);
  std::cout << "world: " << world.triples.size() << " triples, vocabulary "
            << corpus.vocab.size() << " words\n"
            << "corpus: " << corpus.lines.size() << " lines -> " << args.out_dir
            << "/corpus.jsonl\n"
            << "edits: " << records.size() << " records -> " << args.out_dir
            << "/edits.jsonl\n";
}

struct PretrainArgs {
  std::string config_path;
  std::string corpus_path;
  std::string out_path = "model.bin";
  uint64_t seed = 0;
  long steps = -1;
  double lr = -1.0;
  int batch_size = -1;
  double target_accuracy = -1.0;
};

void cmd_pretrain(const PretrainArgs& args) {
  json cfg_json = args.config_path.empty() ? json::object() : load_json_file(args.config_path);
  std::vector<std::string> lines = load_corpus_jsonl(args.corpus_path);
  check(!lines.empty(), "pretrain: corpus '", args.corpus_path, "' is empty");

  std::set<std::string> words;
  for (const std::string& line : lines)
    for (const std::string& w : split_words(line)) words.insert(w);
  Vocabulary vocab(std::vector<std::string>(words.begin(), words.end()));
  std::vector<std::vector<int>> tokens;
  for (const std::string& line : lines) tokens.push_back(vocab.encode(line));

  ModelConfig cfg = model_config_from_json(cfg_json, vocab.size(), args.seed);
  PretrainOptions opts;
  opts.steps = args.steps >= 0 ? args.steps : cfg_json.value("steps", opts.steps);
  opts.lr = args.lr > 0 ? args.lr : cfg_json.value("lr", opts.lr);
  opts.batch_size =
      args.batch_size > 0 ? args.batch_size : cfg_json.value("batch_size", opts.batch_size);
  opts.target_accuracy = args.target_accuracy >= 0
                             ? args.target_accuracy
                             : cfg_json.value("target_accuracy", opts.target_accuracy);
  opts.eval_every = cfg_json.value("eval_every", 50L);
  if (opts.target_accuracy >= 0.0) {
    // Sentence-completion pairs: everything but the last token -> last token.
    for (const auto& seq : tokens) {
      if (seq.size() < 2) continue;
      opts.eval_pairs.emplace_back(std::vector<int>(seq.begin(), seq.end() - 1),
                                   std::vector<int>{seq.back()});
    }
  }

  PretrainResult result = pretrain(cfg, tokens, opts);
  Model model{cfg, vocab, std::move(result.params)};
  save_model(args.out_path, model);
  std::cout << "pretrained " << result.steps_run << " steps, loss " << result.initial_loss
            << " -> " << result.final_loss;
  if (result.eval_accuracy >= 0) std::cout << ", completion accuracy " << result.eval_accuracy;
  std::cout << "\nsaved " << args.out_path << "\n";
}

struct AttributeArgs {
  std::string model_path;
  std::string edits_path;
  std::string out_path = "scores.json";
  int steps = 20;
  long subset = -1;
  std::vector<std::string> paths;
  bool exact = false;
  uint64_t seed = 0;
};

void cmd_attribute(const AttributeArgs& args) {
  Model model = load_model(args.model_path);
  std::vector<EditRecord> records = load_knowedit_jsonl(args.edits_path);
  std::vector<TokenizedEdit> edits = tokenize_edits(records, model.vocab);
  AttributionConfig acfg;
  acfg.riemann_steps = args.steps;
  if (!args.paths.empty()) acfg.target_paths = args.paths;
  acfg.localization_subset_size = args.subset;
  acfg.exact_mode = args.exact;
  acfg.subsample_seed = args.seed;
  AttributionScores scores = attribute_edit_set(model.config, model.view(), edits, acfg);
  save_scores_json(args.out_path, scores);
  std::cout << "attributed " << scores.edit_ids.size() << " edits over "
            << scores.scores.size() << " paths (" << scores.total_neurons() << " neurons, m="
            << scores.riemann_steps << ", mode=" << scores.mode << ")\nsaved " << args.out_path
            << "\n";
}

struct SelectArgs {
  std::string scores_path;
  std::string out_path = "ensemble.json";
  double keep = 0.01;
  bool per_layer = false;
};

void cmd_select(const SelectArgs& args) {
  AttributionScores scores = load_scores_json(args.scores_path);
  SelectionConfig cfg;
  cfg.keep_fraction = args.keep;
  cfg.scope = args.per_layer ? SelectionScope::kPerLayer : SelectionScope::kGlobal;
  KnowledgeNeuronalEnsemble ensemble = build_ensemble(scores, cfg);
  save_ensemble_json(args.out_path, ensemble);
  std::cout << "selected " << ensemble.total_selected() << " neurons across "
            << ensemble.paths.size() << " paths (threshold " << ensemble.threshold
            << ")\nsaved " << args.out_path << "\n";
}

struct EditArgs {
  std::string model_path;
  std::string ensemble_path;
  std::string edits_path;
  std::string out_path = "edited.bin";
  double alpha = 1.0;
  long steps = 100;
  double lr = 5e-2;
  int batch_size = 25;
  double early_stop_prob = 0.95;
  uint64_t seed = 0;
};

void cmd_edit(const EditArgs& args) {
  Model model = load_model(args.model_path);
  KnowledgeNeuronalEnsemble ensemble = load_ensemble_json(args.ensemble_path);
  std::vector<EditRecord> records = load_knowedit_jsonl(args.edits_path);
  std::vector<TokenizedEdit> edits = tokenize_edits(records, model.vocab);
  EditConfig ecfg;
  ecfg.alpha = args.alpha;
  ecfg.max_steps = args.steps;
  ecfg.lr = args.lr;
  ecfg.batch_size = args.batch_size;
  ecfg.early_stop_prob = args.early_stop_prob;

  BatchEditResult stream = edit_batch_stream(model.config, model.params, ensemble, edits, ecfg);
  json trace = json::array();
  for (const BatchEditStep& b : stream.batches) {
    json steps = json::array();
    for (const TraceStep& s : b.trace.steps)
      steps.push_back(
          {{"step", s.step}, {"loss", s.loss}, {"mean_target_prob", s.mean_target_prob}});
    trace.push_back({{"edit_ids", b.edit_ids},
                     {"early_stopped", b.trace.early_stopped},
                     {"no_improvement", b.trace.no_improvement},
                     {"steps", steps}});
  }
  EditedModelFile file;
  file.base_checkpoint = args.model_path;
  file.base_hash = params_hash(model.params);
  file.overlay = stream.final_model.overlay;
  file.config_json = json{{"alpha", args.alpha},
                          {"max_steps", args.steps},
                          {"lr", args.lr},
                          {"batch_size", args.batch_size},
                          {"early_stop_prob", args.early_stop_prob},
                          {"seed", args.seed},
                          {"ensemble", args.ensemble_path},
                          {"edits", args.edits_path}}
                         .dump();
  file.trace_json = trace.dump();
  save_edited_model(args.out_path, file);
  std::cout << "edited " << edits.size() << " facts in " << stream.batches.size()
            << " batch(es)\nsaved " << args.out_path << "\n";
}

struct EvaluateArgs {
  std::string original_path;
  std::string edited_path;
  std::string edits_path;
  std::string out_path = "report.json";
  int gen_len = 32;
  uint64_t fluency_seed = 1234;
};

void cmd_evaluate(const EvaluateArgs& args) {
  Model model = load_model(args.original_path);
  EditedModelFile file = load_edited_model(args.edited_path);
  check(file.base_hash == params_hash(model.params), "evaluate: edited model '",
        args.edited_path, "' was produced from a different base checkpoint than '",
        args.original_path, "'");
  EditedModel edited = make_edited_model(model.params, file.overlay);
  std::vector<EditRecord> records = load_knowedit_jsonl(args.edits_path);
  fill_locality_references(model.config, model.view(), records, model.vocab);
  FluencyConfig fcfg;
  fcfg.gen_len = args.gen_len;
  fcfg.seed = args.fluency_seed;
  EditReport report =
      evaluate(model.config, model.view(), edited.view(), records, model.vocab, fcfg);
  json config = {{"original", args.original_path},
                 {"original_hash", hex64(file_hash(args.original_path))},
                 {"edited", args.edited_path},
                 {"edited_hash", hex64(file_hash(args.edited_path))},
                 {"edits", args.edits_path},
                 {"edits_hash", hex64(file_hash(args.edits_path))},
                 {"edit_config", json::parse(file.config_json)},
                 {"fluency",
                  {{"gen_len", fcfg.gen_len},
                   {"seed", fcfg.seed},
                   {"bigram_weight", fcfg.bigram_weight},
                   {"trigram_weight", fcfg.trigram_weight},
                   {"entropy_unit", "nats"}}}};
  json out = report_to_json(report, config);
  write_json_file(args.out_path, out);
  std::cout << "edit_success " << report.edit_success << ", portability "
            << (report.portability ? std::to_string(*report.portability) : std::string("n/a"))
            << ", locality " << report.locality << ", fluency " << report.fluency
            << " (original " << report.fluency_original << ")\nsaved " << args.out_path << "\n";
}

struct ExperimentArgs {
  std::string kind;
  std::string model_path;
  std::string edits_path;
  std::string out_dir = "experiment_out";
  uint64_t seed = 0;
  int attribution_steps = 20;
  long subset = -1;
  double keep = 0.01;
  double alpha = 1.0;
  long edit_steps = 100;
  double lr = 5e-2;
  int batch_size = 25;
  int gen_len = 32;
  std::vector<std::string> paths;
  std::string grid;
};

template <typename T>
std::vector<T> parse_grid(const std::string& grid) {
  std::vector<T> out;
  std::istringstream is(grid);
  std::string item;
  while (std::getline(is, item, ',')) {
    std::istringstream value(item);
    T v;
    value >> v;
    check(!value.fail(), "bad grid element '", item, "'");
    out.push_back(v);
  }
  check(!out.empty(), "empty grid");
  return out;
}

void cmd_experiment(const ExperimentArgs& args) {
  Model model = load_model(args.model_path);
  std::vector<EditRecord> records = load_knowedit_jsonl(args.edits_path);
  StageConfigs cfg;
  cfg.attribution.riemann_steps = args.attribution_steps;
  if (!args.paths.empty()) cfg.attribution.target_paths = args.paths;
  cfg.attribution.localization_subset_size = args.subset;
  cfg.attribution.subsample_seed = args.seed;
  cfg.selection.keep_fraction = args.keep;
  cfg.edit.alpha = args.alpha;
  cfg.edit.max_steps = args.edit_steps;
  cfg.edit.lr = args.lr;
  cfg.edit.batch_size = args.batch_size;
  cfg.fluency.gen_len = args.gen_len;
  cfg.fluency.seed = args.seed + 1234;
  cfg.seed = args.seed;

  if (args.kind == "pipeline") {
    PipelineOutcome outcome =
        run_pipeline(model, records, cfg, args.out_dir, args.model_path, args.edits_path);
    std::cout << "edit_success " << outcome.report.at("edit_success") << ", locality "
              << outcome.report.at("locality") << ", editable fraction "
              << outcome.editable_fraction << "\nreport: " << args.out_dir << "/report.json\n";
  } else if (args.kind == "location-study") {
    json result = run_location_study(model, records, cfg, args.out_dir);
    std::cout << result.dump(2) << "\ncsv: " << args.out_dir << "/location_study.csv\n";
  } else if (args.kind == "subset-localization") {
    std::vector<long> sizes;
    if (!args.grid.empty()) {
      sizes = parse_grid<long>(args.grid);
    } else {
      long n = static_cast<long>(records.size());
      sizes = {std::max(1L, n / 4), std::max(1L, n / 2), n};
    }
    json result = run_subset_localization(model, records, cfg, sizes, args.out_dir);
    std::cout << result.dump(2) << "\ncsv: " << args.out_dir << "/subset_localization.csv\n";
  } else if (args.kind == "keep-fraction-sweep") {
    std::vector<double> grid = args.grid.empty()
                                   ? std::vector<double>{0.001, 0.005, 0.01, 0.05, 0.1}
                                   : parse_grid<double>(args.grid);
    json result = run_keep_fraction_sweep(model, records, cfg, grid, args.out_dir);
    std::cout << result.dump(2) << "\ncsv: " << args.out_dir << "/keep_fraction_sweep.csv\n";
  } else if (args.kind == "batch-size-sweep") {
    std::vector<int> grid =
        args.grid.empty() ? std::vector<int>{1, 5, 10, 25} : parse_grid<int>(args.grid);
    json result = run_batch_size_sweep(model, records, cfg, grid, args.out_dir);
    std::cout << result.dump(2) << "\ncsv: " << args.out_dir << "/batch_size_sweep.csv\n";
  } else {
    fail("unknown experiment kind '", args.kind,
         "' (expected pipeline, location-study, subset-localization, keep-fraction-sweep, "
         "batch-size-sweep)");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kne: locate-then-edit knowledge editing on toy transformers"};
  app.require_subcommand(1);

  DatasetArgs ds;
  auto* make_dataset = app.add_subcommand("make-dataset", "Generate a synthetic world");
  make_dataset->add_option("--entities", ds.entities, "Number of entities");
  make_dataset->add_option("--relations", ds.relations, "Number of relations");
  make_dataset->add_option("--density", ds.density, "Fraction of (s, r) pairs with a fact");
  make_dataset->add_option("--edits", ds.edits, "Number of edit records");
  make_dataset->add_option("--seed", ds.seed, "World seed");
  make_dataset->add_option("--out-dir", ds.out_dir, "Output directory");

  PretrainArgs pt;
  auto* pretrain_cmd = app.add_subcommand("pretrain", "Pretrain a model on a corpus");
  pretrain_cmd->add_option("--config", pt.config_path, "Model/training config JSON");
  pretrain_cmd->add_option("--corpus", pt.corpus_path, "Corpus JSONL")->required();
  pretrain_cmd->add_option("--out", pt.out_path, "Checkpoint output path");
  pretrain_cmd->add_option("--seed", pt.seed, "Initialization/shuffle seed");
  pretrain_cmd->add_option("--steps", pt.steps, "Training steps");
  pretrain_cmd->add_option("--lr", pt.lr, "Learning rate");
  pretrain_cmd->add_option("--batch-size", pt.batch_size, "Sequences per step");
  pretrain_cmd->add_option("--target-accuracy", pt.target_accuracy,
                           "Early stop at this completion accuracy");

  AttributeArgs at;
  auto* attribute_cmd = app.add_subcommand("attribute", "Gradient attribution scores");
  attribute_cmd->add_option("--model", at.model_path, "Model checkpoint")->required();
  attribute_cmd->add_option("--edits", at.edits_path, "Edits JSONL")->required();
  attribute_cmd->add_option("--steps", at.steps, "Riemann steps m");
  attribute_cmd->add_option("--subset", at.subset, "Localization subset size");
  attribute_cmd->add_option("--paths", at.paths, "Target path patterns");
  attribute_cmd->add_flag("--exact-attribution", at.exact, "Literal per-row attribution");
  attribute_cmd->add_option("--out", at.out_path, "Scores output path");
  attribute_cmd->add_option("--seed", at.seed, "Subsample seed");

  SelectArgs se;
  auto* select_cmd = app.add_subcommand("select", "Quantile-threshold ensemble selection");
  select_cmd->add_option("--scores", se.scores_path, "Scores JSON")->required();
  select_cmd->add_option("--keep", se.keep, "Fraction of neurons to keep");
  select_cmd->add_flag("--per-layer", se.per_layer, "Threshold each layer separately");
  select_cmd->add_option("--out", se.out_path, "Ensemble output path");

  EditArgs ed;
  auto* edit_cmd = app.add_subcommand("edit", "Masked delta-matrix editing");
  edit_cmd->add_option("--model", ed.model_path, "Model checkpoint")->required();
  edit_cmd->add_option("--ensemble", ed.ensemble_path, "Ensemble JSON")->required();
  edit_cmd->add_option("--edits", ed.edits_path, "Edits JSONL")->required();
  edit_cmd->add_option("--alpha", ed.alpha, "Update scaling hyperparameter");
  edit_cmd->add_option("--steps", ed.steps, "Max optimizer steps");
  edit_cmd->add_option("--lr", ed.lr, "Learning rate");
  edit_cmd->add_option("--batch-size", ed.batch_size, "Edits per joint batch");
  edit_cmd->add_option("--early-stop-prob", ed.early_stop_prob, "Early-stop probability");
  edit_cmd->add_option("--seed", ed.seed, "Recorded in provenance");
  edit_cmd->add_option("--out", ed.out_path, "Edited model output path");

  EvaluateArgs ev;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "ES/PORT/LOC/FLUE report");
  evaluate_cmd->add_option("--original", ev.original_path, "Original checkpoint")->required();
  evaluate_cmd->add_option("--edited", ev.edited_path, "Edited model file")->required();
  evaluate_cmd->add_option("--edits", ev.edits_path, "Edits JSONL")->required();
  evaluate_cmd->add_option("--out", ev.out_path, "Report output path");
  evaluate_cmd->add_option("--gen-len", ev.gen_len, "Fluency generation length");
  evaluate_cmd->add_option("--fluency-seed", ev.fluency_seed, "Fluency sampling seed");

  ExperimentArgs ex;
  auto* experiment_cmd = app.add_subcommand("experiment", "Orchestrated studies");
  experiment_cmd
      ->add_option("kind", ex.kind,
                   "pipeline | location-study | subset-localization | keep-fraction-sweep | "
                   "batch-size-sweep")
      ->required();
  experiment_cmd->add_option("--model", ex.model_path, "Model checkpoint")->required();
  experiment_cmd->add_option("--edits", ex.edits_path, "Edits JSONL")->required();
  experiment_cmd->add_option("--out-dir", ex.out_dir, "Output directory");
  experiment_cmd->add_option("--seed", ex.seed, "Run seed");
  experiment_cmd->add_option("--attribution-steps", ex.attribution_steps, "Riemann steps m");
  experiment_cmd->add_option("--subset", ex.subset, "Localization subset size");
  experiment_cmd->add_option("--keep", ex.keep, "Keep fraction");
  experiment_cmd->add_option("--alpha", ex.alpha, "Update scaling");
  experiment_cmd->add_option("--edit-steps", ex.edit_steps, "Max optimizer steps");
  experiment_cmd->add_option("--lr", ex.lr, "Editing learning rate");
  experiment_cmd->add_option("--batch-size", ex.batch_size, "Edits per joint batch");
  experiment_cmd->add_option("--gen-len", ex.gen_len, "Fluency generation length");
  experiment_cmd->add_option("--paths", ex.paths, "Attribution target patterns");
  experiment_cmd->add_option("--grid", ex.grid, "Comma-separated sweep grid");

  CLI11_PARSE(app, argc, argv);

  try {
    if (make_dataset->parsed()) cmd_make_dataset(ds);
    if (pretrain_cmd->parsed()) cmd_pretrain(pt);
    if (attribute_cmd->parsed()) cmd_attribute(at);
    if (select_cmd->parsed()) cmd_select(se);
    if (edit_cmd->parsed()) cmd_edit(ed);
    if (evaluate_cmd->parsed()) cmd_evaluate(ev);
    if (experiment_cmd->parsed()) cmd_experiment(ex);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
