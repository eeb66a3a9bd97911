#pragma once

#include <string>
#include <vector>

#include "kne/tokenizer.hpp"

namespace kne {

// One functional fact: (subject, relation) -> object. Ids index into the
// world's entity/relation tables.
struct Triple {
  int subject;
  int relation;
  int object;
};

struct SyntheticWorld {
  int n_entities = 0;
  int n_relations = 0;
  double density = 0.0;
  uint64_t seed = 0;
  std::vector<Triple> triples;
};

std::string entity_word(int id);
std::string alias_word(int id);   // second surface name for an entity
std::string relation_word(int id);

// Surface template for rendering a (subject, relation) prompt. The object
// word is always appended after the rendered prompt, so the answer tokens
// are exactly the sentence continuation.
struct Template {
  std::string pattern;     // contains {s} and {r} slots
  bool use_alias = false;  // substitute the subject's alias for {s}

  std::string render(const std::string& subject, const std::string& relation) const;
};

// templates[0] is the edit/primary prompt, templates[1] the rephrase probe.
std::vector<Template> default_templates();

struct ProbePair {
  std::string prompt;
  std::string answer;
};

struct EditRecord {
  long id = 0;
  std::string prompt;        // x_e, rendered (s, r)
  std::string subject;
  std::string target_new;    // o*
  std::string ground_truth;  // o
  std::vector<std::string> rephrase_prompts;
  std::vector<ProbePair> portability_probes;
  std::vector<ProbePair> locality_probes;  // answers refreshed from the unedited model
};

struct Corpus {
  std::vector<std::string> lines;
  Vocabulary vocab;
  std::vector<std::vector<int>> tokens;
};

SyntheticWorld generate_world(int n_entities, int n_relations, double density, uint64_t seed);

// Renders every triple under every template (plus an alias-surface rendering
// of the primary template when include_alias is set, which trains the
// portability aliases into the model). The vocabulary closes over all
// surface words.
Corpus world_to_corpus(const SyntheticWorld& world, const std::vector<Template>& templates,
                       bool include_alias = true);

std::vector<EditRecord> make_edit_set(const SyntheticWorld& world, int n_edits, uint64_t seed,
                                      int locality_probes_per_record = 5);

// (prompt tokens, answer tokens) for every triple under the primary template.
std::vector<std::pair<std::vector<int>, std::vector<int>>> triple_eval_pairs(
    const SyntheticWorld& world, const Vocabulary& vocab);

// ---- JSONL formats -----------------------------------------------------------

// Field names are part of the on-disk contract: prompt, subject, target_new,
// ground_truth, rephrase, portability: [{prompt, answer}], locality: [{prompt, answer}].
std::vector<EditRecord> load_knowedit_jsonl(const std::string& path);
void save_edits_jsonl(const std::string& path, const std::vector<EditRecord>& records);

std::vector<std::string> load_corpus_jsonl(const std::string& path);   // {"text": ...}
void save_corpus_jsonl(const std::string& path, const std::vector<std::string>& lines);

void save_world_json(const std::string& path, const SyntheticWorld& world);
SyntheticWorld load_world_json(const std::string& path);

// ---- Tokenized view used by attribution and editing ----------------------------

struct TokenizedEdit {
  long id = 0;
  std::vector<int> prompt;
  std::vector<int> target;              // target_new tokens
  std::vector<int> attribution_answer;  // ground_truth when present, else target_new
};

std::vector<TokenizedEdit> tokenize_edits(const std::vector<EditRecord>& records,
                                          const Vocabulary& vocab);

}  // namespace kne
