#include "kne/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <set>

namespace kne {

using nlohmann::json;

namespace {

std::string padded(int id) {
  check(id >= 0 && id < 1000, "entity/relation id out of range: ", id);
  std::string s = std::to_string(id);
  while (s.size() < 3) s = "0" + s;
  return s;
}

}  // namespace

std::string entity_word(int id) { return "ent" + padded(id); }
std::string alias_word(int id) { return "als" + padded(id); }
std::string relation_word(int id) { return "rel" + padded(id); }

std::string Template::render(const std::string& subject, const std::string& relation) const {
  std::string out;
  for (size_t i = 0; i < pattern.size();) {
    if (pattern[i] == '{') {
      size_t close = pattern.find('}', i);
      check(close != std::string::npos, "Template: unclosed slot in '", pattern, "'");
      std::string slot = pattern.substr(i + 1, close - i - 1);
      if (slot == "s")
        out += subject;
      else if (slot == "r")
        out += relation;
      else
        fail("Template: unknown slot '{", slot, "}' in '", pattern, "'");
      i = close + 1;
    } else {
      out += pattern[i++];
    }
  }
  return out;
}

std::vector<Template> default_templates() {
  return {Template{"{s} {r} is", false}, Template{"the {r} of {s} is", false}};
}

SyntheticWorld generate_world(int n_entities, int n_relations, double density, uint64_t seed) {
  check(n_entities >= 2, "generate_world: need at least 2 entities");
  check(n_relations >= 1, "generate_world: need at least 1 relation");
  check(density > 0.0 && density <= 1.0, "generate_world: density must be in (0, 1], got ",
        density);
  SyntheticWorld world;
  world.n_entities = n_entities;
  world.n_relations = n_relations;
  world.density = density;
  world.seed = seed;
  const long n_pairs = static_cast<long>(n_entities) * n_relations;
  const long n_triples = static_cast<long>(density * static_cast<double>(n_pairs));
  Rng rng(seed);
  std::vector<size_t> picked =
      rng.sample_without_replacement(static_cast<size_t>(n_pairs), static_cast<size_t>(n_triples));
  std::sort(picked.begin(), picked.end());
  for (size_t flat : picked) {
    Triple t;
    t.subject = static_cast<int>(flat / static_cast<size_t>(n_relations));
    t.relation = static_cast<int>(flat % static_cast<size_t>(n_relations));
    t.object = static_cast<int>(rng.integer(static_cast<uint64_t>(n_entities)));
    world.triples.push_back(t);
  }
  return world;
}

Corpus world_to_corpus(const SyntheticWorld& world, const std::vector<Template>& templates,
                       bool include_alias) {
  check(templates.size() >= 2, "world_to_corpus: need at least 2 templates (primary + rephrase)");
  Corpus corpus;
  auto emit = [&](const Template& tpl, const Triple& t, bool alias) {
    std::string subj = alias ? alias_word(t.subject) : entity_word(t.subject);
    std::string line = tpl.render(subj, relation_word(t.relation)) + " " + entity_word(t.object);
    corpus.lines.push_back(std::move(line));
  };
  for (const Triple& t : world.triples) {
    for (const Template& tpl : templates) emit(tpl, t, tpl.use_alias);
    if (include_alias) emit(templates[0], t, true);
  }
  std::set<std::string> words;
  for (const std::string& line : corpus.lines)
    for (const std::string& w : split_words(line)) words.insert(w);
  corpus.vocab = Vocabulary(std::vector<std::string>(words.begin(), words.end()));
  for (const std::string& line : corpus.lines) corpus.tokens.push_back(corpus.vocab.encode(line));
  return corpus;
}

std::vector<EditRecord> make_edit_set(const SyntheticWorld& world, int n_edits, uint64_t seed,
                                      int locality_probes_per_record) {
  check(n_edits >= 0, "make_edit_set: negative n_edits");
  check(static_cast<size_t>(n_edits) <= world.triples.size(), "make_edit_set: n_edits ",
        n_edits, " exceeds ", world.triples.size(), " triples");
  std::vector<EditRecord> records;
  if (n_edits == 0) return records;

  Rng rng(seed);
  std::vector<size_t> edited =
      rng.sample_without_replacement(world.triples.size(), static_cast<size_t>(n_edits));
  std::set<size_t> edited_set(edited.begin(), edited.end());
  std::vector<size_t> untouched;
  for (size_t i = 0; i < world.triples.size(); ++i)
    if (!edited_set.count(i)) untouched.push_back(i);
  check(untouched.size() >= static_cast<size_t>(locality_probes_per_record),
        "make_edit_set: only ", untouched.size(), " untouched triples for ",
        locality_probes_per_record, " locality probes per record");

  auto templates = default_templates();
  for (size_t rec_i = 0; rec_i < edited.size(); ++rec_i) {
    const Triple& t = world.triples[edited[rec_i]];
    EditRecord rec;
    rec.id = static_cast<long>(rec_i);
    rec.subject = entity_word(t.subject);
    std::string rel = relation_word(t.relation);
    rec.prompt = templates[0].render(rec.subject, rel);
    rec.rephrase_prompts = {templates[1].render(rec.subject, rel)};
    rec.ground_truth = entity_word(t.object);
    // New object drawn uniformly from the other entities.
    int draw = static_cast<int>(rng.integer(static_cast<uint64_t>(world.n_entities - 1)));
    int new_obj = draw >= t.object ? draw + 1 : draw;
    rec.target_new = entity_word(new_obj);
    rec.portability_probes.push_back(
        ProbePair{templates[0].render(alias_word(t.subject), rel), rec.target_new});
    std::vector<size_t> probe_idx = rng.sample_without_replacement(
        untouched.size(), static_cast<size_t>(locality_probes_per_record));
    for (size_t pi : probe_idx) {
      const Triple& u = world.triples[untouched[pi]];
      rec.locality_probes.push_back(
          ProbePair{templates[0].render(entity_word(u.subject), relation_word(u.relation)),
                    entity_word(u.object)});
    }
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<std::pair<std::vector<int>, std::vector<int>>> triple_eval_pairs(
    const SyntheticWorld& world, const Vocabulary& vocab) {
  auto templates = default_templates();
  std::vector<std::pair<std::vector<int>, std::vector<int>>> pairs;
  for (const Triple& t : world.triples) {
    std::string prompt =
        templates[0].render(entity_word(t.subject), relation_word(t.relation));
    pairs.emplace_back(vocab.encode(prompt), vocab.encode(entity_word(t.object)));
  }
  return pairs;
}

// ---- JSONL -----------------------------------------------------------------

namespace {

json probe_list_json(const std::vector<ProbePair>& probes) {
  json arr = json::array();
  for (const ProbePair& p : probes) arr.push_back({{"prompt", p.prompt}, {"answer", p.answer}});
  return arr;
}

std::vector<ProbePair> parse_probe_list(const json& j, const char* field, size_t line_no) {
  std::vector<ProbePair> out;
  if (!j.contains(field)) return out;
  check(j.at(field).is_array(), "edits line ", line_no, ": field '", field,
        "' must be an array");
  for (const json& e : j.at(field)) {
    check(e.contains("prompt") && e.contains("answer"), "edits line ", line_no, ": '", field,
          "' entries need prompt and answer");
    out.push_back(ProbePair{e.at("prompt").get<std::string>(), e.at("answer").get<std::string>()});
  }
  return out;
}

}  // namespace

std::vector<EditRecord> load_knowedit_jsonl(const std::string& path) {
  std::ifstream is(path);
  check(is.good(), "load_knowedit_jsonl: cannot open '", path, "'");
  std::vector<EditRecord> records;
  std::string line;
  size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      fail("load_knowedit_jsonl: malformed JSON at line ", line_no, ": ", e.what());
    }
    for (const char* field : {"prompt", "target_new"})
      check(j.contains(field), "load_knowedit_jsonl: line ", line_no,
            " missing mandatory field '", field, "'");
    EditRecord rec;
    rec.id = static_cast<long>(records.size());
    rec.prompt = j.at("prompt").get<std::string>();
    rec.target_new = j.at("target_new").get<std::string>();
    rec.subject = j.value("subject", std::string{});
    rec.ground_truth = j.value("ground_truth", std::string{});
    if (j.contains("rephrase")) {
      if (j.at("rephrase").is_string())
        rec.rephrase_prompts.push_back(j.at("rephrase").get<std::string>());
      else if (j.at("rephrase").is_array())
        for (const json& r : j.at("rephrase")) rec.rephrase_prompts.push_back(r.get<std::string>());
      else
        fail("load_knowedit_jsonl: line ", line_no, ": 'rephrase' must be string or array");
    }
    rec.portability_probes = parse_probe_list(j, "portability", line_no);
    rec.locality_probes = parse_probe_list(j, "locality", line_no);
    records.push_back(std::move(rec));
  }
  return records;
}

void save_edits_jsonl(const std::string& path, const std::vector<EditRecord>& records) {
  std::ofstream os(path);
  check(os.good(), "save_edits_jsonl: cannot open '", path, "' for writing");
  for (const EditRecord& rec : records) {
    json j = {{"prompt", rec.prompt},
              {"subject", rec.subject},
              {"target_new", rec.target_new},
              {"ground_truth", rec.ground_truth},
              {"rephrase", rec.rephrase_prompts},
              {"portability", probe_list_json(rec.portability_probes)},
              {"locality", probe_list_json(rec.locality_probes)}};
    os << j.dump() << "\n";
  }
  check(os.good(), "save_edits_jsonl: write to '", path, "' failed");
}

std::vector<std::string> load_corpus_jsonl(const std::string& path) {
  std::ifstream is(path);
  check(is.good(), "load_corpus_jsonl: cannot open '", path, "'");
  std::vector<std::string> lines;
  std::string line;
  size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      fail("load_corpus_jsonl: malformed JSON at line ", line_no, ": ", e.what());
    }
    check(j.contains("text"), "load_corpus_jsonl: line ", line_no, " missing field 'text'");
    lines.push_back(j.at("text").get<std::string>());
  }
  return lines;
}

void save_corpus_jsonl(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream os(path);
  check(os.good(), "save_corpus_jsonl: cannot open '", path, "' for writing");
  for (const std::string& line : lines) os << json{{"text", line}}.dump() << "\n";
  check(os.good(), "save_corpus_jsonl: write to '", path, "' failed");
}

void save_world_json(const std::string& path, const SyntheticWorld& world) {
  json triples = json::array();
  for (const Triple& t : world.triples) triples.push_back({t.subject, t.relation, t.object});
  json j = {{"n_entities", world.n_entities},
            {"n_relations", world.n_relations},
            {"density", world.density},
            {"seed", world.seed},
            {"triples", triples}};
  std::ofstream os(path);
  check(os.good(), "save_world_json: cannot open '", path, "' for writing");
  os << j.dump(2) << "\n";
  check(os.good(), "save_world_json: write failed");
}

SyntheticWorld load_world_json(const std::string& path) {
  std::ifstream is(path);
  check(is.good(), "load_world_json: cannot open '", path, "'");
  json j = json::parse(is);
  SyntheticWorld world;
  world.n_entities = j.at("n_entities").get<int>();
  world.n_relations = j.at("n_relations").get<int>();
  world.density = j.at("density").get<double>();
  world.seed = j.at("seed").get<uint64_t>();
  for (const json& t : j.at("triples"))
    world.triples.push_back(Triple{t.at(0).get<int>(), t.at(1).get<int>(), t.at(2).get<int>()});
  return world;
}

std::vector<TokenizedEdit> tokenize_edits(const std::vector<EditRecord>& records,
                                          const Vocabulary& vocab) {
  std::vector<TokenizedEdit> out;
  for (const EditRecord& rec : records) {
    TokenizedEdit te;
    te.id = rec.id;
    te.prompt = vocab.encode(rec.prompt);
    te.target = vocab.encode(rec.target_new);
    check(!te.prompt.empty() && !te.target.empty(), "tokenize_edits: record ", rec.id,
          " has empty prompt or target");
    te.attribution_answer =
        rec.ground_truth.empty() ? te.target : vocab.encode(rec.ground_truth);
    out.push_back(std::move(te));
  }
  return out;
}

}  // namespace kne
