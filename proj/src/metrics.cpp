#include "kne/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace kne {

namespace {

// Greedy continuation of `prompt_text`, decoded to exactly the answer's
// token length; true on exact match.
bool greedy_matches(const ModelConfig& config, const ParamView& pv, const Vocabulary& vocab,
                    const std::string& prompt_text, const std::string& answer_text) {
  std::vector<int> prompt = vocab.encode(prompt_text);
  std::vector<int> answer = vocab.encode(answer_text);
  check(!prompt.empty() && !answer.empty(), "metrics: empty prompt or answer '", prompt_text,
        "' -> '", answer_text, "'");
  std::vector<int> got = generate(config, pv, prompt, static_cast<int>(answer.size()));
  return std::equal(answer.begin(), answer.end(), got.begin() + static_cast<long>(prompt.size()));
}

std::vector<int> greedy_answer(const ModelConfig& config, const ParamView& pv,
                               const std::vector<int>& prompt, int n_tokens) {
  std::vector<int> got = generate(config, pv, prompt, n_tokens);
  return std::vector<int>(got.begin() + static_cast<long>(prompt.size()), got.end());
}

}  // namespace

double edit_success(const ModelConfig& config, const ParamView& edited,
                    const std::vector<EditRecord>& records, const Vocabulary& vocab) {
  check(!records.empty(), "edit_success: no records");
  double total = 0.0;
  for (const EditRecord& rec : records) {
    std::vector<std::string> prompts = {rec.prompt};
    prompts.insert(prompts.end(), rec.rephrase_prompts.begin(), rec.rephrase_prompts.end());
    long hit = 0;
    for (const std::string& p : prompts)
      if (greedy_matches(config, edited, vocab, p, rec.target_new)) ++hit;
    total += static_cast<double>(hit) / static_cast<double>(prompts.size());
  }
  return total / static_cast<double>(records.size());
}

std::optional<double> portability(const ModelConfig& config, const ParamView& edited,
                                  const std::vector<EditRecord>& records,
                                  const Vocabulary& vocab) {
  double total = 0.0;
  long counted = 0;
  for (const EditRecord& rec : records) {
    if (rec.portability_probes.empty()) continue;
    long hit = 0;
    for (const ProbePair& probe : rec.portability_probes)
      if (greedy_matches(config, edited, vocab, probe.prompt, probe.answer)) ++hit;
    total += static_cast<double>(hit) / static_cast<double>(rec.portability_probes.size());
    ++counted;
  }
  if (counted == 0) return std::nullopt;
  return total / static_cast<double>(counted);
}

double locality(const ModelConfig& config, const ParamView& original, const ParamView& edited,
                const std::vector<EditRecord>& records, const Vocabulary& vocab) {
  check(!records.empty(), "locality: no records");
  double total = 0.0;
  long counted = 0;
  for (const EditRecord& rec : records) {
    if (rec.locality_probes.empty()) continue;
    long agree = 0;
    for (const ProbePair& probe : rec.locality_probes) {
      std::vector<int> prompt = vocab.encode(probe.prompt);
      int len = probe.answer.empty()
                    ? 1
                    : static_cast<int>(vocab.encode(probe.answer).size());
      if (greedy_answer(config, edited, prompt, len) ==
          greedy_answer(config, original, prompt, len))
        ++agree;
    }
    total += static_cast<double>(agree) / static_cast<double>(rec.locality_probes.size());
    ++counted;
  }
  check(counted > 0, "locality: no locality probes present");
  return total / static_cast<double>(counted);
}

double ngram_entropy(const std::vector<std::vector<int>>& seqs, int n) {
  check(n >= 1, "ngram_entropy: n must be >= 1");
  std::map<std::vector<int>, long> counts;
  long total = 0;
  for (const auto& seq : seqs) {
    if (static_cast<int>(seq.size()) < n) continue;
    for (size_t i = 0; i + static_cast<size_t>(n) <= seq.size(); ++i) {
      std::vector<int> gram(seq.begin() + static_cast<long>(i),
                            seq.begin() + static_cast<long>(i) + n);
      ++counts[gram];
      ++total;
    }
  }
  if (total == 0) return 0.0;
  double h = 0.0;
  for (const auto& [gram, c] : counts) {
    double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log(p);
  }
  return h;
}

double fluency(const ModelConfig& config, const ParamView& pv,
               const std::vector<std::vector<int>>& prompts, const FluencyConfig& fcfg) {
  check(fcfg.gen_len >= 3, "fluency: gen_len must be >= 3");
  check(!prompts.empty(), "fluency: no prompts");
  std::vector<std::vector<int>> continuations;
  for (size_t i = 0; i < prompts.size(); ++i) {
    GenerateOptions opts;
    opts.sample = true;
    opts.seed = fcfg.seed + i;
    int budget = std::min(fcfg.gen_len,
                          config.max_seq_len - static_cast<int>(prompts[i].size()));
    if (budget < 3) continue;  // prompt leaves no room to measure; skip
    std::vector<int> got = generate(config, pv, prompts[i], budget, opts);
    continuations.emplace_back(got.begin() + static_cast<long>(prompts[i].size()), got.end());
  }
  check(!continuations.empty(), "fluency: every prompt was too long to generate from");
  double h2 = ngram_entropy(continuations, 2);
  double h3 = ngram_entropy(continuations, 3);
  return fcfg.bigram_weight * h2 + fcfg.trigram_weight * h3;
}

void fill_locality_references(const ModelConfig& config, const ParamView& original,
                              std::vector<EditRecord>& records, const Vocabulary& vocab) {
  for (EditRecord& rec : records)
    for (ProbePair& probe : rec.locality_probes) {
      std::vector<int> prompt = vocab.encode(probe.prompt);
      int len = probe.answer.empty()
                    ? 1
                    : static_cast<int>(vocab.encode(probe.answer).size());
      probe.answer = vocab.decode(greedy_answer(config, original, prompt, len));
    }
}

EditReport evaluate(const ModelConfig& config, const ParamView& original,
                    const ParamView& edited, const std::vector<EditRecord>& records,
                    const Vocabulary& vocab, const FluencyConfig& fcfg) {
  check(!records.empty(), "evaluate: no records");
  EditReport report;
  double port_total = 0.0, loc_total = 0.0;
  long port_counted = 0, loc_counted = 0;
  for (const EditRecord& rec : records) {
    PerRecordMetrics pr;
    pr.id = rec.id;
    pr.edit_success = edit_success(config, edited, {rec}, vocab);
    if (!rec.portability_probes.empty()) {
      pr.portability = *portability(config, edited, {rec}, vocab);
      port_total += *pr.portability;
      ++port_counted;
    }
    if (!rec.locality_probes.empty()) {
      pr.locality = locality(config, original, edited, {rec}, vocab);
      loc_total += *pr.locality;
      ++loc_counted;
    }
    report.per_record.push_back(pr);
    report.edit_success += pr.edit_success;
  }
  report.edit_success /= static_cast<double>(records.size());
  check(loc_counted > 0, "evaluate: no locality probes present");
  report.locality = loc_total / static_cast<double>(loc_counted);
  if (port_counted > 0) report.portability = port_total / static_cast<double>(port_counted);

  std::vector<std::vector<int>> prompts;
  for (const EditRecord& rec : records) prompts.push_back(vocab.encode(rec.prompt));
  report.fluency = fluency(config, edited, prompts, fcfg);
  report.fluency_original = fluency(config, original, prompts, fcfg);
  return report;
}

}  // namespace kne
