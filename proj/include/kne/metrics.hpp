#pragma once

#include <optional>
#include <string>
#include <vector>

#include "kne/data.hpp"
#include "kne/model.hpp"

namespace kne {

struct FluencyConfig {
  int gen_len = 32;
  uint64_t seed = 1234;
  double bigram_weight = 2.0 / 3.0;
  double trigram_weight = 4.0 / 3.0;
};

struct PerRecordMetrics {
  long id = 0;
  double edit_success = 0.0;
  std::optional<double> portability;  // empty when the record has no probes
  std::optional<double> locality;     // empty when the record has no probes
};

struct EditReport {
  double edit_success = 0.0;
  std::optional<double> portability;  // empty when no record has probes
  double locality = 0.0;
  double fluency = 0.0;
  double fluency_original = 0.0;
  std::vector<PerRecordMetrics> per_record;
};

// Fraction of (prompt + rephrase prompts) whose greedy decoding under the
// edited model equals target_new exactly; per record, then averaged.
double edit_success(const ModelConfig& config, const ParamView& edited,
                    const std::vector<EditRecord>& records, const Vocabulary& vocab);

// Fraction of portability probes answered with the expected answer. Records
// without probes are excluded from the mean; returns nullopt when none has any.
std::optional<double> portability(const ModelConfig& config, const ParamView& edited,
                                  const std::vector<EditRecord>& records,
                                  const Vocabulary& vocab);

// Agreement rate between the edited and the original model's greedy answers
// on the locality probes (per record, then averaged).
double locality(const ModelConfig& config, const ParamView& original, const ParamView& edited,
                const std::vector<EditRecord>& records, const Vocabulary& vocab);

// Weighted bigram/trigram entropy (natural log) of seeded-sampling
// continuations of the prompts.
double fluency(const ModelConfig& config, const ParamView& pv,
               const std::vector<std::vector<int>>& prompts, const FluencyConfig& fcfg);

// Empirical n-gram entropy of the given sequences, counting n-grams within
// each sequence (never across boundaries); natural log.
double ngram_entropy(const std::vector<std::vector<int>>& seqs, int n);

// Replaces every locality probe's stored answer with the model's greedy
// answer of the same token length, making the stored references those of
// the unedited model.
void fill_locality_references(const ModelConfig& config, const ParamView& original,
                              std::vector<EditRecord>& records, const Vocabulary& vocab);

// Full evaluation bundle; fluency prompts are the records' edit prompts.
EditReport evaluate(const ModelConfig& config, const ParamView& original,
                    const ParamView& edited, const std::vector<EditRecord>& records,
                    const Vocabulary& vocab, const FluencyConfig& fcfg = {});

}  // namespace kne
