#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "kne/autodiff.hpp"
#include "kne/tokenizer.hpp"

namespace kne {

struct ModelConfig {
  int n_layers = 4;
  int d_model = 128;
  int d_ff = 512;
  int n_heads = 4;
  int vocab_size = 0;
  int max_seq_len = 64;
  uint64_t seed = 0;

  void validate() const;
};

// Weight matrices keyed by hierarchical path. Projection tensors are stored
// as [d2 x d1] (output rows x input columns); a projection is applied as
// y = x * W^T, so "neuron k" is output row k of the matrix.
using NamedParams = std::map<std::string, Tensor>;

// The canonical path set for a config: layers.{l}.self_attn.{q,k,v,o}_proj,
// layers.{l}.mlp.{gate,up,down}_proj, layers.{l}.{input,post_attn}_norm,
// embed, pos_embed, lm_head, final_norm.
std::vector<std::string> canonical_paths(const ModelConfig& config);
std::vector<long> param_shape(const ModelConfig& config, const std::string& path);
NamedParams init_params(const ModelConfig& config);
void validate_params(const ModelConfig& config, const NamedParams& params);

const Tensor& param(const NamedParams& params, const std::string& path);

long total_param_count(const NamedParams& params);
uint64_t params_hash(const NamedParams& params);

// Read-only access to a base parameter set with an optional overlay of
// edited tensors. Paths absent from the overlay resolve to the base
// tensors bit-identically (the overlay never copies them).
class ParamView {
 public:
  explicit ParamView(const NamedParams& base) : base_(&base), overlay_(nullptr) {}
  ParamView(const NamedParams& base, const NamedParams& overlay);

  const Tensor& get(const std::string& path) const;
  const NamedParams& base() const { return *base_; }
  const NamedParams* overlay() const { return overlay_; }

 private:
  const NamedParams* base_;
  const NamedParams* overlay_;
};

struct Model {
  ModelConfig config;
  Vocabulary vocab;
  NamedParams params;

  ParamView view() const { return ParamView(params); }
};

struct EditedModel {
  NamedParams base;     // frozen (tensor buffers shared, never mutated)
  NamedParams overlay;  // updated tensors for edited matrices only

  ParamView view() const { return ParamView(base, overlay); }
};

EditedModel make_edited_model(const NamedParams& base, NamedParams overlay);

// Several sequences packed into one flat token stream with a block-diagonal
// causal attention mask, so a whole batch runs through the network as a
// single graph.
struct PackedSeqs {
  std::vector<int> tokens;
  std::vector<int> positions;
  std::vector<std::pair<long, long>> ranges;  // (start, length) per sequence

  long total() const { return static_cast<long>(tokens.size()); }
  static PackedSeqs pack(const std::vector<std::vector<int>>& seqs, int max_seq_len);
};

// Forward pass over a packed batch. Parameters listed in `substitutes` are
// used in place of the stored tensors (they may be tracked graph nodes, in
// which case the whole forward is recorded on their tape); everything else
// is treated as a constant.
Tensor forward_packed(const ModelConfig& config, const ParamView& pv, const PackedSeqs& packed,
                      const NamedParams* substitutes = nullptr);

// Logits for a single sequence, [seq_len x vocab_size].
Tensor forward(const ModelConfig& config, const ParamView& pv, const std::vector<int>& tokens);

struct AnswerProbability {
  std::vector<double> per_token;  // p(y_j | x, y_<j), each in (0, 1]
  double product;
};

AnswerProbability answer_probability(const ModelConfig& config, const ParamView& pv,
                                     const std::vector<int>& prompt,
                                     const std::vector<int>& answer);

struct GenerateOptions {
  bool sample = false;      // false: greedy argmax (ties -> lowest id)
  uint64_t seed = 0;        // used only when sampling
  double temperature = 1.0;
};

std::vector<int> generate(const ModelConfig& config, const ParamView& pv,
                          const std::vector<int>& prompt, int max_new_tokens,
                          const GenerateOptions& opts = {});

// ---- Adam optimizer ---------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  // Applies one update to every named tensor present in `grads`; `lr_scale`
  // multiplies the base learning rate (used for schedules).
  void step(NamedParams& params, const std::map<std::string, Tensor>& grads,
            double lr_scale = 1.0);

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

// ---- Pretraining ------------------------------------------------------------

struct PretrainOptions {
  long steps = 2000;
  double lr = 1e-3;
  int batch_size = 64;
  bool cosine_decay = true;
  AdamConfig adam{};  // lr field ignored; `lr` above is used

  // Optional greedy-accuracy early stop, evaluated every eval_every steps on
  // (prompt, answer) pairs. Disabled when eval_every == 0 or target < 0.
  long eval_every = 0;
  double target_accuracy = -1.0;
  std::vector<std::pair<std::vector<int>, std::vector<int>>> eval_pairs;
};

struct PretrainResult {
  NamedParams params;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  long steps_run = 0;
  double eval_accuracy = -1.0;  // last measured, -1 when never evaluated
};

PretrainResult pretrain(const ModelConfig& config, const std::vector<std::vector<int>>& corpus,
                        const PretrainOptions& opts);

// Fraction of (prompt, answer) pairs answered exactly by greedy decoding.
double greedy_accuracy(const ModelConfig& config, const ParamView& pv,
                       const std::vector<std::pair<std::vector<int>, std::vector<int>>>& pairs);

// ---- Checkpoints ------------------------------------------------------------

void save_model(const std::string& path, const Model& model);
Model load_model(const std::string& path);

}  // namespace kne
