#include "kne/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace kne {

using nlohmann::json;

// ---- Config / parameter layout ----------------------------------------------

void ModelConfig::validate() const {
  check(n_layers >= 1 && d_model >= 1 && d_ff >= 1 && n_heads >= 1 && max_seq_len >= 1,
        "ModelConfig: all dims must be >= 1");
  check(vocab_size >= 2, "ModelConfig: vocab_size must be >= 2, got ", vocab_size);
  check(d_model % n_heads == 0, "ModelConfig: d_model ", d_model,
        " not divisible by n_heads ", n_heads);
}

std::vector<std::string> canonical_paths(const ModelConfig& config) {
  std::vector<std::string> paths = {"embed", "pos_embed"};
  for (int l = 0; l < config.n_layers; ++l) {
    std::string base = "layers." + std::to_string(l) + ".";
    paths.push_back(base + "input_norm");
    paths.push_back(base + "self_attn.q_proj");
    paths.push_back(base + "self_attn.k_proj");
    paths.push_back(base + "self_attn.v_proj");
    paths.push_back(base + "self_attn.o_proj");
    paths.push_back(base + "post_attn_norm");
    paths.push_back(base + "mlp.gate_proj");
    paths.push_back(base + "mlp.up_proj");
    paths.push_back(base + "mlp.down_proj");
  }
  paths.push_back("final_norm");
  paths.push_back("lm_head");
  return paths;
}

std::vector<long> param_shape(const ModelConfig& config, const std::string& path) {
  const long d = config.d_model, f = config.d_ff, v = config.vocab_size;
  if (path == "embed" || path == "lm_head") return {v, d};
  if (path == "pos_embed") return {config.max_seq_len, d};
  if (path == "final_norm") return {d};
  if (path.ends_with("input_norm") || path.ends_with("post_attn_norm")) return {d};
  if (path.ends_with("q_proj") || path.ends_with("k_proj") || path.ends_with("v_proj") ||
      path.ends_with("o_proj"))
    return {d, d};
  if (path.ends_with("gate_proj") || path.ends_with("up_proj")) return {f, d};
  if (path.ends_with("down_proj")) return {d, f};
  fail("param_shape: unknown path '", path, "'");
}

NamedParams init_params(const ModelConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const double residual_scale = 1.0 / std::sqrt(2.0 * config.n_layers);
  NamedParams params;
  for (const std::string& path : canonical_paths(config)) {
    std::vector<long> shape = param_shape(config, path);
    long n = 1;
    for (long dd : shape) n *= dd;
    std::vector<double> data(static_cast<size_t>(n));
    if (shape.size() == 1) {
      std::fill(data.begin(), data.end(), 1.0);  // normalization gains
    } else {
      const long d1 = shape[1];
      double std_dev = 1.0 / std::sqrt(static_cast<double>(d1));
      if (path.ends_with("o_proj") || path.ends_with("down_proj")) std_dev *= residual_scale;
      for (double& x : data) x = std_dev * rng.normal();
    }
    params.emplace(path, Tensor(std::move(shape), std::move(data)));
  }
  return params;
}

void validate_params(const ModelConfig& config, const NamedParams& params) {
  auto paths = canonical_paths(config);
  check(paths.size() == params.size(), "validate_params: expected ", paths.size(),
        " entries, got ", params.size());
  for (const std::string& p : paths) {
    auto it = params.find(p);
    check(it != params.end(), "validate_params: missing path '", p, "'");
    check(it->second.shape() == param_shape(config, p), "validate_params: path '", p,
          "' has shape ", shape_str(it->second.shape()), ", expected ",
          shape_str(param_shape(config, p)));
  }
}

const Tensor& param(const NamedParams& params, const std::string& path) {
  auto it = params.find(path);
  check(it != params.end(), "param: unknown path '", path, "'");
  return it->second;
}

long total_param_count(const NamedParams& params) {
  long n = 0;
  for (const auto& [path, t] : params) n += t.numel();
  return n;
}

uint64_t params_hash(const NamedParams& params) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [path, t] : params) {
    h = fnv1a64(path, h);
    uint64_t th = t.content_hash();
    h = fnv1a64(&th, sizeof(th), h);
  }
  return h;
}

// ---- ParamView / EditedModel --------------------------------------------------

ParamView::ParamView(const NamedParams& base, const NamedParams& overlay)
    : base_(&base), overlay_(&overlay) {}

const Tensor& ParamView::get(const std::string& path) const {
  if (overlay_) {
    auto it = overlay_->find(path);
    if (it != overlay_->end()) return it->second;
  }
  return param(*base_, path);
}

EditedModel make_edited_model(const NamedParams& base, NamedParams overlay) {
  for (const auto& [path, t] : overlay) {
    auto it = base.find(path);
    check(it != base.end(), "EditedModel: overlay path '", path, "' not present in base");
    check(it->second.shape() == t.shape(), "EditedModel: overlay path '", path,
          "' shape ", shape_str(t.shape()), " differs from base ",
          shape_str(it->second.shape()));
  }
  return EditedModel{base, std::move(overlay)};
}

// ---- Packing -------------------------------------------------------------------

PackedSeqs PackedSeqs::pack(const std::vector<std::vector<int>>& seqs, int max_seq_len) {
  PackedSeqs out;
  for (const auto& s : seqs) {
    check(!s.empty(), "PackedSeqs: empty sequence");
    check(static_cast<int>(s.size()) <= max_seq_len, "PackedSeqs: sequence of length ",
          s.size(), " exceeds max_seq_len ", max_seq_len);
    out.ranges.emplace_back(static_cast<long>(out.tokens.size()), static_cast<long>(s.size()));
    for (size_t i = 0; i < s.size(); ++i) {
      out.tokens.push_back(s[i]);
      out.positions.push_back(static_cast<int>(i));
    }
  }
  return out;
}

// ---- Forward --------------------------------------------------------------------

namespace {

constexpr double kMaskValue = -1e9;

Tensor block_causal_mask(const PackedSeqs& packed) {
  const long t = packed.total();
  std::vector<double> m(static_cast<size_t>(t * t), kMaskValue);
  for (const auto& [start, len] : packed.ranges)
    for (long i = 0; i < len; ++i)
      for (long j = 0; j <= i; ++j) m[static_cast<size_t>((start + i) * t + start + j)] = 0.0;
  return Tensor({t, t}, std::move(m));
}

}  // namespace

Tensor forward_packed(const ModelConfig& config, const ParamView& pv, const PackedSeqs& packed,
                      const NamedParams* substitutes) {
  config.validate();
  check(packed.total() > 0, "forward: empty input");
  for (int tok : packed.tokens)
    check(tok >= 0 && tok < config.vocab_size, "forward: token id ", tok,
          " out of range for vocab_size ", config.vocab_size);
  for (const auto& [start, len] : packed.ranges)
    check(len <= config.max_seq_len, "forward: sequence length ", len, " exceeds max_seq_len ",
          config.max_seq_len);
  if (substitutes)
    for (const auto& [path, t] : *substitutes) {
      check(pv.get(path).shape() == t.shape(), "forward: substitute for '", path,
            "' has shape ", shape_str(t.shape()), ", expected ",
            shape_str(pv.get(path).shape()));
    }

  auto P = [&](const std::string& path) -> Tensor {
    if (substitutes) {
      auto it = substitutes->find(path);
      if (it != substitutes->end()) return it->second;
    }
    return pv.get(path);
  };

  const int n_heads = config.n_heads;
  const long dh = config.d_model / n_heads;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor mask = block_causal_mask(packed);

  Tensor x = add(rows(P("embed"), packed.tokens), rows(P("pos_embed"), packed.positions));
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string base = "layers." + std::to_string(l) + ".";
    Tensor h = rms_normalize(x, P(base + "input_norm"));
    Tensor q = matmul(h, transpose(P(base + "self_attn.q_proj")));
    Tensor k = matmul(h, transpose(P(base + "self_attn.k_proj")));
    Tensor v = matmul(h, transpose(P(base + "self_attn.v_proj")));
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(n_heads));
    for (int hd = 0; hd < n_heads; ++hd) {
      Tensor qh = slice(q, 1, hd * dh, dh);
      Tensor kh = slice(k, 1, hd * dh, dh);
      Tensor vh = slice(v, 1, hd * dh, dh);
      Tensor scores = add(scale(matmul(qh, transpose(kh)), attn_scale), mask);
      heads.push_back(matmul(softmax(scores), vh));
    }
    Tensor att = matmul(concat(heads, 1), transpose(P(base + "self_attn.o_proj")));
    x = add(x, att);
    Tensor h2 = rms_normalize(x, P(base + "post_attn_norm"));
    Tensor gate = silu(matmul(h2, transpose(P(base + "mlp.gate_proj"))));
    Tensor up = matmul(h2, transpose(P(base + "mlp.up_proj")));
    Tensor ffn = matmul(mul(gate, up), transpose(P(base + "mlp.down_proj")));
    x = add(x, ffn);
  }
  Tensor xn = rms_normalize(x, P("final_norm"));
  return matmul(xn, transpose(P("lm_head")));
}

Tensor forward(const ModelConfig& config, const ParamView& pv, const std::vector<int>& tokens) {
  PackedSeqs packed = PackedSeqs::pack({tokens}, config.max_seq_len);
  return forward_packed(config, pv, packed);
}

AnswerProbability answer_probability(const ModelConfig& config, const ParamView& pv,
                                     const std::vector<int>& prompt,
                                     const std::vector<int>& answer) {
  check(!prompt.empty() && !answer.empty(), "answer_probability: prompt and answer must be non-empty");
  check(static_cast<int>(prompt.size() + answer.size()) <= config.max_seq_len,
        "answer_probability: combined length ", prompt.size() + answer.size(),
        " exceeds max_seq_len ", config.max_seq_len);
  std::vector<int> seq = prompt;
  seq.insert(seq.end(), answer.begin(), answer.end());
  Tensor logits = forward(config, pv, seq);
  Tensor probs = softmax(logits);
  AnswerProbability out;
  out.product = 1.0;
  for (size_t j = 0; j < answer.size(); ++j) {
    long pos = static_cast<long>(prompt.size()) - 1 + static_cast<long>(j);
    double p = probs.at(pos, answer[j]);
    out.per_token.push_back(p);
    out.product *= p;
  }
  return out;
}

std::vector<int> generate(const ModelConfig& config, const ParamView& pv,
                          const std::vector<int>& prompt, int max_new_tokens,
                          const GenerateOptions& opts) {
  check(!prompt.empty(), "generate: empty prompt");
  check(max_new_tokens >= 0, "generate: negative max_new_tokens");
  check(static_cast<int>(prompt.size()) + max_new_tokens <= config.max_seq_len,
        "generate: prompt length ", prompt.size(), " + ", max_new_tokens,
        " exceeds max_seq_len ", config.max_seq_len);
  std::vector<int> seq = prompt;
  Rng rng(opts.seed);
  for (int step = 0; step < max_new_tokens; ++step) {
    Tensor logits = forward(config, pv, seq);
    const long last = logits.rows() - 1;
    int next = 0;
    if (!opts.sample) {
      double best = logits.at(last, 0);
      for (int j = 1; j < config.vocab_size; ++j)
        if (logits.at(last, j) > best) {
          best = logits.at(last, j);
          next = j;
        }
    } else {
      check(opts.temperature > 0.0, "generate: temperature must be positive");
      std::vector<double> row(static_cast<size_t>(config.vocab_size));
      for (int j = 0; j < config.vocab_size; ++j) row[static_cast<size_t>(j)] =
          logits.at(last, j) / opts.temperature;
      Tensor p = softmax(Tensor({config.vocab_size}, std::move(row)));
      double u = rng.uniform(), acc = 0.0;
      next = config.vocab_size - 1;
      for (int j = 0; j < config.vocab_size; ++j) {
        acc += p.at(j);
        if (u < acc) {
          next = j;
          break;
        }
      }
    }
    seq.push_back(next);
  }
  return seq;
}

// ---- Adam ------------------------------------------------------------------------

void Adam::step(NamedParams& params, const std::map<std::string, Tensor>& grads,
                double lr_scale) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    check(it != params.end(), "Adam: gradient for unknown parameter '", name, "'");
    const Tensor& w = it->second;
    check(w.numel() == g.numel(), "Adam: gradient size mismatch for '", name, "'");
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) m.assign(static_cast<size_t>(w.numel()), 0.0);
    if (v.empty()) v.assign(static_cast<size_t>(w.numel()), 0.0);
    std::vector<double> nw(w.vec());
    for (long i = 0; i < w.numel(); ++i) {
      const size_t s = static_cast<size_t>(i);
      const double gi = g.at(i);
      m[s] = cfg_.beta1 * m[s] + (1.0 - cfg_.beta1) * gi;
      v[s] = cfg_.beta2 * v[s] + (1.0 - cfg_.beta2) * gi * gi;
      const double mh = m[s] / bc1;
      const double vh = v[s] / bc2;
      nw[s] -= lr_scale * cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
    }
    it->second = Tensor(w.shape(), std::move(nw));
  }
}

// ---- Pretraining --------------------------------------------------------------------

namespace {

struct BatchLoss {
  Tensor loss;  // scalar, mean NLL per target token
  long n_targets;
  std::map<std::string, Tensor> leaves;
  std::shared_ptr<Tape> tape;
};

BatchLoss batch_loss(const ModelConfig& config, const NamedParams& params,
                     const std::vector<std::vector<int>>& batch, bool with_grad) {
  BatchLoss out;
  PackedSeqs packed = PackedSeqs::pack(batch, config.max_seq_len);
  NamedParams subs;
  if (with_grad) {
    out.tape = std::make_shared<Tape>();
    for (const auto& [path, t] : params) {
      Tensor leaf = out.tape->leaf(t);
      out.leaves.emplace(path, leaf);
      subs.emplace(path, leaf);
    }
  }
  ParamView pv(params);
  Tensor logits = forward_packed(config, pv, packed, with_grad ? &subs : nullptr);
  std::vector<std::pair<long, int>> targets;
  for (const auto& [start, len] : packed.ranges)
    for (long i = 0; i + 1 < len; ++i)
      targets.emplace_back(start + i, packed.tokens[static_cast<size_t>(start + i + 1)]);
  check(!targets.empty(), "pretrain: batch contains no next-token targets");
  out.n_targets = static_cast<long>(targets.size());
  out.loss = scale(cross_entropy_with_logits(logits, targets),
                   1.0 / static_cast<double>(out.n_targets));
  return out;
}

}  // namespace

PretrainResult pretrain(const ModelConfig& config, const std::vector<std::vector<int>>& corpus,
                        const PretrainOptions& opts) {
  config.validate();
  check(!corpus.empty(), "pretrain: empty corpus");
  check(opts.batch_size >= 1, "pretrain: batch_size must be >= 1");

  PretrainResult result;
  result.params = init_params(config);

  AdamConfig acfg = opts.adam;
  acfg.lr = opts.lr;
  Adam adam(acfg);
  Rng shuffle_rng(config.seed ^ 0x9e3779b97f4a7c15ull);

  std::vector<size_t> order(corpus.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  size_t cursor = order.size();  // forces a shuffle on first use

  auto next_batch = [&]() {
    std::vector<std::vector<int>> batch;
    for (int i = 0; i < opts.batch_size; ++i) {
      if (cursor == order.size()) {
        shuffle_rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(corpus[order[cursor++]]);
    }
    return batch;
  };

  if (opts.steps == 0) {
    BatchLoss bl = batch_loss(config, result.params, next_batch(), false);
    result.initial_loss = result.final_loss = bl.loss.scalar_value();
    return result;
  }

  for (long step = 0; step < opts.steps; ++step) {
    BatchLoss bl = batch_loss(config, result.params, next_batch(), true);
    double loss = bl.loss.scalar_value();
    if (!std::isfinite(loss)) fail("pretrain: loss diverged (non-finite) at step ", step);
    if (step == 0) result.initial_loss = loss;
    result.final_loss = loss;

    GradientMap gm = bl.tape->backward(bl.loss);
    std::map<std::string, Tensor> grads;
    for (const auto& [path, leaf] : bl.leaves) grads.emplace(path, gm.grad(leaf));
    double lr_scale = 1.0;
    if (opts.cosine_decay)
      lr_scale = 0.5 * (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(step) /
                                       static_cast<double>(opts.steps)));
    adam.step(result.params, grads, lr_scale);
    result.steps_run = step + 1;

    if (opts.eval_every > 0 && opts.target_accuracy >= 0.0 && !opts.eval_pairs.empty() &&
        (step + 1) % opts.eval_every == 0) {
      result.eval_accuracy =
          greedy_accuracy(config, ParamView(result.params), opts.eval_pairs);
      if (result.eval_accuracy >= opts.target_accuracy) break;
    }
  }
  return result;
}

double greedy_accuracy(const ModelConfig& config, const ParamView& pv,
                       const std::vector<std::pair<std::vector<int>, std::vector<int>>>& pairs) {
  check(!pairs.empty(), "greedy_accuracy: no evaluation pairs");
  long correct = 0;
  for (const auto& [prompt, answer] : pairs) {
    std::vector<int> got =
        generate(config, pv, prompt, static_cast<int>(answer.size()));
    bool ok = true;
    for (size_t j = 0; j < answer.size(); ++j)
      if (got[prompt.size() + j] != answer[j]) {
        ok = false;
        break;
      }
    if (ok) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

// ---- Checkpoints ----------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'K', 'N', 'E', 'M', 'O', 'D', 'L', '\0'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void write_str(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
std::string read_str(std::istream& is) {
  uint64_t n = read_u64(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  return s;
}

}  // namespace

void save_model(const std::string& path, const Model& model) {
  validate_params(model.config, model.params);
  check(model.vocab.size() == model.config.vocab_size, "save_model: vocab size ",
        model.vocab.size(), " differs from config.vocab_size ", model.config.vocab_size);
  std::ofstream os(path, std::ios::binary);
  check(os.good(), "save_model: cannot open '", path, "' for writing");
  os.write(kMagic, 8);
  write_u32(os, kVersion);
  json header = {{"n_layers", model.config.n_layers},
                 {"d_model", model.config.d_model},
                 {"d_ff", model.config.d_ff},
                 {"n_heads", model.config.n_heads},
                 {"vocab_size", model.config.vocab_size},
                 {"max_seq_len", model.config.max_seq_len},
                 {"seed", model.config.seed},
                 {"vocab", model.vocab.words()}};
  write_str(os, header.dump());
  write_u64(os, model.params.size());
  for (const auto& [p, t] : model.params) {
    write_str(os, p);
    write_u32(os, static_cast<uint32_t>(t.ndim()));
    for (long d : t.shape()) write_u64(os, static_cast<uint64_t>(d));
    write_u64(os, static_cast<uint64_t>(t.numel()));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  check(os.good(), "save_model: write to '", path, "' failed");
}

Model load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(is.good(), "load_model: cannot open '", path, "'");
  char magic[8] = {};
  is.read(magic, 8);
  check(std::memcmp(magic, kMagic, 8) == 0, "load_model: '", path,
        "' is not a model checkpoint");
  uint32_t version = read_u32(is);
  check(version == kVersion, "load_model: unsupported checkpoint version ", version);
  json header = json::parse(read_str(is));
  Model model;
  model.config.n_layers = header.at("n_layers").get<int>();
  model.config.d_model = header.at("d_model").get<int>();
  model.config.d_ff = header.at("d_ff").get<int>();
  model.config.n_heads = header.at("n_heads").get<int>();
  model.config.vocab_size = header.at("vocab_size").get<int>();
  model.config.max_seq_len = header.at("max_seq_len").get<int>();
  model.config.seed = header.at("seed").get<uint64_t>();
  model.vocab = Vocabulary(header.at("vocab").get<std::vector<std::string>>());
  uint64_t n_entries = read_u64(is);
  for (uint64_t i = 0; i < n_entries; ++i) {
    std::string p = read_str(is);
    uint32_t ndim = read_u32(is);
    std::vector<long> shape(ndim);
    for (uint32_t d = 0; d < ndim; ++d) shape[d] = static_cast<long>(read_u64(is));
    uint64_t numel = read_u64(is);
    std::vector<double> data(numel);
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(numel * sizeof(double)));
    model.params.emplace(p, Tensor(std::move(shape), std::move(data)));
  }
  check(is.good(), "load_model: truncated checkpoint '", path, "'");
  validate_params(model.config, model.params);
  return model;
}

}  // namespace kne
