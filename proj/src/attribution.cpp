#include "kne/attribution.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace kne {

using nlohmann::json;

long AttributionScores::total_neurons() const {
  long n = 0;
  for (const auto& [path, v] : scores) n += static_cast<long>(v.size());
  return n;
}

std::vector<std::string> resolve_target_paths(const std::vector<std::string>& patterns,
                                              const NamedParams& params) {
  std::vector<std::string> candidates;
  for (const auto& [path, t] : params)
    if (t.ndim() == 2 && (path.find(".self_attn.") != std::string::npos ||
                          path.find(".mlp.") != std::string::npos))
      candidates.push_back(path);
  std::vector<std::string> out;
  for (const std::string& pattern : patterns) {
    bool matched = false;
    for (const std::string& path : candidates)
      if (pattern_match(pattern, path)) {
        matched = true;
        if (std::find(out.begin(), out.end(), path) == out.end()) out.push_back(path);
      }
    check(matched, "resolve_target_paths: pattern '", pattern,
          "' matches no projection matrix");
  }
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

// Positions in the packed (prompt ++ answer) sequence whose logits predict
// each answer token.
struct EditSequence {
  PackedSeqs packed;
  std::vector<std::pair<long, int>> answer_targets;  // (logit row, token id)
};

EditSequence edit_sequence(const ModelConfig& config, const TokenizedEdit& edit) {
  check(!edit.prompt.empty() && !edit.attribution_answer.empty(),
        "attribution: edit ", edit.id, " has empty prompt or answer");
  std::vector<int> seq = edit.prompt;
  seq.insert(seq.end(), edit.attribution_answer.begin(), edit.attribution_answer.end());
  EditSequence out;
  out.packed = PackedSeqs::pack({seq}, config.max_seq_len);
  for (size_t j = 0; j < edit.attribution_answer.size(); ++j)
    out.answer_targets.emplace_back(static_cast<long>(edit.prompt.size() + j) - 1,
                                    edit.attribution_answer[j]);
  return out;
}

Tensor scaled_copy(const Tensor& w, double factor) {
  std::vector<double> data(w.vec());
  for (double& v : data) v *= factor;
  return Tensor(w.shape(), std::move(data));
}

Tensor row_scaled_copy(const Tensor& w, long k, double factor) {
  std::vector<double> data(w.vec());
  const long c = w.cols();
  for (long j = 0; j < c; ++j) data[static_cast<size_t>(k * c + j)] *= factor;
  return Tensor(w.shape(), std::move(data));
}

double row_dot(const Tensor& a, const Tensor& b, long k) {
  const long c = a.cols();
  const double* pa = a.data() + k * c;
  const double* pb = b.data() + k * c;
  double s = 0.0;
  for (long j = 0; j < c; ++j) s += pa[j] * pb[j];
  return s;
}

// Per-edit contribution of the joint-scaling mode, accumulated into `into`.
void joint_edit_scores(const ModelConfig& config, const ParamView& pv,
                       const TokenizedEdit& edit, const std::vector<std::string>& targets,
                       int m, std::map<std::string, std::vector<double>>& into) {
  EditSequence es = edit_sequence(config, edit);
  std::map<std::string, std::vector<double>> partial;
  for (const std::string& p : targets)
    partial.emplace(p, std::vector<double>(static_cast<size_t>(pv.get(p).rows()), 0.0));

  for (int i = 1; i <= m; ++i) {
    const double factor = static_cast<double>(i) / static_cast<double>(m);
    Tape tape;
    NamedParams subs;
    std::map<std::string, Tensor> leaves;
    for (const std::string& p : targets) {
      Tensor leaf = tape.leaf(scaled_copy(pv.get(p), factor));
      leaves.emplace(p, leaf);
      subs.emplace(p, leaf);
    }
    Tensor logits = forward_packed(config, pv, es.packed, &subs);
    for (const auto& target : es.answer_targets) {
      Tensor prob = exp(scale(cross_entropy_with_logits(logits, {target}), -1.0));
      GradientMap gm = tape.backward(prob);
      for (const std::string& p : targets) {
        Tensor g = gm.grad(leaves.at(p));
        const Tensor& base = pv.get(p);
        auto& acc = partial.at(p);
        for (long k = 0; k < base.rows(); ++k) acc[static_cast<size_t>(k)] += row_dot(base, g, k);
      }
    }
  }
  for (const std::string& p : targets) {
    auto& acc = into.at(p);
    const auto& part = partial.at(p);
    for (size_t k = 0; k < part.size(); ++k) acc[k] += part[k] / static_cast<double>(m);
  }
}

}  // namespace

double scaled_answer_probability(const ModelConfig& config, const ParamView& pv,
                                 const TokenizedEdit& edit, const std::string& path, long k,
                                 double scale_factor, int token_index) {
  check(scale_factor >= 0.0 && scale_factor <= 1.0, "scaled_answer_probability: scale ",
        scale_factor, " outside [0, 1]");
  const Tensor& w = pv.get(path);
  check(w.ndim() == 2, "scaled_answer_probability: '", path, "' is not a matrix");
  check(k >= 0 && k < w.rows(), "scaled_answer_probability: neuron ", k,
        " out of range for '", path, "' with d2 = ", w.rows());
  check(token_index >= 0 &&
            token_index < static_cast<int>(edit.attribution_answer.size()),
        "scaled_answer_probability: token_index ", token_index, " out of range");
  EditSequence es = edit_sequence(config, edit);
  NamedParams subs;
  subs.emplace(path, row_scaled_copy(w, k, scale_factor));
  Tensor logits = forward_packed(config, pv, es.packed, &subs);
  Tensor probs = softmax(logits);
  const auto& [pos, id] = es.answer_targets[static_cast<size_t>(token_index)];
  return probs.at(pos, id);
}

double neuron_attribution(const ModelConfig& config, const ParamView& pv,
                          const TokenizedEdit& edit, const std::string& path, long k, int m) {
  check(m >= 1, "neuron_attribution: m must be >= 1, got ", m);
  const Tensor& w = pv.get(path);
  check(w.ndim() == 2, "neuron_attribution: '", path, "' is not a matrix");
  check(k >= 0 && k < w.rows(), "neuron_attribution: neuron ", k, " out of range for '", path,
        "' with d2 = ", w.rows());
  EditSequence es = edit_sequence(config, edit);

  double sum = 0.0;
  for (int i = 1; i <= m; ++i) {
    const double factor = static_cast<double>(i) / static_cast<double>(m);
    Tape tape;
    Tensor leaf = tape.leaf(row_scaled_copy(w, k, factor));
    NamedParams subs;
    subs.emplace(path, leaf);
    Tensor logits = forward_packed(config, pv, es.packed, &subs);
    for (const auto& target : es.answer_targets) {
      Tensor prob = exp(scale(cross_entropy_with_logits(logits, {target}), -1.0));
      GradientMap gm = tape.backward(prob);
      sum += row_dot(w, gm.grad(leaf), k);
    }
  }
  return sum / static_cast<double>(m);
}

AttributionScores attribute_edit_set(const ModelConfig& config, const ParamView& pv,
                                     const std::vector<TokenizedEdit>& edits,
                                     const AttributionConfig& acfg) {
  check(!edits.empty(), "attribute_edit_set: empty edit set");
  check(acfg.riemann_steps >= 1, "attribute_edit_set: riemann_steps must be >= 1");

  std::vector<const TokenizedEdit*> selected;
  if (acfg.localization_subset_size >= 0 &&
      acfg.localization_subset_size < static_cast<long>(edits.size())) {
    check(acfg.localization_subset_size >= 1,
          "attribute_edit_set: localization subset must be >= 1");
    Rng rng(acfg.subsample_seed);
    std::vector<size_t> idx = rng.sample_without_replacement(
        edits.size(), static_cast<size_t>(acfg.localization_subset_size));
    std::sort(idx.begin(), idx.end());
    for (size_t i : idx) selected.push_back(&edits[i]);
  } else {
    for (const TokenizedEdit& e : edits) selected.push_back(&e);
  }

  std::vector<std::string> targets = resolve_target_paths(acfg.target_paths, pv.base());

  AttributionScores out;
  out.riemann_steps = acfg.riemann_steps;
  out.mode = acfg.exact_mode ? "exact" : "joint";
  for (const TokenizedEdit* e : selected) out.edit_ids.push_back(e->id);
  for (const std::string& p : targets)
    out.scores.emplace(p, std::vector<double>(static_cast<size_t>(pv.get(p).rows()), 0.0));

  for (const TokenizedEdit* e : selected) {
    if (acfg.exact_mode) {
      for (const std::string& p : targets) {
        auto& acc = out.scores.at(p);
        const long d2 = pv.get(p).rows();
        for (long k = 0; k < d2; ++k)
          acc[static_cast<size_t>(k)] +=
              neuron_attribution(config, pv, *e, p, k, acfg.riemann_steps);
      }
    } else {
      joint_edit_scores(config, pv, *e, targets, acfg.riemann_steps, out.scores);
    }
  }
  return out;
}

void save_scores_json(const std::string& path, const AttributionScores& scores) {
  json j;
  for (const auto& [p, v] : scores.scores) j[p] = v;
  j["meta"] = {{"m", scores.riemann_steps},
               {"edit_ids", scores.edit_ids},
               {"mode", scores.mode}};
  std::ofstream os(path);
  check(os.good(), "save_scores_json: cannot open '", path, "' for writing");
  os << j.dump(2) << "\n";
  check(os.good(), "save_scores_json: write failed");
}

AttributionScores load_scores_json(const std::string& path) {
  std::ifstream is(path);
  check(is.good(), "load_scores_json: cannot open '", path, "'");
  json j = json::parse(is);
  AttributionScores out;
  check(j.contains("meta"), "load_scores_json: missing 'meta' in '", path, "'");
  out.riemann_steps = j.at("meta").at("m").get<int>();
  out.mode = j.at("meta").at("mode").get<std::string>();
  out.edit_ids = j.at("meta").at("edit_ids").get<std::vector<long>>();
  for (const auto& [key, value] : j.items()) {
    if (key == "meta") continue;
    out.scores.emplace(key, value.get<std::vector<double>>());
  }
  return out;
}

}  // namespace kne
