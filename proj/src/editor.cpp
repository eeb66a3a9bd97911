#include "kne/editor.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace kne {

void EditConfig::validate() const {
  check(alpha > 0.0, "EditConfig: alpha must be positive");
  check(max_steps >= 1, "EditConfig: max_steps must be >= 1");
  check(lr > 0.0, "EditConfig: lr must be positive");
  check(early_stop_prob > 0.0 && early_stop_prob <= 1.0,
        "EditConfig: early_stop_prob must be in (0, 1]");
  check(batch_size >= 1, "EditConfig: batch_size must be >= 1");
}

DeltaParams init_delta(const KnowledgeNeuronalEnsemble& ensemble, const NamedParams& params) {
  check(!ensemble.paths.empty(), "init_delta: empty ensemble");
  DeltaParams delta;
  for (const auto& [path, indices] : ensemble.paths) {
    check(!indices.empty(), "init_delta: ensemble entry '", path, "' has no indices");
    const Tensor& w = param(params, path);
    check(w.ndim() == 2, "init_delta: '", path, "' is not a matrix");
    check(std::is_sorted(indices.begin(), indices.end()) &&
              std::adjacent_find(indices.begin(), indices.end()) == indices.end(),
          "init_delta: indices for '", path, "' must be strictly ascending");
    check(indices.back() < w.rows(), "init_delta: index ", indices.back(),
          " out of range for '", path, "' with d2 = ", w.rows());
    DeltaEntry entry;
    entry.indices = indices;
    entry.d2 = w.rows();
    entry.w_kne = Tensor::zeros({static_cast<long>(indices.size()), w.cols()});
    delta.emplace(path, std::move(entry));
  }
  return delta;
}

Tensor expand_delta(const DeltaParams& delta, const std::string& path) {
  auto it = delta.find(path);
  check(it != delta.end(), "expand_delta: unknown path '", path, "'");
  const DeltaEntry& e = it->second;
  return row_scatter(e.w_kne, e.indices, e.d2);
}

Tensor apply_update(const Tensor& w, const Tensor& delta_w, double alpha, long n) {
  check(w.same_shape(delta_w), "apply_update: shape mismatch ", shape_str(w.shape()), " vs ",
        shape_str(delta_w.shape()));
  check(n >= 0, "apply_update: negative n");
  bool delta_nonzero = false;
  for (long i = 0; i < delta_w.numel(); ++i)
    if (delta_w.at(i) != 0.0) {
      delta_nonzero = true;
      break;
    }
  if (n == 0) {
    check(!delta_nonzero, "apply_update: n = 0 with a nonzero delta");
    return w;
  }
  const double s = alpha / std::sqrt(static_cast<double>(n));
  std::vector<double> out(w.vec());
  // Entries with an exactly-zero delta keep the base bits (frozen rows stay
  // bit-identical rather than going through a +0.0 round trip).
  for (long i = 0; i < w.numel(); ++i) {
    double d = delta_w.at(i);
    if (d != 0.0) out[static_cast<size_t>(i)] += s * d;
  }
  return Tensor(w.shape(), std::move(out));
}

namespace {

struct EditBatchPlan {
  PackedSeqs packed;
  std::vector<std::pair<long, int>> all_targets;              // pooled loss targets
  std::vector<std::vector<std::pair<long, int>>> per_edit;    // per-edit target list
};

EditBatchPlan plan_edits(const ModelConfig& config, const std::vector<TokenizedEdit>& edits) {
  check(!edits.empty(), "edit: empty edit list");
  EditBatchPlan plan;
  std::vector<std::vector<int>> seqs;
  for (const TokenizedEdit& e : edits) {
    check(!e.prompt.empty() && !e.target.empty(), "edit: edit ", e.id,
          " has empty prompt or target");
    check(static_cast<int>(e.prompt.size() + e.target.size()) <= config.max_seq_len,
          "edit: edit ", e.id, " does not fit in max_seq_len ", config.max_seq_len);
    std::vector<int> seq = e.prompt;
    seq.insert(seq.end(), e.target.begin(), e.target.end());
    seqs.push_back(std::move(seq));
  }
  plan.packed = PackedSeqs::pack(seqs, config.max_seq_len);
  for (size_t i = 0; i < edits.size(); ++i) {
    const auto& [start, len] = plan.packed.ranges[i];
    (void)len;
    const TokenizedEdit& e = edits[i];
    std::vector<std::pair<long, int>> targets;
    for (size_t j = 0; j < e.target.size(); ++j)
      targets.emplace_back(start + static_cast<long>(e.prompt.size() + j) - 1, e.target[j]);
    plan.all_targets.insert(plan.all_targets.end(), targets.begin(), targets.end());
    plan.per_edit.push_back(std::move(targets));
  }
  return plan;
}

double target_probability(const Tensor& logits,
                          const std::vector<std::pair<long, int>>& targets) {
  double log_p = 0.0;
  const long v = logits.cols();
  for (const auto& [pos, id] : targets) {
    const double* row = logits.data() + pos * v;
    double mx = row[0];
    for (long j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (long j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
    log_p += row[id] - mx - std::log(sum);
  }
  return std::exp(log_p);
}

// Rows of `resolved` outside `indices` must match `base` bit-for-bit.
void assert_frozen_rows(const Tensor& base, const Tensor& resolved,
                        const std::vector<long>& indices, const std::string& path) {
  std::vector<bool> editable(static_cast<size_t>(base.rows()), false);
  for (long k : indices) editable[static_cast<size_t>(k)] = true;
  const long c = base.cols();
  for (long r = 0; r < base.rows(); ++r) {
    if (editable[static_cast<size_t>(r)]) continue;
    check(std::memcmp(base.data() + r * c, resolved.data() + r * c,
                      static_cast<size_t>(c) * sizeof(double)) == 0,
          "edit: frozen row ", r, " of '", path, "' changed");
  }
}

}  // namespace

EditResult edit(const ModelConfig& config, const NamedParams& base,
                const KnowledgeNeuronalEnsemble& ensemble,
                const std::vector<TokenizedEdit>& edits, const EditConfig& ecfg) {
  ecfg.validate();
  DeltaParams delta = init_delta(ensemble, base);
  EditBatchPlan plan = plan_edits(config, edits);
  const double n_target_tokens = static_cast<double>(plan.all_targets.size());

  NamedParams kne_weights;
  std::map<std::string, double> update_scale;
  for (const auto& [path, entry] : delta) {
    kne_weights.emplace(path, entry.w_kne);
    update_scale.emplace(path,
                         ecfg.alpha / std::sqrt(static_cast<double>(entry.indices.size())));
  }

  AdamConfig acfg;
  acfg.lr = ecfg.lr;
  Adam adam(acfg);
  ParamView base_view(base);

  OptimizationTrace trace;
  NamedParams best_weights = kne_weights;
  double best_loss = std::numeric_limits<double>::infinity();
  double initial_loss = 0.0;

  // The state after `step` updates is measured at iteration `step`, so the
  // loop visits max_steps + 1 states including the final one.
  for (long step = 0;; ++step) {
    Tape tape;
    NamedParams subs;
    std::map<std::string, Tensor> leaves;
    for (const auto& [path, entry] : delta) {
      Tensor leaf = tape.leaf(kne_weights.at(path));
      leaves.emplace(path, leaf);
      Tensor expanded = row_scatter(leaf, entry.indices, entry.d2);
      subs.emplace(path, add(param(base, path), scale(expanded, update_scale.at(path))));
    }
    Tensor logits = forward_packed(config, base_view, plan.packed, &subs);

    double min_prob = 1.0, sum_prob = 0.0;
    for (const auto& targets : plan.per_edit) {
      double p = target_probability(logits, targets);
      min_prob = std::min(min_prob, p);
      sum_prob += p;
    }
    const double mean_prob = sum_prob / static_cast<double>(plan.per_edit.size());

    Tensor loss_t = scale(cross_entropy_with_logits(logits, plan.all_targets),
                          1.0 / n_target_tokens);
    const double loss = loss_t.scalar_value();
    if (!std::isfinite(loss)) fail("edit: loss diverged (non-finite) at step ", step);
    if (step == 0) initial_loss = loss;
    if (loss < best_loss) {
      best_loss = loss;
      best_weights = kne_weights;
      trace.best_step = step;
    }
    trace.steps.push_back(TraceStep{step, loss, mean_prob});

    if (min_prob > ecfg.early_stop_prob) {
      trace.early_stopped = true;
      best_weights = kne_weights;
      trace.best_step = step;
      break;
    }
    if (step == ecfg.max_steps) break;

    GradientMap gm = tape.backward(loss_t);
    std::map<std::string, Tensor> grads;
    for (const auto& [path, leaf] : leaves) grads.emplace(path, gm.grad(leaf));
    adam.step(kne_weights, grads);

    if (ecfg.debug_check_frozen) {
      for (const auto& [path, entry] : delta) {
        DeltaParams snapshot = delta;
        snapshot.at(path).w_kne = kne_weights.at(path);
        Tensor resolved = apply_update(param(base, path), expand_delta(snapshot, path),
                                       ecfg.alpha, static_cast<long>(entry.indices.size()));
        assert_frozen_rows(param(base, path), resolved, entry.indices, path);
      }
    }
  }
  trace.no_improvement = !trace.early_stopped && !(best_loss < initial_loss);

  for (auto& [path, entry] : delta) entry.w_kne = best_weights.at(path);
  NamedParams overlay;
  for (const auto& [path, entry] : delta)
    overlay.emplace(path, apply_update(param(base, path), expand_delta(delta, path), ecfg.alpha,
                                       static_cast<long>(entry.indices.size())));
  EditResult result{make_edited_model(base, std::move(overlay)), std::move(trace)};
  return result;
}

BatchEditResult edit_batch_stream(const ModelConfig& config, const NamedParams& base,
                                  const KnowledgeNeuronalEnsemble& ensemble,
                                  const std::vector<TokenizedEdit>& edits,
                                  const EditConfig& ecfg) {
  ecfg.validate();
  check(!edits.empty(), "edit_batch_stream: empty edit list");
  BatchEditResult result;
  NamedParams current = base;
  for (size_t start = 0; start < edits.size(); start += static_cast<size_t>(ecfg.batch_size)) {
    size_t end = std::min(edits.size(), start + static_cast<size_t>(ecfg.batch_size));
    std::vector<TokenizedEdit> batch(edits.begin() + static_cast<long>(start),
                                     edits.begin() + static_cast<long>(end));
    EditResult er = edit(config, current, ensemble, batch, ecfg);
    for (const auto& [path, t] : er.model.overlay) current[path] = t;

    BatchEditStep step;
    for (const TokenizedEdit& e : batch) step.edit_ids.push_back(e.id);
    step.trace = std::move(er.trace);
    for (const auto& [path, t] : er.model.overlay) {
      (void)t;
      step.overlay_after.emplace(path, current.at(path));
    }
    result.batches.push_back(std::move(step));
  }
  NamedParams final_overlay;
  for (const auto& [path, idx] : ensemble.paths) {
    (void)idx;
    final_overlay.emplace(path, current.at(path));
  }
  result.final_model = make_edited_model(base, std::move(final_overlay));
  return result;
}

// ---- Edited-model container ----------------------------------------------------

namespace {

constexpr char kEditMagic[8] = {'K', 'N', 'E', 'E', 'D', 'I', 'T', '\0'};
constexpr uint32_t kEditVersion = 1;

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

void save_edited_model(const std::string& path, const EditedModelFile& file) {
  std::ofstream os(path, std::ios::binary);
  check(os.good(), "save_edited_model: cannot open '", path, "' for writing");
  os.write(kEditMagic, 8);
  write_u32(os, kEditVersion);
  write_str(os, file.base_checkpoint);
  write_u64(os, file.base_hash);
  write_str(os, file.config_json);
  write_str(os, file.trace_json);
  write_u64(os, file.overlay.size());
  for (const auto& [p, t] : file.overlay) {
    write_str(os, p);
    write_u32(os, static_cast<uint32_t>(t.ndim()));
    for (long d : t.shape()) write_u64(os, static_cast<uint64_t>(d));
    write_u64(os, static_cast<uint64_t>(t.numel()));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  check(os.good(), "save_edited_model: write to '", path, "' failed");
}

EditedModelFile load_edited_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(is.good(), "load_edited_model: cannot open '", path, "'");
  char magic[8] = {};
  is.read(magic, 8);
  check(std::memcmp(magic, kEditMagic, 8) == 0, "load_edited_model: '", path,
        "' is not an edited-model file");
  uint32_t version = read_u32(is);
  check(version == kEditVersion, "load_edited_model: unsupported version ", version);
  EditedModelFile file;
  file.base_checkpoint = read_str(is);
  file.base_hash = read_u64(is);
  file.config_json = read_str(is);
  file.trace_json = read_str(is);
  uint64_t n = read_u64(is);
  for (uint64_t i = 0; i < n; ++i) {
    std::string p = read_str(is);
    uint32_t ndim = read_u32(is);
    std::vector<long> shape(ndim);
    for (uint32_t d = 0; d < ndim; ++d) shape[d] = static_cast<long>(read_u64(is));
    uint64_t numel = read_u64(is);
    std::vector<double> data(numel);
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(numel * sizeof(double)));
    file.overlay.emplace(p, Tensor(std::move(shape), std::move(data)));
  }
  check(is.good(), "load_edited_model: truncated file '", path, "'");
  return file;
}

}  // namespace kne
