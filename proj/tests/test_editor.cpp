#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>

#include "kne/editor.hpp"
#include "test_fixtures.hpp"
#include "test_support.hpp"

using namespace kne;
using kne::testing::tiny_fixture;

namespace {

KnowledgeNeuronalEnsemble small_ensemble() {
  KnowledgeNeuronalEnsemble ens;
  ens.paths["layers.0.mlp.down_proj"] = {1, 5, 9, 20};
  ens.paths["layers.1.mlp.down_proj"] = {0, 7};
  ens.paths["layers.1.self_attn.v_proj"] = {3, 12, 30};
  ens.keep_fraction = 0.0;
  return ens;
}

// Independent reference for the editing loop: optimizes the full [d2 x d1]
// delta matrices with gradients hard-zeroed outside the selected rows, never
// going through DeltaParams or row_scatter on the compact block.
struct FullMatrixRun {
  std::vector<double> losses;
  NamedParams resolved;  // final edited matrices
};

FullMatrixRun masked_full_matrix_edit(const ModelConfig& config, const NamedParams& base,
                                      const KnowledgeNeuronalEnsemble& ensemble,
                                      const std::vector<TokenizedEdit>& edits,
                                      const EditConfig& ecfg, long steps) {
  FullMatrixRun run;
  NamedParams full_delta;
  std::map<std::string, double> scale_of;
  std::map<std::string, std::vector<bool>> editable;
  for (const auto& [path, idx] : ensemble.paths) {
    const Tensor& w = param(base, path);
    full_delta.emplace(path, Tensor::zeros(w.shape()));
    scale_of[path] = ecfg.alpha / std::sqrt(static_cast<double>(idx.size()));
    std::vector<bool> mask(static_cast<size_t>(w.rows()), false);
    for (long k : idx) mask[static_cast<size_t>(k)] = true;
    editable[path] = std::move(mask);
  }

  std::vector<std::vector<int>> seqs;
  std::vector<std::pair<long, int>> targets;
  for (const TokenizedEdit& e : edits) {
    std::vector<int> s = e.prompt;
    s.insert(s.end(), e.target.begin(), e.target.end());
    seqs.push_back(std::move(s));
  }
  PackedSeqs packed = PackedSeqs::pack(seqs, config.max_seq_len);
  for (size_t i = 0; i < edits.size(); ++i) {
    const auto& [start, len] = packed.ranges[i];
    (void)len;
    for (size_t j = 0; j < edits[i].target.size(); ++j)
      targets.emplace_back(start + static_cast<long>(edits[i].prompt.size() + j) - 1,
                           edits[i].target[j]);
  }

  AdamConfig acfg;
  acfg.lr = ecfg.lr;
  Adam adam(acfg);
  ParamView pv(base);
  NamedParams best_delta = full_delta;
  double best_loss = std::numeric_limits<double>::infinity();
  for (long step = 0;; ++step) {
    Tape tape;
    NamedParams subs;
    std::map<std::string, Tensor> leaves;
    for (const auto& [path, d] : full_delta) {
      Tensor leaf = tape.leaf(d);
      leaves.emplace(path, leaf);
      subs.emplace(path, add(param(base, path), scale(leaf, scale_of.at(path))));
    }
    Tensor loss_t = scale(cross_entropy_with_logits(forward_packed(config, pv, packed, &subs),
                                                    targets),
                          1.0 / static_cast<double>(targets.size()));
    double loss = loss_t.scalar_value();
    if (loss < best_loss) {
      best_loss = loss;
      best_delta = full_delta;
    }
    if (step == steps) break;
    run.losses.push_back(loss);
    GradientMap gm = tape.backward(loss_t);
    std::map<std::string, Tensor> grads;
    for (const auto& [path, leaf] : leaves) {
      Tensor g = gm.grad(leaf);
      std::vector<double> masked(g.vec());
      const auto& mask = editable.at(path);
      const long c = g.cols();
      for (long r = 0; r < g.rows(); ++r)
        if (!mask[static_cast<size_t>(r)])
          for (long j = 0; j < c; ++j) masked[static_cast<size_t>(r * c + j)] = 0.0;
      grads.emplace(path, Tensor(g.shape(), std::move(masked)));
    }
    adam.step(full_delta, grads);
  }
  for (const auto& [path, d] : best_delta) {
    const double s = scale_of.at(path);
    std::vector<double> out(param(base, path).vec());
    for (long i = 0; i < d.numel(); ++i)
      if (d.at(i) != 0.0) out[static_cast<size_t>(i)] += s * d.at(i);
    run.resolved.emplace(path, Tensor(d.shape(), std::move(out)));
  }
  return run;
}

}  // namespace

TEST_SUITE_BEGIN("editor");

TEST_CASE("expand_delta of a zero block is the zero matrix") {
  const auto& fx = tiny_fixture();
  DeltaParams delta = init_delta(small_ensemble(), fx.params);
  Tensor expanded = expand_delta(delta, "layers.0.mlp.down_proj");
  CHECK(expanded.shape() == param(fx.params, "layers.0.mlp.down_proj").shape());
  for (long i = 0; i < expanded.numel(); ++i) CHECK(expanded.at(i) == 0.0);
}

TEST_CASE("expand_delta with every row selected reproduces the block") {
  const auto& fx = tiny_fixture();
  const std::string path = "layers.0.mlp.down_proj";
  const Tensor& w = param(fx.params, path);
  KnowledgeNeuronalEnsemble ens;
  std::vector<long> all(static_cast<size_t>(w.rows()));
  for (long i = 0; i < w.rows(); ++i) all[static_cast<size_t>(i)] = i;
  ens.paths[path] = all;
  DeltaParams delta = init_delta(ens, fx.params);
  Rng rng(3);
  delta.at(path).w_kne = kne::testing::random_tensor(w.shape(), rng);
  Tensor expanded = expand_delta(delta, path);
  CHECK(expanded.vec() == delta.at(path).w_kne.vec());
}

TEST_CASE("scatter then gather round-trips the selected rows bit-exactly") {
  const auto& fx = tiny_fixture();
  KnowledgeNeuronalEnsemble ens = small_ensemble();
  DeltaParams delta = init_delta(ens, fx.params);
  const std::string path = "layers.1.self_attn.v_proj";
  Rng rng(9);
  const auto& entry = delta.at(path);
  delta.at(path).w_kne = kne::testing::random_tensor(entry.w_kne.shape(), rng);
  Tensor expanded = expand_delta(delta, path);
  std::vector<int> ids;
  for (long k : entry.indices) ids.push_back(static_cast<int>(k));
  Tensor gathered = rows(expanded, ids);
  CHECK(gathered.vec() == delta.at(path).w_kne.vec());
}

TEST_CASE("apply_update algebra") {
  Rng rng(4);
  Tensor w = kne::testing::random_tensor({6, 5}, rng);

  Tensor same = apply_update(w, Tensor::zeros({6, 5}), 1.0, 4);
  CHECK(same.content_hash() == w.content_hash());

  const long n = 9;
  Tensor bumped = apply_update(w, Tensor::full({6, 5}, 1.0), std::sqrt(double(n)), n);
  for (long i = 0; i < w.numel(); ++i) CHECK(bumped.at(i) == w.at(i) + 1.0);

  Tensor d = kne::testing::random_tensor({6, 5}, rng);
  Tensor u1 = apply_update(w, d, 2.0, 4);
  Tensor u2 = apply_update(w, d, 2.0, 16);
  for (long i = 0; i < w.numel(); ++i)
    CHECK(u2.at(i) - w.at(i) == doctest::Approx((u1.at(i) - w.at(i)) / 2.0).epsilon(1e-15));

  CHECK_THROWS_AS(apply_update(w, Tensor::full({6, 5}, 1.0), 1.0, 0), Error);
  CHECK(apply_update(w, Tensor::zeros({6, 5}), 1.0, 0).content_hash() == w.content_hash());
}

TEST_CASE("already-satisfied edits stop at step 0 with a zero delta") {
  const auto& fx = tiny_fixture();
  // Pick the triple the model already knows with the highest confidence and
  // "edit" it to its current object.
  ParamView pv(fx.params);
  auto pairs = triple_eval_pairs(fx.world, fx.corpus.vocab);
  TokenizedEdit satisfied;
  double best = -1.0;
  for (const auto& [prompt, answer] : pairs) {
    double p = answer_probability(fx.config, pv, prompt, answer).product;
    if (p > best) {
      best = p;
      satisfied.prompt = prompt;
      satisfied.target = answer;
      satisfied.attribution_answer = answer;
    }
  }
  REQUIRE(best > 0.9);

  EditConfig ecfg;
  ecfg.early_stop_prob = 0.9;
  EditResult res = edit(fx.config, fx.params, small_ensemble(), {satisfied}, ecfg);
  CHECK(res.trace.early_stopped);
  CHECK(res.trace.steps.size() == 1);
  CHECK(res.trace.steps[0].step == 0);
  for (const auto& [path, t] : res.model.overlay)
    CHECK(t.content_hash() == param(fx.params, path).content_hash());
}

TEST_CASE("scatter optimization matches the masked-full-matrix oracle step for step") {
  const auto& fx = tiny_fixture();
  KnowledgeNeuronalEnsemble ens = small_ensemble();
  EditConfig ecfg;
  ecfg.max_steps = 20;
  ecfg.lr = 5e-2;
  ecfg.alpha = 1.3;
  ecfg.early_stop_prob = 1.0;  // probabilities never exceed 1, so no early stop
  std::vector<TokenizedEdit> edits = {fx.edits[0], fx.edits[1]};

  EditResult res = edit(fx.config, fx.params, ens, edits, ecfg);
  FullMatrixRun oracle = masked_full_matrix_edit(fx.config, fx.params, ens, edits, ecfg, 20);

  // The trace measures the state before each of the 20 updates plus the
  // final state; the oracle's 20 losses align with the first 20 entries.
  REQUIRE(res.trace.steps.size() == 21);
  REQUIRE(oracle.losses.size() == 20);
  for (size_t i = 0; i < 20; ++i)
    CHECK(std::fabs(res.trace.steps[i].loss - oracle.losses[i]) < 1e-10);
  for (const auto& [path, t] : res.model.overlay) {
    const Tensor& o = oracle.resolved.at(path);
    REQUIRE(t.numel() == o.numel());
    for (long i = 0; i < t.numel(); ++i) CHECK(std::fabs(t.at(i) - o.at(i)) < 1e-10);
  }
}

TEST_CASE("frozen parameters and rows are bit-identical after an edit") {
  const auto& fx = tiny_fixture();
  KnowledgeNeuronalEnsemble ens = small_ensemble();
  EditConfig ecfg;
  ecfg.max_steps = 8;
  ecfg.debug_check_frozen = true;
  EditResult res = edit(fx.config, fx.params, ens, fx.edits, ecfg);

  for (const auto& [path, t] : fx.params) {
    if (ens.paths.count(path)) continue;
    CHECK(res.model.view().get(path).content_hash() == t.content_hash());
  }
  for (const auto& [path, idx] : ens.paths) {
    const Tensor& base = param(fx.params, path);
    const Tensor& edited = res.model.overlay.at(path);
    std::vector<bool> editable(static_cast<size_t>(base.rows()), false);
    for (long k : idx) editable[static_cast<size_t>(k)] = true;
    const long c = base.cols();
    bool any_changed = false;
    for (long r = 0; r < base.rows(); ++r) {
      bool same = std::memcmp(base.data() + r * c, edited.data() + r * c,
                              static_cast<size_t>(c) * sizeof(double)) == 0;
      if (editable[static_cast<size_t>(r)]) {
        if (!same) any_changed = true;
      } else {
        CHECK(same);
      }
    }
    CHECK(any_changed);  // the optimizer actually moved the selected rows
  }
}

TEST_CASE("reconstruction: overlay equals base plus the scaled expansion") {
  const auto& fx = tiny_fixture();
  KnowledgeNeuronalEnsemble ens = small_ensemble();
  EditConfig ecfg;
  ecfg.max_steps = 6;
  ecfg.alpha = 0.7;
  EditResult res = edit(fx.config, fx.params, ens, fx.edits, ecfg);
  // Recover W_kne from the overlay and re-apply it.
  for (const auto& [path, idx] : ens.paths) {
    const Tensor& base = param(fx.params, path);
    const Tensor& edited = res.model.overlay.at(path);
    const double s = ecfg.alpha / std::sqrt(static_cast<double>(idx.size()));
    const long c = base.cols();
    std::vector<double> block;
    for (long k : idx)
      for (long j = 0; j < c; ++j) block.push_back((edited.at(k, j) - base.at(k, j)) / s);
    DeltaParams delta;
    DeltaEntry entry;
    entry.indices = idx;
    entry.d2 = base.rows();
    entry.w_kne = Tensor({static_cast<long>(idx.size()), c}, std::move(block));
    delta.emplace(path, std::move(entry));
    Tensor re = apply_update(base, expand_delta(delta, path), ecfg.alpha,
                             static_cast<long>(idx.size()));
    for (long i = 0; i < re.numel(); ++i) CHECK(std::fabs(re.at(i) - edited.at(i)) < 1e-12);
  }
}

TEST_CASE("editing is deterministic") {
  const auto& fx = tiny_fixture();
  KnowledgeNeuronalEnsemble ens = small_ensemble();
  EditConfig ecfg;
  ecfg.max_steps = 10;
  EditResult a = edit(fx.config, fx.params, ens, fx.edits, ecfg);
  EditResult b = edit(fx.config, fx.params, ens, fx.edits, ecfg);
  CHECK(params_hash(a.model.overlay) == params_hash(b.model.overlay));
  REQUIRE(a.trace.steps.size() == b.trace.steps.size());
  for (size_t i = 0; i < a.trace.steps.size(); ++i)
    CHECK(a.trace.steps[i].loss == b.trace.steps[i].loss);
}

TEST_CASE("a vanishing learning rate raises the no-improvement flag") {
  const auto& fx = tiny_fixture();
  EditConfig ecfg;
  ecfg.max_steps = 3;
  ecfg.lr = 1e-300;
  EditResult res = edit(fx.config, fx.params, small_ensemble(), {fx.edits[0]}, ecfg);
  CHECK(res.trace.no_improvement);
  CHECK_FALSE(res.trace.early_stopped);
}

TEST_CASE("one batch containing all edits equals a single joint edit") {
  const auto& fx = tiny_fixture();
  KnowledgeNeuronalEnsemble ens = small_ensemble();
  EditConfig ecfg;
  ecfg.max_steps = 6;
  ecfg.batch_size = static_cast<int>(fx.edits.size());
  EditResult single = edit(fx.config, fx.params, ens, fx.edits, ecfg);
  BatchEditResult stream = edit_batch_stream(fx.config, fx.params, ens, fx.edits, ecfg);
  CHECK(stream.batches.size() == 1);
  CHECK(params_hash(stream.final_model.overlay) == params_hash(single.model.overlay));
}

TEST_CASE("batch size 1 runs one batch per edit, sequentially accumulated") {
  const auto& fx = tiny_fixture();
  KnowledgeNeuronalEnsemble ens = small_ensemble();
  EditConfig ecfg;
  ecfg.max_steps = 4;
  ecfg.batch_size = 1;
  BatchEditResult stream = edit_batch_stream(fx.config, fx.params, ens, fx.edits, ecfg);
  CHECK(stream.batches.size() == fx.edits.size());
  for (size_t i = 0; i < stream.batches.size(); ++i) {
    REQUIRE(stream.batches[i].edit_ids.size() == 1);
    CHECK(stream.batches[i].edit_ids[0] == fx.edits[i].id);
  }
  // Non-ensemble paths still frozen across the whole stream.
  for (const auto& [path, t] : fx.params) {
    if (ens.paths.count(path)) continue;
    CHECK(stream.final_model.view().get(path).content_hash() == t.content_hash());
  }
}

TEST_CASE("edited-model container round trip") {
  const auto& fx = tiny_fixture();
  EditConfig ecfg;
  ecfg.max_steps = 3;
  EditResult res = edit(fx.config, fx.params, small_ensemble(), {fx.edits[0]}, ecfg);
  EditedModelFile file;
  file.base_checkpoint = "model.bin";
  file.base_hash = params_hash(fx.params);
  file.overlay = res.model.overlay;
  file.config_json = "{\"alpha\":1.0}";
  file.trace_json = "[]";
  kne::testing::TempDir tmp("edited");
  save_edited_model(tmp.path("e.bin"), file);
  EditedModelFile loaded = load_edited_model(tmp.path("e.bin"));
  CHECK(loaded.base_checkpoint == file.base_checkpoint);
  CHECK(loaded.base_hash == file.base_hash);
  CHECK(loaded.config_json == file.config_json);
  CHECK(params_hash(loaded.overlay) == params_hash(file.overlay));
}

TEST_CASE("edit validates its inputs") {
  const auto& fx = tiny_fixture();
  EditConfig ecfg;
  CHECK_THROWS_AS(edit(fx.config, fx.params, KnowledgeNeuronalEnsemble{}, fx.edits, ecfg),
                  Error);
  KnowledgeNeuronalEnsemble bad;
  bad.paths["layers.0.mlp.down_proj"] = {99999};
  CHECK_THROWS_AS(edit(fx.config, fx.params, bad, fx.edits, ecfg), Error);
  EditConfig zero_alpha;
  zero_alpha.alpha = 0.0;
  CHECK_THROWS_AS(edit(fx.config, fx.params, small_ensemble(), fx.edits, zero_alpha), Error);
}

TEST_SUITE_END();
