#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "kne/selection.hpp"
#include "test_support.hpp"

using namespace kne;

namespace {

AttributionScores scores_of(std::map<std::string, std::vector<double>> m) {
  AttributionScores s;
  s.scores = std::move(m);
  s.riemann_steps = 1;
  s.mode = "joint";
  return s;
}

// Independent oracle: full descending sort of (score, path, index), top-k.
std::map<std::string, std::vector<long>> sort_oracle(const AttributionScores& scores, long k) {
  struct Entry {
    double score;
    std::string path;
    long index;
  };
  std::vector<Entry> all;
  for (const auto& [path, v] : scores.scores)
    for (size_t i = 0; i < v.size(); ++i) all.push_back({v[i], path, static_cast<long>(i)});
  std::stable_sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.path != b.path) return a.path < b.path;
    return a.index < b.index;
  });
  std::map<std::string, std::vector<long>> out;
  for (long i = 0; i < k; ++i) out[all[static_cast<size_t>(i)].path].push_back(
      all[static_cast<size_t>(i)].index);
  for (auto& [path, idx] : out) std::sort(idx.begin(), idx.end());
  return out;
}

}  // namespace

TEST_SUITE_BEGIN("selection");

TEST_CASE("quantile threshold basics") {
  AttributionScores s = scores_of({{"p", {0.4, 0.3, 0.2, 0.1}}});
  CHECK(quantile_threshold(s, 0.25) == 0.4);
  CHECK(quantile_threshold(s, 1.0) == 0.1);
  CHECK(quantile_threshold(s, 0.5) == 0.3);
}

TEST_CASE("quantile threshold rejects non-finite scores and bad fractions") {
  AttributionScores s = scores_of({{"p", {0.1, std::nan("")}}});
  CHECK_THROWS_AS(quantile_threshold(s, 0.5), Error);
  AttributionScores ok = scores_of({{"p", {0.1, 0.2}}});
  CHECK_THROWS_AS(quantile_threshold(ok, 0.0), Error);
  CHECK_THROWS_AS(quantile_threshold(ok, 1.5), Error);
}

TEST_CASE("10k random scores: exact count and sort-oracle agreement") {
  Rng rng(12);
  std::map<std::string, std::vector<double>> m;
  for (const char* p : {"a.x", "b.y", "c.z"}) {
    std::vector<double> v(3334);
    for (double& x : v) x = rng.uniform();
    m[p] = std::move(v);
  }
  m["c.z"].resize(3332);  // total 10,000
  AttributionScores s = scores_of(std::move(m));
  REQUIRE(s.total_neurons() == 10000);

  double t = quantile_threshold(s, 0.01);
  long count = 0;
  for (const auto& [path, v] : s.scores)
    for (double x : v)
      if (x >= t) ++count;
  CHECK(count == 100);

  SelectionConfig cfg;
  cfg.keep_fraction = 0.01;
  KnowledgeNeuronalEnsemble ens = build_ensemble(s, cfg);
  CHECK(ens.total_selected() == 100);
  auto oracle = sort_oracle(s, 100);
  REQUIRE(ens.paths.size() == oracle.size());
  for (const auto& [path, idx] : oracle) CHECK(ens.paths.at(path) == idx);
}

TEST_CASE("all-equal scores: the tie rule forces an exact deterministic count") {
  AttributionScores s = scores_of({{"b.second", std::vector<double>(5, 1.0)},
                                   {"a.first", std::vector<double>(5, 1.0)}});
  SelectionConfig cfg;
  cfg.keep_fraction = 0.5;
  KnowledgeNeuronalEnsemble ens = build_ensemble(s, cfg);
  CHECK(ens.total_selected() == 5);
  // Path-lexicographic then index-ascending: all five land in "a.first".
  REQUIRE(ens.paths.count("a.first") == 1);
  CHECK(ens.paths.at("a.first") == std::vector<long>{0, 1, 2, 3, 4});
  CHECK(ens.paths.count("b.second") == 0);
}

TEST_CASE("keep_fraction 1.0 selects every neuron") {
  AttributionScores s = scores_of({{"p", {5.0, -1.0, 2.0}}, {"q", {0.0, 0.0}}});
  SelectionConfig cfg;
  cfg.keep_fraction = 1.0;
  KnowledgeNeuronalEnsemble ens = build_ensemble(s, cfg);
  CHECK(ens.total_selected() == 5);
  CHECK(ens.paths.at("p") == std::vector<long>{0, 1, 2});
  CHECK(ens.paths.at("q") == std::vector<long>{0, 1});
}

TEST_CASE("selected count equals ceil(keep_fraction * T) exactly, ties included") {
  Rng rng(13);
  std::vector<double> v(137);
  for (double& x : v) x = (rng.integer(5) == 0) ? 0.5 : rng.uniform();  // many duplicates
  AttributionScores s = scores_of({{"p", v}});
  for (double f : {0.01, 0.1, 0.33, 0.5, 0.77, 1.0}) {
    SelectionConfig cfg;
    cfg.keep_fraction = f;
    KnowledgeNeuronalEnsemble ens = build_ensemble(s, cfg);
    CHECK(ens.total_selected() == static_cast<long>(std::ceil(f * 137.0)));
  }
}

TEST_CASE("selection is invariant to positive rescaling of the scores") {
  Rng rng(14);
  std::map<std::string, std::vector<double>> m;
  for (const char* p : {"u", "w"}) {
    std::vector<double> v(64);
    for (double& x : v) x = rng.normal();
    m[p] = std::move(v);
  }
  AttributionScores s = scores_of(m);
  for (auto& [path, v] : m)
    for (double& x : v) x *= 7.3;
  AttributionScores scaled = scores_of(std::move(m));

  SelectionConfig cfg;
  cfg.keep_fraction = 0.1;
  KnowledgeNeuronalEnsemble a = build_ensemble(s, cfg);
  KnowledgeNeuronalEnsemble b = build_ensemble(scaled, cfg);
  REQUIRE(a.paths.size() == b.paths.size());
  for (const auto& [path, idx] : a.paths) CHECK(b.paths.at(path) == idx);
}

TEST_CASE("ensembles are monotone in keep_fraction when scores are distinct") {
  Rng rng(15);
  std::vector<double> v(200);
  for (double& x : v) x = rng.uniform();
  AttributionScores s = scores_of({{"p", v}});
  SelectionConfig c1, c2;
  c1.keep_fraction = 0.1;
  c2.keep_fraction = 0.4;
  KnowledgeNeuronalEnsemble e1 = build_ensemble(s, c1);
  KnowledgeNeuronalEnsemble e2 = build_ensemble(s, c2);
  for (long k : e1.paths.at("p")) {
    const auto& big = e2.paths.at("p");
    CHECK(std::binary_search(big.begin(), big.end(), k));
  }
}

TEST_CASE("select_ensemble errors when the threshold clears every score") {
  AttributionScores s = scores_of({{"p", {0.1, 0.2}}});
  try {
    select_ensemble(s, 5.0);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("keep_fraction") != std::string::npos);
  }
}

TEST_CASE("per-layer scope thresholds each layer separately") {
  AttributionScores s = scores_of({{"layers.0.mlp.down_proj", {10.0, 9.0, 8.0, 7.0}},
                                   {"layers.1.mlp.down_proj", {1.0, 0.9, 0.8, 0.7}}});
  SelectionConfig cfg;
  cfg.keep_fraction = 0.5;
  cfg.scope = SelectionScope::kPerLayer;
  KnowledgeNeuronalEnsemble ens = build_ensemble(s, cfg);
  CHECK(ens.paths.at("layers.0.mlp.down_proj") == std::vector<long>{0, 1});
  CHECK(ens.paths.at("layers.1.mlp.down_proj") == std::vector<long>{0, 1});
  // Global scope at the same fraction would have taken all four from layer 0.
  cfg.scope = SelectionScope::kGlobal;
  KnowledgeNeuronalEnsemble global = build_ensemble(s, cfg);
  CHECK(global.paths.at("layers.0.mlp.down_proj") == std::vector<long>{0, 1, 2, 3});
  CHECK(global.paths.count("layers.1.mlp.down_proj") == 0);
}

TEST_CASE("ensemble_stats counts editable parameters") {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 8;
  cfg.d_ff = 16;
  cfg.n_heads = 2;
  cfg.vocab_size = 10;
  cfg.max_seq_len = 8;
  cfg.seed = 1;
  NamedParams params = init_params(cfg);
  const long total = total_param_count(params);

  KnowledgeNeuronalEnsemble manual;
  manual.paths["layers.0.mlp.down_proj"] = {0, 3, 5};  // 3 rows of width d_ff
  CHECK(ensemble_stats(manual, params) ==
        doctest::Approx(3.0 * 16.0 / static_cast<double>(total)));

  // Every projection row selected: fraction = projection mass / total mass.
  KnowledgeNeuronalEnsemble full;
  long projection_mass = 0;
  for (const std::string& path : canonical_paths(cfg)) {
    if (path.find(".self_attn.") == std::string::npos && path.find(".mlp.") == std::string::npos)
      continue;
    const Tensor& w = param(params, path);
    std::vector<long> idx(static_cast<size_t>(w.rows()));
    for (long i = 0; i < w.rows(); ++i) idx[static_cast<size_t>(i)] = i;
    full.paths[path] = idx;
    projection_mass += w.numel();
  }
  CHECK(ensemble_stats(full, params) ==
        doctest::Approx(static_cast<double>(projection_mass) / static_cast<double>(total)));
}

TEST_CASE("ensemble JSON round trip") {
  KnowledgeNeuronalEnsemble ens;
  ens.threshold = 0.123;
  ens.keep_fraction = 0.05;
  ens.paths["layers.0.mlp.down_proj"] = {1, 4, 9};
  kne::testing::TempDir tmp("ensemble");
  save_ensemble_json(tmp.path("e.json"), ens);
  KnowledgeNeuronalEnsemble loaded = load_ensemble_json(tmp.path("e.json"));
  CHECK(loaded.threshold == ens.threshold);
  CHECK(loaded.keep_fraction == ens.keep_fraction);
  CHECK(loaded.paths == ens.paths);
}

TEST_SUITE_END();
