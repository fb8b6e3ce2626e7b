#include <catch2/catch_amalgamated.hpp>

#include <ptrag/trainer.hpp>

#include <cmath>
#include <filesystem>
#include <numeric>

using namespace ptrag;

namespace {

SyntheticDataset tiny_dataset(std::uint64_t seed = 0) {
  SyntheticConfig c;
  c.genes = 12;
  c.embedding_dim = 8;
  c.perturbations = 16;
  c.cell_types = 2;
  c.pathways = 4;
  c.cells_per_population = 6;
  c.noise_sigma = 0.1;
  c.seed = seed;
  auto ds = generate(c);
  split_fewshot(ds, "ct0", 0.5, 0.5, seed + 1);
  return ds;
}

TrainConfig tiny_config(ModelKind kind, std::size_t steps = 50) {
  TrainConfig t;
  t.model_kind = kind;
  t.max_steps = steps;
  t.validate_every = steps;
  t.batch_size = 2;
  t.d = 8;
  t.depth = 1;
  t.heads = 2;
  t.k = 4;
  t.pca_dim = 10;
  return t;
}

}  // namespace

TEST_CASE("train basics") {
  auto ds = tiny_dataset(1);

  SECTION("lr = 0 leaves parameters bitwise unchanged") {
    TrainConfig cfg = tiny_config(ModelKind::kPtRag, 10);
    cfg.lr = 0.0;
    cfg.weight_decay = 0.0;
    PerturbationModel reference(cfg.model_kind, cfg.model_config(12, 8), 8);
    auto result = train(cfg, ds, ds.db);
    REQUIRE(result.model->params().snapshot() == reference.params().snapshot());
  }
  SECTION("max_steps = validate_every = 1 gives exactly one validation entry") {
    TrainConfig cfg = tiny_config(ModelKind::kState, 1);
    cfg.validate_every = 1;
    auto result = train(cfg, ds, ds.db);
    REQUIRE(result.record.validations.size() == 1);
    REQUIRE(result.record.validations[0].step == 1);
  }
  SECTION("validation count is floor(max_steps / validate_every)") {
    TrainConfig cfg = tiny_config(ModelKind::kState, 25);
    cfg.validate_every = 10;
    auto result = train(cfg, ds, ds.db);
    REQUIRE(result.record.validations.size() == 2);
  }
  SECTION("database must cover every dataset perturbation") {
    std::vector<std::string> ids;
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i + 1 < ds.db.size(); ++i) {
      ids.push_back(ds.db.id(i));
      rows.push_back(ds.db.embedding(i));
    }
    auto smaller = PerturbationDB::build(ids, rows);
    REQUIRE_THROWS_WITH(train(tiny_config(ModelKind::kState, 1), ds, smaller),
                        Catch::Matchers::ContainsSubstring("does not cover"));
  }
  SECTION("unsplit dataset rejected") {
    auto unsplit = generate(ds.config);
    REQUIRE_THROWS_WITH(train(tiny_config(ModelKind::kState, 1), unsplit, unsplit.db),
                        Catch::Matchers::ContainsSubstring("split"));
  }
  SECTION("invalid configs exit through ConfigError") {
    TrainConfig cfg = tiny_config(ModelKind::kState);
    cfg.lr = -1.0;
    REQUIRE_THROWS_AS(train(cfg, ds, ds.db), ConfigError);
    cfg = tiny_config(ModelKind::kState);
    cfg.validate_every = cfg.max_steps + 1;
    REQUIRE_THROWS_AS(train(cfg, ds, ds.db), ConfigError);
  }
}

TEST_CASE("training is bitwise deterministic") {
  auto ds = tiny_dataset(2);
  TrainConfig cfg = tiny_config(ModelKind::kPtRag, 40);
  cfg.validate_every = 20;
  auto a = train(cfg, ds, ds.db);
  auto b = train(cfg, ds, ds.db);
  REQUIRE(a.model->params().snapshot() == b.model->params().snapshot());
  REQUIRE(metrics_report_to_json(a.record.test_metrics).dump() ==
          metrics_report_to_json(b.record.test_metrics).dump());
  REQUIRE(a.record.validations.size() == b.record.validations.size());
  for (std::size_t i = 0; i < a.record.validations.size(); ++i) {
    REQUIRE(a.record.validations[i].val_energy == b.record.validations[i].val_energy);
  }
}

TEST_CASE("frozen cell encoder is untouched by training") {
  auto ds = tiny_dataset(3);
  TrainConfig cfg = tiny_config(ModelKind::kPtRag, 30);
  PerturbationModel untrained(cfg.model_kind, cfg.model_config(12, 8), 8);
  auto result = train(cfg, ds, ds.db);
  REQUIRE(result.model->cell_encoder().projection.value() ==
          untrained.cell_encoder().projection.value());
}

TEST_CASE("training reduces the validation energy on the benchmark") {
  auto ds = tiny_dataset(4);
  TrainConfig cfg = tiny_config(ModelKind::kPtRag, 300);
  cfg.validate_every = 100;
  cfg.seed = 0;
  auto result = train(cfg, ds, ds.db);
  REQUIRE(result.record.validations.back().val_energy < result.record.initial_val_energy);
}

TEST_CASE("evaluate") {
  auto ds = tiny_dataset(5);

  SECTION("oracle predictions score perfectly") {
    // Build the sigma = 0 twin of the dataset so the Bayes floor is exact.
    SyntheticConfig c0 = ds.config;
    c0.noise_sigma = 0.0;
    auto clean = generate(c0);
    split_fewshot(clean, "ct0", 0.5, 0.5, 9);
    auto train_idx = clean.split_indices(Split::kTrain);
    std::vector<double> pool;
    for (auto i : train_idx) {
      pool.insert(pool.end(), clean.samples[i].x_pert.value().begin(),
                  clean.samples[i].x_pert.value().end());
    }
    auto basis = fit_pca_clamped(
        Tensor::from_data({train_idx.size() * c0.cells_per_population, c0.genes},
                          std::move(pool)),
        10);
    int rows_with_corr = 0;
    for (auto i : clean.split_indices(Split::kTest)) {
      const Sample& s = clean.samples[i];
      auto row = compute_metrics_row(s.pert_id, s.cell_type, s.x_pert, s.x_pert, s.x_ctrl, basis);
      REQUIRE(row.mse == 0.0);
      REQUIRE(row.w1 == 0.0);
      REQUIRE(row.energy == 0.0);
      if (row.pearson_deg.has_value()) {
        REQUIRE(*row.pearson_deg == Catch::Approx(1.0).margin(1e-9));
        ++rows_with_corr;
      }
    }
    REQUIRE(rows_with_corr > 0);
  }
  SECTION("near-no-change baseline has weak DEG correlations") {
    auto train_idx = ds.split_indices(Split::kTrain);
    std::vector<double> pool;
    for (auto i : train_idx) {
      pool.insert(pool.end(), ds.samples[i].x_pert.value().begin(),
                  ds.samples[i].x_pert.value().end());
    }
    auto basis = fit_pca_clamped(
        Tensor::from_data({train_idx.size() * ds.config.cells_per_population, ds.config.genes},
                          std::move(pool)),
        10);
    SplitMix64 rng(17);
    std::vector<double> pearsons;
    for (auto i : ds.split_indices(Split::kTest)) {
      const Sample& s = ds.samples[i];
      std::vector<double> nudged = s.x_ctrl.value();
      for (double& v : nudged) v += 1e-6 * rng.next_gaussian();
      Tensor pred = Tensor::from_data(s.x_ctrl.shape(), std::move(nudged));
      auto row = compute_metrics_row(s.pert_id, s.cell_type, pred, s.x_pert, s.x_ctrl, basis);
      if (row.pearson_deg.has_value()) pearsons.push_back(*row.pearson_deg);
    }
    REQUIRE(pearsons.size() > 2);
    double mean = 0;
    for (double p : pearsons) mean += p;
    mean /= static_cast<double>(pearsons.size());
    REQUIRE(std::fabs(mean) < 0.35);
  }
  SECTION("two evaluations of one checkpoint are bitwise identical") {
    TrainConfig cfg = tiny_config(ModelKind::kVanillaRag, 20);
    auto result = train(cfg, ds, ds.db);
    auto r1 = evaluate(*result.model, ds, Split::kTest, ds.db, 10);
    auto r2 = evaluate(*result.model, ds, Split::kTest, ds.db, 10);
    REQUIRE(metrics_report_to_json(r1).dump() == metrics_report_to_json(r2).dump());
  }
  SECTION("empty split rejected") {
    TrainConfig cfg = tiny_config(ModelKind::kState, 5);
    auto result = train(cfg, ds, ds.db);
    auto unsplit = generate(ds.config);
    REQUIRE_THROWS(evaluate(*result.model, unsplit, Split::kTest, ds.db, 10));
  }
}

TEST_CASE("compare") {
  auto ds = tiny_dataset(6);

  SECTION("a config against itself: every p is 1, nothing rejected") {
    TrainConfig cfg = tiny_config(ModelKind::kState, 20);
    auto result = compare({{"first", cfg}, {"second", cfg}}, ds, ds.db, {7});
    REQUIRE(result.significance.tests.count("first_vs_second") == 1);
    for (const auto& [metric, cell] : result.significance.tests.at("first_vs_second")) {
      REQUIRE(cell.p_raw == Catch::Approx(1.0).margin(1e-9));
      REQUIRE(cell.p_fdr == Catch::Approx(1.0).margin(1e-9));
      REQUIRE(cell.marker.empty());
    }
  }
  SECTION("marker scheme matches the dagger convention") {
    REQUIRE(significance_marker(0.005) == "†");
    REQUIRE(significance_marker(0.03) == "††");
    REQUIRE(significance_marker(0.07) == "†††");
    REQUIRE(significance_marker(0.5) == "");
  }
  SECTION("fewer than two configs rejected") {
    TrainConfig cfg = tiny_config(ModelKind::kState, 5);
    REQUIRE_THROWS(compare({{"only", cfg}}, ds, ds.db, {1}));
  }
  SECTION("duplicate labels rejected") {
    TrainConfig cfg = tiny_config(ModelKind::kState, 5);
    REQUIRE_THROWS_AS(compare({{"x", cfg}, {"x", cfg}}, ds, ds.db, {1}), ConfigError);
  }
  SECTION("significance report round-trips through json") {
    TrainConfig cfg = tiny_config(ModelKind::kState, 10);
    TrainConfig cfg2 = cfg;
    cfg2.model_kind = ModelKind::kStateGenept;
    auto result = compare({{"state", cfg}, {"state_genept", cfg2}}, ds, ds.db, {3});
    auto j = significance_to_json(result.significance);
    auto back = significance_from_json(j);
    REQUIRE(significance_to_json(back).dump() == j.dump());
  }
}

TEST_CASE("sweep") {
  auto ds = tiny_dataset(7);
  TrainConfig base = tiny_config(ModelKind::kPtRag, 30);
  base.validate_every = 15;

  SECTION("single-value sweep is identical to train") {
    auto swept = sweep(base, SweepAxis::kLambda, {base.lambda_sparse}, ds, ds.db);
    auto direct = train(base, ds, ds.db);
    REQUIRE(swept.points.size() == 1);
    REQUIRE(metrics_report_to_json(swept.points[0].record.test_metrics).dump() ==
            metrics_report_to_json(direct.record.test_metrics).dump());
    REQUIRE(swept.points[0].record.validations.size() == direct.record.validations.size());
    for (std::size_t i = 0; i < direct.record.validations.size(); ++i) {
      REQUIRE(swept.points[0].record.validations[i].val_energy ==
              direct.record.validations[i].val_energy);
    }
  }
  SECTION("K axis demands integral values") {
    REQUIRE_THROWS_AS(sweep(base, SweepAxis::kK, {2.5}, ds, ds.db), ConfigError);
    REQUIRE_THROWS_AS(sweep(base, SweepAxis::kK, {0.0}, ds, ds.db), ConfigError);
  }
  SECTION("empty value list rejected") {
    REQUIRE_THROWS(sweep(base, SweepAxis::kLambda, {}, ds, ds.db));
  }
}

TEST_CASE("jaccard analysis") {
  auto ds = tiny_dataset(8);

  SECTION("requires a pt_rag model") {
    TrainConfig cfg = tiny_config(ModelKind::kState, 5);
    auto result = train(cfg, ds, ds.db);
    REQUIRE_THROWS(jaccard_analysis(*result.model, ds, ds.db, 3));
  }
  SECTION("diagonal is exactly 1; values lie in [0,1]") {
    TrainConfig cfg = tiny_config(ModelKind::kPtRag, 30);
    auto result = train(cfg, ds, ds.db);
    auto j = jaccard_analysis(*result.model, ds, ds.db, 3);
    REQUIRE(j.labels.size() == 2);
    for (std::size_t i = 0; i < j.labels.size(); ++i) {
      REQUIRE(j.at(i, i) == 1.0);
      for (std::size_t k = 0; k < j.labels.size(); ++k) {
        REQUIRE(j.at(i, k) >= 0.0);
        REQUIRE(j.at(i, k) <= 1.0);
        REQUIRE(j.at(i, k) == j.at(k, i));
      }
    }
  }
  SECTION("untrained scorer with sampled noise sits near the chance level") {
    // Chance overlap of two independent uniform N-subsets of K candidates.
    // The closed form N / (2K - N) is the ratio-of-expectations
    // approximation; the simulated expectation of the ratio is the oracle.
    const std::size_t k = 6, top_n = 2;
    double analytic = static_cast<double>(top_n) / static_cast<double>(2 * k - top_n);
    SplitMix64 sim_rng(99);
    double sim_sum = 0.0;
    const int sim_trials = 20000;
    for (int t = 0; t < sim_trials; ++t) {
      std::vector<std::size_t> pool(k);
      std::iota(pool.begin(), pool.end(), 0);
      auto draw = [&] {
        auto copy = pool;
        sim_rng.shuffle(copy);
        return std::set<std::size_t>(copy.begin(), copy.begin() + top_n);
      };
      auto a = draw(), b = draw();
      std::size_t inter = 0;
      for (auto v : a) inter += b.count(v);
      sim_sum += static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
    }
    double simulated = sim_sum / sim_trials;
    REQUIRE(simulated == Catch::Approx(analytic).margin(0.06));

    SyntheticConfig big = ds.config;
    big.perturbations = 40;
    auto wide = generate(big);
    split_fewshot(wide, "ct0", 0.3, 0.5, 3);
    TrainConfig cfg = tiny_config(ModelKind::kPtRag, 1);
    cfg.k = k;

    // Sharp null: a zeroed score head makes every decision Bernoulli(1/2)
    // under sampled noise. Top-N sets are then Binomial(S, 1/2) frequency
    // rankings with the ascending-index tie-break, which correlates sets at
    // small S; simulate that exact mechanism as the null.
    std::size_t cells = wide.config.cells_per_population;
    double mech_sum = 0.0;
    for (int t = 0; t < sim_trials; ++t) {
      auto draw_top = [&] {
        std::vector<std::pair<std::size_t, int>> freq(k);
        for (std::size_t c = 0; c < k; ++c) {
          int f = 0;
          for (std::size_t s = 0; s < cells; ++s) f += sim_rng.next_unit() < 0.5 ? 1 : 0;
          freq[c] = {c, f};
        }
        std::sort(freq.begin(), freq.end(), [](const auto& a, const auto& b) {
          if (a.second != b.second) return a.second > b.second;
          return a.first < b.first;
        });
        std::set<std::size_t> out;
        for (std::size_t i = 0; i < top_n && i < freq.size(); ++i) {
          if (freq[i].second > 0) out.insert(freq[i].first);
        }
        return out;
      };
      auto a = draw_top(), b = draw_top();
      std::size_t inter = 0;
      for (auto v : a) inter += b.count(v);
      mech_sum += static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
    }
    double mechanism_null = mech_sum / sim_trials;

    // A single-seed Jaccard estimate over 14 perturbations is noisy, so both
    // model checks average over independent noise streams.
    auto mean_overlap = [&](const PerturbationModel& m) {
      double sum = 0.0;
      const int repeats = 15;
      for (int r = 0; r < repeats; ++r) {
        SplitMix64 noise(10'000 + r);
        sum += jaccard_analysis(m, wide, wide.db, top_n, Split::kTest, &noise).at(0, 1);
      }
      return sum / repeats;
    };

    PerturbationModel zeroed(cfg.model_kind, cfg.model_config(big.genes, wide.db.dim()),
                             wide.db.dim());
    auto& head = const_cast<Mlp&>(zeroed.score_mlp()).second;
    std::fill(head.weight.data()->value.begin(), head.weight.data()->value.end(), 0.0);
    std::fill(head.bias.data()->value.begin(), head.bias.data()->value.end(), 0.0);
    REQUIRE(mean_overlap(zeroed) == Catch::Approx(mechanism_null).margin(0.06));

    // Random-init scorer: still concentrated near the chance regime (shared
    // perturbation/context triplet components pull it somewhat above).
    PerturbationModel untrained(cfg.model_kind, cfg.model_config(big.genes, wide.db.dim()),
                                wide.db.dim());
    REQUIRE(mean_overlap(untrained) == Catch::Approx(mechanism_null).margin(0.2));
  }
}

TEST_CASE("run directory artifacts") {
  auto dir = std::filesystem::temp_directory_path() / "ptrag_test_rundir";
  std::filesystem::remove_all(dir);
  auto ds = tiny_dataset(10);
  TrainConfig cfg = tiny_config(ModelKind::kPtRag, 20);
  auto result = train(cfg, ds, ds.db);
  write_run_dir(dir, cfg, ds, ds.db, result);

  for (const char* name : {"config.json", "checkpoint.bin", "metrics.json", "train_log.json"}) {
    REQUIRE(std::filesystem::exists(dir / name));
  }
  SECTION("config and metrics round-trip") {
    auto config = nlohmann::json::parse(read_file(dir / "config.json"));
    TrainConfig reparsed = train_config_from_json(config.at("train"));
    REQUIRE(train_config_to_json(reparsed).dump() == train_config_to_json(cfg).dump());
    auto metrics = metrics_report_from_json(nlohmann::json::parse(read_file(dir / "metrics.json")));
    REQUIRE(metrics_report_to_json(metrics).dump() ==
            metrics_report_to_json(result.record.test_metrics).dump());
  }
  SECTION("checkpoint restores into a fresh model") {
    PerturbationModel fresh(cfg.model_kind, cfg.model_config(12, 8), 8);
    load_checkpoint(dir / "checkpoint.bin", fresh.params());
    REQUIRE(fresh.params().snapshot() == result.model->params().snapshot());
  }
  std::filesystem::remove_all(dir);
}
