#include <catch2/catch_amalgamated.hpp>

#include <ptrag/model.hpp>
#include <ptrag/rng.hpp>

#include "support/gradcheck.hpp"

#include <cmath>

using namespace ptrag;
using ptrag_test::max_grad_rel_err;

namespace {

struct Toy {
  PerturbationDB db;
  ModelConfig cfg;
  Tensor x_ctrl;

  static Toy make(std::uint64_t seed, std::size_t cells = 3, std::size_t depth = 1) {
    SplitMix64 rng(seed);
    std::vector<std::string> ids{"pa", "pb", "pc", "pd"};
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      std::vector<double> r(4);
      for (double& v : r) v = rng.next_gaussian();
      rows.push_back(r);
    }
    Toy toy{PerturbationDB::build(ids, rows), {}, {}};
    toy.cfg.d = 4;
    toy.cfg.genes = 6;
    toy.cfg.embedding_dim = 4;
    toy.cfg.k = 2;
    toy.cfg.depth = depth;
    toy.cfg.heads = 2;
    toy.cfg.seed = seed;
    std::vector<double> x(cells * 6);
    for (double& v : x) v = rng.next_gaussian();
    toy.x_ctrl = Tensor::from_data({cells, 6}, std::move(x));
    return toy;
  }
};

std::vector<Tensor> all_params(const PerturbationModel& model) {
  std::vector<Tensor> out;
  for (const auto& e : model.params().entries()) out.push_back(e.tensor);
  return out;
}

}  // namespace

TEST_CASE("forward_state") {
  Toy toy = Toy::make(1);
  SECTION("zero readout gives zero output regardless of input") {
    PerturbationModel model(ModelKind::kStateGenept, toy.cfg, toy.db.dim());
    auto& readout = const_cast<TransformerGenerator&>(model.generator()).readout;
    std::fill(readout.weight.data()->value.begin(), readout.weight.data()->value.end(), 0.0);
    std::fill(readout.bias.data()->value.begin(), readout.bias.data()->value.end(), 0.0);
    Tensor pred = model.forward_state(toy.x_ctrl, model.pert_input(toy.db, "pa"));
    for (double v : pred.value()) REQUIRE(v == 0.0);
  }
  SECTION("permuting cells permutes predictions") {
    PerturbationModel model(ModelKind::kStateGenept, toy.cfg, toy.db.dim());
    Tensor emb = model.pert_input(toy.db, "pb");
    Tensor pred = model.forward_state(toy.x_ctrl, emb);
    std::vector<std::size_t> perm{2, 0, 1};
    Tensor pred_perm = model.forward_state(gather_rows(toy.x_ctrl, perm), emb);
    for (std::size_t i = 0; i < perm.size(); ++i) {
      for (std::size_t g = 0; g < 6; ++g) {
        REQUIRE(pred_perm.value()[i * 6 + g] ==
                Catch::Approx(pred.value()[perm[i] * 6 + g]).margin(1e-12));
      }
    }
  }
  SECTION("one-hot state uses the database size as encoder width") {
    PerturbationModel model(ModelKind::kState, toy.cfg, toy.db.size());
    REQUIRE(model.pert_encoder().in_dim() == 4);
    Tensor pred = model.forward_state(toy.x_ctrl, model.pert_input(toy.db, "pc"));
    REQUIRE(pred.shape() == Shape{3, 6});
  }
  SECTION("full forward+backward gradient check on a 2-cell toy") {
    Toy small = Toy::make(5, 2);
    PerturbationModel model(ModelKind::kStateGenept, small.cfg, small.db.dim());
    Tensor emb = model.pert_input(small.db, "pa");
    auto f = [&] {
      Tensor pred = model.forward_state(small.x_ctrl, emb);
      return mean_all(mul(pred, pred));
    };
    REQUIRE(max_grad_rel_err(f, all_params(model)) < 1e-4);
  }
}

TEST_CASE("forward_vanilla_rag") {
  Toy toy = Toy::make(2);
  PerturbationModel model(ModelKind::kVanillaRag, toy.cfg, toy.db.dim());

  SECTION("candidate set depends only on the query") {
    auto r1 = model.forward_vanilla_rag(toy.x_ctrl, "pa", toy.db);
    SplitMix64 rng(77);
    std::vector<double> other(3 * 6);
    for (double& v : other) v = rng.next_gaussian();
    auto r2 = model.forward_vanilla_rag(Tensor::from_data({3, 6}, other), "pa", toy.db);
    REQUIRE(r1.candidate_indices == r2.candidate_indices);
    std::size_t query_idx = toy.db.index_of("pa");
    for (std::size_t idx : r1.candidate_indices) REQUIRE(idx != query_idx);
  }
  SECTION("K = 1: singleton attention makes every cell identical") {
    ModelConfig cfg = toy.cfg;
    cfg.k = 1;
    PerturbationModel m1(ModelKind::kVanillaRag, cfg, toy.db.dim());
    auto r = m1.forward_vanilla_rag(toy.x_ctrl, "pb", toy.db);
    for (std::size_t i = 1; i < 3; ++i) {
      for (std::size_t g = 0; g < 6; ++g) {
        REQUIRE(r.prediction.value()[i * 6 + g] ==
                Catch::Approx(r.prediction.value()[g]).margin(1e-12));
      }
    }
  }
  SECTION("gradient check on toy sizes") {
    Toy small = Toy::make(6, 2);
    PerturbationModel m(ModelKind::kVanillaRag, small.cfg, small.db.dim());
    auto f = [&] {
      auto r = m.forward_vanilla_rag(small.x_ctrl, "pc", small.db);
      return mean_all(mul(r.prediction, r.prediction));
    };
    REQUIRE(max_grad_rel_err(f, all_params(m)) < 1e-4);
  }
}

TEST_CASE("forward_pt_rag") {
  SECTION("forced all-ones mask equals an independent no-selection ablation") {
    Toy toy = Toy::make(3, 3, 0);  // depth 0: readout only, easy to recompute
    PerturbationModel model(ModelKind::kPtRag, toy.cfg, toy.db.dim());
    Tensor noise = Tensor::zeros({3, 2, 2});
    for (std::size_t i = 0; i < 6; ++i) noise.data()->value[i * 2 + 1] = 1e9;  // include
    SelectorOptions opts;
    opts.frozen_noise = &noise;
    auto result = model.forward_pt_rag(toy.x_ctrl, "pa", toy.db, nullptr, opts);
    for (double h : result.mask.hard.value()) REQUIRE(h == 1.0);

    // Independent recomputation with plain loops.
    std::size_t d = 4, genes = 6, k = 2, cells = 3;
    auto linear_row = [&](const Linear& lin, const std::vector<double>& in) {
      std::vector<double> out(lin.out_dim(), 0.0);
      for (std::size_t j = 0; j < lin.out_dim(); ++j) {
        double acc = lin.bias.value()[j];
        for (std::size_t i = 0; i < lin.in_dim(); ++i) {
          acc += in[i] * lin.weight.value()[i * lin.out_dim() + j];
        }
        out[j] = acc;
      }
      return out;
    };
    std::vector<double> h_pert =
        linear_row(model.pert_encoder(), toy.db.embedding(toy.db.index_of("pa")));
    for (std::size_t i = 0; i < cells; ++i) {
      std::vector<double> h_ctrl(d, 0.0);
      for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t g = 0; g < genes; ++g) {
          h_ctrl[j] += toy.x_ctrl.value()[i * genes + g] *
                       model.cell_encoder().projection.value()[g * d + j];
        }
      }
      std::vector<double> z(d, 0.0);
      for (std::size_t c = 0; c < k; ++c) {
        std::vector<double> h_cxt =
            linear_row(model.pert_encoder(), toy.db.embedding(result.candidate_indices[c]));
        std::vector<double> triplet;
        triplet.insert(triplet.end(), h_ctrl.begin(), h_ctrl.end());
        triplet.insert(triplet.end(), h_pert.begin(), h_pert.end());
        triplet.insert(triplet.end(), h_cxt.begin(), h_cxt.end());
        std::vector<double> proj = linear_row(model.proj_mlp(), triplet);
        for (std::size_t j = 0; j < d; ++j) z[j] += proj[j];
      }
      std::vector<double> pred = linear_row(model.generator().readout, z);
      for (std::size_t g = 0; g < genes; ++g) {
        REQUIRE(result.prediction.value()[i * genes + g] ==
                Catch::Approx(pred[g]).margin(1e-9));
      }
    }
  }
  SECTION("forced all-zeros mask collapses to generator(0)") {
    Toy toy = Toy::make(4, 3, 1);
    PerturbationModel model(ModelKind::kPtRag, toy.cfg, toy.db.dim());
    Tensor noise = Tensor::zeros({3, 2, 2});
    for (std::size_t i = 0; i < 6; ++i) noise.data()->value[i * 2 + 0] = 1e9;  // exclude
    SelectorOptions opts;
    opts.frozen_noise = &noise;
    auto result = model.forward_pt_rag(toy.x_ctrl, "pb", toy.db, nullptr, opts);
    for (double h : result.mask.hard.value()) REQUIRE(h == 0.0);
    Tensor empty_context = model.generator().forward(Tensor::zeros({3, 4}));
    for (std::size_t i = 0; i < result.prediction.size(); ++i) {
      REQUIRE(result.prediction.value()[i] ==
              Catch::Approx(empty_context.value()[i]).margin(1e-12));
    }
  }
  SECTION("hard mask is exactly binary under sampled noise") {
    Toy toy = Toy::make(8);
    PerturbationModel model(ModelKind::kPtRag, toy.cfg, toy.db.dim());
    SplitMix64 rng(123);
    auto result = model.forward_pt_rag(toy.x_ctrl, "pd", toy.db, &rng);
    for (double h : result.mask.hard.value()) REQUIRE((h == 0.0 || h == 1.0));
  }
  SECTION("soft-surrogate end-to-end gradient check under frozen noise") {
    Toy toy = Toy::make(9, 2, 1);
    PerturbationModel model(ModelKind::kPtRag, toy.cfg, toy.db.dim());
    SplitMix64 noise_rng(200);
    Tensor noise = sample_gumbel({2, 2, 2}, noise_rng);
    SelectorOptions opts;
    opts.frozen_noise = &noise;
    auto f = [&] {
      auto r = model.forward_pt_rag(toy.x_ctrl, "pa", toy.db, nullptr, opts,
                                    PerturbationModel::MaskMode::kSoftSurrogate);
      return mean_all(mul(r.prediction, r.prediction));
    };
    REQUIRE(max_grad_rel_err(f, all_params(model)) < 1e-4);
  }
  SECTION("straight-through path backpropagates into the scorer") {
    Toy toy = Toy::make(10, 2, 0);
    PerturbationModel model(ModelKind::kPtRag, toy.cfg, toy.db.dim());
    SplitMix64 noise_rng(300);
    Tensor noise = sample_gumbel({2, 2, 2}, noise_rng);
    SelectorOptions opts;
    opts.frozen_noise = &noise;
    model.params().zero_grads();
    {
      Tape tape;
      TapeScope scope(tape);
      auto r = model.forward_pt_rag(toy.x_ctrl, "pa", toy.db, nullptr, opts);
      backward(mean_all(mul(r.prediction, r.prediction)));
    }
    double score_grad_norm = 0.0;
    for (double g : model.score_mlp().first.weight.grad()) score_grad_norm += g * g;
    REQUIRE(score_grad_norm > 0.0);
  }
}

TEST_CASE("loss") {
  SplitMix64 rng(21);
  std::vector<double> pv(4 * 3), tv(4 * 3);
  for (double& v : pv) v = rng.next_gaussian();
  for (double& v : tv) v = rng.next_gaussian();
  Tensor pred = Tensor::from_data({4, 3}, pv);
  Tensor target = Tensor::from_data({4, 3}, tv);

  SECTION("identical clouds: zero distance") {
    auto r = compute_loss(pred, pred, nullptr, 0.1);
    REQUIRE(r.breakdown.dist == 0.0);
    REQUIRE(r.breakdown.total == 0.0);
  }
  SECTION("two-point hand case") {
    Tensor a = Tensor::from_data({2, 1}, {0.0, 0.0});
    Tensor b = Tensor::from_data({2, 1}, {1.0, 1.0});
    auto r = compute_loss(a, b, nullptr, 0.0);
    REQUIRE(r.breakdown.dist == Catch::Approx(2.0).margin(1e-15));
  }
  SECTION("all-ones mask: sparse is exactly 1, total = dist + lambda") {
    SelectionMask mask;
    mask.hard = Tensor::ones({4, 2});
    mask.soft = Tensor::full({4, 2}, 0.9, true);
    Tape tape;
    TapeScope scope(tape);
    mask.combined = straight_through_combine(mask.hard, mask.soft);
    auto r = compute_loss(pred, target, &mask, 0.1);
    REQUIRE(r.breakdown.sparse == 1.0);
    REQUIRE(r.breakdown.selected_count == 2.0);
    REQUIRE(r.breakdown.total == Catch::Approx(r.breakdown.dist + 0.1).margin(1e-15));
  }
  SECTION("decomposition is exact") {
    SelectionMask mask;
    mask.hard = Tensor::from_data({4, 2}, {1, 0, 1, 1, 0, 0, 1, 0});
    mask.soft = Tensor::full({4, 2}, 0.4, true);
    mask.combined = mask.hard;
    auto r = compute_loss(pred, target, &mask, 0.37);
    REQUIRE(std::fabs(r.breakdown.total - (r.breakdown.dist + 0.37 * r.breakdown.sparse)) <
            1e-12);
  }
  SECTION("energy term agrees bitwise with the metrics module") {
    auto r = compute_loss(pred, target, nullptr, 0.0);
    REQUIRE(r.breakdown.dist == energy_distance(pred, target));
  }
  SECTION("energy term is exactly symmetric") {
    auto ab = compute_loss(pred, target, nullptr, 0.0);
    auto ba = compute_loss(target, pred, nullptr, 0.0);
    REQUIRE(ab.breakdown.dist == ba.breakdown.dist);
  }
  SECTION("single-cell populations rejected") {
    Tensor one = Tensor::from_data({1, 3}, {1.0, 2.0, 3.0});
    REQUIRE_THROWS(compute_loss(one, one, nullptr, 0.1));
  }
  SECTION("gradient flows through the distance term") {
    Tensor p = Tensor::from_data({3, 2}, {0.1, 0.2, -0.4, 0.5, 0.3, -0.2}, true);
    Tensor t = Tensor::from_data({3, 2}, {1.0, -0.2, 0.3, 0.8, -0.5, 0.1});
    auto f = [&] { return compute_loss(p, t, nullptr, 0.0).total; };
    REQUIRE(max_grad_rel_err(f, {p}) < 1e-5);
  }
}

TEST_CASE("model config json") {
  ModelConfig cfg;
  cfg.d = 16;
  cfg.genes = 40;
  cfg.embedding_dim = 12;
  cfg.k = 5;
  cfg.tau = 0.7;
  cfg.lambda_sparse = 0.05;
  cfg.depth = 1;
  cfg.heads = 2;
  cfg.seed = 99;
  auto j = model_config_to_json(cfg);
  ModelConfig back = model_config_from_json(j);
  REQUIRE(back.d == cfg.d);
  REQUIRE(back.genes == cfg.genes);
  REQUIRE(back.embedding_dim == cfg.embedding_dim);
  REQUIRE(back.k == cfg.k);
  REQUIRE(back.tau == cfg.tau);
  REQUIRE(back.lambda_sparse == cfg.lambda_sparse);
  REQUIRE(back.seed == cfg.seed);
  SECTION("invalid configs rejected") {
    auto bad = j;
    bad["tau"] = 0.0;
    REQUIRE_THROWS_AS(model_config_from_json(bad), ConfigError);
    bad = j;
    bad["d"] = 5;  // not divisible by heads = 2
    REQUIRE_THROWS_AS(model_config_from_json(bad), ConfigError);
  }
}

TEST_CASE("frozen cell encoder") {
  SECTION("seed-determined, excluded from the registry") {
    Toy toy = Toy::make(31);
    PerturbationModel a(ModelKind::kPtRag, toy.cfg, toy.db.dim());
    PerturbationModel b(ModelKind::kPtRag, toy.cfg, toy.db.dim());
    REQUIRE(a.cell_encoder().projection.value() == b.cell_encoder().projection.value());
    for (const auto& e : a.params().entries()) {
      REQUIRE(e.name.find("cell_encoder") == std::string::npos);
    }
  }
  SECTION("identical seeds give bitwise-equal initial parameters") {
    Toy toy = Toy::make(32);
    PerturbationModel a(ModelKind::kPtRag, toy.cfg, toy.db.dim());
    PerturbationModel b(ModelKind::kPtRag, toy.cfg, toy.db.dim());
    REQUIRE(a.params().snapshot() == b.params().snapshot());
  }
}
