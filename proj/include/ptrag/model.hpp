#pragma once

// The three architectures under comparison, sharing one generator design:
//   state        — frozen cell encoding + one-hot perturbation encoding
//   state_genept — same, but the perturbation encoder reads database embeddings
//   vanilla_rag  — fixed top-K retrieval folded in through cross-attention
//   pt_rag       — two-stage retrieval with per-cell Gumbel-Softmax selection
// plus the training objective: energy distance + sparsity penalty.

#include <ptrag/metrics.hpp>
#include <ptrag/nn.hpp>
#include <ptrag/retrieval.hpp>
#include <ptrag/selector.hpp>

#include <nlohmann/json.hpp>

#include <optional>
#include <string>

namespace ptrag {

enum class ModelKind { kState, kStateGenept, kVanillaRag, kPtRag };

inline std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::kState: return "state";
    case ModelKind::kStateGenept: return "state_genept";
    case ModelKind::kVanillaRag: return "vanilla_rag";
    case ModelKind::kPtRag: return "pt_rag";
  }
  return "?";
}

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "state") return ModelKind::kState;
  if (s == "state_genept") return ModelKind::kStateGenept;
  if (s == "vanilla_rag") return ModelKind::kVanillaRag;
  if (s == "pt_rag") return ModelKind::kPtRag;
  throw ConfigError("model_kind must be one of state|state_genept|vanilla_rag|pt_rag, got '" +
                    s + "'");
}

struct ModelConfig {
  std::size_t d = 32;              // latent width
  std::size_t genes = 60;          // G
  std::size_t embedding_dim = 32;  // E
  std::size_t k = 8;               // first-stage retrieval size
  double tau = 0.5;
  double lambda_sparse = 0.1;
  std::size_t depth = 2;
  std::size_t heads = 4;
  std::uint64_t seed = 0;

  void validate() const {
    if (d == 0 || genes == 0 || embedding_dim == 0) {
      throw ConfigError("model config: d, G, E must be positive");
    }
    if (heads == 0 || d % heads != 0) {
      throw ConfigError("model config: d must be divisible by heads");
    }
    if (tau <= 0.0) throw ConfigError("model config: tau must be > 0");
    if (lambda_sparse < 0.0) throw ConfigError("model config: lambda_sparse must be >= 0");
    if (k == 0) throw ConfigError("model config: K must be >= 1");
  }
};

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  return nlohmann::json{{"d", cfg.d},
                        {"G", cfg.genes},
                        {"E", cfg.embedding_dim},
                        {"K", cfg.k},
                        {"tau", cfg.tau},
                        {"lambda_sparse", cfg.lambda_sparse},
                        {"depth", cfg.depth},
                        {"heads", cfg.heads},
                        {"seed", cfg.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.d = j.at("d").get<std::size_t>();
  cfg.genes = j.at("G").get<std::size_t>();
  cfg.embedding_dim = j.at("E").get<std::size_t>();
  cfg.k = j.at("K").get<std::size_t>();
  cfg.tau = j.at("tau").get<double>();
  cfg.lambda_sparse = j.at("lambda_sparse").get<double>();
  cfg.depth = j.at("depth").get<std::size_t>();
  cfg.heads = j.at("heads").get<std::size_t>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.validate();
  return cfg;
}

// Frozen stand-in for a pretrained cell encoder: a seeded fixed projection
// G -> d. Deliberately not registered as a parameter, so the optimizer can
// never touch it.
struct FrozenCellEncoder {
  Tensor projection;  // [G x d], requires_grad = false

  static FrozenCellEncoder create(std::size_t genes, std::size_t d, std::uint64_t seed) {
    SplitMix64 rng(derive_seed(seed, "model.frozen_cell_encoder"));
    std::vector<double> v(genes * d);
    double scale = 1.0 / std::sqrt(static_cast<double>(genes));
    for (double& x : v) x = rng.next_gaussian() * scale;
    FrozenCellEncoder enc;
    enc.projection = Tensor::from_data({genes, d}, std::move(v), false);
    return enc;
  }

  Tensor encode(const Tensor& x_ctrl) const { return matmul(x_ctrl, projection); }
};

class PerturbationModel {
 public:
  // pert_input_dim: the perturbation encoder's input width — the database
  // embedding dim for GenePT-style kinds, the database size for one-hot state.
  PerturbationModel(ModelKind kind, const ModelConfig& cfg, std::size_t pert_input_dim)
      : kind_(kind), cfg_(cfg), pert_input_dim_(pert_input_dim) {
    cfg_.validate();
    cell_encoder_ = FrozenCellEncoder::create(cfg_.genes, cfg_.d, cfg_.seed);
    SplitMix64 rng(derive_seed(cfg_.seed, "model.init"));
    pert_encoder_ = Linear::create(params_, "pert_encoder", pert_input_dim_, cfg_.d, rng);
    if (kind_ == ModelKind::kVanillaRag) {
      context_attention_ = MultiheadAttention::create(params_, "context_attention", cfg_.d,
                                                      cfg_.heads, rng);
    }
    if (kind_ == ModelKind::kPtRag) {
      score_ln_ = LayerNorm::create(params_, "score_ln", 3 * cfg_.d);
      score_mlp_ = Mlp::create(params_, "score_mlp", 3 * cfg_.d, kScoreHidden, 2, rng);
      proj_mlp_ = Linear::create(params_, "proj_mlp", 3 * cfg_.d, cfg_.d, rng);
    }
    generator_ = TransformerGenerator::create(params_, "generator", cfg_.d, cfg_.genes,
                                              cfg_.depth, cfg_.heads, rng);
  }

  ModelKind kind() const { return kind_; }
  const ModelConfig& config() const { return cfg_; }
  std::size_t pert_input_dim() const { return pert_input_dim_; }
  ParamRegistry& params() { return params_; }
  const ParamRegistry& params() const { return params_; }
  const FrozenCellEncoder& cell_encoder() const { return cell_encoder_; }
  const Linear& pert_encoder() const { return pert_encoder_; }
  const MultiheadAttention& context_attention() const { return context_attention_; }
  const LayerNorm& score_ln() const { return score_ln_; }
  const Mlp& score_mlp() const { return score_mlp_; }
  const Linear& proj_mlp() const { return proj_mlp_; }
  const TransformerGenerator& generator() const { return generator_; }

  // ---- forwards -----------------------------------------------------------

  /// z_i = h_ctrl_i + h_pert, then the generator.
  Tensor forward_state(const Tensor& x_ctrl, const Tensor& pert_embedding) const {
    Tensor h_ctrl = encode_cells(x_ctrl);
    Tensor h_pert = encode_pert(pert_embedding);
    Tensor z = add(h_ctrl, nnops::broadcast_rows(reshape(h_pert, {cfg_.d}), x_ctrl.dim(0)));
    return generator_.forward(z);
  }

  struct VanillaResult {
    Tensor prediction;
    std::vector<std::size_t> candidate_indices;
  };

  /// Fixed top-K retrieval (no gradient through it), contexts as key and
  /// value, h_ctrl + h_pert as query; attention output replaces z.
  VanillaResult forward_vanilla_rag(const Tensor& x_ctrl, const std::string& pert_id,
                                    const PerturbationDB& db) const {
    RetrievalResult retrieved = top_k(db, pert_id, cfg_.k);
    Tensor contexts = context_rows(db, retrieved.candidate_indices);
    Tensor h_cxt = pert_encoder_.forward(contexts);
    Tensor h_ctrl = encode_cells(x_ctrl);
    Tensor h_pert = encode_pert(db_embedding(db, pert_id));
    Tensor query = add(h_ctrl, nnops::broadcast_rows(reshape(h_pert, {cfg_.d}), x_ctrl.dim(0)));
    Tensor z = context_attention_.forward(query, h_cxt);
    return {generator_.forward(z), retrieved.candidate_indices};
  }

  struct PtRagResult {
    Tensor prediction;
    SelectionMask mask;
    std::vector<std::size_t> candidate_indices;
  };

  enum class MaskMode { kStraightThrough, kSoftSurrogate };

  /// Two-stage forward: top-K retrieval, per-cell triplet scoring,
  /// Gumbel-Softmax selection, masked aggregation of projected triplets.
  /// kSoftSurrogate aggregates with the soft probabilities instead of the
  /// straight-through mask (the differentiable twin used by gradient tests).
  PtRagResult forward_pt_rag(const Tensor& x_ctrl, const std::string& pert_id,
                             const PerturbationDB& db, SplitMix64* noise_rng,
                             const SelectorOptions& selector_options = {},
                             MaskMode mask_mode = MaskMode::kStraightThrough) const {
    std::size_t cells = x_ctrl.dim(0);
    std::size_t k = cfg_.k;
    RetrievalResult retrieved = top_k(db, pert_id, k);
    Tensor contexts = context_rows(db, retrieved.candidate_indices);
    Tensor h_cxt = pert_encoder_.forward(contexts);                    // [K x d]
    Tensor h_ctrl = encode_cells(x_ctrl);                              // [S x d]
    Tensor h_pert = encode_pert(db_embedding(db, pert_id));            // [1 x d]

    // Triplet rows (cell-major): row i*K+k = [h_ctrl_i ; h_pert ; h_cxt_k].
    std::vector<std::size_t> cell_index(cells * k), cand_index(cells * k);
    for (std::size_t i = 0; i < cells; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        cell_index[i * k + j] = i;
        cand_index[i * k + j] = j;
      }
    }
    Tensor triplets = concat_last_dim(
        {gather_rows(h_ctrl, cell_index),
         nnops::broadcast_rows(reshape(h_pert, {cfg_.d}), cells * k),
         gather_rows(h_cxt, cand_index)});                             // [S*K x 3d]

    Tensor scores = score_mlp_.forward(score_ln_.forward(triplets));   // [S*K x 2]
    SelectionMask mask = gumbel_softmax_select(reshape(scores, {cells, k, 2}), cfg_.tau,
                                               noise_rng, selector_options);

    Tensor weights = mask_mode == MaskMode::kStraightThrough ? mask.combined : mask.soft;
    Tensor projected = proj_mlp_.forward(triplets);                    // [S*K x d]
    Tensor scaled = mul(projected, matmul(reshape(weights, {cells * k, 1}),
                                          Tensor::ones({1, cfg_.d})));
    Tensor z = matmul(cell_sum_matrix(cells, k), scaled);              // [S x d]
    return {generator_.forward(z), mask, retrieved.candidate_indices};
  }

  struct ForwardOutput {
    Tensor prediction;
    std::optional<SelectionMask> mask;
  };

  /// Kind dispatch used by the trainer. `deterministic_noise` turns off the
  /// Gumbel draws (hard selection straight from the logits) for evaluation.
  ForwardOutput forward(const Tensor& x_ctrl, const std::string& pert_id,
                        const PerturbationDB& db, SplitMix64* noise_rng,
                        bool deterministic_noise) const {
    switch (kind_) {
      case ModelKind::kState:
        return {forward_state(x_ctrl, one_hot_embedding(db, pert_id)), std::nullopt};
      case ModelKind::kStateGenept:
        return {forward_state(x_ctrl, db_embedding(db, pert_id)), std::nullopt};
      case ModelKind::kVanillaRag:
        return {forward_vanilla_rag(x_ctrl, pert_id, db).prediction, std::nullopt};
      case ModelKind::kPtRag: {
        SelectorOptions opts;
        opts.deterministic_noise = deterministic_noise;
        auto result = forward_pt_rag(x_ctrl, pert_id, db,
                                     deterministic_noise ? nullptr : noise_rng, opts);
        return {result.prediction, result.mask};
      }
    }
    throw std::logic_error("unreachable model kind");
  }

  /// Perturbation-encoder input for a database entry under this model kind:
  /// the embedding row itself, or a one-hot identity vector for plain state.
  Tensor pert_input(const PerturbationDB& db, const std::string& pert_id) const {
    return kind_ == ModelKind::kState ? one_hot_embedding(db, pert_id)
                                      : db_embedding(db, pert_id);
  }

 private:
  static constexpr std::size_t kScoreHidden = 128;

  Tensor encode_cells(const Tensor& x_ctrl) const {
    if (x_ctrl.rank() != 2 || x_ctrl.dim(1) != cfg_.genes) {
      contract_violation("model: control cells " + shape_str(x_ctrl.shape()) +
                         " incompatible with G=" + std::to_string(cfg_.genes));
    }
    return cell_encoder_.encode(x_ctrl);
  }

  Tensor encode_pert(const Tensor& pert_embedding) const {
    Tensor row = pert_embedding.rank() == 1
                     ? reshape(pert_embedding, {1, pert_embedding.size()})
                     : pert_embedding;
    if (row.rank() != 2 || row.dim(0) != 1 || row.dim(1) != pert_input_dim_) {
      contract_violation("model: perturbation input " + shape_str(pert_embedding.shape()) +
                         " incompatible with encoder width " + std::to_string(pert_input_dim_));
    }
    return pert_encoder_.forward(row);  // [1 x d]
  }

  Tensor db_embedding(const PerturbationDB& db, const std::string& pert_id) const {
    std::size_t idx = db.index_of(pert_id);
    return Tensor::from_data({1, db.dim()}, db.embedding(idx));
  }

  Tensor one_hot_embedding(const PerturbationDB& db, const std::string& pert_id) const {
    std::vector<double> v(db.size(), 0.0);
    v[db.index_of(pert_id)] = 1.0;
    return Tensor::from_data({1, db.size()}, std::move(v));
  }

  Tensor context_rows(const PerturbationDB& db, const std::vector<std::size_t>& indices) const {
    std::vector<double> flat;
    flat.reserve(indices.size() * db.dim());
    for (std::size_t idx : indices) {
      flat.insert(flat.end(), db.row(idx), db.row(idx) + db.dim());
    }
    return Tensor::from_data({indices.size(), db.dim()}, std::move(flat));
  }

  // Constant [S x S*K] block-sum matrix: z_i = sum_k row (i*K + k).
  static Tensor cell_sum_matrix(std::size_t cells, std::size_t k) {
    std::vector<double> v(cells * cells * k, 0.0);
    for (std::size_t i = 0; i < cells; ++i) {
      for (std::size_t j = 0; j < k; ++j) v[i * (cells * k) + i * k + j] = 1.0;
    }
    return Tensor::from_data({cells, cells * k}, std::move(v));
  }

  ModelKind kind_;
  ModelConfig cfg_;
  std::size_t pert_input_dim_;
  ParamRegistry params_;
  FrozenCellEncoder cell_encoder_;
  Linear pert_encoder_;
  MultiheadAttention context_attention_;
  LayerNorm score_ln_;
  Mlp score_mlp_;
  Linear proj_mlp_;
  TransformerGenerator generator_;
};

// ---------------------------------------------------------------------------
// Training objective: energy distance + lambda * mean selected fraction.

struct LossBreakdown {
  double total = 0.0;
  double dist = 0.0;
  double sparse = 0.0;
  double selected_count = 0.0;  // mean included candidates per cell
};

struct LossResult {
  Tensor total;  // scalar, on the tape
  LossBreakdown breakdown;
};

/// Energy distance between the predicted and observed populations (V-statistic
/// form, shared kernel with metrics::energy_distance) plus the sparsity term
/// (1/K) sum_k w_k averaged over cells, weighted by lambda. The sparsity value
/// uses the hard mask; its gradient follows the soft path via the
/// straight-through tensor.
inline LossResult compute_loss(const Tensor& prediction, const Tensor& target,
                               const SelectionMask* mask, double lambda_sparse) {
  if (prediction.shape() != target.shape()) {
    contract_violation("loss: prediction " + shape_str(prediction.shape()) + " vs target " +
                       shape_str(target.shape()));
  }
  if (prediction.rank() != 2 || prediction.dim(0) < 2) {
    contract_violation("loss: energy distance needs at least 2 cells per population");
  }
  Tensor mab = mean_all(pairwise_euclidean(prediction, target));
  Tensor maa = mean_all(pairwise_euclidean(prediction, prediction));
  Tensor mbb = mean_all(pairwise_euclidean(target, target));
  Tensor dist = sub(scalar_mul(mab, 2.0), add(maa, mbb));

  Tensor sparse = mask != nullptr ? mean_all(mask->combined) : Tensor::scalar(0.0);
  Tensor total = add(dist, scalar_mul(sparse, lambda_sparse));

  LossResult result;
  result.total = total;
  result.breakdown.total = total.item();
  result.breakdown.dist = dist.item();
  result.breakdown.sparse = sparse.item();
  result.breakdown.selected_count = mask != nullptr ? mask->mean_selected_per_cell() : 0.0;
  return result;
}

}  // namespace ptrag
