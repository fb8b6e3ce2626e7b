#pragma once

// Second-stage differentiable selection. Per (cell, candidate) pair the
// scorer emits an (exclude, include) logit pair; Gumbel noise plus a
// temperature-scaled softmax gives soft include probabilities, the argmax of
// the perturbed logits gives the hard binary decision, and a
// straight-through combine makes the hard mask usable downstream while
// routing gradients entirely through the soft path.

#include <ptrag/rng.hpp>
#include <ptrag/tensor.hpp>

#include <cmath>

namespace ptrag {

// Channel layout of the selection logits' class axis.
constexpr std::size_t kExcludeChannel = 0;
constexpr std::size_t kIncludeChannel = 1;

/// I.i.d. Gumbel(0,1) draws: g = -log(-log(u)), u uniform in (0,1) clamped
/// away from the endpoints by 1e-12.
inline Tensor sample_gumbel(const Shape& shape, SplitMix64& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = -std::log(-std::log(rng.next_open_unit()));
  return Tensor::from_data(shape, std::move(v), false);
}

struct SelectionMask {
  Tensor hard;      // [S x K], entries exactly 0 or 1, gradient-free
  Tensor soft;      // [S x K], include-class probability in (0,1)
  Tensor combined;  // straight-through tensor: hard in value, soft in gradient
  double temperature = 0.5;

  double mean_selected_per_cell() const {
    std::size_t cells = hard.dim(0);
    double total = 0.0;
    for (double v : hard.value()) total += v;
    return total / static_cast<double>(cells);
  }
};

struct SelectorOptions {
  bool deterministic_noise = false;  // test mode: all Gumbel draws forced to 0
  // When set, used verbatim instead of sampling; must match the logits shape.
  const Tensor* frozen_noise = nullptr;
};

/// Gumbel-Softmax selection over [S x K x 2] logits. Hard decisions come from
/// the argmax of (logits + g); exact ties break toward include. The returned
/// mask's `combined` tensor participates in autodiff so that d(loss)/d(logits)
/// follows the soft path.
inline SelectionMask gumbel_softmax_select(const Tensor& logits, double tau, SplitMix64* rng,
                                           const SelectorOptions& options = {}) {
  if (tau <= 0.0) contract_violation("gumbel-softmax: temperature must be positive");
  if (logits.rank() != 3 || logits.shape().back() != 2) {
    contract_violation("gumbel-softmax: logits must be [S x K x 2], got " +
                       shape_str(logits.shape()));
  }
  for (double v : logits.value()) {
    if (!std::isfinite(v)) contract_violation("gumbel-softmax: non-finite logit");
  }
  std::size_t cells = logits.dim(0), k = logits.dim(1);

  Tensor noise;
  if (options.frozen_noise != nullptr) {
    if (options.frozen_noise->shape() != logits.shape()) {
      contract_violation("gumbel-softmax: frozen noise shape " +
                         shape_str(options.frozen_noise->shape()) + " vs logits " +
                         shape_str(logits.shape()));
    }
    noise = Tensor::from_data(options.frozen_noise->shape(), options.frozen_noise->value());
  } else if (options.deterministic_noise) {
    noise = Tensor::zeros(logits.shape());
  } else {
    if (rng == nullptr) contract_violation("gumbel-softmax: rng required to sample noise");
    noise = sample_gumbel(logits.shape(), *rng);
  }

  Tensor perturbed = add(logits, noise);
  Tensor flat = reshape(perturbed, {cells * k, 2});
  Tensor soft_pairs = softmax_last_dim(scalar_mul(flat, 1.0 / tau));
  Tensor soft = reshape(slice_last_dim(soft_pairs, kIncludeChannel, 1), {cells, k});

  std::vector<double> hard_values(cells * k);
  const auto& pv = perturbed.value();
  for (std::size_t i = 0; i < cells * k; ++i) {
    hard_values[i] = pv[i * 2 + kIncludeChannel] >= pv[i * 2 + kExcludeChannel] ? 1.0 : 0.0;
  }
  Tensor hard = Tensor::from_data({cells, k}, std::move(hard_values), false);

  SelectionMask mask;
  mask.hard = hard;
  mask.soft = soft;
  mask.combined = straight_through_combine(hard, soft);
  mask.temperature = tau;
  return mask;
}

}  // namespace ptrag
