#pragma once

// Evaluation metric suite: Welch-t DEG identification, Pearson/Spearman on
// DEG effects, reconstruction errors, PCA projection, exact assignment-based
// Wasserstein distances, RBF-MMD with the median heuristic, and energy
// distance. Everything is a pure function over rank-2 tensors; the energy
// distance shares its summation kernel with the training loss so the two
// agree bitwise.

#include <Eigen/Dense>

#include <ptrag/rng.hpp>
#include <ptrag/tensor.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace ptrag {

// ---------------------------------------------------------------------------
// Regularized incomplete beta, Lentz's continued fraction. In-repo because
// the Welch p-values must be bit-reproducible across platforms.

namespace detail {

inline double ibeta_continued_fraction(double a, double b, double x) {
  const int kMaxIter = 400;
  const double kEps = 3e-14;
  const double kTiny = 1e-300;
  double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace detail

inline double regularized_incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                    b * std::log1p(-x);
  double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return front * detail::ibeta_continued_fraction(a, b, x) / a;
  }
  return 1.0 - front * detail::ibeta_continued_fraction(b, a, 1.0 - x) / b;
}

/// Two-sided p-value for a Student-t statistic with (possibly fractional)
/// degrees of freedom: P(|T| > t) = I_{df/(df+t^2)}(df/2, 1/2).
inline double student_t_two_sided_p(double t, double df) {
  if (!std::isfinite(t)) return 0.0;
  return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

// ---------------------------------------------------------------------------
// DEG identification

struct DEGSet {
  std::vector<std::size_t> gene_indices;  // ascending, p < alpha
  std::vector<double> p_values;           // one per gene
};

/// Per-gene Welch t-test between control and perturbed populations.
/// Genes with zero variance in both groups and equal means get p = 1.
inline DEGSet welch_t_deg(const Tensor& control, const Tensor& perturbed, double alpha) {
  if (control.rank() != 2 || perturbed.rank() != 2 || control.dim(1) != perturbed.dim(1)) {
    contract_violation("welch: populations must be [n x G] and [m x G] with equal G");
  }
  std::size_t n = control.dim(0), m = perturbed.dim(0), genes = control.dim(1);
  if (n < 2 || m < 2) contract_violation("welch: both groups need at least 2 cells");

  DEGSet out;
  out.p_values.resize(genes);
  for (std::size_t g = 0; g < genes; ++g) {
    double mean1 = 0.0, mean2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean1 += control.value()[i * genes + g];
    for (std::size_t i = 0; i < m; ++i) mean2 += perturbed.value()[i * genes + g];
    mean1 /= static_cast<double>(n);
    mean2 /= static_cast<double>(m);
    double var1 = 0.0, var2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double d = control.value()[i * genes + g] - mean1;
      var1 += d * d;
    }
    for (std::size_t i = 0; i < m; ++i) {
      double d = perturbed.value()[i * genes + g] - mean2;
      var2 += d * d;
    }
    var1 /= static_cast<double>(n - 1);
    var2 /= static_cast<double>(m - 1);

    double p;
    double se2 = var1 / static_cast<double>(n) + var2 / static_cast<double>(m);
    if (se2 == 0.0) {
      p = mean1 == mean2 ? 1.0 : 0.0;
    } else {
      double t = (mean1 - mean2) / std::sqrt(se2);
      double num = se2 * se2;
      double den = (var1 / n) * (var1 / n) / static_cast<double>(n - 1) +
                   (var2 / m) * (var2 / m) / static_cast<double>(m - 1);
      double df = num / den;
      p = student_t_two_sided_p(std::fabs(t), df);
    }
    out.p_values[g] = p;
    if (p < alpha) out.gene_indices.push_back(g);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Correlations on DEG effect vectors

struct Correlations {
  std::optional<double> pearson;
  std::optional<double> spearman;
};

inline std::vector<double> average_ranks(const std::vector<double>& x) {
  std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

inline std::optional<double> pearson_correlation(const std::vector<double>& x,
                                                 const std::vector<double>& y) {
  std::size_t n = x.size();
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

/// Pearson on values; Spearman as Pearson on average-ranked values.
/// Zero variance in either vector leaves the correlation missing.
inline Correlations correlations(const std::vector<double>& pred_effect,
                                 const std::vector<double>& true_effect) {
  if (pred_effect.size() != true_effect.size()) {
    contract_violation("correlations: length mismatch");
  }
  if (pred_effect.size() < 2) contract_violation("correlations: need at least 2 DEGs");
  Correlations c;
  c.pearson = pearson_correlation(pred_effect, true_effect);
  c.spearman = pearson_correlation(average_ranks(pred_effect), average_ranks(true_effect));
  return c;
}

// ---------------------------------------------------------------------------
// Reconstruction errors

struct ReconstructionErrors {
  double mse, rmse, mae;
};

inline ReconstructionErrors reconstruction_errors(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    contract_violation("reconstruction: shape mismatch " + shape_str(pred.shape()) + " vs " +
                       shape_str(target.shape()));
  }
  double se = 0.0, ae = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    double d = pred.value()[i] - target.value()[i];
    se += d * d;
    ae += std::fabs(d);
  }
  double n = static_cast<double>(pred.size());
  return {se / n, std::sqrt(se / n), ae / n};
}

// ---------------------------------------------------------------------------
// PCA fit on training data

struct PCABasis {
  std::vector<double> mean;        // [G]
  std::vector<double> components;  // [G x q], row-major
  std::size_t genes = 0;
  std::size_t q = 0;
  std::string fitted_on;
};

/// Top-q eigenvectors of the sample covariance, descending eigenvalue order.
/// Sign convention: each component's largest-magnitude entry is positive.
inline PCABasis fit_pca(const Tensor& train_cells, std::size_t q, std::string fitted_on = "train") {
  if (train_cells.rank() != 2) contract_violation("pca: cells must be [N x G]");
  std::size_t n = train_cells.dim(0), genes = train_cells.dim(1);
  if (q < 1 || n < q + 1) {
    contract_violation("pca: need at least q+1 = " + std::to_string(q + 1) + " cells, got " +
                       std::to_string(n));
  }
  PCABasis basis;
  basis.genes = genes;
  basis.q = q;
  basis.fitted_on = std::move(fitted_on);
  basis.mean.assign(genes, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t g = 0; g < genes; ++g) basis.mean[g] += train_cells.value()[i * genes + g];
  for (double& v : basis.mean) v /= static_cast<double>(n);

  Eigen::MatrixXd centered(n, genes);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t g = 0; g < genes; ++g)
      centered(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(g)) =
          train_cells.value()[i * genes + g] - basis.mean[g];
  Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw std::runtime_error("pca: eigensolver failed");
  const auto& eigenvalues = solver.eigenvalues();  // ascending

  double max_eig = std::max(eigenvalues(static_cast<Eigen::Index>(genes - 1)), 0.0);
  std::size_t rank = 0;
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(genes); ++i) {
    if (eigenvalues(i) > max_eig * 1e-10 && eigenvalues(i) > 0.0) ++rank;
  }
  if (rank < q) {
    contract_violation("pca: covariance rank " + std::to_string(rank) +
                       " below requested q=" + std::to_string(q) + "; achievable q is " +
                       std::to_string(rank));
  }

  basis.components.assign(genes * q, 0.0);
  for (std::size_t j = 0; j < q; ++j) {
    Eigen::Index col = static_cast<Eigen::Index>(genes - 1 - j);  // descending eigenvalue
    Eigen::VectorXd comp = solver.eigenvectors().col(col);
    Eigen::Index arg = 0;
    double best = -1.0;
    for (Eigen::Index g = 0; g < comp.size(); ++g) {
      if (std::fabs(comp(g)) > best) {
        best = std::fabs(comp(g));
        arg = g;
      }
    }
    if (comp(arg) < 0.0) comp = -comp;
    for (std::size_t g = 0; g < genes; ++g) {
      basis.components[g * q + j] = comp(static_cast<Eigen::Index>(g));
    }
  }
  return basis;
}

inline Tensor pca_project(const PCABasis& basis, const Tensor& cells) {
  if (cells.rank() != 2 || cells.dim(1) != basis.genes) {
    contract_violation("pca: cells " + shape_str(cells.shape()) + " incompatible with basis over " +
                       std::to_string(basis.genes) + " genes");
  }
  std::size_t n = cells.dim(0);
  std::vector<double> out(n * basis.q, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < basis.q; ++j) {
      double acc = 0.0;
      for (std::size_t g = 0; g < basis.genes; ++g) {
        acc += (cells.value()[i * basis.genes + g] - basis.mean[g]) * basis.components[g * basis.q + j];
      }
      out[i * basis.q + j] = acc;
    }
  }
  return Tensor::from_data({n, basis.q}, std::move(out));
}

// ---------------------------------------------------------------------------
// Exact Wasserstein by minimum-cost perfect matching (shortest augmenting
// paths with potentials, O(n^3)).

namespace detail {

inline double min_cost_perfect_matching(const std::vector<double>& cost, std::size_t n) {
  const double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1, 0.0);
  std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      std::size_t i0 = match[j0], j1 = 0;
      double delta = kInf;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  // Summing the matched costs in canonical order makes the value exactly
  // symmetric in the two clouds (the optimal matching multiset is shared).
  std::vector<double> matched(n);
  for (std::size_t j = 1; j <= n; ++j) matched[j - 1] = cost[(match[j] - 1) * n + (j - 1)];
  return canonical_sum(matched.data(), matched.size());
}

}  // namespace detail

/// Exact optimal transport between two equal-size empirical measures.
/// order 1: mean Euclidean cost under the optimal matching (W1).
/// order 2: mean *squared* Euclidean cost (the squared 2-Wasserstein).
inline double wasserstein(const Tensor& cloud_a, const Tensor& cloud_b, int order) {
  if (order != 1 && order != 2) contract_violation("wasserstein: order must be 1 or 2");
  if (cloud_a.rank() != 2 || cloud_b.rank() != 2 || cloud_a.dim(1) != cloud_b.dim(1)) {
    contract_violation("wasserstein: clouds must be [n x q] with equal q");
  }
  if (cloud_a.dim(0) != cloud_b.dim(0)) {
    contract_violation("wasserstein: size mismatch " + std::to_string(cloud_a.dim(0)) + " vs " +
                       std::to_string(cloud_b.dim(0)));
  }
  std::size_t n = cloud_a.dim(0), d = cloud_a.dim(1);
  if (n == 0) contract_violation("wasserstein: empty clouds");
  std::vector<double> cost(n * n);
  detail::pairwise_distances(cloud_a.value().data(), n, cloud_b.value().data(), n, d, cost.data());
  if (order == 2) {
    for (double& c : cost) c = c * c;
  }
  return detail::min_cost_perfect_matching(cost, n) / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// MMD^2, biased V-statistic, RBF kernel with median-heuristic bandwidth.

inline double mmd_rbf(const Tensor& cloud_a, const Tensor& cloud_b) {
  if (cloud_a.rank() != 2 || cloud_b.rank() != 2 || cloud_a.dim(1) != cloud_b.dim(1)) {
    contract_violation("mmd: clouds must be [n x q] with equal q");
  }
  std::size_t n = cloud_a.dim(0), m = cloud_b.dim(0), d = cloud_a.dim(1);
  if (n < 1 || m < 1) contract_violation("mmd: empty cloud");

  // Median pairwise distance over the pooled sample; zero distances are
  // ignored, and sigma falls back to 1 when every distance is zero.
  std::vector<double> pooled((n + m) * d);
  std::copy(cloud_a.value().begin(), cloud_a.value().end(), pooled.begin());
  std::copy(cloud_b.value().begin(), cloud_b.value().end(), pooled.begin() + n * d);
  std::vector<double> dists;
  dists.reserve((n + m) * (n + m - 1) / 2);
  for (std::size_t i = 0; i < n + m; ++i) {
    for (std::size_t j = i + 1; j < n + m; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        double diff = pooled[i * d + k] - pooled[j * d + k];
        acc += diff * diff;
      }
      double dist = std::sqrt(acc);
      if (dist > 0.0) dists.push_back(dist);
    }
  }
  double sigma = 1.0;
  if (!dists.empty()) {
    std::sort(dists.begin(), dists.end());
    std::size_t half = dists.size() / 2;
    sigma = dists.size() % 2 == 1 ? dists[half] : 0.5 * (dists[half - 1] + dists[half]);
  }
  double gamma = 1.0 / (2.0 * sigma * sigma);

  auto kernel_mean = [&](const double* x, std::size_t nx, const double* y, std::size_t ny) {
    std::vector<double> values(nx * ny);
    for (std::size_t i = 0; i < nx; ++i) {
      for (std::size_t j = 0; j < ny; ++j) {
        double sq = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          double diff = x[i * d + k] - y[j * d + k];
          sq += diff * diff;
        }
        values[i * ny + j] = std::exp(-gamma * sq);
      }
    }
    return detail::canonical_mean(values.data(), values.size());
  };
  double kaa = kernel_mean(cloud_a.value().data(), n, cloud_a.value().data(), n);
  double kbb = kernel_mean(cloud_b.value().data(), m, cloud_b.value().data(), m);
  double kab = kernel_mean(cloud_a.value().data(), n, cloud_b.value().data(), m);
  return kaa + kbb - 2.0 * kab;
}

// ---------------------------------------------------------------------------
// Energy distance, V-statistic form (exactly zero on identical clouds).
// Shares pairwise_distances and sequential_mean with the autodiff loss path
// so the metric and the training loss agree bitwise.

inline double energy_distance(const Tensor& cloud_a, const Tensor& cloud_b) {
  if (cloud_a.rank() != 2 || cloud_b.rank() != 2 || cloud_a.dim(1) != cloud_b.dim(1)) {
    contract_violation("energy: clouds must be [n x q] with equal q");
  }
  std::size_t n = cloud_a.dim(0), m = cloud_b.dim(0), d = cloud_a.dim(1);
  if (n < 2 || m < 2) contract_violation("energy: both clouds need at least 2 points");
  std::vector<double> dab(n * m), daa(n * n), dbb(m * m);
  detail::pairwise_distances(cloud_a.value().data(), n, cloud_b.value().data(), m, d, dab.data());
  detail::pairwise_distances(cloud_a.value().data(), n, cloud_a.value().data(), n, d, daa.data());
  detail::pairwise_distances(cloud_b.value().data(), m, cloud_b.value().data(), m, d, dbb.data());
  double mab = detail::canonical_mean(dab.data(), dab.size());
  double maa = detail::canonical_mean(daa.data(), daa.size());
  double mbb = detail::canonical_mean(dbb.data(), dbb.size());
  // Grouping the within-set means keeps the value exactly symmetric in
  // (a, b) and exactly zero on identical clouds.
  return 2.0 * mab - (maa + mbb);
}

/// fit_pca with the q-clamping default rule: q = min(requested, achievable
/// rank, G, N-1). The strict fit_pca error contract stays available above.
inline PCABasis fit_pca_clamped(const Tensor& train_cells, std::size_t requested_q,
                                std::string fitted_on = "train") {
  std::size_t n = train_cells.dim(0), genes = train_cells.dim(1);
  std::size_t q = std::min({requested_q, genes, n > 1 ? n - 1 : std::size_t{1}});
  for (;;) {
    try {
      return fit_pca(train_cells, q, fitted_on);
    } catch (const std::invalid_argument& e) {
      std::string what = e.what();
      auto pos = what.find("achievable q is ");
      if (pos == std::string::npos || q <= 1) throw;
      q = static_cast<std::size_t>(std::stoul(what.substr(pos + 16)));
    }
  }
}

// Seeded subsampling (without replacement) to the smaller population before
// distance computation; identity when sizes already match.
inline std::pair<Tensor, Tensor> subsample_to_equal(const Tensor& a, const Tensor& b,
                                                    std::uint64_t seed) {
  if (a.dim(0) == b.dim(0)) return {a, b};
  std::size_t target = std::min(a.dim(0), b.dim(0));
  SplitMix64 rng(derive_seed(seed, "metrics.subsample"));
  auto sample_rows = [&](const Tensor& t) {
    if (t.dim(0) == target) return t;
    std::vector<std::size_t> idx(t.dim(0));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    rng.shuffle(idx);
    idx.resize(target);
    std::sort(idx.begin(), idx.end());
    return gather_rows(t, idx);
  };
  return {sample_rows(a), sample_rows(b)};
}

// ---------------------------------------------------------------------------
// Per-perturbation metric rows and the aggregate report.

struct MetricsRow {
  std::string pert_id;
  std::string cell_type;
  std::optional<double> pearson_deg, spearman_deg;  // missing when < 2 DEGs or zero variance
  double mse = 0, rmse = 0, mae = 0;
  double mse_pca50 = 0;
  double w1 = 0, w2 = 0, w2_root = 0;  // w2 is the mean squared transport cost
  double energy = 0, mmd = 0;
  std::size_t n_degs = 0;
};

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"pearson_deg", "spearman_deg", "mse",   "rmse",
                                              "mae",         "mse_pca50",    "w1",    "w2",
                                              "w2_root",     "energy",       "mmd"};
  return names;
}

inline std::optional<double> metric_value(const MetricsRow& row, const std::string& name) {
  if (name == "pearson_deg") return row.pearson_deg;
  if (name == "spearman_deg") return row.spearman_deg;
  if (name == "mse") return row.mse;
  if (name == "rmse") return row.rmse;
  if (name == "mae") return row.mae;
  if (name == "mse_pca50") return row.mse_pca50;
  if (name == "w1") return row.w1;
  if (name == "w2") return row.w2;
  if (name == "w2_root") return row.w2_root;
  if (name == "energy") return row.energy;
  if (name == "mmd") return row.mmd;
  contract_violation("unknown metric '" + name + "'");
}

/// One evaluation row: reconstruction errors and DEG correlations in gene
/// space, distributional metrics in the (train-fitted) PCA space. DEGs come
/// from Welch tests on the observed control/perturbed populations.
inline MetricsRow compute_metrics_row(std::string pert_id, std::string cell_type,
                                      const Tensor& pred, const Tensor& target,
                                      const Tensor& control, const PCABasis& basis,
                                      double deg_alpha = 0.05, std::uint64_t subsample_seed = 0) {
  MetricsRow row;
  row.pert_id = std::move(pert_id);
  row.cell_type = std::move(cell_type);

  auto recon = reconstruction_errors(pred, target);
  row.mse = recon.mse;
  row.rmse = recon.rmse;
  row.mae = recon.mae;

  DEGSet degs = welch_t_deg(control, target, deg_alpha);
  row.n_degs = degs.gene_indices.size();
  if (row.n_degs >= 2) {
    std::size_t genes = control.dim(1);
    auto mean_col = [&](const Tensor& t, std::size_t g) {
      double acc = 0.0;
      for (std::size_t i = 0; i < t.dim(0); ++i) acc += t.value()[i * genes + g];
      return acc / static_cast<double>(t.dim(0));
    };
    std::vector<double> pred_effect, true_effect;
    for (std::size_t g : degs.gene_indices) {
      double ctrl_mean = mean_col(control, g);
      pred_effect.push_back(mean_col(pred, g) - ctrl_mean);
      true_effect.push_back(mean_col(target, g) - ctrl_mean);
    }
    auto corr = correlations(pred_effect, true_effect);
    row.pearson_deg = corr.pearson;
    row.spearman_deg = corr.spearman;
  }

  Tensor pred_pca = pca_project(basis, pred);
  Tensor target_pca = pca_project(basis, target);
  row.mse_pca50 = reconstruction_errors(pred_pca, target_pca).mse;
  auto [a, b] = subsample_to_equal(pred_pca, target_pca, subsample_seed);
  row.w1 = wasserstein(a, b, 1);
  row.w2 = wasserstein(a, b, 2);
  row.w2_root = std::sqrt(row.w2);
  // V-statistics are >= 0 in exact arithmetic; floor out rounding residue.
  row.energy = std::max(0.0, energy_distance(a, b));
  row.mmd = std::max(0.0, mmd_rbf(a, b));
  return row;
}

struct MetricStat {
  double mean = 0.0;
  double stddev = 0.0;  // sample std (n-1), 0 when n < 2
  std::size_t count = 0;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;
  std::size_t pca_dim = 0;
  std::map<std::string, MetricStat> overall;
  std::map<std::string, std::map<std::string, MetricStat>> per_cell_type;

  static constexpr const char* kW2Note =
      "w2 reports the mean squared transport cost under the optimal matching (the squared "
      "2-Wasserstein); w2_root is its square root";
};

inline MetricsReport build_metrics_report(std::vector<MetricsRow> rows, std::size_t pca_dim) {
  MetricsReport report;
  report.rows = std::move(rows);
  report.pca_dim = pca_dim;
  auto stat_of = [](const std::vector<double>& values) {
    MetricStat s;
    s.count = values.size();
    if (values.empty()) return s;
    for (double v : values) s.mean += v;
    s.mean /= static_cast<double>(values.size());
    if (values.size() > 1) {
      double acc = 0.0;
      for (double v : values) acc += (v - s.mean) * (v - s.mean);
      s.stddev = std::sqrt(acc / static_cast<double>(values.size() - 1));
    }
    return s;
  };
  std::map<std::string, std::vector<double>> overall_values;
  std::map<std::string, std::map<std::string, std::vector<double>>> per_type_values;
  for (const MetricsRow& row : report.rows) {
    for (const std::string& name : metric_names()) {
      auto v = metric_value(row, name);
      if (!v.has_value()) continue;
      overall_values[name].push_back(*v);
      per_type_values[row.cell_type][name].push_back(*v);
    }
  }
  for (const std::string& name : metric_names()) {
    report.overall[name] = stat_of(overall_values[name]);
  }
  for (const auto& [ct, values] : per_type_values) {
    for (const std::string& name : metric_names()) {
      auto it = values.find(name);
      report.per_cell_type[ct][name] =
          stat_of(it == values.end() ? std::vector<double>{} : it->second);
    }
  }
  return report;
}

// JSON interchange. Missing correlations serialize as null; numbers use the
// library's round-trip rendering.

inline nlohmann::json metrics_report_to_json(const MetricsReport& report) {
  nlohmann::json j;
  j["schema"] = "ptrag.metrics.v1";
  j["note"] = MetricsReport::kW2Note;
  j["pca_dim"] = report.pca_dim;
  nlohmann::json rows = nlohmann::json::array();
  for (const MetricsRow& row : report.rows) {
    nlohmann::json r;
    r["pert_id"] = row.pert_id;
    r["cell_type"] = row.cell_type;
    r["n_degs"] = row.n_degs;
    for (const std::string& name : metric_names()) {
      auto v = metric_value(row, name);
      if (v.has_value()) {
        r[name] = *v;
      } else {
        r[name] = nullptr;
      }
    }
    rows.push_back(std::move(r));
  }
  j["rows"] = std::move(rows);
  auto stats_json = [](const std::map<std::string, MetricStat>& stats) {
    nlohmann::json out;
    for (const auto& [name, s] : stats) {
      out[name] = {{"mean", s.mean}, {"std", s.stddev}, {"count", s.count}};
    }
    return out;
  };
  j["aggregate"]["overall"] = stats_json(report.overall);
  for (const auto& [ct, stats] : report.per_cell_type) {
    j["aggregate"]["per_cell_type"][ct] = stats_json(stats);
  }
  return j;
}

inline MetricsReport metrics_report_from_json(const nlohmann::json& j) {
  if (j.value("schema", "") != "ptrag.metrics.v1") {
    throw std::runtime_error("unrecognized metrics report schema");
  }
  std::vector<MetricsRow> rows;
  for (const auto& r : j.at("rows")) {
    MetricsRow row;
    row.pert_id = r.at("pert_id").get<std::string>();
    row.cell_type = r.at("cell_type").get<std::string>();
    row.n_degs = r.at("n_degs").get<std::size_t>();
    auto opt = [&](const char* name) -> std::optional<double> {
      if (r.at(name).is_null()) return std::nullopt;
      return r.at(name).get<double>();
    };
    row.pearson_deg = opt("pearson_deg");
    row.spearman_deg = opt("spearman_deg");
    row.mse = r.at("mse").get<double>();
    row.rmse = r.at("rmse").get<double>();
    row.mae = r.at("mae").get<double>();
    row.mse_pca50 = r.at("mse_pca50").get<double>();
    row.w1 = r.at("w1").get<double>();
    row.w2 = r.at("w2").get<double>();
    row.w2_root = r.at("w2_root").get<double>();
    row.energy = r.at("energy").get<double>();
    row.mmd = r.at("mmd").get<double>();
    rows.push_back(std::move(row));
  }
  return build_metrics_report(std::move(rows), j.at("pca_dim").get<std::size_t>());
}

}  // namespace ptrag
