#pragma once

// Significance machinery: Mann-Whitney U (exact small-sample null by dynamic
// programming, normal approximation with tie and continuity corrections
// otherwise), Benjamini-Hochberg step-up FDR adjustment, and Jaccard overlap
// matrices over selected-candidate sets.

#include <ptrag/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace ptrag {

struct TestResult {
  double u_statistic = 0.0;  // U of the first sample
  double p_two_sided = 1.0;
  enum class Method { kExact, kNormalApprox } method = Method::kExact;
  std::size_t n = 0, m = 0;
};

namespace detail {

// Null CDF of U for sample sizes (n, m) without ties: counts arrangements
// with U <= u via the standard recurrence c[n][m][u] = c[n-1][m][u-m] +
// c[n][m-1][u]. Counts stay below 2^53 for n*m <= 400, so doubles are exact.
inline double exact_u_cdf(std::size_t n, std::size_t m, double u_threshold) {
  std::size_t max_u = n * m;
  std::vector<std::vector<double>> counts(n + 1, std::vector<double>(max_u + 1, 0.0));
  for (std::size_t j = 0; j <= n; ++j) counts[j][0] = 1.0;  // m' = 0 base handled in the sweep
  // counts[j][u] holds the count for j elements of sample-1 among (j + m') with
  // the current m'; sweep m' from 0 to m.
  for (std::size_t mp = 1; mp <= m; ++mp) {
    for (std::size_t j = 1; j <= n; ++j) {
      for (std::size_t u = 0; u <= j * mp; ++u) {
        double from_first = u >= mp ? counts[j - 1][u - mp] : 0.0;  // last element from sample 1
        double from_second = counts[j][u];                          // last element from sample 2
        counts[j][u] = from_first + from_second;
      }
      // u beyond j*mp stays zero-filled from initialization of this row width
    }
  }
  double total = 0.0, below = 0.0;
  for (std::size_t u = 0; u <= max_u; ++u) {
    total += counts[n][u];
    if (static_cast<double>(u) <= u_threshold + 1e-9) below += counts[n][u];
  }
  return below / total;
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

}  // namespace detail

/// Mann-Whitney U with average ranks for ties. Exact two-sided p (full null
/// enumeration via DP) when n*m <= 400 and the pooled sample is tie-free;
/// otherwise the normal approximation with tie correction and a continuity
/// correction of 0.5.
inline TestResult mann_whitney_u(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) contract_violation("mann-whitney: empty sample");
  std::size_t n = a.size(), m = b.size();
  std::vector<std::pair<double, int>> pooled;
  pooled.reserve(n + m);
  for (double v : a) pooled.emplace_back(v, 0);
  for (double v : b) pooled.emplace_back(v, 1);
  std::sort(pooled.begin(), pooled.end(),
            [](const auto& x, const auto& y) { return x.first < y.first; });

  // Average ranks, track ties for the variance correction.
  std::size_t total = n + m;
  std::vector<double> ranks(total);
  bool has_ties = false;
  double tie_term = 0.0;  // sum of t^3 - t over tie groups
  std::size_t i = 0;
  while (i < total) {
    std::size_t j = i;
    while (j + 1 < total && pooled[j + 1].first == pooled[i].first) ++j;
    double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[k] = avg;
    std::size_t t = j - i + 1;
    if (t > 1) {
      has_ties = true;
      tie_term += static_cast<double>(t) * t * t - static_cast<double>(t);
    }
    i = j + 1;
  }
  double rank_sum_a = 0.0;
  for (std::size_t k = 0; k < total; ++k) {
    if (pooled[k].second == 0) rank_sum_a += ranks[k];
  }
  double u_a = rank_sum_a - static_cast<double>(n) * (n + 1) / 2.0;
  double u_b = static_cast<double>(n) * static_cast<double>(m) - u_a;

  TestResult result;
  result.u_statistic = u_a;
  result.n = n;
  result.m = m;

  if (n * m <= 400 && !has_ties) {
    result.method = TestResult::Method::kExact;
    double p = 2.0 * detail::exact_u_cdf(n, m, std::min(u_a, u_b));
    result.p_two_sided = std::min(1.0, p);
  } else {
    result.method = TestResult::Method::kNormalApprox;
    double nm = static_cast<double>(n) * static_cast<double>(m);
    double nn = static_cast<double>(total);
    double var = nm / 12.0 * ((nn + 1.0) - tie_term / (nn * (nn - 1.0)));
    if (var <= 0.0) {
      result.p_two_sided = 1.0;  // all observations identical
    } else {
      double num = std::max(0.0, std::fabs(u_a - nm / 2.0) - 0.5);
      double z = num / std::sqrt(var);
      result.p_two_sided = std::min(1.0, 2.0 * detail::normal_cdf(-z));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Benjamini-Hochberg step-up adjustment

struct FDRResult {
  std::vector<double> raw_p;
  std::vector<double> adjusted_p;
  std::vector<bool> rejected;
  double alpha = 0.05;
};

/// adjusted_(i) = min over j >= rank(i) of p_(j) * m / j, capped at 1;
/// rejected iff adjusted <= alpha.
inline FDRResult benjamini_hochberg(const std::vector<double>& raw_p, double alpha) {
  for (double p : raw_p) {
    if (!(p >= 0.0 && p <= 1.0)) {
      contract_violation("benjamini-hochberg: p-value outside [0,1]");
    }
  }
  std::size_t m = raw_p.size();
  FDRResult result;
  result.raw_p = raw_p;
  result.alpha = alpha;
  result.adjusted_p.assign(m, 1.0);
  result.rejected.assign(m, false);
  if (m == 0) return result;

  std::vector<std::size_t> order(m);
  for (std::size_t i = 0; i < m; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return raw_p[a] < raw_p[b]; });
  double running_min = 1.0;
  for (std::size_t r = m; r-- > 0;) {
    double scaled = raw_p[order[r]] * static_cast<double>(m) / static_cast<double>(r + 1);
    running_min = std::min(running_min, scaled);
    result.adjusted_p[order[r]] = std::min(1.0, running_min);
  }
  for (std::size_t i = 0; i < m; ++i) result.rejected[i] = result.adjusted_p[i] <= alpha;
  return result;
}

// ---------------------------------------------------------------------------
// Jaccard overlap of selected-candidate sets across cell types

struct JaccardMatrix {
  std::vector<std::string> labels;
  std::vector<double> values;  // row-major C x C, symmetric, unit diagonal

  double at(std::size_t i, std::size_t j) const { return values[i * labels.size() + j]; }
};

using SelectionSets = std::map<std::string, std::map<std::string, std::set<std::string>>>;

/// Mean per-perturbation Jaccard index |A∩B| / |A∪B| between the top-N
/// selected-candidate sets of every cell-type pair. Perturbations where both
/// sets are empty are skipped for that pair; a pair with no usable
/// perturbation at all is an error.
inline JaccardMatrix jaccard_overlap(const SelectionSets& selections) {
  if (selections.empty()) contract_violation("jaccard: no cell types");
  JaccardMatrix out;
  for (const auto& [cell_type, _] : selections) out.labels.push_back(cell_type);
  std::size_t c = out.labels.size();
  out.values.assign(c * c, 1.0);

  const auto& reference = selections.begin()->second;
  for (const auto& [cell_type, per_pert] : selections) {
    if (per_pert.size() != reference.size()) {
      contract_violation("jaccard: cell type " + cell_type +
                         " lists a different perturbation set");
    }
    for (const auto& [pert, _] : per_pert) {
      if (!reference.count(pert)) {
        contract_violation("jaccard: perturbation " + pert + " missing for some cell type");
      }
    }
  }

  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = i + 1; j < c; ++j) {
      const auto& a_sets = selections.at(out.labels[i]);
      const auto& b_sets = selections.at(out.labels[j]);
      double sum = 0.0;
      std::size_t used = 0;
      for (const auto& [pert, a] : a_sets) {
        const auto& b = b_sets.at(pert);
        if (a.empty() && b.empty()) continue;
        std::size_t inter = 0;
        for (const auto& id : a) inter += b.count(id);
        std::size_t uni = a.size() + b.size() - inter;
        sum += static_cast<double>(inter) / static_cast<double>(uni);
        ++used;
      }
      if (used == 0) {
        contract_violation("jaccard: no perturbation with any selection for pair " +
                           out.labels[i] + "/" + out.labels[j]);
      }
      double value = sum / static_cast<double>(used);
      out.values[i * c + j] = value;
      out.values[j * c + i] = value;
    }
  }
  return out;
}

}  // namespace ptrag
