#pragma once

// First-stage semantic retrieval: a database of unit-normalized perturbation
// embeddings and exact exhaustive top-K cosine search with query
// self-exclusion. No index structure: the database is small enough that a
// full scan is both fastest to verify and trivially deterministic.

#include <ptrag/io.hpp>
#include <ptrag/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace ptrag {

class PerturbationDB {
 public:
  /// Builds the database from raw embeddings, normalizing every row to unit
  /// L2 norm. Rejects zero rows (naming the id), duplicate ids, and P < 2.
  static PerturbationDB build(std::vector<std::string> ids,
                              const std::vector<std::vector<double>>& raw_embeddings) {
    if (ids.size() != raw_embeddings.size()) {
      contract_violation("retrieval: " + std::to_string(ids.size()) + " ids vs " +
                         std::to_string(raw_embeddings.size()) + " embedding rows");
    }
    if (ids.size() < 2) contract_violation("retrieval: database needs at least 2 perturbations");
    PerturbationDB db;
    db.ids_ = std::move(ids);
    db.dim_ = raw_embeddings.empty() ? 0 : raw_embeddings[0].size();
    db.embeddings_.reserve(db.ids_.size() * db.dim_);
    for (std::size_t i = 0; i < db.ids_.size(); ++i) {
      const auto& row = raw_embeddings[i];
      if (row.size() != db.dim_) {
        contract_violation("retrieval: ragged embedding row for id " + db.ids_[i]);
      }
      double norm2 = 0.0;
      for (double v : row) norm2 += v * v;
      double norm = std::sqrt(norm2);
      if (norm == 0.0) {
        contract_violation("retrieval: zero-norm embedding for id " + db.ids_[i]);
      }
      // Idempotent ingest: rows already unit-norm (within the stored-row
      // invariant) pass through verbatim, so save -> load is bit-stable.
      if (std::fabs(norm - 1.0) <= 1e-9) {
        for (double v : row) db.embeddings_.push_back(v);
      } else {
        for (double v : row) db.embeddings_.push_back(v / norm);
      }
      if (!db.index_.emplace(db.ids_[i], i).second) {
        contract_violation("retrieval: duplicate id " + db.ids_[i]);
      }
    }
    return db;
  }

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  const std::vector<std::string>& ids() const { return ids_; }
  const std::string& id(std::size_t i) const { return ids_[i]; }

  bool contains(const std::string& id) const { return index_.count(id) != 0; }

  std::size_t index_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) contract_violation("retrieval: unknown id " + id);
    return it->second;
  }

  const double* row(std::size_t i) const { return embeddings_.data() + i * dim_; }

  std::vector<double> embedding(std::size_t i) const {
    return std::vector<double>(row(i), row(i) + dim_);
  }

 private:
  std::vector<std::string> ids_;
  std::vector<double> embeddings_;  // P x E, unit-norm rows
  std::size_t dim_ = 0;
  std::unordered_map<std::string, std::size_t> index_;
};

struct RetrievalResult {
  std::vector<std::size_t> candidate_indices;  // descending similarity
  std::vector<double> similarities;
};

/// Exact top-K by dot product against the (unit-norm) query row, excluding
/// the query itself. Ties break toward the lower database index.
inline RetrievalResult top_k(const PerturbationDB& db, const std::string& query_id,
                             std::size_t k) {
  std::size_t q = db.index_of(query_id);
  if (k < 1 || k > db.size() - 1) {
    contract_violation("retrieval: K=" + std::to_string(k) + " outside [1, " +
                       std::to_string(db.size() - 1) + "]");
  }
  const double* qrow = db.row(q);
  std::vector<std::size_t> order;
  order.reserve(db.size() - 1);
  std::vector<double> sims(db.size(), 0.0);
  for (std::size_t i = 0; i < db.size(); ++i) {
    if (i == q) continue;
    const double* r = db.row(i);
    double dot = 0.0;
    for (std::size_t j = 0; j < db.dim(); ++j) dot += qrow[j] * r[j];
    sims[i] = dot;
    order.push_back(i);
  }
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (sims[a] != sims[b]) return sims[a] > sims[b];
    return a < b;
  });
  RetrievalResult result;
  result.candidate_indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  result.similarities.reserve(k);
  for (std::size_t i : result.candidate_indices) result.similarities.push_back(sims[i]);
  return result;
}

// ---------------------------------------------------------------------------
// CSV interchange: header `id,e0,...,e{E-1}`, one row per perturbation.
// The loader normalizes on ingest (via build).

inline std::string db_to_csv(const PerturbationDB& db) {
  std::string out = "id";
  for (std::size_t j = 0; j < db.dim(); ++j) out += ",e" + std::to_string(j);
  out += "\n";
  for (std::size_t i = 0; i < db.size(); ++i) {
    out += db.id(i);
    const double* r = db.row(i);
    for (std::size_t j = 0; j < db.dim(); ++j) {
      out += ",";
      out += format_double(r[j]);
    }
    out += "\n";
  }
  return out;
}

inline PerturbationDB db_from_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line)) contract_violation("embedding csv: empty file");
  auto header = split_csv_line(line);
  if (header.empty() || header[0] != "id") {
    contract_violation("embedding csv: header must start with 'id'");
  }
  std::size_t dim = header.size() - 1;
  std::vector<std::string> ids;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != dim + 1) {
      contract_violation("embedding csv: row for '" + fields[0] + "' has " +
                         std::to_string(fields.size() - 1) + " values, expected " +
                         std::to_string(dim));
    }
    ids.push_back(fields[0]);
    std::vector<double> row(dim);
    for (std::size_t j = 0; j < dim; ++j) row[j] = parse_double(fields[j + 1]);
    rows.push_back(std::move(row));
  }
  return PerturbationDB::build(std::move(ids), rows);
}

inline void save_db_csv(const std::filesystem::path& path, const PerturbationDB& db) {
  atomic_write_file(path, db_to_csv(db));
}

inline PerturbationDB load_db_csv(const std::filesystem::path& path) {
  return db_from_csv(read_file(path));
}

}  // namespace ptrag
