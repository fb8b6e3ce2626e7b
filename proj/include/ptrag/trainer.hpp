#pragma once

// Experimental protocol: seeded minibatch training with scheduled validation
// and best-checkpoint retention, held-out evaluation into MetricsReports,
// multi-model comparison with Mann-Whitney + Benjamini-Hochberg markers,
// lambda/K sweeps, and the selection-overlap (Jaccard) analysis.

#include <ptrag/metrics.hpp>
#include <ptrag/model.hpp>
#include <ptrag/stats.hpp>
#include <ptrag/synthdata.hpp>

#include <nlohmann/json.hpp>

#include <chrono>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

namespace ptrag {

struct TrainConfig {
  std::size_t max_steps = 2000;
  std::size_t validate_every = 200;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double weight_decay = 5e-4;
  double lambda_sparse = 0.1;
  std::size_t k = 8;
  double tau = 0.5;
  std::uint64_t seed = 0;
  ModelKind model_kind = ModelKind::kPtRag;
  // generator/encoder structure
  std::size_t d = 32;
  std::size_t depth = 2;
  std::size_t heads = 4;
  std::size_t pca_dim = 50;

  void validate() const {
    if (max_steps < 1) throw ConfigError("train.max_steps: must be >= 1");
    if (validate_every < 1) throw ConfigError("train.validate_every: must be >= 1");
    if (validate_every > max_steps) {
      throw ConfigError("train.validate_every: must be <= max_steps");
    }
    if (batch_size < 1) throw ConfigError("train.batch_size: must be >= 1");
    if (!(lr >= 0.0)) throw ConfigError("train.lr: must be >= 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay: must be >= 0");
    if (!(lambda_sparse >= 0.0)) throw ConfigError("train.lambda_sparse: must be >= 0");
    if (!(tau > 0.0)) throw ConfigError("train.tau: must be > 0");
    if (k < 1) throw ConfigError("train.K: must be >= 1");
    if (d < 1 || heads < 1 || d % heads != 0) {
      throw ConfigError("train.d: must be positive and divisible by heads");
    }
    if (pca_dim < 1) throw ConfigError("train.pca_dim: must be >= 1");
  }

  ModelConfig model_config(std::size_t genes, std::size_t embedding_dim) const {
    ModelConfig m;
    m.d = d;
    m.genes = genes;
    m.embedding_dim = embedding_dim;
    m.k = k;
    m.tau = tau;
    m.lambda_sparse = lambda_sparse;
    m.depth = depth;
    m.heads = heads;
    m.seed = seed;
    return m;
  }
};

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return nlohmann::json{{"model_kind", to_string(c.model_kind)},
                        {"max_steps", c.max_steps},
                        {"validate_every", c.validate_every},
                        {"batch_size", c.batch_size},
                        {"lr", c.lr},
                        {"weight_decay", c.weight_decay},
                        {"lambda_sparse", c.lambda_sparse},
                        {"K", c.k},
                        {"tau", c.tau},
                        {"seed", c.seed},
                        {"d", c.d},
                        {"depth", c.depth},
                        {"heads", c.heads},
                        {"pca_dim", c.pca_dim}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.model_kind = model_kind_from_string(j.at("model_kind").get<std::string>());
  c.max_steps = j.value("max_steps", c.max_steps);
  c.validate_every = j.value("validate_every", c.validate_every);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.lambda_sparse = j.value("lambda_sparse", c.lambda_sparse);
  c.k = j.value("K", c.k);
  c.tau = j.value("tau", c.tau);
  c.seed = j.value("seed", c.seed);
  c.d = j.value("d", c.d);
  c.depth = j.value("depth", c.depth);
  c.heads = j.value("heads", c.heads);
  c.pca_dim = j.value("pca_dim", c.pca_dim);
  c.validate();
  return c;
}

struct ValidationEntry {
  std::size_t step = 0;
  double val_energy = 0.0;
  double mean_selected = 0.0;  // mean included candidates per cell (pt_rag only)
};

struct RunRecord {
  std::vector<ValidationEntry> validations;  // length floor(max_steps / validate_every)
  MetricsReport test_metrics;
  double wallclock_sec = 0.0;  // informational; excluded from determinism comparisons
  std::uint64_t seed = 0;
  double initial_val_energy = 0.0;  // before any update
  std::size_t best_validation_step = 0;
};

// ---------------------------------------------------------------------------
// Evaluation

/// Mean energy distance (and mean selected count) over a split under
/// deterministic evaluation-mode forwards.
inline std::pair<double, double> evaluate_split_energy(const PerturbationModel& model,
                                                       const SyntheticDataset& ds, Split split,
                                                       const PerturbationDB& db) {
  auto indices = ds.split_indices(split);
  if (indices.empty()) contract_violation("evaluate: split '" + to_string(split) + "' is empty");
  double energy_sum = 0.0, selected_sum = 0.0;
  for (std::size_t idx : indices) {
    const Sample& s = ds.samples[idx];
    auto out = model.forward(s.x_ctrl, s.pert_id, db, nullptr, /*deterministic_noise=*/true);
    auto loss = compute_loss(out.prediction, s.x_pert,
                             out.mask.has_value() ? &*out.mask : nullptr, 0.0);
    energy_sum += loss.breakdown.dist;
    selected_sum += loss.breakdown.selected_count;
  }
  double n = static_cast<double>(indices.size());
  return {energy_sum / n, selected_sum / n};
}

/// Full metric suite over a split: one MetricsRow per (perturbation, cell
/// type) sample, distributional metrics in a PCA space fit on the train
/// split's perturbed cells.
inline MetricsReport evaluate(const PerturbationModel& model, const SyntheticDataset& ds,
                              Split split, const PerturbationDB& db, std::size_t pca_dim = 50) {
  auto indices = ds.split_indices(split);
  if (indices.empty()) contract_violation("evaluate: split '" + to_string(split) + "' is empty");
  auto train_indices = ds.split_indices(Split::kTrain);
  if (train_indices.empty()) {
    contract_violation("evaluate: no training cells to fit the PCA basis on");
  }
  std::size_t genes = ds.config.genes;
  std::size_t s = ds.config.cells_per_population;
  std::vector<double> train_cells;
  train_cells.reserve(train_indices.size() * s * genes);
  for (std::size_t idx : train_indices) {
    const auto& v = ds.samples[idx].x_pert.value();
    train_cells.insert(train_cells.end(), v.begin(), v.end());
  }
  PCABasis basis = fit_pca_clamped(
      Tensor::from_data({train_indices.size() * s, genes}, std::move(train_cells)), pca_dim);

  std::vector<MetricsRow> rows;
  rows.reserve(indices.size());
  for (std::size_t idx : indices) {
    const Sample& sample = ds.samples[idx];
    auto out = model.forward(sample.x_ctrl, sample.pert_id, db, nullptr,
                             /*deterministic_noise=*/true);
    rows.push_back(compute_metrics_row(sample.pert_id, sample.cell_type, out.prediction,
                                       sample.x_pert, sample.x_ctrl, basis));
  }
  return build_metrics_report(std::move(rows), basis.q);
}

// ---------------------------------------------------------------------------
// Training

struct TrainResult {
  std::shared_ptr<PerturbationModel> model;  // best-validation weights restored
  RunRecord record;
};

inline TrainResult train(const TrainConfig& config, const SyntheticDataset& ds,
                         const PerturbationDB& db) {
  config.validate();
  for (const std::string& id : ds.pert_ids) {
    if (!db.contains(id)) {
      contract_violation("train: database does not cover perturbation " + id);
    }
  }
  auto train_indices = ds.split_indices(Split::kTrain);
  if (train_indices.empty()) {
    contract_violation("train: dataset has no train split (run the few-shot split first)");
  }

  auto started = std::chrono::steady_clock::now();
  auto model = std::make_shared<PerturbationModel>(
      config.model_kind, config.model_config(ds.config.genes, db.dim()),
      config.model_kind == ModelKind::kState ? db.size() : db.dim());
  Adam optimizer(model->params(),
                 {config.lr, config.weight_decay, 0.9, 0.999, 1e-8});

  SplitMix64 batch_rng(derive_seed(config.seed, "train.batch"));
  SplitMix64 noise_rng(derive_seed(config.seed, "train.noise"));

  RunRecord record;
  record.seed = config.seed;
  record.initial_val_energy = evaluate_split_energy(*model, ds, Split::kVal, db).first;

  double best_energy = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> best_snapshot;

  for (std::size_t step = 1; step <= config.max_steps; ++step) {
    Tape tape;
    TapeScope scope(tape);
    Tensor batch_total;
    LossBreakdown batch_breakdown;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const Sample& sample =
          ds.samples[train_indices[batch_rng.next_below(train_indices.size())]];
      auto out = model->forward(sample.x_ctrl, sample.pert_id, db, &noise_rng,
                                /*deterministic_noise=*/false);
      auto loss = compute_loss(out.prediction, sample.x_pert,
                               out.mask.has_value() ? &*out.mask : nullptr,
                               config.lambda_sparse);
      batch_total = b == 0 ? loss.total : add(batch_total, loss.total);
      batch_breakdown.total += loss.breakdown.total;
      batch_breakdown.dist += loss.breakdown.dist;
      batch_breakdown.sparse += loss.breakdown.sparse;
      batch_breakdown.selected_count += loss.breakdown.selected_count;
    }
    batch_total = scalar_mul(batch_total, 1.0 / static_cast<double>(config.batch_size));
    batch_breakdown.total /= static_cast<double>(config.batch_size);
    batch_breakdown.dist /= static_cast<double>(config.batch_size);
    batch_breakdown.sparse /= static_cast<double>(config.batch_size);
    batch_breakdown.selected_count /= static_cast<double>(config.batch_size);

    if (!std::isfinite(batch_breakdown.total)) {
      throw std::runtime_error(
          "train: non-finite loss at step " + std::to_string(step) + " (total=" +
          std::to_string(batch_breakdown.total) + ", dist=" +
          std::to_string(batch_breakdown.dist) + ", sparse=" +
          std::to_string(batch_breakdown.sparse) + ")");
    }
    backward(batch_total);
    optimizer.step(model->params());

    if (step % config.validate_every == 0) {
      auto [val_energy, mean_selected] = evaluate_split_energy(*model, ds, Split::kVal, db);
      record.validations.push_back({step, val_energy, mean_selected});
      if (val_energy < best_energy) {
        best_energy = val_energy;
        best_snapshot = model->params().snapshot();
        record.best_validation_step = step;
      }
    }
  }
  if (!best_snapshot.empty()) model->params().restore(best_snapshot);

  if (!ds.split_indices(Split::kTest).empty()) {
    record.test_metrics = evaluate(*model, ds, Split::kTest, db, config.pca_dim);
  }
  record.wallclock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return {model, std::move(record)};
}

// ---------------------------------------------------------------------------
// Multi-model comparison with significance markers

struct SignificanceCell {
  double u = 0.0;
  double p_raw = 1.0;
  double p_fdr = 1.0;
  std::string marker;  // "†" p<0.01, double p<0.05, triple p<0.1
};

struct SignificanceReport {
  std::vector<std::string> labels;
  // "labelA_vs_labelB" -> metric -> cell
  std::map<std::string, std::map<std::string, SignificanceCell>> tests;
  double alpha = 0.05;
};

inline std::string significance_marker(double p_fdr) {
  if (p_fdr < 0.01) return "†";
  if (p_fdr < 0.05) return "††";
  if (p_fdr < 0.1) return "†††";
  return "";
}

struct CompareEntry {
  std::string label;
  TrainConfig config;
};

struct CompareResult {
  std::map<std::string, MetricsReport> reports;  // label -> rows pooled over seeds
  SignificanceReport significance;
  std::map<std::string, std::vector<RunRecord>> records;  // label -> per-seed records
};

/// Trains every config at every seed, pools per-perturbation test rows per
/// label, runs pairwise Mann-Whitney per metric, applies Benjamini-Hochberg
/// across all (pair x metric) tests, and attaches the paper-style dagger
/// markers to the FDR-adjusted p-values.
inline CompareResult compare(const std::vector<CompareEntry>& entries, const SyntheticDataset& ds,
                             const PerturbationDB& db, const std::vector<std::uint64_t>& seeds) {
  if (entries.size() < 2) contract_violation("compare: need at least 2 configs");
  if (seeds.empty()) contract_violation("compare: need at least 1 seed");
  {
    std::set<std::string> seen;
    for (const auto& e : entries) {
      if (!seen.insert(e.label).second) {
        throw ConfigError("compare: duplicate label '" + e.label + "'");
      }
    }
  }

  CompareResult result;
  for (const auto& entry : entries) {
    std::vector<MetricsRow> pooled;
    for (std::uint64_t seed : seeds) {
      TrainConfig cfg = entry.config;
      cfg.seed = seed;
      TrainResult run = train(cfg, ds, db);
      pooled.insert(pooled.end(), run.record.test_metrics.rows.begin(),
                    run.record.test_metrics.rows.end());
      result.records[entry.label].push_back(std::move(run.record));
    }
    std::size_t pca_dim = result.records[entry.label].front().test_metrics.pca_dim;
    result.reports.emplace(entry.label, build_metrics_report(std::move(pooled), pca_dim));
    result.significance.labels.push_back(entry.label);
  }

  struct PendingTest {
    std::string pair_key, metric;
    double u, p_raw;
  };
  std::vector<PendingTest> pending;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    for (std::size_t j = i + 1; j < entries.size(); ++j) {
      const auto& rows_a = result.reports.at(entries[i].label).rows;
      const auto& rows_b = result.reports.at(entries[j].label).rows;
      std::string key = entries[i].label + "_vs_" + entries[j].label;
      for (const std::string& metric : metric_names()) {
        std::vector<double> a, b;
        for (const auto& row : rows_a) {
          if (auto v = metric_value(row, metric)) a.push_back(*v);
        }
        for (const auto& row : rows_b) {
          if (auto v = metric_value(row, metric)) b.push_back(*v);
        }
        if (a.empty() || b.empty()) continue;
        TestResult t = mann_whitney_u(a, b);
        pending.push_back({key, metric, t.u_statistic, t.p_two_sided});
      }
    }
  }
  std::vector<double> raw;
  raw.reserve(pending.size());
  for (const auto& t : pending) raw.push_back(t.p_raw);
  FDRResult fdr = benjamini_hochberg(raw, result.significance.alpha);
  for (std::size_t i = 0; i < pending.size(); ++i) {
    SignificanceCell cell;
    cell.u = pending[i].u;
    cell.p_raw = pending[i].p_raw;
    cell.p_fdr = fdr.adjusted_p[i];
    cell.marker = significance_marker(cell.p_fdr);
    result.significance.tests[pending[i].pair_key][pending[i].metric] = cell;
  }
  return result;
}

inline nlohmann::json significance_to_json(const SignificanceReport& report) {
  nlohmann::json j;
  j["schema"] = "ptrag.significance.v1";
  j["alpha"] = report.alpha;
  j["labels"] = report.labels;
  j["marker_scheme"] = {{"†", "FDR-corrected p < 0.01"},
                        {"††", "FDR-corrected p < 0.05"},
                        {"†††", "FDR-corrected p < 0.1"}};
  for (const auto& [pair_key, metrics] : report.tests) {
    for (const auto& [metric, cell] : metrics) {
      j["tests"][pair_key][metric] = {{"u", cell.u},
                                      {"p_raw", cell.p_raw},
                                      {"p_fdr", cell.p_fdr},
                                      {"marker", cell.marker}};
    }
  }
  if (!j.contains("tests")) j["tests"] = nlohmann::json::object();
  return j;
}

inline SignificanceReport significance_from_json(const nlohmann::json& j) {
  if (j.value("schema", "") != "ptrag.significance.v1") {
    throw std::runtime_error("unrecognized significance schema");
  }
  SignificanceReport report;
  report.alpha = j.at("alpha").get<double>();
  report.labels = j.at("labels").get<std::vector<std::string>>();
  for (const auto& [pair_key, metrics] : j.at("tests").items()) {
    for (const auto& [metric, cell] : metrics.items()) {
      SignificanceCell c;
      c.u = cell.at("u").get<double>();
      c.p_raw = cell.at("p_raw").get<double>();
      c.p_fdr = cell.at("p_fdr").get<double>();
      c.marker = cell.at("marker").get<std::string>();
      report.tests[pair_key][metric] = c;
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Sensitivity sweeps

enum class SweepAxis { kLambda, kK };

inline SweepAxis sweep_axis_from_string(const std::string& s) {
  if (s == "lambda") return SweepAxis::kLambda;
  if (s == "K") return SweepAxis::kK;
  throw ConfigError("sweep.axis: must be 'lambda' or 'K', got '" + s + "'");
}

struct SweepPoint {
  double value = 0.0;
  RunRecord record;
  double final_val_energy = 0.0;
  double final_mean_selected = 0.0;
};

struct SweepResult {
  SweepAxis axis = SweepAxis::kLambda;
  std::vector<SweepPoint> points;
};

inline SweepResult sweep(const TrainConfig& base, SweepAxis axis,
                         const std::vector<double>& values, const SyntheticDataset& ds,
                         const PerturbationDB& db) {
  if (values.empty()) contract_violation("sweep: values must be non-empty");
  SweepResult result;
  result.axis = axis;
  for (double value : values) {
    TrainConfig cfg = base;
    if (axis == SweepAxis::kLambda) {
      cfg.lambda_sparse = value;
    } else {
      if (value < 1.0 || value != std::floor(value)) {
        throw ConfigError("sweep: K values must be positive integers");
      }
      cfg.k = static_cast<std::size_t>(value);
    }
    TrainResult run = train(cfg, ds, db);
    SweepPoint point;
    point.value = value;
    if (!run.record.validations.empty()) {
      point.final_val_energy = run.record.validations.back().val_energy;
      point.final_mean_selected = run.record.validations.back().mean_selected;
    }
    point.record = std::move(run.record);
    result.points.push_back(std::move(point));
  }
  return result;
}

inline nlohmann::json sweep_to_json(const SweepResult& result) {
  nlohmann::json j;
  j["schema"] = "ptrag.sweep.v1";
  j["axis"] = result.axis == SweepAxis::kLambda ? "lambda" : "K";
  nlohmann::json points = nlohmann::json::array();
  for (const auto& p : result.points) {
    nlohmann::json entry;
    entry["value"] = p.value;
    entry["final_val_energy"] = p.final_val_energy;
    entry["mean_selected"] = p.final_mean_selected;
    entry["aggregate"] = metrics_report_to_json(p.record.test_metrics)["aggregate"];
    points.push_back(std::move(entry));
  }
  j["points"] = std::move(points);
  return j;
}

// ---------------------------------------------------------------------------
// Selection-overlap analysis

/// Runs evaluation-mode forwards for every (cell type, evaluation
/// perturbation) pair, accumulates hard-mask selection frequencies per
/// candidate, takes the top-N most frequently selected candidates per pair
/// (ties toward the lower database index, zero-frequency candidates never
/// enter), and reduces to the cell-type Jaccard matrix. Forwards are
/// noise-free and deterministic unless a noise rng is supplied.
inline JaccardMatrix jaccard_analysis(const PerturbationModel& model, const SyntheticDataset& ds,
                                      const PerturbationDB& db, std::size_t top_n,
                                      Split pert_split = Split::kTest,
                                      SplitMix64* noise_rng = nullptr) {
  if (model.kind() != ModelKind::kPtRag) {
    contract_violation("jaccard: analysis requires a pt_rag model");
  }
  if (top_n < 1) contract_violation("jaccard: top_n must be >= 1");
  std::set<std::string> eval_perts;
  for (const Sample& s : ds.samples) {
    if (s.split == pert_split) eval_perts.insert(s.pert_id);
  }
  if (eval_perts.empty()) {
    contract_violation("jaccard: split '" + to_string(pert_split) + "' has no perturbations");
  }

  SelectionSets sets;
  bool any_selected = false;
  for (const std::string& ct : ds.cell_types) {
    for (const std::string& pid : eval_perts) {
      const Sample& sample = ds.sample(ct, pid);
      SelectorOptions opts;
      opts.deterministic_noise = noise_rng == nullptr;
      auto result = model.forward_pt_rag(sample.x_ctrl, pid, db, noise_rng, opts);
      std::map<std::size_t, double> freq;  // db index -> selection count over cells
      std::size_t cells = result.mask.hard.dim(0), k = result.mask.hard.dim(1);
      for (std::size_t i = 0; i < cells; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          if (result.mask.hard.value()[i * k + j] == 1.0) {
            freq[result.candidate_indices[j]] += 1.0;
          }
        }
      }
      std::vector<std::pair<std::size_t, double>> ranked(freq.begin(), freq.end());
      std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
      });
      std::set<std::string>& dst = sets[ct][pid];
      for (std::size_t i = 0; i < ranked.size() && i < top_n; ++i) {
        dst.insert(db.id(ranked[i].first));
      }
      any_selected = any_selected || !dst.empty();
    }
  }
  if (!any_selected) {
    throw std::runtime_error(
        "jaccard: checkpoint selects nothing on any sample; retune lambda_sparse");
  }
  return jaccard_overlap(sets);
}

inline nlohmann::json jaccard_to_json(const JaccardMatrix& matrix) {
  nlohmann::json j;
  j["schema"] = "ptrag.jaccard.v1";
  j["labels"] = matrix.labels;
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < matrix.labels.size(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t k = 0; k < matrix.labels.size(); ++k) row.push_back(matrix.at(i, k));
    rows.push_back(std::move(row));
  }
  j["values"] = std::move(rows);
  return j;
}

// ---------------------------------------------------------------------------
// Run-directory artifacts

inline nlohmann::json run_config_json(const TrainConfig& config, std::size_t genes,
                                      std::size_t embedding_dim) {
  nlohmann::json j;
  j["schema"] = "ptrag.run.v1";
  j["train"] = train_config_to_json(config);
  j["model"] = model_config_to_json(config.model_config(genes, embedding_dim));
  return j;
}

inline nlohmann::json train_log_json(const RunRecord& record) {
  nlohmann::json j;
  j["schema"] = "ptrag.trainlog.v1";
  j["seed"] = record.seed;
  j["initial_val_energy"] = record.initial_val_energy;
  j["best_validation_step"] = record.best_validation_step;
  j["wallclock_sec"] = record.wallclock_sec;
  nlohmann::json validations = nlohmann::json::array();
  for (const auto& v : record.validations) {
    validations.push_back(
        {{"step", v.step}, {"val_energy", v.val_energy}, {"mean_selected", v.mean_selected}});
  }
  j["validations"] = std::move(validations);
  return j;
}

inline void write_run_dir(const std::filesystem::path& dir, const TrainConfig& config,
                          const SyntheticDataset& ds, const PerturbationDB& db,
                          const TrainResult& result) {
  std::filesystem::create_directories(dir);
  atomic_write_file(dir / "config.json",
                    run_config_json(config, ds.config.genes, db.dim()).dump(2) + "\n");
  save_checkpoint(dir / "checkpoint.bin", result.model->params());
  atomic_write_file(dir / "metrics.json",
                    metrics_report_to_json(result.record.test_metrics).dump(2) + "\n");
  atomic_write_file(dir / "train_log.json", train_log_json(result.record).dump(2) + "\n");
}

}  // namespace ptrag
