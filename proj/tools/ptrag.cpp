// Command-line pipeline driver: dataset generation, training, evaluation,
// model comparison, sensitivity sweeps, selection-overlap analysis, and
// result tables. Batch-oriented: every subcommand reads one JSON config,
// writes artifacts into --out, and communicates success only through its
// exit code (0 ok, 2 config validation error, 1 runtime failure).

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <ptrag/trainer.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ptrag;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed_override;
  bool force = false;
  bool quiet = false;
};

json load_config(const std::string& path, const std::string& expected_schema) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  if (!j.contains("schema") || !j["schema"].is_string()) {
    throw ConfigError("config " + path + ": missing required key 'schema'");
  }
  if (j["schema"].get<std::string>() != expected_schema) {
    throw ConfigError("config " + path + ": schema must be '" + expected_schema + "', got '" +
                      j["schema"].get<std::string>() + "'");
  }
  return j;
}

// Relative paths inside a config resolve against the config file's directory.
fs::path resolve_path(const std::string& config_path, const std::string& value) {
  fs::path p(value);
  if (p.is_absolute()) return p;
  return fs::path(config_path).parent_path() / p;
}

void prepare_out_dir(const CommonArgs& args) {
  fs::path out(args.out_dir);
  if (fs::exists(out) && !fs::is_empty(out) && !args.force) {
    throw ConfigError("output directory " + args.out_dir +
                      " exists and is not empty; pass --force to overwrite");
  }
  fs::create_directories(out);
}

template <typename T>
T get_key(const json& j, const std::string& key, const std::string& constraint) {
  if (!j.contains(key)) {
    throw ConfigError("missing required key '" + key + "' (" + constraint + ")");
  }
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("key '" + key + "': " + constraint);
  }
}

SyntheticDataset load_dataset_checked(const std::string& config_path, const json& cfg) {
  auto dir = resolve_path(config_path,
                          get_key<std::string>(cfg, "dataset", "path to a dataset directory"));
  try {
    return load_dataset(dir);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw std::runtime_error("loading dataset " + dir.string() + ": " + e.what());
  }
}

std::unique_ptr<PerturbationModel> model_from_run_dir(const fs::path& run_dir,
                                                      const SyntheticDataset& ds,
                                                      const PerturbationDB& db,
                                                      TrainConfig* config_out) {
  json run_config = json::parse(read_file(run_dir / "config.json"));
  TrainConfig cfg = train_config_from_json(run_config.at("train"));
  auto model = std::make_unique<PerturbationModel>(
      cfg.model_kind, cfg.model_config(ds.config.genes, db.dim()),
      cfg.model_kind == ModelKind::kState ? db.size() : db.dim());
  load_checkpoint(run_dir / "checkpoint.bin", model->params());
  if (config_out != nullptr) *config_out = cfg;
  return model;
}

int run_gen(const CommonArgs& args) {
  json cfg = load_config(args.config_path, "ptrag.gen.v1");
  SyntheticConfig gen_cfg;
  try {
    gen_cfg = synthetic_config_from_json(cfg.at("generator"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("generator block: ") + e.what());
  }
  if (args.seed_override) gen_cfg.seed = *args.seed_override;

  if (!cfg.contains("split")) {
    throw ConfigError("missing required key 'split' (block with target_cell_type and fractions)");
  }
  const json& split = cfg.at("split");
  std::string target = get_key<std::string>(split, "target_cell_type", "a cell type label");
  double fewshot = get_key<double>(split, "fewshot_fraction", "a real in (0, 1)");
  double val_fraction = split.value("val_fraction", 0.5);
  std::uint64_t split_seed = split.value("seed", gen_cfg.seed);

  prepare_out_dir(args);
  auto ds = generate(gen_cfg);
  split_fewshot(ds, target, fewshot, val_fraction, split_seed);
  save_dataset(args.out_dir, ds);
  if (!args.quiet) {
    std::cout << "dataset: " << ds.samples.size() << " populations, " << ds.cell_types.size()
              << " cell types, " << ds.pert_ids.size() << " perturbations -> " << args.out_dir
              << "\n";
  }
  return 0;
}

int run_train(const CommonArgs& args) {
  json cfg = load_config(args.config_path, "ptrag.train.v1");
  if (!cfg.contains("train")) {
    throw ConfigError("missing required key 'train' (training configuration block)");
  }
  TrainConfig train_cfg = train_config_from_json(cfg.at("train"));
  if (args.seed_override) train_cfg.seed = *args.seed_override;
  auto ds = load_dataset_checked(args.config_path, cfg);

  prepare_out_dir(args);
  TrainResult result = train(train_cfg, ds, ds.db);
  write_run_dir(args.out_dir, train_cfg, ds, ds.db, result);
  if (!args.quiet) {
    std::cout << to_string(train_cfg.model_kind) << ": " << result.record.validations.size()
              << " validations, best step " << result.record.best_validation_step;
    if (!result.record.validations.empty()) {
      std::cout << ", final val energy "
                << format_double(result.record.validations.back().val_energy);
    }
    std::cout << " -> " << args.out_dir << "\n";
  }
  return 0;
}

int run_eval(const CommonArgs& args) {
  json cfg = load_config(args.config_path, "ptrag.eval.v1");
  auto ds = load_dataset_checked(args.config_path, cfg);
  auto run_dir = resolve_path(
      args.config_path, get_key<std::string>(cfg, "run", "path to a training run directory"));
  Split split = split_from_string(cfg.value("split", "test"));

  TrainConfig train_cfg;
  auto model = model_from_run_dir(run_dir, ds, ds.db, &train_cfg);
  prepare_out_dir(args);
  MetricsReport report = evaluate(*model, ds, split, ds.db, train_cfg.pca_dim);
  atomic_write_file(fs::path(args.out_dir) / "metrics.json",
                    metrics_report_to_json(report).dump(2) + "\n");
  if (!args.quiet) {
    std::cout << "evaluated " << report.rows.size() << " populations on split '"
              << to_string(split) << "' -> " << args.out_dir << "/metrics.json\n";
  }
  return 0;
}

int run_compare(const CommonArgs& args) {
  json cfg = load_config(args.config_path, "ptrag.compare.v1");
  auto ds = load_dataset_checked(args.config_path, cfg);
  auto seeds = get_key<std::vector<std::uint64_t>>(cfg, "seeds", "a non-empty array of seeds");
  if (!cfg.contains("models") || !cfg.at("models").is_array() || cfg.at("models").empty()) {
    throw ConfigError("missing required key 'models' (a non-empty array of model entries)");
  }
  std::vector<CompareEntry> entries;
  for (const auto& m : cfg.at("models")) {
    CompareEntry entry;
    if (!m.contains("train")) {
      throw ConfigError("models[]: each entry needs a 'train' block");
    }
    entry.config = train_config_from_json(m.at("train"));
    entry.label = m.value("label", to_string(entry.config.model_kind));
    entries.push_back(std::move(entry));
  }
  if (args.seed_override) seeds = {*args.seed_override};

  prepare_out_dir(args);
  CompareResult result = compare(entries, ds, ds.db, seeds);
  atomic_write_file(fs::path(args.out_dir) / "significance.json",
                    significance_to_json(result.significance).dump(2) + "\n");
  for (const auto& [label, report] : result.reports) {
    fs::path label_dir = fs::path(args.out_dir) / label;
    fs::create_directories(label_dir);
    atomic_write_file(label_dir / "metrics.json", metrics_report_to_json(report).dump(2) + "\n");
    const auto& records = result.records.at(label);
    for (std::size_t i = 0; i < records.size(); ++i) {
      fs::path seed_dir = label_dir / ("seed" + std::to_string(seeds[i]));
      fs::create_directories(seed_dir);
      atomic_write_file(seed_dir / "metrics.json",
                        metrics_report_to_json(records[i].test_metrics).dump(2) + "\n");
      atomic_write_file(seed_dir / "train_log.json", train_log_json(records[i]).dump(2) + "\n");
    }
  }
  if (!args.quiet) {
    std::cout << "compared " << entries.size() << " models over " << seeds.size()
              << " seed(s) -> " << args.out_dir << "/significance.json\n";
  }
  return 0;
}

int run_sweep(const CommonArgs& args) {
  json cfg = load_config(args.config_path, "ptrag.sweep.v1");
  auto ds = load_dataset_checked(args.config_path, cfg);
  if (!cfg.contains("train")) {
    throw ConfigError("missing required key 'train' (base training configuration)");
  }
  TrainConfig base = train_config_from_json(cfg.at("train"));
  if (args.seed_override) base.seed = *args.seed_override;
  SweepAxis axis = sweep_axis_from_string(get_key<std::string>(cfg, "axis", "'lambda' or 'K'"));
  auto values = get_key<std::vector<double>>(cfg, "values", "a non-empty numeric array");

  prepare_out_dir(args);
  SweepResult result = sweep(base, axis, values, ds, ds.db);
  atomic_write_file(fs::path(args.out_dir) / "sweep.json", sweep_to_json(result).dump(2) + "\n");
  for (const auto& point : result.points) {
    fs::path dir = fs::path(args.out_dir) / ("value_" + format_double(point.value));
    fs::create_directories(dir);
    atomic_write_file(dir / "metrics.json",
                      metrics_report_to_json(point.record.test_metrics).dump(2) + "\n");
    atomic_write_file(dir / "train_log.json", train_log_json(point.record).dump(2) + "\n");
  }
  if (!args.quiet) {
    std::cout << "swept " << values.size() << " values -> " << args.out_dir << "/sweep.json\n";
  }
  return 0;
}

int run_jaccard(const CommonArgs& args) {
  json cfg = load_config(args.config_path, "ptrag.jaccard.v1");
  auto ds = load_dataset_checked(args.config_path, cfg);
  auto run_dir = resolve_path(args.config_path,
                              get_key<std::string>(cfg, "run", "path to a pt_rag run directory"));
  std::size_t top_n = cfg.value("top_n", std::size_t{10});
  Split split = split_from_string(cfg.value("split", "test"));

  auto model = model_from_run_dir(run_dir, ds, ds.db, nullptr);
  prepare_out_dir(args);
  JaccardMatrix matrix = jaccard_analysis(*model, ds, ds.db, top_n, split);
  atomic_write_file(fs::path(args.out_dir) / "jaccard.json",
                    jaccard_to_json(matrix).dump(2) + "\n");
  if (!args.quiet) {
    std::cout << "jaccard over " << matrix.labels.size() << " cell types -> " << args.out_dir
              << "/jaccard.json\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// report: Table-1-style text table + CSV over run directories

bool metric_higher_is_better(const std::string& name) {
  return name == "pearson_deg" || name == "spearman_deg";
}

int run_report(const CommonArgs& args, const std::vector<std::string>& run_dirs,
               const std::string& significance_path) {
  struct ReportColumn {
    std::string label;
    fs::path dir;
    MetricsReport report;
  };
  std::vector<ReportColumn> columns;
  std::map<std::string, int> label_counts;
  for (const std::string& dir : run_dirs) {
    fs::path metrics_path = fs::path(dir) / "metrics.json";
    if (!fs::exists(metrics_path)) {
      throw std::runtime_error("report: no metrics.json in " + dir);
    }
    ReportColumn col;
    col.dir = dir;
    col.report = metrics_report_from_json(json::parse(read_file(metrics_path)));
    std::string label = fs::path(dir).filename().string();
    fs::path config_path = fs::path(dir) / "config.json";
    if (fs::exists(config_path)) {
      json cfg = json::parse(read_file(config_path));
      if (cfg.contains("train") && cfg["train"].contains("model_kind")) {
        label = cfg["train"]["model_kind"].get<std::string>();
      }
    }
    if (label_counts[label]++ > 0) label += "#" + std::to_string(label_counts[label]);
    col.label = label;
    columns.push_back(std::move(col));
  }

  SignificanceReport significance;
  bool have_significance = false;
  fs::path sig_path;
  if (!significance_path.empty()) {
    sig_path = significance_path;
  } else {
    for (const auto& col : columns) {
      fs::path candidate = col.dir.parent_path() / "significance.json";
      if (fs::exists(candidate)) {
        sig_path = candidate;
        break;
      }
    }
  }
  if (!sig_path.empty() && fs::exists(sig_path)) {
    significance = significance_from_json(json::parse(read_file(sig_path)));
    have_significance = true;
  }

  auto marker_for = [&](const std::string& best, const std::string& other,
                        const std::string& metric) -> std::string {
    if (!have_significance) return "";
    for (const auto& key : {best + "_vs_" + other, other + "_vs_" + best}) {
      auto it = significance.tests.find(key);
      if (it == significance.tests.end()) continue;
      auto mit = it->second.find(metric);
      return mit == it->second.end() ? "" : mit->second.marker;
    }
    return "";
  };

  struct Group {
    const char* title;
    std::vector<const char*> metrics;
  };
  const std::vector<Group> groups{
      {"Gene-level expression correlations", {"pearson_deg", "spearman_deg"}},
      {"Expression reconstruction accuracy", {"mse", "rmse", "mae", "mse_pca50"}},
      {"Distributional similarity", {"w1", "w2", "w2_root", "energy", "mmd"}},
  };

  std::vector<std::vector<std::string>> csv_rows;
  std::string text;
  const std::size_t name_width = 24;
  std::vector<std::size_t> widths;
  for (const auto& col : columns) widths.push_back(std::max<std::size_t>(col.label.size() + 2, 22));

  auto pad = [](std::string s, std::size_t w) {
    if (s.size() < w) s.append(w - s.size(), ' ');
    return s;
  };
  text += pad("metric", name_width);
  std::vector<std::string> header{"metric"};
  for (std::size_t i = 0; i < columns.size(); ++i) {
    text += "| " + pad(columns[i].label, widths[i]);
    header.push_back(columns[i].label);
    header.push_back(columns[i].label + "_marker");
  }
  header.push_back("best");
  csv_rows.push_back(header);
  text += "\n";

  for (const auto& group : groups) {
    text += "-- " + std::string(group.title) + "\n";
    for (const char* metric : group.metrics) {
      bool higher = metric_higher_is_better(metric);
      std::optional<std::size_t> best;
      for (std::size_t i = 0; i < columns.size(); ++i) {
        const auto& stat = columns[i].report.overall.at(metric);
        if (stat.count == 0) continue;
        if (!best.has_value()) {
          best = i;
          continue;
        }
        const auto& best_stat = columns[*best].report.overall.at(metric);
        // strict improvement only: ties keep the earlier column
        if (higher ? stat.mean > best_stat.mean : stat.mean < best_stat.mean) best = i;
      }
      std::string row_name = std::string(metric) + (higher ? " (higher)" : " (lower)");
      text += pad(row_name, name_width);
      std::vector<std::string> csv_row{metric};
      for (std::size_t i = 0; i < columns.size(); ++i) {
        const auto& stat = columns[i].report.overall.at(metric);
        std::string cell = stat.count == 0 ? "-" : format_double(stat.mean);
        std::string marker;
        if (best.has_value() && i != *best && stat.count > 0) {
          marker = marker_for(columns[*best].label, columns[i].label, metric);
        }
        csv_row.push_back(stat.count == 0 ? "" : format_double(stat.mean));
        csv_row.push_back(marker);
        if (best.has_value() && i == *best) cell = "**" + cell + "**";
        cell += marker;
        text += "| " + pad(cell, widths[i]);
      }
      csv_row.push_back(best.has_value() ? columns[*best].label : "");
      csv_rows.push_back(csv_row);
      text += "\n";
    }
  }

  std::string csv;
  for (const auto& row : csv_rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) csv += ",";
      csv += row[i];
    }
    csv += "\n";
  }

  if (!args.out_dir.empty()) {
    fs::create_directories(args.out_dir);
    atomic_write_file(fs::path(args.out_dir) / "report.txt", text);
    atomic_write_file(fs::path(args.out_dir) / "report.csv", csv);
  }
  if (!args.quiet) std::cout << text;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"perturbation-response prediction: synthetic data, retrieval-augmented models, "
               "evaluation, and significance reporting"};
  app.require_subcommand(1);

  CommonArgs args;
  std::vector<std::string> report_dirs;
  std::string significance_path;

  auto add_common = [&](CLI::App* cmd, bool needs_config, bool needs_out) {
    auto* config_opt = cmd->add_option("--config", args.config_path, "JSON config file");
    if (needs_config) config_opt->required();
    auto* out_opt = cmd->add_option("--out", args.out_dir, "output directory");
    if (needs_out) out_opt->required();
    cmd->add_option(
        "--seed",
        [&args](const CLI::results_t& values) {
          args.seed_override = std::stoull(values[0]);
          return true;
        },
        "override the config seed");
    cmd->add_flag("--force", args.force, "overwrite a non-empty output directory");
    cmd->add_flag("--quiet", args.quiet, "suppress progress output");
  };

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset with split labels");
  add_common(gen, true, true);
  auto* train_cmd = app.add_subcommand("train", "train one model into a run directory");
  add_common(train_cmd, true, true);
  auto* eval_cmd = app.add_subcommand("eval", "re-evaluate a run checkpoint on a split");
  add_common(eval_cmd, true, true);
  auto* compare_cmd = app.add_subcommand("compare", "train several models and test significance");
  add_common(compare_cmd, true, true);
  auto* sweep_cmd = app.add_subcommand("sweep", "sweep lambda_sparse or K over a value list");
  add_common(sweep_cmd, true, true);
  auto* jaccard_cmd = app.add_subcommand("jaccard", "cross-cell-type selection overlap matrix");
  add_common(jaccard_cmd, true, true);
  auto* report_cmd = app.add_subcommand("report", "tabulate metrics from run directories");
  add_common(report_cmd, false, false);
  report_cmd->add_option("dirs", report_dirs, "run directories containing metrics.json")
      ->required();
  report_cmd->add_option("--significance", significance_path,
                         "significance.json to attach markers from");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return run_gen(args);
    if (train_cmd->parsed()) return run_train(args);
    if (eval_cmd->parsed()) return run_eval(args);
    if (compare_cmd->parsed()) return run_compare(args);
    if (sweep_cmd->parsed()) return run_sweep(args);
    if (jaccard_cmd->parsed()) return run_jaccard(args);
    if (report_cmd->parsed()) return run_report(args, report_dirs, significance_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
