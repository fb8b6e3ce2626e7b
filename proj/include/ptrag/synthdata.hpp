#pragma once

// Seeded synthetic Perturb-seq-like benchmark. Construction: each cell type
// owns a mean profile, a pathway->gene signature matrix, and a binary mask of
// active pathways; each perturbation owns a pathway loading whose embedding
// is the loading plus a nuisance block. The perturbed shift is
// (mask ⊙ loading) · signature, so embedding neighbors sharing *active*
// pathways are informative context while neighbors sharing only masked
// pathways are distractors — the regime where fixed retrieval injects noise
// and learned per-cell-type selection pays off.
//
// All randomness flows through SplitMix64 in a fixed draw order, so a config
// seed pins every byte of the dataset.

#include <ptrag/io.hpp>
#include <ptrag/retrieval.hpp>
#include <ptrag/rng.hpp>
#include <ptrag/tensor.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace ptrag {

struct SyntheticConfig {
  std::size_t genes = 60;                // G
  std::size_t embedding_dim = 32;        // E
  std::size_t perturbations = 120;       // P
  std::size_t cell_types = 4;            // C
  std::size_t pathways = 8;              // m
  std::size_t cells_per_population = 16; // S
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (genes < 1 || embedding_dim < 1 || cell_types < 1 || pathways < 1 ||
        cells_per_population < 1) {
      throw ConfigError("synthetic config: all counts must be >= 1");
    }
    if (perturbations < 2) {
      throw ConfigError("synthetic config: need at least 2 perturbations for a database");
    }
    if (pathways > embedding_dim) {
      throw ConfigError("synthetic config: pathways (m) must not exceed embedding_dim (E)");
    }
    if (noise_sigma < 0.0) throw ConfigError("synthetic config: noise_sigma must be >= 0");
  }
};

enum class Split { kUnassigned, kTrain, kVal, kTest };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
    case Split::kUnassigned: return "unassigned";
  }
  return "?";
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  if (s == "unassigned") return Split::kUnassigned;
  throw ConfigError("unknown split label '" + s + "'");
}

struct Sample {
  Tensor x_ctrl;  // [S x G]
  Tensor x_pert;  // [S x G]
  std::string pert_id;
  std::string cell_type;
  Split split = Split::kUnassigned;
};

// Generator internals, kept for oracle tests and analysis.
struct GroundTruth {
  std::vector<std::vector<double>> type_means;              // C x G
  std::vector<std::vector<double>> type_signatures;         // C x (m*G), row-major m x G
  std::vector<std::vector<int>> type_pathway_masks;         // C x m, entries 0/1
  std::vector<std::vector<double>> pert_loadings;           // P x m

  // delta_{p,c}[g] = sum_j mask_c[j] * v_p[j] * A_c[j][g]
  std::vector<double> delta(std::size_t type_index, std::size_t pert_index,
                            std::size_t genes) const {
    std::size_t m = pert_loadings[pert_index].size();
    std::vector<double> out(genes, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
      if (type_pathway_masks[type_index][j] == 0) continue;
      double vj = pert_loadings[pert_index][j];
      for (std::size_t g = 0; g < genes; ++g) {
        out[g] += vj * type_signatures[type_index][j * genes + g];
      }
    }
    return out;
  }
};

struct SyntheticDataset {
  SyntheticConfig config;
  std::vector<std::string> cell_types;
  std::vector<std::string> pert_ids;
  std::vector<Sample> samples;  // cell-type-major, then perturbation
  PerturbationDB db;
  std::optional<GroundTruth> truth;

  std::size_t type_index(const std::string& cell_type) const {
    for (std::size_t i = 0; i < cell_types.size(); ++i) {
      if (cell_types[i] == cell_type) return i;
    }
    contract_violation("dataset: unknown cell type " + cell_type);
  }

  const Sample& sample(const std::string& cell_type, const std::string& pert_id) const {
    for (const Sample& s : samples) {
      if (s.cell_type == cell_type && s.pert_id == pert_id) return s;
    }
    contract_violation("dataset: no sample for " + cell_type + "/" + pert_id);
  }

  std::vector<std::size_t> split_indices(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (samples[i].split == split) out.push_back(i);
    }
    return out;
  }
};

inline SyntheticDataset generate(const SyntheticConfig& config) {
  config.validate();
  const std::size_t genes = config.genes, e = config.embedding_dim, p = config.perturbations;
  const std::size_t c = config.cell_types, m = config.pathways, s = config.cells_per_population;

  SyntheticDataset ds;
  ds.config = config;
  GroundTruth truth;

  // Global expression scale. Effect shifts, baseline spread, and measurement
  // noise all scale together, so DEG detectability is scale-invariant; the
  // absolute energy-distance magnitude (and with it the gradient pressure
  // relative to the fixed sparsity penalty) tracks this constant.
  constexpr double kExpressionScale = 0.3;

  SplitMix64 type_rng(derive_seed(config.seed, "synth.celltypes"));
  double sig_scale = kExpressionScale / std::sqrt(static_cast<double>(m));
  std::set<std::vector<int>> seen_masks;
  std::size_t active = (m + 1) / 2;
  for (std::size_t t = 0; t < c; ++t) {
    ds.cell_types.push_back("ct" + std::to_string(t));
    std::vector<double> mu(genes);
    for (double& v : mu) v = type_rng.next_gaussian() * kExpressionScale;
    truth.type_means.push_back(std::move(mu));
    std::vector<double> sig(m * genes);
    for (double& v : sig) v = type_rng.next_gaussian() * sig_scale;
    truth.type_signatures.push_back(std::move(sig));

    std::vector<int> mask(m, 0);
    bool distinct = false;
    for (int attempt = 0; attempt < 200 && !distinct; ++attempt) {
      std::vector<std::size_t> idx(m);
      for (std::size_t j = 0; j < m; ++j) idx[j] = j;
      type_rng.shuffle(idx);
      std::fill(mask.begin(), mask.end(), 0);
      for (std::size_t j = 0; j < active; ++j) mask[idx[j]] = 1;
      distinct = seen_masks.count(mask) == 0;
    }
    if (!distinct) {
      throw ConfigError("synthetic config: cannot draw " + std::to_string(c) +
                        " distinct pathway masks from m=" + std::to_string(m) + " pathways");
    }
    seen_masks.insert(mask);
    truth.type_pathway_masks.push_back(std::move(mask));
  }

  // Perturbation loadings and embeddings [scaled loading ; nuisance block].
  // The loading block is scaled so it carries ~3/4 of the embedding variance:
  // cosine neighbors mostly share pathway loadings, but the nuisance block
  // keeps similarity imperfect, so retrieved candidate lists mix informative
  // neighbors with distractors.
  SplitMix64 pert_rng(derive_seed(config.seed, "synth.perturbations"));
  double signal_scale =
      e > m ? std::sqrt(3.0 * static_cast<double>(e - m) / static_cast<double>(m)) : 1.0;
  int width = 1;
  for (std::size_t v = p - 1; v >= 10; v /= 10) ++width;
  std::vector<std::vector<double>> embeddings;
  for (std::size_t i = 0; i < p; ++i) {
    std::ostringstream name;
    name << "p" << std::setw(width) << std::setfill('0') << i;
    ds.pert_ids.push_back(name.str());
    std::vector<double> loading(m);
    for (double& v : loading) v = pert_rng.next_gaussian();
    std::vector<double> emb(e);
    for (std::size_t j = 0; j < m; ++j) emb[j] = signal_scale * loading[j];
    for (std::size_t j = m; j < e; ++j) emb[j] = pert_rng.next_gaussian();
    truth.pert_loadings.push_back(std::move(loading));
    embeddings.push_back(std::move(emb));
  }
  ds.db = PerturbationDB::build(ds.pert_ids, embeddings);

  SplitMix64 cell_rng(derive_seed(config.seed, "synth.cells"));
  for (std::size_t t = 0; t < c; ++t) {
    for (std::size_t i = 0; i < p; ++i) {
      std::vector<double> delta = truth.delta(t, i, genes);
      std::vector<double> ctrl(s * genes), pert(s * genes);
      for (std::size_t cell = 0; cell < s; ++cell) {
        for (std::size_t g = 0; g < genes; ++g) {
          double base = truth.type_means[t][g] + config.noise_sigma * cell_rng.next_gaussian();
          ctrl[cell * genes + g] = base;
        }
      }
      for (std::size_t cell = 0; cell < s; ++cell) {
        for (std::size_t g = 0; g < genes; ++g) {
          pert[cell * genes + g] = ctrl[cell * genes + g] + delta[g] +
                                   config.noise_sigma * cell_rng.next_gaussian();
        }
      }
      Sample sample;
      sample.x_ctrl = Tensor::from_data({s, genes}, std::move(ctrl));
      sample.x_pert = Tensor::from_data({s, genes}, std::move(pert));
      sample.pert_id = ds.pert_ids[i];
      sample.cell_type = ds.cell_types[t];
      ds.samples.push_back(std::move(sample));
    }
  }
  ds.truth = std::move(truth);
  return ds;
}

/// Few-shot cross-cell-type split: every non-target sample trains; a seeded
/// floor(fraction * P) subset of the target type's perturbations trains, the
/// remainder is partitioned into val/test by val_fraction. The partition is
/// by perturbation id, so no target perturbation ever spans two splits.
/// Shuffle: Fisher-Yates driven by SplitMix64(seed) (documented, portable).
inline void split_fewshot(SyntheticDataset& ds, const std::string& target_cell_type,
                          double fewshot_fraction, double val_fraction, std::uint64_t seed) {
  if (!(fewshot_fraction > 0.0 && fewshot_fraction < 1.0)) {
    throw ConfigError("split: fewshot_fraction must be in (0, 1)");
  }
  if (!(val_fraction >= 0.0 && val_fraction <= 1.0)) {
    throw ConfigError("split: val_fraction must be in [0, 1]");
  }
  bool found = false;
  for (const auto& ct : ds.cell_types) found = found || ct == target_cell_type;
  if (!found) {
    throw ConfigError("split: target cell type '" + target_cell_type + "' not in dataset");
  }

  std::vector<std::string> target_perts = ds.pert_ids;
  SplitMix64 rng(seed);
  rng.shuffle(target_perts);
  std::size_t n_few = static_cast<std::size_t>(fewshot_fraction *
                                               static_cast<double>(target_perts.size()));
  std::size_t rest = target_perts.size() - n_few;
  std::size_t n_val = static_cast<std::size_t>(val_fraction * static_cast<double>(rest));

  std::map<std::string, Split> assignment;
  for (std::size_t i = 0; i < target_perts.size(); ++i) {
    Split s = i < n_few                ? Split::kTrain
              : i < n_few + n_val      ? Split::kVal
                                       : Split::kTest;
    assignment[target_perts[i]] = s;
  }
  for (Sample& sample : ds.samples) {
    sample.split = sample.cell_type == target_cell_type ? assignment[sample.pert_id]
                                                        : Split::kTrain;
  }
}

// ---------------------------------------------------------------------------
// On-disk layout: one CSV per matrix role plus a JSON manifest with the
// config echo, split assignments, and file checksums.

namespace detail {

inline std::string cells_to_csv(const SyntheticDataset& ds, bool perturbed) {
  std::string out = "cell_type,pert_id,cell";
  for (std::size_t g = 0; g < ds.config.genes; ++g) out += ",g" + std::to_string(g);
  out += "\n";
  for (const Sample& s : ds.samples) {
    const Tensor& mat = perturbed ? s.x_pert : s.x_ctrl;
    for (std::size_t cell = 0; cell < mat.dim(0); ++cell) {
      out += s.cell_type + "," + s.pert_id + "," + std::to_string(cell);
      for (std::size_t g = 0; g < mat.dim(1); ++g) {
        out += ",";
        out += format_double(mat.value()[cell * mat.dim(1) + g]);
      }
      out += "\n";
    }
  }
  return out;
}

}  // namespace detail

inline nlohmann::json synthetic_config_to_json(const SyntheticConfig& c) {
  return nlohmann::json{{"G", c.genes},
                        {"E", c.embedding_dim},
                        {"P", c.perturbations},
                        {"C", c.cell_types},
                        {"m", c.pathways},
                        {"S", c.cells_per_population},
                        {"noise_sigma", c.noise_sigma},
                        {"seed", c.seed}};
}

inline SyntheticConfig synthetic_config_from_json(const nlohmann::json& j) {
  SyntheticConfig c;
  c.genes = j.at("G").get<std::size_t>();
  c.embedding_dim = j.at("E").get<std::size_t>();
  c.perturbations = j.at("P").get<std::size_t>();
  c.cell_types = j.at("C").get<std::size_t>();
  c.pathways = j.at("m").get<std::size_t>();
  c.cells_per_population = j.at("S").get<std::size_t>();
  c.noise_sigma = j.at("noise_sigma").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

inline void save_dataset(const std::filesystem::path& dir, const SyntheticDataset& ds) {
  std::filesystem::create_directories(dir);
  std::string controls = detail::cells_to_csv(ds, false);
  std::string perturbed = detail::cells_to_csv(ds, true);
  std::string embeddings = db_to_csv(ds.db);

  nlohmann::json manifest;
  manifest["schema"] = "ptrag.dataset.v1";
  manifest["config"] = synthetic_config_to_json(ds.config);
  manifest["cell_types"] = ds.cell_types;
  manifest["pert_ids"] = ds.pert_ids;
  nlohmann::json split;
  for (const Sample& s : ds.samples) split[s.cell_type + "/" + s.pert_id] = to_string(s.split);
  manifest["split"] = split;
  manifest["files"] = {{"controls.csv", checksum_string(controls)},
                       {"perturbed.csv", checksum_string(perturbed)},
                       {"embeddings.csv", checksum_string(embeddings)}};

  atomic_write_file(dir / "controls.csv", controls);
  atomic_write_file(dir / "perturbed.csv", perturbed);
  atomic_write_file(dir / "embeddings.csv", embeddings);
  atomic_write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline SyntheticDataset load_dataset(const std::filesystem::path& dir) {
  nlohmann::json manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  if (manifest.value("schema", "") != "ptrag.dataset.v1") {
    throw std::runtime_error("unrecognized dataset manifest schema in " + dir.string());
  }
  SyntheticDataset ds;
  ds.config = synthetic_config_from_json(manifest.at("config"));
  ds.cell_types = manifest.at("cell_types").get<std::vector<std::string>>();
  ds.pert_ids = manifest.at("pert_ids").get<std::vector<std::string>>();

  std::map<std::string, std::string> expected;
  for (const auto& [file, checksum] : manifest.at("files").items()) {
    expected[file] = checksum.get<std::string>();
  }
  auto load_checked = [&](const std::string& name) {
    std::string bytes = read_file(dir / name);
    if (checksum_string(bytes) != expected.at(name)) {
      throw std::runtime_error("checksum mismatch for " + (dir / name).string());
    }
    return bytes;
  };
  std::string controls = load_checked("controls.csv");
  std::string perturbed = load_checked("perturbed.csv");
  ds.db = db_from_csv(load_checked("embeddings.csv"));

  const auto& split_map = manifest.at("split");
  std::size_t s = ds.config.cells_per_population, genes = ds.config.genes;

  auto parse_cells = [&](const std::string& csv) {
    std::map<std::pair<std::string, std::string>, std::vector<double>> rows;
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto fields = split_csv_line(line);
      if (fields.size() != 3 + genes) {
        throw std::runtime_error("dataset csv: bad row width in " + dir.string());
      }
      auto& dst = rows[{fields[0], fields[1]}];
      for (std::size_t g = 0; g < genes; ++g) dst.push_back(parse_double(fields[3 + g]));
    }
    return rows;
  };
  auto ctrl_rows = parse_cells(controls);
  auto pert_rows = parse_cells(perturbed);

  for (const std::string& ct : ds.cell_types) {
    for (const std::string& pid : ds.pert_ids) {
      auto key = std::make_pair(ct, pid);
      auto ci = ctrl_rows.find(key);
      auto pi = pert_rows.find(key);
      if (ci == ctrl_rows.end() || pi == pert_rows.end() ||
          ci->second.size() != s * genes || pi->second.size() != s * genes) {
        throw std::runtime_error("dataset csv: missing or ragged sample " + ct + "/" + pid);
      }
      Sample sample;
      sample.x_ctrl = Tensor::from_data({s, genes}, ci->second);
      sample.x_pert = Tensor::from_data({s, genes}, pi->second);
      sample.cell_type = ct;
      sample.pert_id = pid;
      sample.split = split_from_string(split_map.at(ct + "/" + pid).get<std::string>());
      ds.samples.push_back(std::move(sample));
    }
  }
  return ds;
}

}  // namespace ptrag
