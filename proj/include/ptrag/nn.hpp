#pragma once

// Trainable building blocks: linear layers, layer norm, multi-head attention,
// a pre-norm transformer block, the population generator head, and Adam with
// coupled weight decay. Parameters live in a ParamRegistry that fixes both
// the optimizer ordering and the checkpoint layout.

#include <ptrag/io.hpp>
#include <ptrag/rng.hpp>
#include <ptrag/tensor.hpp>

#include <nlohmann/json.hpp>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace ptrag {

class ParamRegistry {
 public:
  Tensor add(const std::string& name, Tensor t) {
    if (index_.count(name)) {
      throw std::logic_error("parameter registered twice: " + name);
    }
    index_[name] = entries_.size();
    entries_.push_back({name, t});
    return t;
  }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return entries_[it->second].tensor;
  }

  struct Entry {
    std::string name;
    Tensor tensor;
  };
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  void zero_grads() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  // Snapshot / restore raw values (best-validation checkpointing).
  std::vector<std::vector<double>> snapshot() const {
    std::vector<std::vector<double>> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.tensor.value());
    return out;
  }
  void restore(const std::vector<std::vector<double>>& snap) {
    if (snap.size() != entries_.size()) throw std::logic_error("snapshot size mismatch");
    for (std::size_t i = 0; i < snap.size(); ++i) {
      if (snap[i].size() != entries_[i].tensor.size()) {
        throw std::logic_error("snapshot shape mismatch at " + entries_[i].name);
      }
      entries_[i].tensor.data()->value = snap[i];
    }
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Weights drawn uniform in +/- sqrt(1/fan_in); biases start at zero.
inline Tensor uniform_param(Shape shape, double bound, SplitMix64& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.next_uniform(-bound, bound);
  return Tensor::from_data(std::move(shape), std::move(v), true);
}

namespace nnops {

// v (rank-1, length d) replicated to n rows. The ones column is a constant,
// so the matmul backward reduces to the column-sum gradient for v.
inline Tensor broadcast_rows(const Tensor& v, std::size_t n) {
  return matmul(Tensor::ones({n, 1}), reshape(v, {1, v.size()}));
}

}  // namespace nnops

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  static Linear create(ParamRegistry& reg, const std::string& name, std::size_t in,
                       std::size_t out, SplitMix64& rng) {
    Linear l;
    double bound = std::sqrt(1.0 / static_cast<double>(in));
    l.weight = reg.add(name + ".weight", uniform_param({in, out}, bound, rng));
    l.bias = reg.add(name + ".bias", Tensor::zeros({out}, true));
    return l;
  }

  std::size_t in_dim() const { return weight.dim(0); }
  std::size_t out_dim() const { return weight.dim(1); }

  Tensor forward(const Tensor& x) const {
    if (x.rank() != 2 || x.dim(1) != weight.dim(0)) {
      contract_violation("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
    }
    return add(matmul(x, weight), nnops::broadcast_rows(bias, x.dim(0)));
  }
};

struct LayerNorm {
  Tensor gamma;  // [d]
  Tensor beta;   // [d]
  double eps = 1e-5;

  static LayerNorm create(ParamRegistry& reg, const std::string& name, std::size_t d) {
    LayerNorm ln;
    ln.gamma = reg.add(name + ".gamma", Tensor::full({d}, 1.0, true));
    ln.beta = reg.add(name + ".beta", Tensor::zeros({d}, true));
    return ln;
  }

  Tensor forward(const Tensor& x) const {
    Tensor normed = layer_norm_stats(x, eps);
    std::size_t n = x.dim(0);
    return add(mul(normed, nnops::broadcast_rows(gamma, n)), nnops::broadcast_rows(beta, n));
  }
};

// layer_norm as a free operation over explicit affine parameters.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  Tensor normed = layer_norm_stats(x, eps);
  std::size_t n = x.dim(0);
  return add(mul(normed, nnops::broadcast_rows(gamma, n)), nnops::broadcast_rows(beta, n));
}

// Two-layer MLP with a ReLU hidden layer.
struct Mlp {
  Linear first, second;

  static Mlp create(ParamRegistry& reg, const std::string& name, std::size_t in,
                    std::size_t hidden, std::size_t out, SplitMix64& rng) {
    Mlp m;
    m.first = Linear::create(reg, name + ".fc1", in, hidden, rng);
    m.second = Linear::create(reg, name + ".fc2", hidden, out, rng);
    return m;
  }

  Tensor forward(const Tensor& x) const { return second.forward(relu(first.forward(x))); }
};

// Scaled dot-product attention with combined head projections. Used both for
// self-attention (kv == q input) and context cross-attention.
struct MultiheadAttention {
  Linear q_proj, k_proj, v_proj, o_proj;
  std::size_t heads = 1;

  static MultiheadAttention create(ParamRegistry& reg, const std::string& name, std::size_t d,
                                   std::size_t heads, SplitMix64& rng) {
    if (heads == 0 || d % heads != 0) {
      contract_violation("attention: model dim " + std::to_string(d) +
                         " not divisible by heads " + std::to_string(heads));
    }
    MultiheadAttention a;
    a.heads = heads;
    a.q_proj = Linear::create(reg, name + ".q", d, d, rng);
    a.k_proj = Linear::create(reg, name + ".k", d, d, rng);
    a.v_proj = Linear::create(reg, name + ".v", d, d, rng);
    a.o_proj = Linear::create(reg, name + ".o", d, d, rng);
    return a;
  }

  Tensor forward(const Tensor& q_in, const Tensor& kv_in) const {
    if (kv_in.rank() != 2 || kv_in.dim(0) == 0) contract_violation("attention: empty context");
    std::size_t d = q_proj.in_dim();
    std::size_t dh = d / heads;
    Tensor q = q_proj.forward(q_in);
    Tensor k = k_proj.forward(kv_in);
    Tensor v = v_proj.forward(kv_in);
    std::vector<Tensor> head_outputs;
    head_outputs.reserve(heads);
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor qh = slice_last_dim(q, h * dh, dh);
      Tensor kh = slice_last_dim(k, h * dh, dh);
      Tensor vh = slice_last_dim(v, h * dh, dh);
      Tensor attn = softmax_last_dim(scalar_mul(matmul(qh, kh, false, true), scale));
      head_outputs.push_back(matmul(attn, vh));
    }
    return o_proj.forward(heads == 1 ? head_outputs[0] : concat_last_dim(head_outputs));
  }
};

inline Tensor cross_attention(const MultiheadAttention& attn, const Tensor& q, const Tensor& kv) {
  return attn.forward(q, kv);
}

// Pre-norm transformer block: x + Attn(LN(x)), then x + FFN(LN(x)).
// No positional encoding and no mask: cell populations are unordered sets,
// so the block stays permutation-equivariant over rows.
struct TransformerBlock {
  LayerNorm ln1, ln2;
  MultiheadAttention attn;
  Linear ff1, ff2;

  static TransformerBlock create(ParamRegistry& reg, const std::string& name, std::size_t d,
                                 std::size_t heads, SplitMix64& rng) {
    TransformerBlock b;
    b.ln1 = LayerNorm::create(reg, name + ".ln1", d);
    b.attn = MultiheadAttention::create(reg, name + ".attn", d, heads, rng);
    b.ln2 = LayerNorm::create(reg, name + ".ln2", d);
    b.ff1 = Linear::create(reg, name + ".ff1", d, 2 * d, rng);
    b.ff2 = Linear::create(reg, name + ".ff2", 2 * d, d, rng);
    return b;
  }

  Tensor forward(const Tensor& x) const {
    Tensor a = ln1.forward(x);
    Tensor h = add(x, attn.forward(a, a));
    Tensor f = ln2.forward(h);
    return add(h, ff2.forward(relu(ff1.forward(f))));
  }
};

// Maps per-cell latents [S x d] to predicted expression [S x G].
// depth 0 degenerates to the readout alone.
struct TransformerGenerator {
  std::vector<TransformerBlock> blocks;
  Linear readout;

  static TransformerGenerator create(ParamRegistry& reg, const std::string& name, std::size_t d,
                                     std::size_t genes, std::size_t depth, std::size_t heads,
                                     SplitMix64& rng) {
    TransformerGenerator g;
    for (std::size_t i = 0; i < depth; ++i) {
      g.blocks.push_back(
          TransformerBlock::create(reg, name + ".block" + std::to_string(i), d, heads, rng));
    }
    g.readout = Linear::create(reg, name + ".readout", d, genes, rng);
    return g;
  }

  Tensor forward(const Tensor& z) const {
    Tensor h = z;
    for (const TransformerBlock& b : blocks) h = b.forward(h);
    return readout.forward(h);
  }
};

// ---------------------------------------------------------------------------
// Adam with coupled weight decay (decay added to the gradient).

struct AdamConfig {
  double lr = 1e-3;
  double weight_decay = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(const ParamRegistry& reg, AdamConfig cfg) : cfg_(cfg) {
    m_.reserve(reg.size());
    v_.reserve(reg.size());
    for (const auto& e : reg.entries()) {
      m_.emplace_back(e.tensor.size(), 0.0);
      v_.emplace_back(e.tensor.size(), 0.0);
    }
  }

  std::int64_t step_count() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

  void step(ParamRegistry& reg) {
    if (reg.size() != m_.size()) throw std::logic_error("adam: registry size changed");
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t p = 0; p < m_.size(); ++p) {
      auto& entry = const_cast<ParamRegistry::Entry&>(reg.entries()[p]);
      auto& w = entry.tensor.data()->value;
      const auto& grad = entry.tensor.grad();
      auto& m = m_[p];
      auto& v = v_[p];
      for (std::size_t i = 0; i < w.size(); ++i) {
        double g = grad[i] + cfg_.weight_decay * w[i];
        if (!std::isfinite(g)) {
          throw std::runtime_error("adam: non-finite gradient for parameter " + entry.name);
        }
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
        double mhat = m[i] / bc1;
        double vhat = v[i] / bc2;
        w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
      entry.tensor.zero_grad();
    }
  }

 private:
  AdamConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Checkpoint format: u64 little-endian header length, JSON header listing
// (name, shape) pairs in registry order, then the raw f64 little-endian
// values concatenated in the same order.

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

inline std::string serialize_checkpoint(const ParamRegistry& reg) {
  nlohmann::json header;
  header["schema"] = "ptrag.checkpoint.v1";
  nlohmann::json params = nlohmann::json::array();
  std::size_t total = 0;
  for (const auto& e : reg.entries()) {
    params.push_back(nlohmann::json::array({e.name, e.tensor.shape()}));
    total += e.tensor.size();
  }
  header["params"] = params;
  std::string head = header.dump();
  std::string out;
  out.reserve(8 + head.size() + total * sizeof(double));
  std::uint64_t len = head.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof(len));
  out.append(head);
  for (const auto& e : reg.entries()) {
    const auto& v = e.tensor.value();
    out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
  }
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const ParamRegistry& reg) {
  atomic_write_file(path, serialize_checkpoint(reg));
}

inline void load_checkpoint(const std::filesystem::path& path, ParamRegistry& reg) {
  std::string bytes = read_file(path);
  if (bytes.size() < 8) throw std::runtime_error("checkpoint truncated: " + path.string());
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data(), sizeof(len));
  if (bytes.size() < 8 + len) throw std::runtime_error("checkpoint truncated: " + path.string());
  nlohmann::json header = nlohmann::json::parse(bytes.substr(8, len));
  if (header.value("schema", "") != "ptrag.checkpoint.v1") {
    throw std::runtime_error("unrecognized checkpoint schema in " + path.string());
  }
  const auto& params = header.at("params");
  if (params.size() != reg.size()) {
    throw std::runtime_error("checkpoint lists " + std::to_string(params.size()) +
                             " parameters, registry has " + std::to_string(reg.size()));
  }
  std::size_t offset = 8 + len;
  for (std::size_t p = 0; p < reg.size(); ++p) {
    const auto& entry = reg.entries()[p];
    std::string name = params[p][0].get<std::string>();
    Shape shape = params[p][1].get<Shape>();
    if (name != entry.name || shape != entry.tensor.shape()) {
      throw std::runtime_error("checkpoint mismatch at " + name + ", registry expects " +
                               entry.name + " " + shape_str(entry.tensor.shape()));
    }
    std::size_t n = entry.tensor.size();
    if (offset + n * sizeof(double) > bytes.size()) {
      throw std::runtime_error("checkpoint data truncated at " + name);
    }
    auto& value = entry.tensor.data()->value;
    std::memcpy(value.data(), bytes.data() + offset, n * sizeof(double));
    offset += n * sizeof(double);
  }
}

}  // namespace ptrag
