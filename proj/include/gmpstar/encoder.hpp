#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "gmpstar/rng.hpp"
#include "gmpstar/tensor.hpp"
#include "json.hpp"

namespace gmpstar {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Which part of the network a parameter belongs to, taken from the first
/// component of its dotted name.
enum class ParameterGroup { embedding, encoder, head };

inline ParameterGroup parameter_group(std::string_view name) {
  const auto head = name.substr(0, name.find('.'));
  if (head == "embedding") return ParameterGroup::embedding;
  if (head == "encoder") return ParameterGroup::encoder;
  if (head == "head") return ParameterGroup::head;
  throw std::invalid_argument("parameter '" + std::string(name) + "' has no recognised group prefix");
}

/// Ordered, name-addressable parameter collection.
class ParameterSet {
 public:
  void add(std::string name, Tensor tensor) {
    if (find(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
    entries_.push_back({std::move(name), std::move(tensor)});
  }

  const Tensor* find(std::string_view name) const {
    for (const auto& e : entries_) {
      if (e.name == name) return &e.tensor;
    }
    return nullptr;
  }

  Tensor& at(std::string_view name) {
    for (auto& e : entries_) {
      if (e.name == name) return e.tensor;
    }
    throw std::out_of_range("no parameter named '" + std::string(name) + "'");
  }
  const Tensor& at(std::string_view name) const { return const_cast<ParameterSet*>(this)->at(name); }

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.size();
    return n;
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (const auto& e : entries_) out.push_back(e.tensor);
    return out;
  }

  void set_requires_grad(bool flag) {
    for (auto& e : entries_) e.tensor.set_requires_grad(flag);
  }

  ParameterSet clone() const {
    ParameterSet copy;
    for (const auto& e : entries_) copy.add(e.name, e.tensor.clone());
    return copy;
  }

 private:
  std::vector<NamedTensor> entries_;
};

struct TinyEncoderConfig {
  std::size_t vocab_size = 64;
  std::size_t max_sequence_length = 32;
  std::size_t hidden_dim = 64;
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t num_classes = 2;
  std::uint64_t seed = 0;

  void validate() const {
    const auto positive = [](std::size_t v, const char* field) {
      if (v == 0) throw std::invalid_argument(std::string("encoder config: ") + field + " must be positive");
    };
    positive(vocab_size, "vocab_size");
    positive(max_sequence_length, "max_sequence_length");
    positive(hidden_dim, "hidden_dim");
    positive(num_layers, "num_layers");
    positive(num_heads, "num_heads");
    positive(ffn_dim, "ffn_dim");
    if (num_classes < 2) throw std::invalid_argument("encoder config: num_classes must be at least 2");
    if (hidden_dim % num_heads != 0) {
      throw std::invalid_argument("encoder config: hidden_dim " + std::to_string(hidden_dim) +
                                  " is not divisible by num_heads " + std::to_string(num_heads));
    }
  }

  bool operator==(const TinyEncoderConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const TinyEncoderConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"max_sequence_length", c.max_sequence_length},
                     {"hidden_dim", c.hidden_dim}, {"num_layers", c.num_layers},
                     {"num_heads", c.num_heads},   {"ffn_dim", c.ffn_dim},
                     {"num_classes", c.num_classes}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TinyEncoderConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_sequence_length").get_to(c.max_sequence_length);
  j.at("hidden_dim").get_to(c.hidden_dim);
  j.at("num_layers").get_to(c.num_layers);
  j.at("num_heads").get_to(c.num_heads);
  j.at("ffn_dim").get_to(c.ffn_dim);
  j.at("num_classes").get_to(c.num_classes);
  j.at("seed").get_to(c.seed);
}

/// Pre-norm transformer encoder with mean pooling and a linear classifier.
///
/// Parameter names:
///   embedding.token, embedding.position
///   encoder.layer{i}.attn_norm.{gamma,beta}
///   encoder.layer{i}.attention.{query,key,value,output}.{weight,bias}
///   encoder.layer{i}.ffn_norm.{gamma,beta}
///   encoder.layer{i}.ffn.{intermediate,output}.{weight,bias}
///   encoder.final_norm.{gamma,beta}
///   head.classifier.{weight,bias}
/// Linear weights are stored [in, out].
class TinyEncoder {
 public:
  static constexpr double kNormEpsilon = 1e-5;
  static constexpr double kEmbeddingStd = 0.5;

  explicit TinyEncoder(TinyEncoderConfig config) : config_(config) {
    config_.validate();
    Rng rng(config_.seed);
    const auto h = config_.hidden_dim, f = config_.ffn_dim;
    const auto normal = [&](Shape shape, double stddev) {
      std::vector<double> v(numel(shape));
      for (auto& x : v) x = rng.normal(0.0, stddev);
      return Tensor(std::move(shape), std::move(v), true);
    };
    const auto linear = [&](const std::string& prefix, std::size_t in, std::size_t out) {
      params_.add(prefix + ".weight", normal({in, out}, 1.0 / std::sqrt(static_cast<double>(in))));
      params_.add(prefix + ".bias", Tensor::zeros({out}, true));
    };
    const auto norm = [&](const std::string& prefix) {
      params_.add(prefix + ".gamma", Tensor::filled({h}, 1.0, true));
      params_.add(prefix + ".beta", Tensor::zeros({h}, true));
    };
    params_.add("embedding.token", normal({config_.vocab_size, h}, kEmbeddingStd));
    params_.add("embedding.position", normal({config_.max_sequence_length, h}, kEmbeddingStd));
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
      const auto layer = "encoder.layer" + std::to_string(l);
      norm(layer + ".attn_norm");
      linear(layer + ".attention.query", h, h);
      linear(layer + ".attention.key", h, h);
      linear(layer + ".attention.value", h, h);
      linear(layer + ".attention.output", h, h);
      norm(layer + ".ffn_norm");
      linear(layer + ".ffn.intermediate", h, f);
      linear(layer + ".ffn.output", f, h);
    }
    norm("encoder.final_norm");
    linear("head.classifier", h, config_.num_classes);
  }

  /// Wraps existing parameters, e.g. loaded from a checkpoint.
  TinyEncoder(TinyEncoderConfig config, ParameterSet params) : config_(config), params_(std::move(params)) {
    config_.validate();
    const TinyEncoder reference(config_);
    if (reference.params_.size() != params_.size()) {
      throw std::invalid_argument("encoder parameters: expected " + std::to_string(reference.params_.size()) +
                                  " tensors, got " + std::to_string(params_.size()));
    }
    for (const auto& e : reference.params_) {
      const Tensor* have = params_.find(e.name);
      if (!have) throw std::invalid_argument("encoder parameters: missing '" + e.name + "'");
      if (have->shape() != e.tensor.shape()) {
        throw ShapeError("encoder parameters: '" + e.name + "' has shape " + to_string(have->shape()) +
                         ", expected " + to_string(e.tensor.shape()));
      }
    }
  }

  const TinyEncoderConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  /// Closed-form parameter count for a configuration.
  static std::size_t parameter_count(const TinyEncoderConfig& c) {
    const auto h = c.hidden_dim, f = c.ffn_dim;
    const auto per_layer = 4 * (h * h + h) + (h * f + f) + (f * h + h) + 2 * (2 * h);
    return (c.vocab_size + c.max_sequence_length) * h + c.num_layers * per_layer + 2 * h + (h * c.num_classes + c.num_classes);
  }

  /// Maps `batch` token sequences (row-major, batch x seq_len) to logits [batch, num_classes].
  Tensor forward(Tape& tape, std::span<const std::size_t> tokens, std::size_t batch) const {
    if (batch == 0 || tokens.size() % batch != 0) {
      throw ShapeError("encoder forward: " + std::to_string(tokens.size()) + " tokens do not split into " +
                       std::to_string(batch) + " sequences");
    }
    const std::size_t seq = tokens.size() / batch;
    if (seq > config_.max_sequence_length) {
      throw ShapeError("encoder forward: sequence length " + std::to_string(seq) + " exceeds maximum " +
                       std::to_string(config_.max_sequence_length));
    }
    const std::size_t h = config_.hidden_dim, heads = config_.num_heads, hd = h / heads;
    const auto& p = params_;

    std::vector<std::size_t> positions(seq);
    for (std::size_t i = 0; i < seq; ++i) positions[i] = i;
    Tensor x = ops::embedding(tape, p.at("embedding.token"), tokens, {batch, seq});
    x = ops::add(tape, x, ops::embedding(tape, p.at("embedding.position"), positions, {seq}));

    const auto linear = [&](const Tensor& in, const std::string& prefix) {
      return ops::add(tape, ops::matmul(tape, in, p.at(prefix + ".weight")), p.at(prefix + ".bias"));
    };
    const auto norm = [&](const Tensor& in, const std::string& prefix) {
      return ops::layer_norm(tape, in, p.at(prefix + ".gamma"), p.at(prefix + ".beta"), kNormEpsilon);
    };
    // [B, S, H] -> [B*heads, S, hd]
    const auto split_heads = [&](const Tensor& t) {
      auto r = ops::reshape(tape, t, {batch, seq, heads, hd});
      return ops::reshape(tape, ops::transpose(tape, r, 1, 2), {batch * heads, seq, hd});
    };

    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
      const auto layer = "encoder.layer" + std::to_string(l);
      const Tensor a = norm(x, layer + ".attn_norm");
      const Tensor q = split_heads(linear(a, layer + ".attention.query"));
      const Tensor k = split_heads(linear(a, layer + ".attention.key"));
      const Tensor v = split_heads(linear(a, layer + ".attention.value"));
      Tensor scores = ops::scale(tape, ops::matmul(tape, q, ops::transpose(tape, k, 1, 2)), attn_scale);
      Tensor context = ops::matmul(tape, ops::softmax(tape, scores), v);
      context = ops::reshape(tape, context, {batch, heads, seq, hd});
      context = ops::reshape(tape, ops::transpose(tape, context, 1, 2), {batch, seq, h});
      x = ops::add(tape, x, linear(context, layer + ".attention.output"));

      const Tensor b = norm(x, layer + ".ffn_norm");
      const Tensor inner = ops::gelu(tape, linear(b, layer + ".ffn.intermediate"));
      x = ops::add(tape, x, linear(inner, layer + ".ffn.output"));
    }
    x = norm(x, "encoder.final_norm");
    const Tensor pooled = ops::mean(tape, x, 1);
    return linear(pooled, "head.classifier");
  }

 private:
  TinyEncoderConfig config_;
  ParameterSet params_;
};

/// Fully connected ReLU network used as a small reference model in tests.
class Mlp {
 public:
  Mlp(std::vector<std::size_t> layer_sizes, std::uint64_t seed) : sizes_(std::move(layer_sizes)) {
    if (sizes_.size() < 2) throw std::invalid_argument("mlp needs at least input and output sizes");
    Rng rng(seed);
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      const auto in = sizes_[l], out = sizes_[l + 1];
      std::vector<double> w(in * out), b(out);
      for (auto& x : w) x = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
      for (auto& x : b) x = rng.normal(0.0, 0.1);
      params_.add("encoder.fc" + std::to_string(l) + ".weight", Tensor({in, out}, std::move(w), true));
      params_.add("encoder.fc" + std::to_string(l) + ".bias", Tensor({out}, std::move(b), true));
    }
  }

  ParameterSet& parameters() { return params_; }

  Tensor forward(Tape& tape, const Tensor& input) const {
    Tensor x = input;
    const std::size_t layers = sizes_.size() - 1;
    for (std::size_t l = 0; l < layers; ++l) {
      const auto prefix = "encoder.fc" + std::to_string(l);
      x = ops::add(tape, ops::matmul(tape, x, params_.at(prefix + ".weight")), params_.at(prefix + ".bias"));
      if (l + 1 < layers) x = ops::relu(tape, x);
    }
    return x;
  }

 private:
  std::vector<std::size_t> sizes_;
  ParameterSet params_;
};

}  // namespace gmpstar
