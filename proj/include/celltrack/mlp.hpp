#pragma once

#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "celltrack/autodiff.hpp"

namespace celltrack {

enum class Activation { None, ReLU, Sigmoid };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::ReLU: return "relu";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::None: break;
  }
  return "none";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::ReLU;
  if (s == "sigmoid") return Activation::Sigmoid;
  if (s == "none") return Activation::None;
  throw ConfigError("unknown activation '" + s + "'");
}

/// y = act(x W + b); W is in x out, b is 1 x out.
struct DenseLayer {
  ad::Parameter weight;
  ad::Parameter bias;
  Activation activation = Activation::None;

  std::size_t in_dim() const { return weight.value.rows(); }
  std::size_t out_dim() const { return weight.value.cols(); }
};

struct MlpParams {
  std::string name;
  std::vector<DenseLayer> layers;

  std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
  std::size_t output_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }

  std::vector<ad::Parameter*> parameters() {
    std::vector<ad::Parameter*> out;
    for (auto& l : layers) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }

  std::vector<const ad::Parameter*> parameters() const {
    std::vector<const ad::Parameter*> out;
    for (const auto& l : layers) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }
};

/// Builds an MLP with layer widths `dims` (dims.size() == acts.size() + 1).
/// Weights are Kaiming-uniform for ReLU layers and Xavier-uniform otherwise;
/// biases start at zero.
inline MlpParams make_mlp(std::string name, std::span<const std::size_t> dims,
                          std::span<const Activation> acts, std::mt19937_64& rng) {
  if (dims.size() < 2 || acts.size() + 1 != dims.size()) {
    throw ConfigError("make_mlp(" + name + "): need one activation per layer");
  }
  MlpParams mlp;
  mlp.name = std::move(name);
  for (std::size_t i = 0; i < acts.size(); ++i) {
    const std::size_t in = dims[i], out = dims[i + 1];
    if (in == 0 || out == 0) throw ConfigError("make_mlp(" + mlp.name + "): zero-width layer");
    const double bound = acts[i] == Activation::ReLU
                             ? std::sqrt(6.0 / static_cast<double>(in))
                             : std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    DenseLayer layer;
    const std::string prefix = mlp.name + ".layer" + std::to_string(i);
    layer.weight = {prefix + ".weight", Tensor2(in, out)};
    for (double& w : layer.weight.value.values()) w = dist(rng);
    layer.bias = {prefix + ".bias", Tensor2(1, out)};
    layer.activation = acts[i];
    mlp.layers.push_back(std::move(layer));
  }
  return mlp;
}

inline MlpParams make_mlp(std::string name, std::initializer_list<std::size_t> dims,
                          std::initializer_list<Activation> acts, std::mt19937_64& rng) {
  return make_mlp(std::move(name), std::span<const std::size_t>(dims.begin(), dims.size()),
                  std::span<const Activation>(acts.begin(), acts.size()), rng);
}

inline ad::Var mlp_forward(ad::Tape& tape, const MlpParams& mlp, ad::Var input) {
  ad::Var h = input;
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    const DenseLayer& layer = mlp.layers[i];
    if (h.cols() != layer.in_dim()) {
      throw ConfigError(mlp.name + " layer " + std::to_string(i) + ": expected " +
                        std::to_string(layer.in_dim()) + " input columns, got " + std::to_string(h.cols()));
    }
    h = ad::add_row(ad::matmul(h, tape.parameter(layer.weight)), tape.parameter(layer.bias));
    switch (layer.activation) {
      case Activation::ReLU: h = ad::relu(h); break;
      case Activation::Sigmoid: h = ad::sigmoid(h); break;
      case Activation::None: break;
    }
  }
  return h;
}

inline Tensor2 mlp_forward(const MlpParams& mlp, const Tensor2& input) {
  ad::Tape tape(ad::Mode::Eval);
  return mlp_forward(tape, mlp, tape.constant(input)).value();
}

}  // namespace celltrack
