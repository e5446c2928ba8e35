#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "stc/rng.hpp"
#include "stc/tensor.hpp"

namespace stc {

// Architecture of a simple feed-forward stack. Hidden blocks run
// linear -> layer norm (optional) -> activation -> dropout; the output layer
// is a bare affine map.
struct MlpConfig {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_dims;
  std::size_t output_dim = 0;
  Activation activation = Activation::relu;
  double dropout_rate = 0.0;
  bool use_layer_norm = true;

  // Throws ConfigError if any dimension is zero or dropout_rate is outside [0,1).
  void validate() const;
};

// A named trainable tensor. Names are stable across runs and identify
// records in checkpoints.
struct Param {
  std::string name;
  Tensor tensor;
};

class Mlp {
 public:
  // Parameters are created with requires_grad on; weights are Glorot-uniform
  // draws from `init_stream` (consumed in layer order, weights before biases),
  // biases zero, layer-norm gains one.
  Mlp(std::string name, MlpConfig cfg, Rng& init_stream);

  // `dropout_stream` may be null when train is false or dropout_rate is 0.
  Tensor forward(Tape* tape, const Tensor& x, bool train = false,
                 Rng* dropout_stream = nullptr) const;

  const MlpConfig& config() const { return cfg_; }
  const std::string& name() const { return name_; }
  std::vector<Param>& named_parameters() { return params_; }
  const std::vector<Param>& named_parameters() const { return params_; }
  // Parameter handles in declaration order (shared storage with the model).
  std::vector<Tensor> parameters() const;

 private:
  std::string name_;
  MlpConfig cfg_;
  std::vector<Param> params_;
  // Index of (weight, bias, ln_gain, ln_bias) per layer inside params_;
  // ln slots are SIZE_MAX when absent.
  struct LayerSlots {
    std::size_t w, b, ln_g, ln_b;
  };
  std::vector<LayerSlots> layers_;
};

// Constant (no-grad) one-hot rows; every id must lie in [0, n_categories).
Tensor one_hot_rows(const std::vector<int>& ids, std::size_t n_categories);

}  // namespace stc
