#include "stc/nn.hpp"

#include <limits>

#include "stc/errors.hpp"

namespace stc {

namespace {
constexpr std::size_t kNoSlot = std::numeric_limits<std::size_t>::max();
}

void MlpConfig::validate() const {
  if (input_dim == 0 || output_dim == 0) {
    throw ConfigError("MlpConfig: input_dim and output_dim must be >= 1");
  }
  for (std::size_t h : hidden_dims) {
    if (h == 0) throw ConfigError("MlpConfig: hidden dims must be >= 1");
  }
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw ConfigError("MlpConfig: dropout_rate must be in [0, 1)");
  }
}

Mlp::Mlp(std::string name, MlpConfig cfg, Rng& init_stream)
    : name_(std::move(name)), cfg_(std::move(cfg)) {
  cfg_.validate();
  std::size_t in = cfg_.input_dim;
  const std::size_t n_layers = cfg_.hidden_dims.size() + 1;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const bool hidden = l < cfg_.hidden_dims.size();
    const std::size_t out = hidden ? cfg_.hidden_dims[l] : cfg_.output_dim;
    const std::string tag = name_ + ".l" + std::to_string(l);
    LayerSlots slots{kNoSlot, kNoSlot, kNoSlot, kNoSlot};
    slots.w = params_.size();
    params_.push_back({tag + ".w", Tensor::glorot(in, out, init_stream)});
    slots.b = params_.size();
    params_.push_back({tag + ".b", Tensor::zeros(1, out, true)});
    if (hidden && cfg_.use_layer_norm) {
      slots.ln_g = params_.size();
      params_.push_back({tag + ".ln_g", Tensor::full(1, out, 1.0, true)});
      slots.ln_b = params_.size();
      params_.push_back({tag + ".ln_b", Tensor::zeros(1, out, true)});
    }
    layers_.push_back(slots);
    in = out;
  }
}

Tensor Mlp::forward(Tape* tape, const Tensor& x, bool train, Rng* dropout_stream) const {
  if (x.cols() != cfg_.input_dim) {
    throw ShapeError(name_ + ": input has " + std::to_string(x.cols()) + " features, expected " +
                     std::to_string(cfg_.input_dim));
  }
  Tensor h = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& s = layers_[l];
    h = add(tape, matmul(tape, h, params_[s.w].tensor), params_[s.b].tensor);
    if (l + 1 == layers_.size()) break;  // output layer is affine only
    if (s.ln_g != kNoSlot) {
      h = layer_norm_rows(tape, h, params_[s.ln_g].tensor, params_[s.ln_b].tensor);
    }
    h = cfg_.activation == Activation::relu ? relu(tape, h) : gelu(tape, h);
    if (cfg_.dropout_rate > 0.0 && train) {
      h = dropout(tape, h, cfg_.dropout_rate, dropout_stream, true);
    }
  }
  return h;
}

std::vector<Tensor> Mlp::parameters() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.tensor);
  return out;
}

Tensor one_hot_rows(const std::vector<int>& ids, std::size_t n_categories) {
  Tensor out = Tensor::zeros(ids.size(), n_categories);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= n_categories) {
      throw UsageError("one_hot_rows: id " + std::to_string(ids[i]) + " out of range");
    }
    out.at(i, static_cast<std::size_t>(ids[i])) = 1.0;
  }
  return out;
}

}  // namespace stc
