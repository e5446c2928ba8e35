#pragma once

#include <string>
#include <vector>

#include "stc/dataset.hpp"
#include "stc/nn.hpp"
#include "stc/rng.hpp"
#include "stc/scvi.hpp"
#include "stc/tensor.hpp"

namespace stc {

enum class LossKind { si, wsi, swsi };

// Parses "si" / "wsi" / "swsi"; anything else is a ConfigError.
LossKind parse_loss_kind(const std::string& name);
std::string to_string(LossKind kind);

struct ContrastiveConfig {
  std::size_t d_proj = 256;
  std::size_t img_out_dim = 64;               // image encoder output width
  std::vector<std::size_t> img_hidden = {128, 128};
  double dropout_rate = 0.1;
  double tau = 0.1;                            // shared temperature
  LossKind loss_kind = LossKind::swsi;

  double lr = 1e-3;
  double weight_decay = 1e-6;
  std::size_t batch_size = 256;
  std::size_t epochs = 5;

  void validate() const;
};

// Residual projector: LN( h + dropout(fc2(gelu(h))) ) with h = fc1(x).
class Projector {
 public:
  Projector(std::string name, std::size_t d_in, std::size_t d_proj, double dropout_rate,
            Rng& init_stream);

  Tensor forward(Tape* tape, const Tensor& x, bool train = false,
                 Rng* dropout_stream = nullptr) const;

  std::size_t d_in() const { return d_in_; }
  std::size_t d_proj() const { return d_proj_; }
  const std::vector<Param>& named_parameters() const { return params_; }

 private:
  std::string name_;
  std::size_t d_in_, d_proj_;
  double dropout_rate_;
  std::vector<Param> params_;  // fc1.w fc1.b fc2.w fc2.b ln_g ln_b
};

// The trainable stage-2 stack: image encoder f_v plus the two projectors.
// The gene encoder is deliberately NOT part of this model; it stays frozen.
class ContrastiveModel {
 public:
  ContrastiveModel(std::size_t image_dim, std::size_t gene_latent_dim,
                   const ContrastiveConfig& cfg, Rng& init_stream);

  const Mlp& image_encoder() const { return image_encoder_; }
  const Projector& p_v() const { return p_v_; }
  const Projector& p_g() const { return p_g_; }
  const ContrastiveConfig& config() const { return cfg_; }

  std::vector<Param> named_parameters() const;
  std::vector<Tensor> parameters() const;
  void load_checkpoint(const std::string& path);

 private:
  ContrastiveConfig cfg_;
  Mlp image_encoder_;
  Projector p_v_, p_g_;
};

struct ProjectedPair {
  Tensor e_v;  // B x d_proj image embeddings
  Tensor e_g;  // B x d_proj gene embeddings
};

// Runs both branches. The gene path is executed off-tape, so no gradient can
// reach the gene encoder: in train mode z1 is a reparametrized draw, in eval
// mode the posterior mean.
ProjectedPair project_pair(Tape* tape, const ContrastiveModel& model, const ScviModel& gene_model,
                           const Tensor& images, const Tensor& counts, bool train = false,
                           Rng* sample_stream = nullptr, Rng* dropout_stream = nullptr);

// S_ij = cos(a_i, b_j) / tau with rows L2-normalized. A zero-norm row is a
// NumericError naming the row.
Tensor similarity(Tape* tape, const Tensor& a, const Tensor& b, double tau);

// Symmetric InfoNCE over the paired similarity matrix: minus the mean of
// row-wise and column-wise diagonal log-softmax terms.
Tensor loss_si(Tape* tape, const Tensor& s_vg);

// Intra-modal weighted variant: one shared weight per pair, the row softmax
// of the averaged intra-modal similarities (S_vv + S_gg)/2 at temperature
// 2*tau; the diagonal weight multiplies both the row and the column term.
Tensor loss_wsi(Tape* tape, const Tensor& s_vg, const Tensor& s_vv, const Tensor& s_gg,
                double tau);

// Separate weighting: w_v from softmax rows of S_vv, w_g from softmax rows of
// S_gg, no temperature inside either weight softmax. Coincides with loss_wsi
// at weight temperature 1/2 whenever S_vv = S_gg.
Tensor loss_swsi(Tape* tape, const Tensor& s_vg, const Tensor& s_vv, const Tensor& s_gg);

struct ContrastiveTraceRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  LossKind kind = LossKind::si;
  double loss = 0.0;
  double mean_diag_sim = 0.0;
  double mean_offdiag_sim = 0.0;
};

void write_contrastive_trace(const std::string& path,
                             const std::vector<ContrastiveTraceRow>& trace);

struct TrainedContrastive {
  ContrastiveModel model;
  std::vector<ContrastiveTraceRow> trace;
};

// AdamW over image encoder + projectors only; the gene model is read-only.
// Deterministic for a fixed pool: streams "init", "shuffle", "sample",
// "dropout" derived under "contrastive".
TrainedContrastive train_contrastive(const SpotDataset& ds, const ScviModel& gene_model,
                                     const ContrastiveConfig& cfg, const RngPool& pool);

// Baseline variant: the gene side is a fixed per-spot feature table (one row
// per spot, e.g. a linear embedding of the log counts) instead of the scVI
// latent. Stream layout matches the main variant; the table never trains.
TrainedContrastive train_contrastive(const SpotDataset& ds, const Tensor& gene_features,
                                     const ContrastiveConfig& cfg, const RngPool& pool);

}  // namespace stc
