#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stc/dataset.hpp"
#include "stc/distributions.hpp"
#include "stc/nn.hpp"
#include "stc/rng.hpp"
#include "stc/tensor.hpp"

namespace stc {

// Architecture and training settings shared by the gene-encoder variants.
// Defaults: latent 30, two hidden layers, lr 1e-3, five epochs; the batch
// size is 256 rather than 1024 because the synthetic sets are small.
struct GeneEncoderConfig {
  std::size_t latent_dim = 30;
  std::vector<std::size_t> enc_hidden = {128, 128};
  std::vector<std::size_t> dec_hidden = {128, 128};
  std::vector<std::size_t> aux_hidden = {64};  // classifier / z2 / prior nets
  Activation activation = Activation::relu;
  double dropout_rate = 0.1;

  double lr = 1e-3;
  double weight_decay = 1e-6;
  std::size_t batch_size = 256;
  std::size_t epochs = 5;
  double scanvi_alpha = -1.0;  // < 0 means the default 50 / n_classes

  void validate() const;
};

// The ZINB variational autoencoder with a batch-agnostic encoder and a
// patient-conditional decoder. The encoder never sees the batch label; the
// decoder receives [z | one_hot(batch)].
class ScviModel {
 public:
  ScviModel(std::size_t n_genes, std::size_t n_batches, const GeneEncoderConfig& cfg,
            Rng& init_stream);

  // Posterior over z1 from raw counts (input transform log1p inside). The
  // signature deliberately admits no batch information.
  GaussianPosterior encode(Tape* tape, const Tensor& counts, bool train = false,
                           Rng* dropout_stream = nullptr) const;

  struct Decoded {
    Tensor rho;  // B x G, rows sum to 1
    Tensor pi;   // B x G, in (0,1)
  };
  Decoded decode(Tape* tape, const Tensor& z, const std::vector<int>& batch_ids,
                 bool train = false, Rng* dropout_stream = nullptr) const;

  // exp(log_theta), 1 x G, strictly positive.
  Tensor theta(Tape* tape) const;

  // Deterministic embedding: posterior mean only, nothing sampled.
  Tensor latent(const Tensor& counts) const;

  std::size_t n_genes() const { return n_genes_; }
  std::size_t n_batches() const { return n_batches_; }
  std::size_t latent_dim() const { return cfg_.latent_dim; }
  const GeneEncoderConfig& config() const { return cfg_; }

  std::vector<Param> named_parameters() const;
  std::vector<Tensor> parameters() const;
  void load_checkpoint(const std::string& path);

 private:
  std::size_t n_genes_, n_batches_;
  GeneEncoderConfig cfg_;
  Mlp enc_mu_, enc_logvar_, dec_rho_, dec_pi_;
  Param log_theta_;
};

struct ElboParts {
  Tensor elbo;        // scalar, mean over the batch
  double recon_mean;  // mean reconstruction log-likelihood
  double kl_mean;     // mean KL (unweighted)
};

// Single-sample ELBO: mean_i [ sum_g ZINB(g_ig; l_i rho_ig, theta_g, pi_ig)
// - kl_weight * KL(q(z1|g) || N(0,I)) ], library size l_i = row sum of
// counts, z1 drawn once with the reparametrization trick.
ElboParts elbo_scvi(Tape* tape, const ScviModel& model, const Tensor& counts,
                    const std::vector<int>& batch_ids, double kl_weight, Rng& sample_stream,
                    bool train = false, Rng* dropout_stream = nullptr);

struct TraceRow {
  std::size_t epoch = 0;
  std::size_t step = 0;  // global step
  double elbo = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  double kl_weight = 0.0;
};

// Writes "step\tepoch\telbo\trecon\tkl\tkl_weight" rows.
void write_trace(const std::string& path, const std::vector<TraceRow>& trace);

// KL annealing schedule: 0 at step 0, linear up to 1 after one epoch.
double kl_anneal_weight(std::size_t global_step, std::size_t steps_per_epoch);

// Shuffles spot indices into minibatches, then repairs any chunk whose spots
// all share one patient (when the dataset has several) by swapping in a spot
// from another chunk.
std::vector<std::vector<std::size_t>> make_minibatches(std::size_t n, std::size_t batch_size,
                                                       const std::vector<int>& batch_ids,
                                                       Rng& shuffle_stream);

struct TrainedScvi {
  ScviModel model;
  std::vector<TraceRow> trace;
};

// AdamW ascent on the scVI ELBO with the annealed KL weight. Deterministic
// for a fixed pool: draws only from streams "init", "shuffle", "sample",
// "dropout" derived under "scvi".
TrainedScvi train_scvi(const SpotDataset& ds, const GeneEncoderConfig& cfg, const RngPool& pool);

}  // namespace stc
