#pragma once

#include "stc/scvi.hpp"

namespace stc {

// Semi-supervised extension: the scVI core plus a latent classifier
// q(y|z1), a class-conditioned second latent q(z2|z1,y), and a conditional
// prior p(z1|z2,y). z2 has the same dimension as z1.
class ScanviModel {
 public:
  ScanviModel(std::size_t n_genes, std::size_t n_batches, std::size_t n_classes,
              const GeneEncoderConfig& cfg, Rng& init_stream);

  ScviModel& core() { return core_; }
  const ScviModel& core() const { return core_; }
  std::size_t n_classes() const { return n_classes_; }
  // Resolved auxiliary classification weight (config value, or 50/C default).
  double alpha() const;

  Tensor classifier_logits(Tape* tape, const Tensor& z1, bool train = false,
                           Rng* dropout_stream = nullptr) const;
  GaussianPosterior encode_z2(Tape* tape, const Tensor& z1, const std::vector<int>& ys,
                              bool train = false, Rng* dropout_stream = nullptr) const;
  GaussianPosterior prior_z1(Tape* tape, const Tensor& z2, const std::vector<int>& ys,
                             bool train = false, Rng* dropout_stream = nullptr) const;

  std::vector<Param> named_parameters() const;
  std::vector<Tensor> parameters() const;
  void load_checkpoint(const std::string& path);

  // Test hook: when set, the z2 hierarchy is skipped entirely — the z1 prior
  // is the standard normal and no z2 terms (or draws) appear, which reduces
  // the labeled objective to elbo_scvi plus the classification term.
  bool bypass_z2 = false;

 private:
  ScviModel core_;
  std::size_t n_classes_;
  Mlp classifier_, enc_z2_, prior_net_;
};

struct ScanviElboParts {
  Tensor elbo;  // scalar, mean over the batch
  double recon_mean = 0.0;
  double kl_z1_mean = 0.0;
  double kl_z2_mean = 0.0;
  double class_ll_mean = 0.0;  // mean log q(y|z1)
};

// Labeled single-sample objective, mean over the batch of
//   sum_g ZINB - KL(q(z1|g) || p(z1|z2_s, y)) - KL(q(z2|z1_s, y) || N(0,I))
//   + alpha * log q(y|z1_s)
// with z1_s, z2_s reparametrized draws and both divergences in closed form.
ScanviElboParts elbo_scanvi_labeled(Tape* tape, const ScanviModel& model, const Tensor& counts,
                                    const std::vector<int>& labels,
                                    const std::vector<int>& batch_ids, double alpha,
                                    Rng& sample_stream, bool train = false,
                                    Rng* dropout_stream = nullptr);

struct ScanviUnlabeledParts {
  Tensor elbo;         // scalar, mean over the batch
  Tensor q_y;          // B x C class responsibilities (detached)
  Tensor class_terms;  // B x C per-class objective values (detached)
  double entropy_mean = 0.0;
};

// Unlabeled objective: exact marginalization over the C classes,
//   sum_y q(y|z1) * L_y + H(q(y|z1)),
// where L_y is the labeled objective at alpha=0 and z1 is shared across
// classes.
ScanviUnlabeledParts elbo_scanvi_unlabeled(Tape* tape, const ScanviModel& model,
                                           const Tensor& counts,
                                           const std::vector<int>& batch_ids, Rng& sample_stream,
                                           bool train = false, Rng* dropout_stream = nullptr);

struct ScanviTraceRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double objective = 0.0;
  double labeled_elbo = 0.0;
  double unlabeled_elbo = 0.0;
  double class_ll = 0.0;
};

void write_scanvi_trace(const std::string& path, const std::vector<ScanviTraceRow>& trace);

struct TrainedScanvi {
  ScanviModel model;
  std::vector<ScanviTraceRow> trace;
};

// Semi-supervised training over mixed minibatches: the objective of a chunk
// is the spot-weighted mean of the labeled and unlabeled objectives. Every
// class must have at least one labeled spot.
TrainedScanvi train_scanvi(const SpotDataset& ds, const GeneEncoderConfig& cfg,
                           const RngPool& pool);

}  // namespace stc
