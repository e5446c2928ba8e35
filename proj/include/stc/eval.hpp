#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "stc/contrastive.hpp"
#include "stc/dataset.hpp"
#include "stc/nn.hpp"
#include "stc/rng.hpp"
#include "stc/scvi.hpp"
#include "stc/tensor.hpp"

namespace stc {

// ---------------------------------------------------------------------------
// Embeddings

enum class EmbeddingSource { image, gene, latent };

std::string to_string(EmbeddingSource source);
// Throws ConfigError on anything but "image", "gene", "latent".
EmbeddingSource parse_embedding_source(const std::string& text);

// Per-spot embedding table plus the metadata the metrics and the export path
// need. `spot_ids` may be empty; "spot_<row>" names are synthesized on export.
struct EmbeddingSet {
  Tensor embeddings;                  // n x d
  std::vector<std::string> spot_ids;  // empty or n
  std::vector<int> batch_ids;         // n
  std::vector<int> labels;            // n, -1 = unlabeled
  EmbeddingSource source = EmbeddingSource::latent;

  // ShapeError on misaligned lengths, NumericError on non-finite embeddings,
  // DataError on negative batch ids or labels below -1.
  void validate() const;
};

// ---------------------------------------------------------------------------
// Classification metrics

// Counts with rows = true class, columns = prediction. Throws ShapeError on
// length mismatch, UsageError on empty input or entries outside [0, n_classes).
std::vector<std::vector<std::size_t>> confusion_matrix(const std::vector<int>& preds,
                                                       const std::vector<int>& labels,
                                                       std::size_t n_classes);

// Fraction of exact matches; equals confusion-trace / total by construction.
double accuracy(const std::vector<int>& preds, const std::vector<int>& labels);

// 2PR/(P+R) per class, defined as 0 whenever P + R = 0.
std::vector<double> per_class_f1(const std::vector<std::vector<std::size_t>>& confusion);

// Unweighted mean of per-class F1 over the classes present in `labels`.
double macro_f1(const std::vector<int>& preds, const std::vector<int>& labels);

// Mean negative log softmax probability of the true class. Differentiable in
// `logits`; labels must lie in [0, logits.cols()).
Tensor cross_entropy(Tape* tape, const Tensor& logits, const std::vector<int>& labels);

// ---------------------------------------------------------------------------
// Neighbourhood metrics (Euclidean, self excluded, distance ties broken by
// the lower row index)

// Mean over points of the Shannon entropy of batch proportions among the k
// nearest neighbours, normalized by ln(number of distinct batches). 1 means
// perfectly mixed batches, 0 means fully separated. Throws UsageError when
// k = 0, k >= n, or fewer than two distinct batches are present.
double knn_batch_mixing(const EmbeddingSet& emb, std::size_t k = 15);

// Leave-one-out k-NN classification accuracy among the labeled points:
// majority vote over the k nearest labeled neighbours, vote ties broken by
// the lowest class id. Throws UsageError when fewer than two labeled points
// exist or k is outside [1, n_labeled).
double knn_class_accuracy(const EmbeddingSet& emb, std::size_t k = 15);

// ---------------------------------------------------------------------------
// PCA (cyclic Jacobi eigendecomposition of the covariance; deterministic)

struct PcaModel {
  Tensor mean;                             // 1 x d
  Tensor components;                       // d x n_components, orthonormal columns
  std::vector<double> explained_variance;  // n_components, descending
};

// Components are ordered by descending eigenvalue; each column is sign-fixed
// so its largest-magnitude loading is positive (first such entry wins ties).
// Throws UsageError when x has fewer than two rows or n_components is 0 or
// exceeds the width, NumericError on non-finite input.
PcaModel fit_pca(const Tensor& x, std::size_t n_components);

// Centered projection (x - mean) * components.
Tensor pca_transform(const PcaModel& pca, const Tensor& x);

// 2-component PCA projection written as delimited rows
// (spot_id, pc1, pc2, batch, label, source). A non-empty `comment` becomes
// the first line verbatim (callers pass "#"-prefixed provenance). Throws
// ShapeError when the embeddings have fewer than two dimensions, DataError
// on write failure.
void export_embeddings(const EmbeddingSet& emb, const std::string& path,
                       const std::string& comment = "");

// ---------------------------------------------------------------------------
// Classifier fine-tuning

struct FinetuneConfig {
  double lr = 1e-3;
  double weight_decay = 1e-6;
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  // When true only the linear head trains and the encoder copy stays at its
  // initial weights; default is full fine-tuning.
  bool head_only = false;
  // Fraction of the labeled set held out for the reported metrics; when the
  // slice rounds down to empty, metrics fall back to the training slice.
  double val_fraction = 0.2;

  void validate() const;
};

// A deep copy of the fine-tuned encoder plus the linear head on top of it.
struct FinetunedClassifier {
  Mlp encoder;
  Mlp head;

  Tensor logits(Tape* tape, const Tensor& features, bool train = false,
                Rng* dropout_stream = nullptr) const;
  // Argmax per row with the lowest class index winning ties.
  std::vector<int> predict(const Tensor& features) const;
};

struct FinetuneOutcome {
  FinetunedClassifier model;
  double val_accuracy = 0.0;
  double val_macro_f1 = 0.0;
  std::size_t n_train = 0;
  std::size_t n_val = 0;
};

// Cross-entropy training of a linear head (and, unless head_only, the encoder
// copy) on labeled feature rows. The input encoder is never modified.
// Deterministic for a fixed pool: streams "init", "split", "shuffle",
// "dropout" derived under "finetune". Throws UsageError on an empty labeled
// set or labels outside [0, n_classes).
FinetuneOutcome finetune_classify(const Mlp& image_encoder, const Tensor& features,
                                  const std::vector<int>& labels, std::size_t n_classes,
                                  const FinetuneConfig& cfg, const RngPool& pool);

// ---------------------------------------------------------------------------
// Leave-one-batch-out protocol

// Guards the labels of one held-out batch: reading one through the view
// throws ProtocolError. The derived datasets are built through that guard, so
// the training stages can only ever observe training-batch labels.
class TrainView {
 public:
  TrainView(const SpotDataset& ds, int held_out_batch);

  int held_out_batch() const { return held_out_; }
  bool is_held_out(std::size_t spot) const;
  // Label of a training-batch spot; ProtocolError for held-out spots.
  int label(std::size_t spot) const;

  // All spots with every held-out label forced to -1 (stage-1 training).
  const SpotDataset& stage1_dataset() const { return stage1_; }
  // Spots of the training batches only (stage-2 training and fine-tuning).
  const SpotDataset& train_dataset() const { return train_; }

  const std::vector<std::size_t>& train_ids() const { return train_ids_; }
  const std::vector<std::size_t>& test_ids() const { return test_ids_; }

 private:
  const SpotDataset* ds_;
  int held_out_;
  std::vector<std::size_t> train_ids_;
  std::vector<std::size_t> test_ids_;
  SpotDataset stage1_;
  SpotDataset train_;
};

struct FoldResult {
  int fold = -1;  // held-out batch id
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double batch_mixing = 0.0;
  std::vector<double> class_f1;                     // n_classes
  std::vector<std::vector<std::size_t>> confusion;  // n_classes x n_classes
};

struct LouoAggregate {
  double acc_mean = 0.0, acc_std = 0.0;
  double f1_mean = 0.0, f1_std = 0.0;
  double mixing_mean = 0.0, mixing_std = 0.0;
};

struct LouoConfig {
  std::string method = "scvi";  // "scvi" or "scanvi"
  GeneEncoderConfig gene;
  ContrastiveConfig contrastive;
  FinetuneConfig finetune;
  std::size_t n_seeds = 10;
  std::uint64_t base_seed = 0;
  std::size_t mixing_k = 15;
  std::size_t n_threads = 0;  // 0 = hardware concurrency

  void validate() const;
};

struct LouoResult {
  std::vector<FoldResult> folds;      // n_batches x n_seeds, fold-major
  std::vector<LouoAggregate> per_fold;
  LouoAggregate overall;
};

// Per fold and seed: stage-1 gene encoder (scVI, or scANVI with the held-out
// labels masked), stage-2 contrastive training on the training batches,
// fine-tuning on the labeled training spots, then accuracy / macro-F1 /
// confusion on the labeled held-out spots and batch mixing of the stage-1
// latent over all spots. Jobs run in parallel; identical configs reproduce
// results bitwise. Throws UsageError on single-batch datasets.
LouoResult run_louo(const SpotDataset& ds, const LouoConfig& cfg);

// Delimited rows (fold, seed, method, loss_kind, accuracy, macro_f1,
// batch_mixing) followed by "#"-prefixed per-fold and overall mean +/- std
// summary lines. A non-empty `comment` becomes the first line verbatim.
void write_louo_results(const std::string& path, const LouoResult& result,
                        const LouoConfig& cfg, const std::string& comment = "");

}  // namespace stc
