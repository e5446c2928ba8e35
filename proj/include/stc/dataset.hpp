#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "stc/tensor.hpp"

namespace stc {

// In-memory spot-level dataset: integer counts, batch (patient) assignment,
// slide coordinates, optional class labels, and paired image features. All
// per-spot arrays share the spot dimension; label -1 means unlabeled.
struct SpotDataset {
  std::size_t n_spots = 0;
  std::size_t n_genes = 0;
  std::size_t n_batches = 0;
  std::size_t n_classes = 0;
  std::size_t image_dim = 0;

  std::vector<double> counts;          // n_spots x n_genes, row-major, integer-valued
  std::vector<int> batch_ids;          // n_spots, in [0, n_batches)
  std::vector<double> x_um, y_um;      // n_spots, micrometers
  std::vector<int> labels;             // n_spots, class in [0, n_classes) or -1
  std::vector<double> image_features;  // n_spots x image_dim, row-major
  std::vector<std::string> gene_names; // n_genes

  double count(std::size_t spot, std::size_t gene) const {
    return counts[spot * n_genes + gene];
  }
  bool is_labeled(std::size_t spot) const { return labels[spot] >= 0; }
  std::size_t labeled_count() const;
  // Total count per spot (the library size l_i).
  std::vector<double> library_sizes() const;

  // Full-table tensor copies (no gradients).
  Tensor counts_tensor() const;
  Tensor image_tensor() const;

  // Throws DataError when any structural invariant is broken (length
  // mismatches, fractional or negative counts, zero-total spots, batch or
  // label indices out of range).
  void validate() const;
};

// Keeps the top-k genes ranked by variance of log1p(count), preserving the
// original gene order among those kept. k >= n_genes returns the input
// unchanged; k = 0 is an error.
SpotDataset select_top_genes(const SpotDataset& ds, std::size_t k);

// One leave-one-batch-out fold: the test set is exactly the spots of
// `test_batch`, the train set is everyone else.
struct FoldSplit {
  int test_batch = -1;
  std::vector<std::size_t> train_ids;
  std::vector<std::size_t> test_ids;
};

// N_b folds in batch order. Throws UsageError for single-batch datasets.
std::vector<FoldSplit> split_leave_one_batch_out(const SpotDataset& ds);

}  // namespace stc
