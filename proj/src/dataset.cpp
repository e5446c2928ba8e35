#include "stc/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "stc/errors.hpp"

namespace stc {

std::size_t SpotDataset::labeled_count() const {
  std::size_t n = 0;
  for (int l : labels) n += l >= 0;
  return n;
}

std::vector<double> SpotDataset::library_sizes() const {
  std::vector<double> lib(n_spots, 0.0);
  for (std::size_t i = 0; i < n_spots; ++i)
    for (std::size_t g = 0; g < n_genes; ++g) lib[i] += counts[i * n_genes + g];
  return lib;
}

Tensor SpotDataset::counts_tensor() const {
  return Tensor::from(counts, n_spots, n_genes);
}

Tensor SpotDataset::image_tensor() const {
  return Tensor::from(image_features, n_spots, image_dim);
}

void SpotDataset::validate() const {
  auto fail = [](const std::string& msg) { throw DataError("dataset invariant: " + msg); };
  if (counts.size() != n_spots * n_genes) fail("counts size does not match n_spots x n_genes");
  if (batch_ids.size() != n_spots) fail("batch_ids length mismatch");
  if (x_um.size() != n_spots || y_um.size() != n_spots) fail("coordinate length mismatch");
  if (labels.size() != n_spots) fail("labels length mismatch");
  if (image_features.size() != n_spots * image_dim) fail("image feature size mismatch");
  if (gene_names.size() != n_genes) fail("gene name count mismatch");
  for (std::size_t i = 0; i < n_spots; ++i) {
    if (batch_ids[i] < 0 || static_cast<std::size_t>(batch_ids[i]) >= n_batches) {
      fail("batch id out of range at spot " + std::to_string(i));
    }
    if (labels[i] < -1 || (labels[i] >= 0 && static_cast<std::size_t>(labels[i]) >= n_classes)) {
      fail("label out of range at spot " + std::to_string(i));
    }
    double total = 0.0;
    for (std::size_t g = 0; g < n_genes; ++g) {
      const double c = counts[i * n_genes + g];
      if (c < 0.0 || c != std::floor(c)) {
        fail("count at spot " + std::to_string(i) + ", gene " + std::to_string(g) +
             " is not a nonnegative integer");
      }
      total += c;
    }
    if (total == 0.0) fail("spot " + std::to_string(i) + " has zero total count");
  }
}

SpotDataset select_top_genes(const SpotDataset& ds, std::size_t k) {
  if (k == 0) throw UsageError("select_top_genes: k must be >= 1");
  if (k >= ds.n_genes) return ds;

  // variance of log1p(count) per gene
  std::vector<double> var(ds.n_genes, 0.0);
  for (std::size_t g = 0; g < ds.n_genes; ++g) {
    double mean = 0.0;
    for (std::size_t i = 0; i < ds.n_spots; ++i) mean += std::log1p(ds.count(i, g));
    mean /= static_cast<double>(ds.n_spots);
    double v = 0.0;
    for (std::size_t i = 0; i < ds.n_spots; ++i) {
      const double d = std::log1p(ds.count(i, g)) - mean;
      v += d * d;
    }
    var[g] = v / static_cast<double>(ds.n_spots);
  }

  std::vector<std::size_t> order(ds.n_genes);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return var[a] > var[b]; });
  std::vector<std::size_t> keep(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(keep.begin(), keep.end());  // preserve original gene order

  SpotDataset out = ds;
  out.n_genes = k;
  out.counts.assign(ds.n_spots * k, 0.0);
  out.gene_names.clear();
  for (std::size_t j = 0; j < k; ++j) out.gene_names.push_back(ds.gene_names[keep[j]]);
  for (std::size_t i = 0; i < ds.n_spots; ++i)
    for (std::size_t j = 0; j < k; ++j) out.counts[i * k + j] = ds.count(i, keep[j]);
  return out;
}

std::vector<FoldSplit> split_leave_one_batch_out(const SpotDataset& ds) {
  if (ds.n_batches < 2) {
    throw UsageError("split_leave_one_batch_out: need at least two batches");
  }
  std::vector<FoldSplit> folds(ds.n_batches);
  for (std::size_t b = 0; b < ds.n_batches; ++b) folds[b].test_batch = static_cast<int>(b);
  for (std::size_t i = 0; i < ds.n_spots; ++i) {
    const auto b = static_cast<std::size_t>(ds.batch_ids[i]);
    for (std::size_t f = 0; f < ds.n_batches; ++f) {
      (f == b ? folds[f].test_ids : folds[f].train_ids).push_back(i);
    }
  }
  return folds;
}

}  // namespace stc
