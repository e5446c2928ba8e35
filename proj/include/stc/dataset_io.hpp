#pragma once

#include <string>

#include "stc/dataset.hpp"

namespace stc {

// A dataset on disk is a directory of human-inspectable text files:
//   manifest.txt   key=value lines (n_spots, n_genes, n_batches, n_classes,
//                  image_dim, checksum) — checksum is FNV-1a 64 over the
//                  bytes of the four data files in the order below
//   counts.tsv     sparse triplets "spot<TAB>gene<TAB>count", nonzero only
//   metadata.tsv   "spot_id<TAB>batch<TAB>x_um<TAB>y_um<TAB>label", -1 = unlabeled
//   features.tsv   dense image-feature table, one spot per row
//   genes.txt      one gene name per line

struct LoadOptions {
  // Keep only the top-K genes by log1p-count variance; 0 keeps everything.
  std::size_t top_k_genes = 0;
};

// Validates `ds` and writes the directory, creating it if needed.
void save_dataset(const SpotDataset& ds, const std::string& dir);

// Parses and validates a dataset directory. Spots whose total count is zero
// are dropped with a warning. Malformed input raises DataError with the
// offending file and line number.
SpotDataset load_dataset(const std::string& dir, const LoadOptions& opts = {});

}  // namespace stc
