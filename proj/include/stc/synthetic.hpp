#pragma once

#include <cstdint>

#include "stc/dataset.hpp"

namespace stc {

// Generative settings for the synthetic spatial-transcriptomics sampler.
// strength = 0 removes every batch-dependent term, so batches differ only by
// sampling noise.
struct SynthConfig {
  std::size_t n_batches = 3;
  std::size_t n_classes = 6;
  std::size_t spots_per_batch = 400;
  std::size_t n_genes = 120;
  std::size_t latent_dim_true = 8;
  std::size_t image_feature_dim = 32;
  double batch_effect_strength = 1.0;
  double zero_inflation_base = 0.15;   // in (0,1)
  double dispersion_lo = 0.5;          // theta range, uniform per gene
  double dispersion_hi = 4.0;
  double labeled_fraction = 0.25;      // contiguous spatial block per batch
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

// Everything the sampler knew, kept for oracle checks in tests: the true
// low-dimensional state of each spot, the class and batch parameters, and
// the exact ZINB parameters the counts were drawn from.
struct GroundTruth {
  std::size_t latent_dim = 0;
  std::vector<double> t;              // n_spots x latent_dim
  std::vector<double> class_means;    // n_classes x latent_dim
  std::vector<double> batch_offsets;  // n_batches x n_genes (already scaled by strength)
  std::vector<double> w_g;            // latent_dim x n_genes
  std::vector<double> w_v;            // latent_dim x image_feature_dim
  std::vector<double> rho;            // n_spots x n_genes, rows sum to 1
  std::vector<double> lib;            // n_spots
  std::vector<double> theta;          // n_genes
  std::vector<double> pi;             // n_genes
};

struct SyntheticData {
  SpotDataset dataset;
  GroundTruth truth;
};

// Draws a dataset from a class-structured latent state: spot latents come
// from a Gaussian mixture shared across batches, counts from a ZINB whose
// rates carry batch-specific distortions, and image features from a linear
// map of the latent with NO batch term. Spots sit on a 200 um grid per
// batch; a contiguous block of rows per batch carries labels.
SyntheticData generate_synthetic(const SynthConfig& cfg);

}  // namespace stc
