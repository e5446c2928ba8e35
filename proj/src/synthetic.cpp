#include "stc/synthetic.hpp"

#include <cmath>
#include <string>

#include "stc/distributions.hpp"
#include "stc/errors.hpp"
#include "stc/rng.hpp"

namespace stc {

namespace {
constexpr double kGridPitchUm = 200.0;
constexpr double kClassMeanNorm = 3.0;
constexpr double kWithinClassStd = 0.7;
constexpr double kBatchLogitStd = 0.5;    // per-gene sd of u_b before strength scaling
constexpr double kLogLibMean = 7.6;       // exp(7.6) ~ 2000 counts per spot
constexpr double kLogLibStd = 0.3;
constexpr double kBatchLibShiftStd = 0.15;
constexpr double kImageNoiseStd = 0.3;
constexpr double kPiLogitJitter = 0.4;
}  // namespace

void SynthConfig::validate() const {
  if (n_batches < 1 || n_classes < 1 || spots_per_batch < 1 || n_genes < 1 ||
      latent_dim_true < 1 || image_feature_dim < 1) {
    throw ConfigError("SynthConfig: all dimensions must be >= 1");
  }
  if (batch_effect_strength < 0.0) {
    throw ConfigError("SynthConfig: batch_effect_strength must be >= 0");
  }
  if (!(zero_inflation_base > 0.0 && zero_inflation_base < 1.0)) {
    throw ConfigError("SynthConfig: zero_inflation_base must lie in (0, 1)");
  }
  if (!(dispersion_lo > 0.0) || dispersion_hi < dispersion_lo) {
    throw ConfigError("SynthConfig: dispersion range must satisfy 0 < lo <= hi");
  }
  if (labeled_fraction < 0.0 || labeled_fraction > 1.0) {
    throw ConfigError("SynthConfig: labeled_fraction must lie in [0, 1]");
  }
}

SyntheticData generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  RngPool pool(cfg.seed);
  const std::size_t n_spots = cfg.n_batches * cfg.spots_per_batch;
  const std::size_t d = cfg.latent_dim_true;

  SyntheticData out;
  SpotDataset& ds = out.dataset;
  GroundTruth& gt = out.truth;
  ds.n_spots = n_spots;
  ds.n_genes = cfg.n_genes;
  ds.n_batches = cfg.n_batches;
  ds.n_classes = cfg.n_classes;
  ds.image_dim = cfg.image_feature_dim;
  gt.latent_dim = d;

  // class means on a sphere of radius kClassMeanNorm, shared across batches
  {
    Rng rng = pool.stream("class_means");
    gt.class_means.resize(cfg.n_classes * d);
    for (std::size_t c = 0; c < cfg.n_classes; ++c) {
      double norm2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double v = rng.normal();
        gt.class_means[c * d + j] = v;
        norm2 += v * v;
      }
      const double s = kClassMeanNorm / std::sqrt(norm2);
      for (std::size_t j = 0; j < d; ++j) gt.class_means[c * d + j] *= s;
    }
  }

  // linear maps latent -> gene logits and latent -> image features
  {
    Rng rng = pool.stream("gene_map");
    gt.w_g.resize(d * cfg.n_genes);
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    for (auto& v : gt.w_g) v = rng.normal() * s;
  }
  {
    Rng rng = pool.stream("image_map");
    gt.w_v.resize(d * cfg.image_feature_dim);
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    for (auto& v : gt.w_v) v = rng.normal() * s;
  }

  // per-batch distortions, scaled by strength so strength 0 erases them
  {
    Rng rng = pool.stream("batch_offsets");
    gt.batch_offsets.resize(cfg.n_batches * cfg.n_genes);
    for (auto& v : gt.batch_offsets) {
      v = rng.normal() * kBatchLogitStd * cfg.batch_effect_strength;
    }
  }
  std::vector<double> batch_lib_shift(cfg.n_batches);
  {
    Rng rng = pool.stream("batch_lib");
    for (auto& v : batch_lib_shift) {
      v = rng.normal() * kBatchLibShiftStd * cfg.batch_effect_strength;
    }
  }

  // per-gene dispersion and zero-inflation
  {
    Rng rng = pool.stream("dispersion");
    gt.theta.resize(cfg.n_genes);
    for (auto& v : gt.theta) {
      v = cfg.dispersion_lo + (cfg.dispersion_hi - cfg.dispersion_lo) * rng.uniform();
    }
  }
  {
    Rng rng = pool.stream("inflation");
    gt.pi.resize(cfg.n_genes);
    const double base_logit =
        std::log(cfg.zero_inflation_base) - std::log1p(-cfg.zero_inflation_base);
    for (auto& v : gt.pi) {
      const double logit = base_logit + kPiLogitJitter * rng.normal();
      v = 1.0 / (1.0 + std::exp(-logit));
    }
  }

  // spot states: class, latent, library size
  Rng class_rng = pool.stream("classes");
  Rng latent_rng = pool.stream("latent");
  Rng lib_rng = pool.stream("library");
  Rng count_rng = pool.stream("counts");
  Rng image_rng = pool.stream("image_noise");

  ds.counts.assign(n_spots * cfg.n_genes, 0.0);
  ds.batch_ids.resize(n_spots);
  ds.x_um.resize(n_spots);
  ds.y_um.resize(n_spots);
  ds.labels.assign(n_spots, -1);
  ds.image_features.resize(n_spots * cfg.image_feature_dim);
  ds.gene_names.resize(cfg.n_genes);
  for (std::size_t g = 0; g < cfg.n_genes; ++g) ds.gene_names[g] = "gene_" + std::to_string(g);

  gt.t.resize(n_spots * d);
  gt.rho.resize(n_spots * cfg.n_genes);
  gt.lib.resize(n_spots);

  const auto grid_side =
      static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(cfg.spots_per_batch))));
  const auto labeled_rows =
      static_cast<std::size_t>(std::lround(cfg.labeled_fraction * static_cast<double>(grid_side)));

  std::vector<double> logits(cfg.n_genes);
  for (std::size_t b = 0; b < cfg.n_batches; ++b) {
    for (std::size_t k = 0; k < cfg.spots_per_batch; ++k) {
      const std::size_t i = b * cfg.spots_per_batch + k;
      ds.batch_ids[i] = static_cast<int>(b);

      const std::size_t row = k / grid_side, col = k % grid_side;
      ds.x_um[i] = static_cast<double>(col) * kGridPitchUm;
      ds.y_um[i] = static_cast<double>(row) * kGridPitchUm;

      const auto c = static_cast<std::size_t>(class_rng.integer(cfg.n_classes));
      if (row < labeled_rows) ds.labels[i] = static_cast<int>(c);

      for (std::size_t j = 0; j < d; ++j) {
        gt.t[i * d + j] = gt.class_means[c * d + j] + kWithinClassStd * latent_rng.normal();
      }

      // rho_i = softmax(W_g' t_i + u_b)
      double max_logit = -1e300;
      for (std::size_t g = 0; g < cfg.n_genes; ++g) {
        double acc = gt.batch_offsets[b * cfg.n_genes + g];
        for (std::size_t j = 0; j < d; ++j) acc += gt.t[i * d + j] * gt.w_g[j * cfg.n_genes + g];
        logits[g] = acc;
        max_logit = std::max(max_logit, acc);
      }
      double z = 0.0;
      for (std::size_t g = 0; g < cfg.n_genes; ++g) {
        logits[g] = std::exp(logits[g] - max_logit);
        z += logits[g];
      }
      for (std::size_t g = 0; g < cfg.n_genes; ++g) gt.rho[i * cfg.n_genes + g] = logits[g] / z;

      gt.lib[i] = std::exp(kLogLibMean + batch_lib_shift[b] + kLogLibStd * lib_rng.normal());

      // counts; a zero-total row is redrawn (vanishingly rare at defaults)
      for (int attempt = 0;; ++attempt) {
        double total = 0.0;
        for (std::size_t g = 0; g < cfg.n_genes; ++g) {
          const double mu = gt.lib[i] * gt.rho[i * cfg.n_genes + g];
          const auto y = static_cast<double>(sample_zinb(gt.pi[g], mu, gt.theta[g], count_rng));
          ds.counts[i * cfg.n_genes + g] = y;
          total += y;
        }
        if (total > 0.0) break;
        if (attempt > 100) {
          throw NumericError("generate_synthetic: cannot draw a nonzero spot");
        }
      }

      // image features: linear in the latent, batch-free by construction
      for (std::size_t f = 0; f < cfg.image_feature_dim; ++f) {
        double acc = kImageNoiseStd * image_rng.normal();
        for (std::size_t j = 0; j < d; ++j) {
          acc += gt.t[i * d + j] * gt.w_v[j * cfg.image_feature_dim + f];
        }
        ds.image_features[i * cfg.image_feature_dim + f] = acc;
      }
    }
  }

  ds.validate();
  return out;
}

}  // namespace stc
