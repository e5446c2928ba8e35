#pragma once

#include "stc/rng.hpp"
#include "stc/tensor.hpp"

namespace stc {

// Variational posterior N(mu, diag(exp(logvar))). Log-variance is clamped to
// [-10, 10] at construction so sigma stays in a numerically safe band.
struct GaussianPosterior {
  Tensor mu;      // B x D
  Tensor logvar;  // B x D, clamped

  static constexpr double kLogVarLo = -10.0;
  static constexpr double kLogVarHi = 10.0;
};

// Builds a posterior from raw encoder heads, applying the log-variance clamp
// on the tape so gradients still flow inside the band.
GaussianPosterior make_posterior(Tape* tape, const Tensor& mu, const Tensor& raw_logvar);

// ---- scalar kernels ---------------------------------------------------------
// Negative binomial in mean/inverse-dispersion form:
//   log Gamma(y+theta) - log Gamma(theta) - log Gamma(y+1)
//   + theta*(log theta - log(theta+mu)) + y*(log mu - log(theta+mu)).
// `y` must be a nonnegative integer value; mu and theta strictly positive.
double nb_log_pmf(double y, double mu, double theta);

// Zero-inflated NB. y=0 mixes the inflation mass with the NB zero mass in
// log space; y>0 is log(1-pi) + NB. pi must lie in [0, 1].
double zinb_log_pmf(double y, double pi, double mu, double theta);

// KL(N(mu, sigma^2) || N(0,1)) for one dimension.
double gaussian_kl_standard(double mu, double sigma);

// One generative ZINB draw: inflation coin, then Gamma(theta, mu/theta) ->
// Poisson mixture.
long sample_zinb(double pi, double mu, double theta, Rng& rng);

// ---- tensor kernels (autodiff-aware) ----------------------------------------
// Elementwise ZINB log-pmf for a B x G count matrix. `mu` is B x G (or
// broadcastable), `theta` 1 x G, `pi` B x G in (0,1); counts carry no
// gradient. mu is clamped away from zero so y=0, mu=0 cells stay finite.
Tensor zinb_log_pmf_matrix(Tape* tape, const Tensor& y, const Tensor& mu, const Tensor& theta,
                           const Tensor& pi);

// Per-row KL(N(mu, exp(logvar)) || N(0, I)); returns B x 1.
Tensor gaussian_kl_standard_rows(Tape* tape, const GaussianPosterior& post);

// Per-row KL between two diagonal Gaussians, q against p; returns B x 1.
Tensor gaussian_kl_rows(Tape* tape, const GaussianPosterior& q, const GaussianPosterior& p);

// Reparametrized sample mu + exp(logvar/2) * eps with eps ~ N(0,1) drawn from
// `noise`; differentiable with respect to both posterior heads.
Tensor sample_reparam(Tape* tape, const GaussianPosterior& post, Rng& noise);

// Row-wise log softmax (logits minus row log-sum-exp).
Tensor log_softmax_rows(Tape* tape, const Tensor& logits);

}  // namespace stc
