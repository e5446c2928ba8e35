#include "stc/distributions.hpp"

#include <cmath>
#include <limits>

#include "stc/errors.hpp"

namespace stc {

namespace {
// Smallest mean fed to log(); keeps y=0 rows finite when a decoder emits an
// exact zero without perturbing any realistic value.
constexpr double kMuFloor = 1e-300;

void check_nb_domain(double y, double mu, double theta) {
  if (!(y >= 0.0) || y != std::floor(y)) {
    throw DomainError("nb_log_pmf: y must be a nonnegative integer value");
  }
  if (!(mu > 0.0)) throw DomainError("nb_log_pmf: mu must be positive");
  if (!(theta > 0.0)) throw DomainError("nb_log_pmf: theta must be positive");
}
}  // namespace

GaussianPosterior make_posterior(Tape* tape, const Tensor& mu, const Tensor& raw_logvar) {
  if (!mu.same_shape(raw_logvar)) {
    throw ShapeError("make_posterior: mu and logvar shapes differ");
  }
  return GaussianPosterior{
      mu, clamp(tape, raw_logvar, GaussianPosterior::kLogVarLo, GaussianPosterior::kLogVarHi)};
}

double nb_log_pmf(double y, double mu, double theta) {
  check_nb_domain(y, mu, theta);
  const double log_theta_mu = std::log(theta + mu);
  return std::lgamma(y + theta) - std::lgamma(theta) - std::lgamma(y + 1.0) +
         theta * (std::log(theta) - log_theta_mu) + y * (std::log(mu) - log_theta_mu);
}

double zinb_log_pmf(double y, double pi, double mu, double theta) {
  if (!(pi >= 0.0 && pi <= 1.0)) throw DomainError("zinb_log_pmf: pi must lie in [0, 1]");
  check_nb_domain(y, mu, theta);
  const double log1m_pi = std::log1p(-pi);
  if (y == 0.0) {
    const double a = std::log(pi);  // -inf at pi=0 is fine under log-sum-exp
    const double b = log1m_pi + nb_log_pmf(0.0, mu, theta);
    const double m = std::max(a, b);
    if (!std::isfinite(m)) return m;
    return m + std::log1p(std::exp(std::min(a, b) - m));
  }
  return log1m_pi + nb_log_pmf(y, mu, theta);
}

double gaussian_kl_standard(double mu, double sigma) {
  if (!(sigma > 0.0)) throw DomainError("gaussian_kl_standard: sigma must be positive");
  return 0.5 * (mu * mu + sigma * sigma - 1.0) - std::log(sigma);
}

long sample_zinb(double pi, double mu, double theta, Rng& rng) {
  if (!(pi >= 0.0 && pi <= 1.0)) throw DomainError("sample_zinb: pi must lie in [0, 1]");
  if (!(mu > 0.0) || !(theta > 0.0)) {
    throw DomainError("sample_zinb: mu and theta must be positive");
  }
  if (rng.uniform() < pi) return 0;
  const double rate = rng.gamma(theta) * (mu / theta);
  return rng.poisson(rate);
}

Tensor zinb_log_pmf_matrix(Tape* tape, const Tensor& y, const Tensor& mu, const Tensor& theta,
                           const Tensor& pi) {
  if (y.requires_grad()) throw UsageError("zinb_log_pmf_matrix: counts must not require grad");
  const Tensor safe_mu = clamp(tape, mu, kMuFloor, std::numeric_limits<double>::max());
  const Tensor log_mu = log_(tape, safe_mu);
  const Tensor log_theta = log_(tape, theta);
  const Tensor log_theta_mu = log_(tape, add(tape, safe_mu, theta));

  // NB pieces. lgamma(y+1) depends only on data, so it is precomputed flat.
  Tensor lgamma_y1 = Tensor::zeros(y.rows(), y.cols());
  for (std::size_t k = 0; k < y.size(); ++k) lgamma_y1.data()[k] = std::lgamma(y.data()[k] + 1.0);
  const Tensor lg_y_theta = lgamma_(tape, add(tape, y, theta));
  const Tensor lg_theta = lgamma_(tape, theta);
  const Tensor theta_term = mul(tape, theta, sub(tape, log_theta, log_theta_mu));
  const Tensor y_term = mul(tape, y, sub(tape, log_mu, log_theta_mu));
  const Tensor nb0 = theta_term;  // NB log-pmf at y=0
  Tensor nb = add(tape, sub(tape, sub(tape, lg_y_theta, lg_theta), lgamma_y1),
                  add(tape, theta_term, y_term));

  const Tensor log_pi = log_(tape, pi);
  const Tensor log1m_pi = log1p_(tape, neg(tape, pi));
  const Tensor zero_case = logaddexp(tape, log_pi, add(tape, log1m_pi, nb0));
  const Tensor pos_case = add(tape, log1m_pi, nb);

  // 0/1 mask over the observed zeros; constant w.r.t. the graph.
  Tensor zero_mask = Tensor::zeros(y.rows(), y.cols());
  for (std::size_t k = 0; k < y.size(); ++k) zero_mask.data()[k] = y.data()[k] == 0.0 ? 1.0 : 0.0;
  Tensor pos_mask = Tensor::zeros(y.rows(), y.cols());
  for (std::size_t k = 0; k < y.size(); ++k) pos_mask.data()[k] = 1.0 - zero_mask.data()[k];

  return add(tape, mul(tape, zero_mask, zero_case), mul(tape, pos_mask, pos_case));
}

Tensor gaussian_kl_standard_rows(Tape* tape, const GaussianPosterior& post) {
  // 0.5 * sum_d (mu^2 + exp(logvar) - 1 - logvar)
  const Tensor mu2 = mul(tape, post.mu, post.mu);
  const Tensor var = exp_(tape, post.logvar);
  const Tensor inner = sub(tape, add(tape, mu2, var), add_const(tape, post.logvar, 1.0));
  return scale(tape, sum_rows(tape, inner), 0.5);
}

Tensor gaussian_kl_rows(Tape* tape, const GaussianPosterior& q, const GaussianPosterior& p) {
  if (!q.mu.same_shape(p.mu)) throw ShapeError("gaussian_kl_rows: posterior shapes differ");
  // 0.5 * sum_d (logvar_p - logvar_q + (var_q + (mu_q - mu_p)^2)/var_p - 1)
  const Tensor var_q = exp_(tape, q.logvar);
  const Tensor inv_var_p = exp_(tape, neg(tape, p.logvar));
  const Tensor dmu = sub(tape, q.mu, p.mu);
  const Tensor ratio = mul(tape, add(tape, var_q, mul(tape, dmu, dmu)), inv_var_p);
  const Tensor inner =
      add(tape, sub(tape, p.logvar, q.logvar), add_const(tape, ratio, -1.0));
  return scale(tape, sum_rows(tape, inner), 0.5);
}

Tensor sample_reparam(Tape* tape, const GaussianPosterior& post, Rng& noise) {
  Tensor eps = Tensor::zeros(post.mu.rows(), post.mu.cols());
  for (auto& v : eps.data()) v = noise.normal();
  const Tensor sigma = exp_(tape, scale(tape, post.logvar, 0.5));
  return add(tape, post.mu, mul(tape, sigma, eps));
}

Tensor log_softmax_rows(Tape* tape, const Tensor& logits) {
  return sub(tape, logits, logsumexp_rows(tape, logits));
}

}  // namespace stc
