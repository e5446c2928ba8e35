// Independent reference implementations used only by tests. Everything here
// is written in the most obvious way possible (straight loops, long double
// where it helps) so that agreement with the library is meaningful.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <stdexcept>
#include <utility>
#include <vector>

#include "stc/tensor.hpp"

namespace oracle {

// Plain triple-loop matrix product, no blocking, no tricks.
inline std::vector<double> matmul_ref(const std::vector<double>& a, const std::vector<double>& b,
                                      std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  return c;
}

inline std::vector<double> softmax_ref(const std::vector<double>& x) {
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  std::vector<double> out(x.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
  return out;
}

inline double logsumexp_ref(const std::vector<double>& x) {
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  double sum = 0.0;
  for (double v : x) sum += std::exp(v - mx);
  return mx + std::log(sum);
}

// Negative binomial log pmf in long double, mean/dispersion parameterization.
inline long double nb_log_pmf_ref(long double y, long double mu, long double theta) {
  return lgammal(y + theta) - lgammal(theta) - lgammal(y + 1.0L) +
         theta * (logl(theta) - logl(theta + mu)) + y * (logl(mu) - logl(theta + mu));
}

inline long double zinb_log_pmf_ref(long double y, long double pi, long double mu,
                                    long double theta) {
  if (y == 0.0L) {
    return logl(pi + (1.0L - pi) * expl(nb_log_pmf_ref(0.0L, mu, theta)));
  }
  return logl(1.0L - pi) + nb_log_pmf_ref(y, mu, theta);
}

// Brute-force leave-one-out k-nearest-neighbour classification accuracy on
// row vectors. Ties in the vote go to the smallest label. Points with label
// < 0 are skipped as queries but still serve as neighbours when labeled.
inline double knn_accuracy_ref(const std::vector<double>& x, std::size_t dim,
                               const std::vector<int>& labels, std::size_t k) {
  const std::size_t n = labels.size();
  std::size_t correct = 0, total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0) continue;
    std::vector<std::pair<double, std::size_t>> dist;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i || labels[j] < 0) continue;
      double d2 = 0.0;
      for (std::size_t f = 0; f < dim; ++f) {
        const double d = x[i * dim + f] - x[j * dim + f];
        d2 += d * d;
      }
      dist.emplace_back(d2, j);
    }
    const std::size_t kk = std::min(k, dist.size());
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(kk), dist.end());
    std::map<int, int> votes;
    for (std::size_t r = 0; r < kk; ++r) votes[labels[dist[r].second]]++;
    int best = -1, best_votes = -1;
    for (const auto& [lab, v] : votes) {
      if (v > best_votes) {
        best = lab;
        best_votes = v;
      }
    }
    correct += best == labels[i];
    ++total;
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

// Nearest-centroid classifier (a linear decision rule): fit per-class means
// on the training rows, classify the test rows by closest centroid.
inline double centroid_probe_ref(const std::vector<double>& x, std::size_t dim,
                                 const std::vector<int>& y,
                                 const std::vector<std::size_t>& train,
                                 const std::vector<std::size_t>& test) {
  std::map<int, std::pair<std::vector<double>, int>> cents;
  for (std::size_t i : train) {
    auto& [sum, cnt] = cents[y[i]];
    sum.resize(dim, 0.0);
    for (std::size_t f = 0; f < dim; ++f) sum[f] += x[i * dim + f];
    ++cnt;
  }
  std::size_t correct = 0;
  for (std::size_t i : test) {
    int best = -1;
    double best_d = 0.0;
    for (const auto& [lab, sc] : cents) {
      double d2 = 0.0;
      for (std::size_t f = 0; f < dim; ++f) {
        const double d = x[i * dim + f] - sc.first[f] / sc.second;
        d2 += d * d;
      }
      if (best < 0 || d2 < best_d) {
        best = lab;
        best_d = d2;
      }
    }
    correct += best == y[i];
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

// Upper 1% critical values of the chi-square distribution, df = 1..30
// (standard table values).
inline double chi2_crit_001(int df) {
  static const double table[30] = {
      6.6349, 9.2103, 11.3449, 13.2767, 15.0863, 16.8119, 18.4753, 20.0902,
      21.6660, 23.2093, 24.7250, 26.2170, 27.6882, 29.1412, 30.5779, 31.9999,
      33.4087, 34.8053, 36.1909, 37.5662, 38.9322, 40.2894, 41.6384, 42.9798,
      44.3141, 45.6417, 46.9629, 48.2782, 49.5879, 50.8922};
  if (df < 1 || df > 30) throw std::out_of_range("chi2_crit_001: df outside table");
  return table[df - 1];
}

// ---- finite-difference gradient harness ------------------------------------

struct FdReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
};

// `f(tape, params)` must rebuild its graph from scratch on every call and
// return a scalar. Analytic gradients (one taped backward pass) are compared
// against central differences computed with tape = nullptr. The relative
// error uses max(|analytic|, |numeric|, floor) as denominator so that
// near-zero gradients are judged on an absolute scale.
template <class F>
FdReport check_gradients(F&& f, std::vector<stc::Tensor> params, double eps = 1e-5,
                         double floor = 1e-4) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  stc::Tape tape;
  stc::Tensor loss = f(&tape, params);
  tape.backward(loss);

  FdReport report;
  for (auto& p : params) {
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double saved = p.data()[k];
      p.data()[k] = saved + eps;
      const double up = f(nullptr, params).item();
      p.data()[k] = saved - eps;
      const double down = f(nullptr, params).item();
      p.data()[k] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = p.grad()[k];
      const double abs_err = std::abs(analytic - numeric);
      const double rel_err =
          abs_err / std::max({std::abs(analytic), std::abs(numeric), floor});
      report.max_abs_err = std::max(report.max_abs_err, abs_err);
      report.max_rel_err = std::max(report.max_rel_err, rel_err);
    }
  }
  return report;
}

}  // namespace oracle
