#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "oracles.hpp"
#include "stc/adamw.hpp"
#include "stc/checkpoint.hpp"
#include "stc/errors.hpp"
#include "stc/scanvi.hpp"
#include "stc/scvi.hpp"
#include "stc/synthetic.hpp"

using namespace stc;
namespace fs = std::filesystem;

namespace {

GeneEncoderConfig tiny_cfg(std::size_t latent, std::size_t hidden) {
  GeneEncoderConfig cfg;
  cfg.latent_dim = latent;
  cfg.enc_hidden = {hidden};
  cfg.dec_hidden = {hidden};
  cfg.aux_hidden = {hidden};
  cfg.dropout_rate = 0.0;
  return cfg;
}

Tensor poisson_counts(std::size_t rows, std::size_t cols, double lambda, Rng& rng) {
  Tensor t = Tensor::zeros(rows, cols);
  for (auto& v : t.data()) v = static_cast<double>(rng.poisson(lambda));
  return t;
}

// Overwrites every parameter of the model with small deterministic values so
// oracle checks exercise non-trivial paths (fresh biases are all zero).
template <typename Model>
void scramble_parameters(Model& model, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& p : model.named_parameters()) {
    for (auto& v : p.tensor.data()) v = 0.3 * rng.normal();
  }
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

double row_kl_standard(const GaussianPosterior& post, std::size_t i) {
  double kl = 0.0;
  for (std::size_t j = 0; j < post.mu.cols(); ++j) {
    const double mu = post.mu.at(i, j), lv = post.logvar.at(i, j);
    kl += 0.5 * (mu * mu + std::exp(lv) - 1.0 - lv);
  }
  return kl;
}

double row_kl_general(const GaussianPosterior& q, const GaussianPosterior& p, std::size_t i) {
  double kl = 0.0;
  for (std::size_t j = 0; j < q.mu.cols(); ++j) {
    const double dmu = q.mu.at(i, j) - p.mu.at(i, j);
    const double lvq = q.logvar.at(i, j), lvp = p.logvar.at(i, j);
    kl += 0.5 * (lvp - lvq + (std::exp(lvq) + dmu * dmu) / std::exp(lvp) - 1.0);
  }
  return kl;
}

// ZINB reconstruction log-likelihood of one spot via the scalar kernel,
// mirroring the matrix version's floor on mu.
double row_recon(const Tensor& counts, const Tensor& rho, const Tensor& pi, const Tensor& theta,
                 std::size_t i) {
  double lib = 0.0;
  for (std::size_t g = 0; g < counts.cols(); ++g) lib += counts.at(i, g);
  double ll = 0.0;
  for (std::size_t g = 0; g < counts.cols(); ++g) {
    const double mu = std::max(lib * rho.at(i, g), 1e-300);
    ll += zinb_log_pmf(counts.at(i, g), pi.at(i, g), mu, theta.at(0, g));
  }
  return ll;
}

Tensor manual_z(const GaussianPosterior& post, Rng& noise) {
  Tensor z = Tensor::zeros(post.mu.rows(), post.mu.cols());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    for (std::size_t j = 0; j < z.cols(); ++j) {
      z.at(i, j) = post.mu.at(i, j) + std::exp(0.5 * post.logvar.at(i, j)) * noise.normal();
    }
  }
  return z;
}

}  // namespace

// The batch-agnostic claim is structural: encode takes counts and plumbing
// only, and does not accept a batch-id argument.
static_assert(std::is_invocable_r_v<GaussianPosterior, decltype(&ScviModel::encode),
                                    const ScviModel&, Tape*, const Tensor&, bool, Rng*>);
static_assert(!std::is_invocable_v<decltype(&ScviModel::encode), const ScviModel&, Tape*,
                                   const Tensor&, const std::vector<int>&, bool, Rng*>);

TEST_CASE("gene encoder config validation") {
  GeneEncoderConfig cfg = tiny_cfg(4, 8);
  CHECK_NOTHROW(cfg.validate());
  cfg.latent_dim = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_cfg(4, 8);
  cfg.lr = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_cfg(4, 8);
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_cfg(4, 8);
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_cfg(4, 8);
  cfg.dropout_rate = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_cfg(4, 8);
  cfg.weight_decay = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("encode is deterministic, clamped, and shape-checked") {
  Rng init(4);
  ScviModel model(12, 3, tiny_cfg(4, 8), init);

  Rng data(9);
  Tensor counts = poisson_counts(6, 12, 3.0, data);
  for (std::size_t g = 0; g < 12; ++g) counts.at(2, g) = counts.at(0, g);  // duplicate row

  const GaussianPosterior post = model.encode(nullptr, counts);
  SUBCASE("identical count rows give identical posteriors") {
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(post.mu.at(0, j) == post.mu.at(2, j));
      CHECK(post.logvar.at(0, j) == post.logvar.at(2, j));
    }
  }
  SUBCASE("repeated eval calls are identical and latent() is the posterior mean") {
    const GaussianPosterior again = model.encode(nullptr, counts);
    const Tensor lat = model.latent(counts);
    for (std::size_t i = 0; i < 6; ++i) {
      for (std::size_t j = 0; j < 4; ++j) {
        CHECK(post.mu.at(i, j) == again.mu.at(i, j));
        CHECK(lat.at(i, j) == post.mu.at(i, j));
      }
    }
  }
  SUBCASE("logvar respects the clamp band even with an extreme head bias") {
    for (auto& p : model.named_parameters()) {
      if (p.name == "enc_logvar.l1.b") {
        for (auto& v : p.tensor.data()) v = 50.0;  // way above the band
      }
    }
    const GaussianPosterior clamped = model.encode(nullptr, counts);
    for (std::size_t i = 0; i < 6; ++i) {
      for (std::size_t j = 0; j < 4; ++j) {
        CHECK(clamped.logvar.at(i, j) == 10.0);
        CHECK(post.logvar.at(i, j) >= -10.0);
        CHECK(post.logvar.at(i, j) <= 10.0);
      }
    }
  }
  SUBCASE("wrong gene count is rejected") {
    CHECK_THROWS_AS(model.encode(nullptr, Tensor::zeros(2, 11)), ShapeError);
  }
}

TEST_CASE("encode on a zero count row matches an independent forward re-implementation") {
  Rng init(10);
  const std::size_t genes = 9, hidden = 7, latent = 4;
  ScviModel model(genes, 2, tiny_cfg(latent, hidden), init);
  scramble_parameters(model, 77);  // fresh biases are zero, which would hide bugs

  std::map<std::string, Tensor> P;
  for (const auto& p : model.named_parameters()) P.emplace(p.name, p.tensor);

  // g = 0, so log1p(g) = 0 and the first linear layer passes only its bias.
  std::vector<double> h(hidden);
  for (std::size_t j = 0; j < hidden; ++j) h[j] = P.at("enc_mu.l0.b").at(0, j);
  double mean = 0.0;
  for (double v : h) mean += v;
  mean /= static_cast<double>(hidden);
  double var = 0.0;
  for (double v : h) var += (v - mean) * (v - mean);
  var /= static_cast<double>(hidden);
  for (std::size_t j = 0; j < hidden; ++j) {
    const double xhat = (h[j] - mean) / std::sqrt(var + 1e-12);
    h[j] = xhat * P.at("enc_mu.l0.ln_g").at(0, j) + P.at("enc_mu.l0.ln_b").at(0, j);
    h[j] = std::max(h[j], 0.0);  // relu
  }
  std::vector<double> mu(latent);
  for (std::size_t k = 0; k < latent; ++k) {
    mu[k] = P.at("enc_mu.l1.b").at(0, k);
    for (std::size_t j = 0; j < hidden; ++j) mu[k] += h[j] * P.at("enc_mu.l1.w").at(j, k);
  }

  const GaussianPosterior post = model.encode(nullptr, Tensor::zeros(1, genes));
  for (std::size_t k = 0; k < latent; ++k) {
    CHECK(post.mu.at(0, k) == doctest::Approx(mu[k]).epsilon(1e-12));
  }
}

TEST_CASE("decode produces valid ZINB heads and is batch-conditioned") {
  Rng init(6);
  ScviModel model(10, 3, tiny_cfg(4, 8), init);
  Rng zr(2);
  Tensor z = Tensor::zeros(5, 4);
  for (auto& v : z.data()) v = zr.normal();

  const std::vector<int> bids = {0, 1, 2, 0, 1};
  const auto dec = model.decode(nullptr, z, bids);
  const Tensor theta = model.theta(nullptr);

  for (std::size_t i = 0; i < 5; ++i) {
    double sum = 0.0;
    for (std::size_t g = 0; g < 10; ++g) {
      sum += dec.rho.at(i, g);
      CHECK(dec.rho.at(i, g) >= 0.0);
      CHECK(dec.pi.at(i, g) > 0.0);
      CHECK(dec.pi.at(i, g) < 1.0);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
  for (std::size_t g = 0; g < 10; ++g) CHECK(theta.at(0, g) > 0.0);

  SUBCASE("changing the batch id changes the decoder output") {
    Tensor z1 = Tensor::zeros(1, 4);
    for (std::size_t j = 0; j < 4; ++j) z1.at(0, j) = z.at(0, j);
    const auto a = model.decode(nullptr, z1, {0});
    const auto b = model.decode(nullptr, z1, {1});
    double max_diff = 0.0;
    for (std::size_t g = 0; g < 10; ++g) {
      max_diff = std::max(max_diff, std::abs(a.rho.at(0, g) - b.rho.at(0, g)));
    }
    CHECK(max_diff > 0.0);
  }
  SUBCASE("batch ids outside the range are rejected") {
    CHECK_THROWS_AS(model.decode(nullptr, z, {0, 1, 2, 0, 3}), UsageError);
    CHECK_THROWS_AS(model.decode(nullptr, z, {0, 1, -1, 0, 1}), UsageError);
    CHECK_THROWS_AS(model.decode(nullptr, z, {0, 1}), ShapeError);
  }
}

TEST_CASE("elbo_scvi matches a straight-line recomputation from its pieces") {
  Rng init(14);
  ScviModel model(10, 2, tiny_cfg(3, 6), init);
  scramble_parameters(model, 15);

  Rng data(3);
  Tensor counts = poisson_counts(6, 10, 2.5, data);
  for (std::size_t g = 0; g < 10; ++g) counts.at(4, g) = 0.0;  // degenerate all-zero spot
  const std::vector<int> bids = {0, 1, 0, 1, 0, 1};
  const double kl_weight = 0.7;

  Rng sample(5);
  const ElboParts parts = elbo_scvi(nullptr, model, counts, bids, kl_weight, sample);

  // Independent path: encoder posterior, the same reparametrized draw, the
  // scalar ZINB kernel, and the closed-form KL summed by hand.
  const GaussianPosterior post = model.encode(nullptr, counts);
  Rng replay(5);
  const Tensor z = manual_z(post, replay);
  const auto dec = model.decode(nullptr, z, bids);
  const Tensor theta = model.theta(nullptr);

  double elbo = 0.0, kl_mean = 0.0, recon_mean = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    const double recon = row_recon(counts, dec.rho, dec.pi, theta, i);
    const double kl = row_kl_standard(post, i);
    elbo += (recon - kl_weight * kl) / 6.0;
    recon_mean += recon / 6.0;
    kl_mean += kl / 6.0;
  }
  CHECK(parts.elbo.item() == doctest::Approx(elbo).epsilon(1e-9));
  CHECK(parts.recon_mean == doctest::Approx(recon_mean).epsilon(1e-9));
  CHECK(parts.kl_mean == doctest::Approx(kl_mean).epsilon(1e-9));

  SUBCASE("the KL term equals the closed-form KL of the encoder output exactly") {
    const Tensor kl_rows = gaussian_kl_standard_rows(nullptr, post);
    double mean = 0.0;
    for (std::size_t i = 0; i < 6; ++i) mean += kl_rows.at(i, 0) / 6.0;
    CHECK(parts.kl_mean == doctest::Approx(mean).epsilon(1e-12));
  }
  SUBCASE("an all-zero spot with pi near 1 has log-likelihood near zero from below") {
    const double ll = zinb_log_pmf(0.0, 1.0 - 1e-12, 3.0, 1.5);
    CHECK(ll <= 0.0);
    CHECK(ll == doctest::Approx(0.0).epsilon(1e-9));
  }
}

TEST_CASE("elbo improves over 200 training steps on a 50-spot set") {
  SynthConfig synth;
  synth.n_batches = 2;
  synth.n_classes = 3;
  synth.spots_per_batch = 25;
  synth.n_genes = 30;
  synth.latent_dim_true = 5;
  synth.image_feature_dim = 4;

  int improved = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    synth.seed = 100 + seed;
    const SpotDataset ds = generate_synthetic(synth).dataset;
    const Tensor counts = ds.counts_tensor();

    Rng init(seed * 31 + 1);
    ScviModel model(ds.n_genes, ds.n_batches, tiny_cfg(5, 16), init);
    AdamWConfig oc;
    oc.lr = 1e-3;
    AdamW opt(model.parameters(), oc);

    const auto eval_elbo = [&]() {
      Rng fixed(99);
      return elbo_scvi(nullptr, model, counts, ds.batch_ids, 1.0, fixed).elbo.item();
    };
    const double before = eval_elbo();
    Rng noise(seed * 7 + 3);
    for (int step = 0; step < 200; ++step) {
      opt.zero_grad();
      Tape tape;
      ElboParts parts = elbo_scvi(&tape, model, counts, ds.batch_ids, 1.0, noise, true);
      Tensor loss = neg(&tape, parts.elbo);
      tape.backward(loss);
      opt.step();
    }
    if (eval_elbo() > before) ++improved;
  }
  CHECK(improved >= 9);
}

TEST_CASE("kl annealing is 0 at step 0, monotone, and 1 after one epoch") {
  CHECK(kl_anneal_weight(0, 10) == 0.0);
  CHECK(kl_anneal_weight(10, 10) == 1.0);
  CHECK(kl_anneal_weight(25, 10) == 1.0);
  double prev = -1.0;
  for (std::size_t s = 0; s <= 30; ++s) {
    const double w = kl_anneal_weight(s, 10);
    CHECK(w >= prev);
    CHECK(w >= 0.0);
    CHECK(w <= 1.0);
    prev = w;
  }
  CHECK(kl_anneal_weight(5, 0) == 1.0);  // degenerate epoch length
}

TEST_CASE("make_minibatches partitions the spots and repairs single-patient chunks") {
  const auto check_partition = [](const std::vector<std::vector<std::size_t>>& chunks,
                                  std::size_t n) {
    std::set<std::size_t> seen;
    for (const auto& c : chunks) seen.insert(c.begin(), c.end());
    REQUIRE(seen.size() == n);
    std::size_t total = 0;
    for (const auto& c : chunks) total += c.size();
    REQUIRE(total == n);
  };

  SUBCASE("balanced two-patient data") {
    std::vector<int> ids(16);
    for (std::size_t i = 8; i < 16; ++i) ids[i] = 1;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      Rng shuffle(seed);
      const auto chunks = make_minibatches(16, 4, ids, shuffle);
      REQUIRE(chunks.size() == 4);
      check_partition(chunks, 16);
      for (const auto& c : chunks) {
        std::set<int> pats;
        for (std::size_t i : c) pats.insert(ids[i]);
        CHECK(pats.size() >= 2);
      }
    }
  }
  SUBCASE("skewed data where repair must not drain a donor chunk") {
    std::vector<int> ids(16, 0);
    for (std::size_t i = 12; i < 16; ++i) ids[i] = 1;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      Rng shuffle(seed);
      const auto chunks = make_minibatches(16, 4, ids, shuffle);
      check_partition(chunks, 16);
      for (const auto& c : chunks) {
        std::set<int> pats;
        for (std::size_t i : c) pats.insert(ids[i]);
        CHECK(pats.size() >= 2);
      }
    }
  }
  SUBCASE("single-patient data needs no repair") {
    std::vector<int> ids(10, 0);
    Rng shuffle(1);
    const auto chunks = make_minibatches(10, 4, ids, shuffle);
    REQUIRE(chunks.size() == 3);
    check_partition(chunks, 10);
    CHECK(chunks[0].size() == 4);
    CHECK(chunks[2].size() == 2);
  }
  SUBCASE("oversized batch gives one chunk") {
    std::vector<int> ids = {0, 1, 0};
    Rng shuffle(1);
    const auto chunks = make_minibatches(3, 100, ids, shuffle);
    REQUIRE(chunks.size() == 1);
    check_partition(chunks, 3);
  }
}

TEST_CASE("train_scvi is deterministic, leaves a finite trace, and keeps theta positive") {
  SynthConfig synth;
  synth.n_batches = 2;
  synth.n_classes = 2;
  synth.spots_per_batch = 20;
  synth.n_genes = 20;
  synth.latent_dim_true = 4;
  synth.image_feature_dim = 4;
  synth.seed = 5;
  const SpotDataset ds = generate_synthetic(synth).dataset;

  GeneEncoderConfig cfg = tiny_cfg(4, 8);
  cfg.batch_size = 16;
  cfg.epochs = 2;

  TempDir tmp("stc_scvi_train");
  TrainedScvi a = train_scvi(ds, cfg, RngPool(42));
  TrainedScvi b = train_scvi(ds, cfg, RngPool(42));
  {
    auto pa = a.model.named_parameters();
    auto pb = b.model.named_parameters();
    checkpoint::save((tmp.path / "a.stck").string(), pa);
    checkpoint::save((tmp.path / "b.stck").string(), pb);
  }
  CHECK(slurp(tmp.path / "a.stck") == slurp(tmp.path / "b.stck"));

  TrainedScvi c = train_scvi(ds, cfg, RngPool(43));
  {
    auto pc = c.model.named_parameters();
    checkpoint::save((tmp.path / "c.stck").string(), pc);
  }
  CHECK(slurp(tmp.path / "a.stck") != slurp(tmp.path / "c.stck"));

  const std::size_t steps_per_epoch = (ds.n_spots + cfg.batch_size - 1) / cfg.batch_size;
  REQUIRE(a.trace.size() == steps_per_epoch * cfg.epochs);
  CHECK(a.trace.front().kl_weight == 0.0);
  CHECK(a.trace.back().kl_weight == 1.0);
  double prev_w = -1.0;
  for (const auto& row : a.trace) {
    CHECK(std::isfinite(row.elbo));
    CHECK(std::isfinite(row.recon));
    CHECK(std::isfinite(row.kl));
    CHECK(row.kl_weight >= prev_w);
    prev_w = row.kl_weight;
  }

  const Tensor theta = a.model.theta(nullptr);
  for (std::size_t g = 0; g < ds.n_genes; ++g) {
    CHECK(theta.at(0, g) > 0.0);
    CHECK(std::isfinite(theta.at(0, g)));
  }

  SUBCASE("checkpoint round trip restores the exact model") {
    Rng init(1);
    ScviModel fresh(ds.n_genes, ds.n_batches, cfg, init);
    fresh.load_checkpoint((tmp.path / "a.stck").string());
    auto pf = fresh.named_parameters();
    checkpoint::save((tmp.path / "f.stck").string(), pf);
    CHECK(slurp(tmp.path / "a.stck") == slurp(tmp.path / "f.stck"));
  }
  SUBCASE("the trace file has one row per step plus a header") {
    const fs::path trace_path = tmp.path / "trace.tsv";
    write_trace(trace_path.string(), a.trace);
    std::ifstream is(trace_path);
    std::string line;
    std::size_t lines = 0;
    while (std::getline(is, line)) ++lines;
    CHECK(lines == a.trace.size() + 1);
  }
}

TEST_CASE("importance weighting with 64 samples does not fall below the one-sample bound") {
  Rng init(8);
  ScviModel model(12, 2, tiny_cfg(3, 8), init);
  Rng data(77);
  Tensor counts = poisson_counts(12, 12, 2.0, data);
  std::vector<int> bids(12);
  for (std::size_t i = 0; i < 12; ++i) bids[i] = static_cast<int>(i % 2);

  const GaussianPosterior post = model.encode(nullptr, counts);
  const Tensor theta = model.theta(nullptr);
  const std::size_t B = 12, K = 64;
  const double ln2pi = std::log(2.0 * 3.14159265358979323846);

  Rng noise(4);
  std::vector<std::vector<double>> logw(B);
  for (std::size_t k = 0; k < K; ++k) {
    const Tensor z = manual_z(post, noise);
    const auto dec = model.decode(nullptr, z, bids);
    for (std::size_t i = 0; i < B; ++i) {
      double lp = 0.0, lq = 0.0;
      for (std::size_t j = 0; j < z.cols(); ++j) {
        const double zj = z.at(i, j), mu = post.mu.at(i, j), lv = post.logvar.at(i, j);
        lp += -0.5 * (zj * zj + ln2pi);
        lq += -0.5 * ((zj - mu) * (zj - mu) / std::exp(lv) + lv + ln2pi);
      }
      logw[i].push_back(row_recon(counts, dec.rho, dec.pi, theta, i) + lp - lq);
    }
  }

  // One-sample analytic-KL ELBO on a fresh draw, per spot.
  Rng noise1(5);
  const Tensor z1 = manual_z(post, noise1);
  const auto dec1 = model.decode(nullptr, z1, bids);
  std::vector<double> diff(B);
  for (std::size_t i = 0; i < B; ++i) {
    double m = logw[i][0];
    for (double v : logw[i]) m = std::max(m, v);
    double acc = 0.0;
    for (double v : logw[i]) acc += std::exp(v - m);
    const double iwae = m + std::log(acc / static_cast<double>(K));
    const double elbo1 = row_recon(counts, dec1.rho, dec1.pi, theta, i) - row_kl_standard(post, i);
    diff[i] = iwae - elbo1;
  }
  double mean = 0.0, sq = 0.0;
  for (double d : diff) mean += d / static_cast<double>(B);
  for (double d : diff) sq += (d - mean) * (d - mean) / static_cast<double>(B - 1);
  const double se = std::sqrt(sq / static_cast<double>(B));
  CHECK(mean > -3.0 * se);
}

TEST_CASE("scanvi labeled objective reduces to the flat elbo when the hierarchy is bypassed") {
  Rng init(19);
  ScanviModel model(10, 2, 3, tiny_cfg(4, 8), init);
  scramble_parameters(model, 23);

  Rng data(6);
  const Tensor counts = poisson_counts(5, 10, 2.5, data);
  const std::vector<int> ys = {0, 2, 1, 1, 0};
  const std::vector<int> bids = {0, 1, 0, 1, 0};
  const double alpha = 0.9;

  model.bypass_z2 = true;
  Rng s1(7);
  const ScanviElboParts lab = elbo_scanvi_labeled(nullptr, model, counts, ys, bids, alpha, s1);

  // Flat ELBO on the same draw, plus the classification term recomputed
  // independently from the classifier logits.
  Rng s2(7);
  const ElboParts flat = elbo_scvi(nullptr, model.core(), counts, bids, 1.0, s2);
  const GaussianPosterior post = model.core().encode(nullptr, counts);
  Rng s3(7);
  const Tensor z = manual_z(post, s3);
  const Tensor logits = model.classifier_logits(nullptr, z);
  double class_ll = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    double m = logits.at(i, 0);
    for (std::size_t c = 0; c < 3; ++c) m = std::max(m, logits.at(i, c));
    double lse = 0.0;
    for (std::size_t c = 0; c < 3; ++c) lse += std::exp(logits.at(i, c) - m);
    class_ll += (logits.at(i, static_cast<std::size_t>(ys[i])) - m - std::log(lse)) / 5.0;
  }
  CHECK(lab.elbo.item() == doctest::Approx(flat.elbo.item() + alpha * class_ll).epsilon(1e-9));
  CHECK(lab.kl_z2_mean == 0.0);

  SUBCASE("engaging the hierarchy changes the objective") {
    model.bypass_z2 = false;
    Rng s4(7);
    const ScanviElboParts full = elbo_scanvi_labeled(nullptr, model, counts, ys, bids, alpha, s4);
    CHECK(full.elbo.item() != lab.elbo.item());
    CHECK(full.kl_z2_mean > 0.0);
  }
  SUBCASE("labels out of range are rejected") {
    Rng s5(7);
    CHECK_THROWS_AS(elbo_scanvi_labeled(nullptr, model, counts, {0, 1, 2, 3, 0}, bids, alpha, s5),
                    UsageError);
  }
}

TEST_CASE("alpha = 0 removes every classifier gradient") {
  Rng init(29);
  ScanviModel model(8, 2, 3, tiny_cfg(3, 6), init);
  Rng data(2);
  const Tensor counts = poisson_counts(4, 8, 2.0, data);
  const std::vector<int> ys = {0, 1, 2, 1};
  const std::vector<int> bids = {0, 1, 0, 1};

  for (auto& t : model.parameters()) t.zero_grad();
  Tape tape;
  Rng s(3);
  ScanviElboParts parts = elbo_scanvi_labeled(&tape, model, counts, ys, bids, 0.0, s);
  Tensor loss = neg(&tape, parts.elbo);
  tape.backward(loss);

  double classifier_norm = 0.0, core_norm = 0.0;
  for (const auto& p : model.named_parameters()) {
    double norm = 0.0;
    for (double g : p.tensor.grad()) norm += g * g;
    if (p.name.rfind("classifier.", 0) == 0) {
      classifier_norm += norm;
    } else if (p.name.rfind("enc_mu.", 0) == 0) {
      core_norm += norm;
    }
  }
  CHECK(classifier_norm == 0.0);
  CHECK(core_norm > 0.0);
}

TEST_CASE("scanvi labeled objective matches a straight-line re-derivation") {
  Rng init(41);
  ScanviModel model(8, 2, 3, tiny_cfg(3, 6), init);
  scramble_parameters(model, 43);

  Rng data(11);
  const Tensor counts = poisson_counts(4, 8, 3.0, data);
  const std::vector<int> ys = {2, 0, 1, 2};
  const std::vector<int> bids = {0, 1, 1, 0};
  const double alpha = 2.5;

  Rng s1(31);
  const ScanviElboParts parts = elbo_scanvi_labeled(nullptr, model, counts, ys, bids, alpha, s1);

  // Straight-line: every expectation replaced by its single reparametrized
  // draw, both divergences summed dimension by dimension, the ZINB term from
  // the scalar kernel.
  Rng s2(31);
  const GaussianPosterior post1 = model.core().encode(nullptr, counts);
  const Tensor z1 = manual_z(post1, s2);
  const GaussianPosterior post2 = model.encode_z2(nullptr, z1, ys);
  const Tensor z2 = manual_z(post2, s2);
  const GaussianPosterior prior = model.prior_z1(nullptr, z2, ys);
  const auto dec = model.core().decode(nullptr, z1, bids);
  const Tensor theta = model.core().theta(nullptr);
  const Tensor logits = model.classifier_logits(nullptr, z1);

  double expect = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    double m = logits.at(i, 0);
    for (std::size_t c = 0; c < 3; ++c) m = std::max(m, logits.at(i, c));
    double lse = 0.0;
    for (std::size_t c = 0; c < 3; ++c) lse += std::exp(logits.at(i, c) - m);
    const double log_qy = logits.at(i, static_cast<std::size_t>(ys[i])) - m - std::log(lse);
    expect += (row_recon(counts, dec.rho, dec.pi, theta, i) - row_kl_general(post1, prior, i) -
               row_kl_standard(post2, i) + alpha * log_qy) /
              4.0;
  }
  CHECK(parts.elbo.item() == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("scanvi unlabeled objective marginalizes the class exactly") {
  Rng init(53);
  ScanviModel model(8, 2, 3, tiny_cfg(3, 6), init);
  scramble_parameters(model, 59);
  Rng data(13);
  const Tensor counts = poisson_counts(3, 8, 2.5, data);
  const std::vector<int> bids = {0, 1, 0};

  Rng s1(17);
  const ScanviUnlabeledParts parts = elbo_scanvi_unlabeled(nullptr, model, counts, bids, s1);

  SUBCASE("the value is the q-weighted class mixture plus the entropy") {
    double total = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      double expected = 0.0, entropy = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        const double q = parts.q_y.at(i, c);
        expected += q * parts.class_terms.at(i, c);
        entropy -= q * std::log(q);
      }
      total += (expected + entropy) / 3.0;
    }
    CHECK(parts.elbo.item() == doctest::Approx(total).epsilon(1e-9));
    CHECK(parts.entropy_mean >= 0.0);
    CHECK(parts.entropy_mean <= std::log(3.0) + 1e-12);
  }
  SUBCASE("Monte-Carlo marginalization over sampled classes agrees within 3 SE") {
    Rng mc(97);
    const std::size_t draws = 10000;
    for (std::size_t i = 0; i < 3; ++i) {
      double exact = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        exact += parts.q_y.at(i, c) * parts.class_terms.at(i, c);
      }
      double var = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        const double d = parts.class_terms.at(i, c) - exact;
        var += parts.q_y.at(i, c) * d * d;
      }
      double acc = 0.0;
      for (std::size_t k = 0; k < draws; ++k) {
        const double u = mc.uniform();
        double cum = 0.0;
        std::size_t pick = 2;
        for (std::size_t c = 0; c < 3; ++c) {
          cum += parts.q_y.at(i, c);
          if (u < cum) {
            pick = c;
            break;
          }
        }
        acc += parts.class_terms.at(i, pick);
      }
      acc /= static_cast<double>(draws);
      const double se = std::sqrt(var / static_cast<double>(draws));
      CHECK(std::abs(acc - exact) <= 3.0 * se + 1e-12);
    }
  }
  SUBCASE("a single-class model collapses to the labeled objective with zero entropy") {
    Rng init1(61);
    ScanviModel one(8, 2, 1, tiny_cfg(3, 6), init1);
    Rng a(23), b(23);
    const ScanviUnlabeledParts u = elbo_scanvi_unlabeled(nullptr, one, counts, bids, a);
    const ScanviElboParts l =
        elbo_scanvi_labeled(nullptr, one, counts, {0, 0, 0}, bids, 3.0, b);
    CHECK(u.elbo.item() == doctest::Approx(l.elbo.item()).epsilon(1e-12));
    CHECK(u.entropy_mean == doctest::Approx(0.0).epsilon(1e-12));
  }
}

TEST_CASE("train_scanvi validates labels, is deterministic, and fits the classifier") {
  SynthConfig synth;
  synth.n_batches = 2;
  synth.n_classes = 3;
  synth.spots_per_batch = 30;
  synth.n_genes = 24;
  synth.latent_dim_true = 4;
  synth.image_feature_dim = 4;
  synth.labeled_fraction = 0.5;
  synth.seed = 3;
  SpotDataset ds = generate_synthetic(synth).dataset;

  GeneEncoderConfig cfg = tiny_cfg(4, 12);
  cfg.batch_size = 32;
  cfg.epochs = 2;

  SUBCASE("a class with no labeled spots is a configuration error naming it") {
    SpotDataset broken = ds;
    for (auto& y : broken.labels) {
      if (y == 2) y = -1;
    }
    CHECK_THROWS_WITH_AS(train_scanvi(broken, cfg, RngPool(1)),
                         doctest::Contains("class 2"), ConfigError);
  }
  SUBCASE("fixed seed gives identical checkpoints") {
    TempDir tmp("stc_scanvi_train");
    TrainedScanvi a = train_scanvi(ds, cfg, RngPool(42));
    TrainedScanvi b = train_scanvi(ds, cfg, RngPool(42));
    auto pa = a.model.named_parameters();
    auto pb = b.model.named_parameters();
    checkpoint::save((tmp.path / "a.stck").string(), pa);
    checkpoint::save((tmp.path / "b.stck").string(), pb);
    CHECK(slurp(tmp.path / "a.stck") == slurp(tmp.path / "b.stck"));

    const fs::path trace_path = tmp.path / "trace.tsv";
    write_scanvi_trace(trace_path.string(), a.trace);
    std::ifstream is(trace_path);
    std::string line;
    std::size_t lines = 0;
    while (std::getline(is, line)) ++lines;
    CHECK(lines == a.trace.size() + 1);
    for (const auto& row : a.trace) CHECK(std::isfinite(row.objective));
  }
  SUBCASE("with fully labeled data the objective is the pure labeled mean") {
    SynthConfig full = synth;
    full.labeled_fraction = 1.0;
    full.spots_per_batch = 20;
    const SpotDataset all = generate_synthetic(full).dataset;
    GeneEncoderConfig fast = cfg;
    fast.epochs = 1;
    TrainedScanvi t = train_scanvi(all, fast, RngPool(7));
    REQUIRE(!t.trace.empty());
    for (const auto& row : t.trace) {
      CHECK(row.unlabeled_elbo == 0.0);
      CHECK(row.objective ==
            doctest::Approx(row.labeled_elbo).epsilon(1e-12));
    }
  }
  SUBCASE("held-out classifier accuracy beats chance") {
    SynthConfig bigger = synth;
    bigger.spots_per_batch = 90;
    SpotDataset fitset = generate_synthetic(bigger).dataset;

    // Mask every third labeled spot and keep its truth for evaluation.
    std::vector<std::size_t> held;
    std::vector<int> truth;
    std::size_t seen = 0;
    for (std::size_t i = 0; i < fitset.n_spots; ++i) {
      if (!fitset.is_labeled(i)) continue;
      if (seen++ % 3 == 0) {
        held.push_back(i);
        truth.push_back(fitset.labels[i]);
        fitset.labels[i] = -1;
      }
    }
    REQUIRE(held.size() >= 20);

    GeneEncoderConfig fit = tiny_cfg(6, 24);
    fit.dropout_rate = 0.1;
    fit.batch_size = 32;
    fit.epochs = 60;
    fit.lr = 2e-3;
    TrainedScanvi t = train_scanvi(fitset, fit, RngPool(11));

    Tensor counts = Tensor::zeros(held.size(), fitset.n_genes);
    for (std::size_t r = 0; r < held.size(); ++r) {
      for (std::size_t g = 0; g < fitset.n_genes; ++g) counts.at(r, g) = fitset.count(held[r], g);
    }
    const Tensor z = t.model.core().latent(counts);
    const Tensor logits = t.model.classifier_logits(nullptr, z);
    std::size_t correct = 0;
    for (std::size_t r = 0; r < held.size(); ++r) {
      std::size_t arg = 0;
      for (std::size_t c = 1; c < 3; ++c) {
        if (logits.at(r, c) > logits.at(r, arg)) arg = c;
      }
      if (static_cast<int>(arg) == truth[r]) ++correct;
    }
    const double acc = static_cast<double>(correct) / static_cast<double>(held.size());
    CHECK(acc > 1.0 / 3.0);
  }
}

TEST_CASE("trained scvi latents forget the batch but keep the class structure") {
  SynthConfig synth;
  synth.n_batches = 3;
  synth.n_classes = 3;
  synth.spots_per_batch = 150;
  synth.n_genes = 50;
  synth.latent_dim_true = 6;
  synth.image_feature_dim = 8;
  synth.batch_effect_strength = 2.0;
  synth.labeled_fraction = 0.6;
  synth.seed = 21;
  const SpotDataset ds = generate_synthetic(synth).dataset;

  GeneEncoderConfig cfg = tiny_cfg(10, 48);
  cfg.dropout_rate = 0.1;
  cfg.lr = 2e-3;
  cfg.batch_size = 128;
  cfg.epochs = 12;
  TrainedScvi trained = train_scvi(ds, cfg, RngPool(3));

  const Tensor latent = trained.model.latent(ds.counts_tensor());
  std::vector<double> lat(latent.data());
  std::vector<double> logc(ds.n_spots * ds.n_genes);
  for (std::size_t i = 0; i < ds.n_spots; ++i) {
    for (std::size_t g = 0; g < ds.n_genes; ++g) {
      logc[i * ds.n_genes + g] = std::log1p(ds.count(i, g));
    }
  }
  std::vector<std::size_t> train_ids, test_ids;
  for (std::size_t i = 0; i < ds.n_spots; ++i) (i % 2 == 0 ? train_ids : test_ids).push_back(i);

  const double probe_latent =
      oracle::centroid_probe_ref(lat, cfg.latent_dim, ds.batch_ids, train_ids, test_ids);
  const double probe_logc =
      oracle::centroid_probe_ref(logc, ds.n_genes, ds.batch_ids, train_ids, test_ids);
  INFO("batch probe on latent ", probe_latent, " vs log counts ", probe_logc);
  CHECK(probe_logc - probe_latent >= 0.15);

  SUBCASE("same-class latent pairs are more aligned than cross-class pairs") {
    std::vector<std::size_t> labeled;
    for (std::size_t i = 0; i < ds.n_spots; ++i) {
      if (ds.is_labeled(i)) labeled.push_back(i);
    }
    REQUIRE(labeled.size() >= 50);
    const auto cosine = [&](std::size_t a, std::size_t b) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t j = 0; j < cfg.latent_dim; ++j) {
        dot += latent.at(a, j) * latent.at(b, j);
        na += latent.at(a, j) * latent.at(a, j);
        nb += latent.at(b, j) * latent.at(b, j);
      }
      return dot / std::sqrt(na * nb);
    };
    Rng pick(12);
    double same = 0.0, diff = 0.0;
    std::size_t n_same = 0, n_diff = 0;
    while (n_same < 100 || n_diff < 100) {
      const std::size_t a = labeled[pick.integer(labeled.size())];
      const std::size_t b = labeled[pick.integer(labeled.size())];
      if (a == b) continue;
      if (ds.labels[a] == ds.labels[b] && n_same < 100) {
        same += cosine(a, b);
        ++n_same;
      } else if (ds.labels[a] != ds.labels[b] && n_diff < 100) {
        diff += cosine(a, b);
        ++n_diff;
      }
    }
    CHECK(same / 100.0 > diff / 100.0);
  }
}
