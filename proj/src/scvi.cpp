#include "stc/scvi.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "stc/adamw.hpp"
#include "stc/checkpoint.hpp"
#include "stc/errors.hpp"
#include "stc/log.hpp"

namespace stc {

namespace {
constexpr double kPiEps = 1e-8;  // sigmoid output clamp for the inflation head

MlpConfig mlp_cfg(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out,
                  const GeneEncoderConfig& cfg) {
  MlpConfig m;
  m.input_dim = in;
  m.hidden_dims = hidden;
  m.output_dim = out;
  m.activation = cfg.activation;
  m.dropout_rate = cfg.dropout_rate;
  m.use_layer_norm = true;
  return m;
}
}  // namespace

void GeneEncoderConfig::validate() const {
  if (latent_dim == 0) throw ConfigError("gene_encoder: latent_dim must be >= 1");
  if (lr <= 0.0) throw ConfigError("gene_encoder: lr must be positive");
  if (batch_size == 0) throw ConfigError("gene_encoder: batch_size must be >= 1");
  if (epochs == 0) throw ConfigError("gene_encoder: epochs must be >= 1");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw ConfigError("gene_encoder: dropout_rate must be in [0, 1)");
  }
  if (weight_decay < 0.0) throw ConfigError("gene_encoder: weight_decay must be >= 0");
}

ScviModel::ScviModel(std::size_t n_genes, std::size_t n_batches, const GeneEncoderConfig& cfg,
                     Rng& init_stream)
    : n_genes_(n_genes),
      n_batches_(n_batches),
      cfg_(cfg),
      enc_mu_("enc_mu", mlp_cfg(n_genes, cfg.enc_hidden, cfg.latent_dim, cfg), init_stream),
      enc_logvar_("enc_logvar", mlp_cfg(n_genes, cfg.enc_hidden, cfg.latent_dim, cfg),
                  init_stream),
      dec_rho_("dec_rho", mlp_cfg(cfg.latent_dim + n_batches, cfg.dec_hidden, n_genes, cfg),
               init_stream),
      dec_pi_("dec_pi", mlp_cfg(cfg.latent_dim + n_batches, cfg.dec_hidden, n_genes, cfg),
              init_stream),
      log_theta_{"log_theta", Tensor::zeros(1, n_genes, true)} {
  cfg_.validate();
  if (n_genes_ == 0 || n_batches_ == 0) {
    throw ConfigError("ScviModel: n_genes and n_batches must be >= 1");
  }
}

GaussianPosterior ScviModel::encode(Tape* tape, const Tensor& counts, bool train,
                                    Rng* dropout_stream) const {
  if (counts.cols() != n_genes_) {
    throw ShapeError("encode: counts have " + std::to_string(counts.cols()) +
                     " genes, model expects " + std::to_string(n_genes_));
  }
  const Tensor x = log1p_(tape, counts);
  const Tensor mu = enc_mu_.forward(tape, x, train, dropout_stream);
  const Tensor raw_logvar = enc_logvar_.forward(tape, x, train, dropout_stream);
  return make_posterior(tape, mu, raw_logvar);
}

ScviModel::Decoded ScviModel::decode(Tape* tape, const Tensor& z,
                                     const std::vector<int>& batch_ids, bool train,
                                     Rng* dropout_stream) const {
  if (z.rows() != batch_ids.size()) {
    throw ShapeError("decode: z rows and batch id count differ");
  }
  for (int b : batch_ids) {
    if (b < 0 || static_cast<std::size_t>(b) >= n_batches_) {
      throw UsageError("decode: batch id " + std::to_string(b) + " out of range");
    }
  }
  const Tensor input = concat_cols(tape, {z, one_hot_rows(batch_ids, n_batches_)});
  const Tensor rho = softmax_rows(tape, dec_rho_.forward(tape, input, train, dropout_stream));
  const Tensor pi = clamp(tape, sigmoid(tape, dec_pi_.forward(tape, input, train, dropout_stream)),
                          kPiEps, 1.0 - kPiEps);
  return {rho, pi};
}

Tensor ScviModel::theta(Tape* tape) const { return exp_(tape, log_theta_.tensor); }

Tensor ScviModel::latent(const Tensor& counts) const {
  return encode(nullptr, counts, false, nullptr).mu;
}

std::vector<Param> ScviModel::named_parameters() const {
  std::vector<Param> out;
  for (const Mlp* m : {&enc_mu_, &enc_logvar_, &dec_rho_, &dec_pi_}) {
    const auto& ps = m->named_parameters();
    out.insert(out.end(), ps.begin(), ps.end());
  }
  out.push_back(log_theta_);
  return out;
}

std::vector<Tensor> ScviModel::parameters() const {
  std::vector<Tensor> out;
  for (const auto& p : named_parameters()) out.push_back(p.tensor);
  return out;
}

void ScviModel::load_checkpoint(const std::string& path) {
  auto params = named_parameters();
  checkpoint::load_into(path, params);
}

ElboParts elbo_scvi(Tape* tape, const ScviModel& model, const Tensor& counts,
                    const std::vector<int>& batch_ids, double kl_weight, Rng& sample_stream,
                    bool train, Rng* dropout_stream) {
  const GaussianPosterior post = model.encode(tape, counts, train, dropout_stream);
  const Tensor z = sample_reparam(tape, post, sample_stream);
  const auto dec = model.decode(tape, z, batch_ids, train, dropout_stream);

  const Tensor lib = sum_rows(tape, counts);  // B x 1, constant
  const Tensor mu = mul(tape, lib, dec.rho);
  const Tensor ll = zinb_log_pmf_matrix(tape, counts, mu, model.theta(tape), dec.pi);
  const Tensor recon = sum_rows(tape, ll);                      // B x 1
  const Tensor kl = gaussian_kl_standard_rows(tape, post);      // B x 1

  const Tensor per_spot = sub(tape, recon, scale(tape, kl, kl_weight));
  const Tensor elbo = mean_all(tape, per_spot);

  double recon_mean = 0.0, kl_mean = 0.0;
  for (std::size_t i = 0; i < recon.rows(); ++i) {
    recon_mean += recon.at(i, 0);
    kl_mean += kl.at(i, 0);
  }
  recon_mean /= static_cast<double>(recon.rows());
  kl_mean /= static_cast<double>(kl.rows());
  return {elbo, recon_mean, kl_mean};
}

double kl_anneal_weight(std::size_t global_step, std::size_t steps_per_epoch) {
  if (steps_per_epoch == 0) return 1.0;
  const double w = static_cast<double>(global_step) / static_cast<double>(steps_per_epoch);
  return w >= 1.0 ? 1.0 : w;
}

std::vector<std::vector<std::size_t>> make_minibatches(std::size_t n, std::size_t batch_size,
                                                       const std::vector<int>& batch_ids,
                                                       Rng& shuffle_stream) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i > 1; --i) {
    std::swap(order[i - 1], order[shuffle_stream.integer(i)]);
  }
  std::vector<std::vector<std::size_t>> chunks;
  for (std::size_t start = 0; start < n; start += batch_size) {
    chunks.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                        order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch_size)));
  }
  // Repair single-patient chunks when the data has more than one patient.
  const bool multi_patient =
      n > 0 && std::any_of(batch_ids.begin(), batch_ids.end(),
                           [&](int b) { return b != batch_ids[0]; });
  if (multi_patient && chunks.size() > 1) {
    for (std::size_t c = 0; c < chunks.size(); ++c) {
      auto& chunk = chunks[c];
      const int first = batch_ids[chunk[0]];
      const bool uniform = std::all_of(chunk.begin(), chunk.end(),
                                       [&](std::size_t i) { return batch_ids[i] == first; });
      if (!uniform) continue;
      // Swap in one spot from another patient. Prefer donor chunks that keep
      // at least one differing element of their own, so the donor does not
      // become single-patient in turn.
      std::size_t* donor = nullptr;
      for (int pass = 0; pass < 2 && donor == nullptr; ++pass) {
        for (std::size_t o = 0; o < chunks.size() && donor == nullptr; ++o) {
          if (o == c) continue;
          const std::size_t differing =
              static_cast<std::size_t>(std::count_if(chunks[o].begin(), chunks[o].end(),
                                                     [&](std::size_t i) {
                                                       return batch_ids[i] != first;
                                                     }));
          if (differing == 0 || (pass == 0 && differing < 2)) continue;
          for (auto& other : chunks[o]) {
            if (batch_ids[other] != first) {
              donor = &other;
              break;
            }
          }
        }
      }
      if (donor != nullptr) std::swap(chunk[0], *donor);
    }
  }
  return chunks;
}

void write_trace(const std::string& path, const std::vector<TraceRow>& trace) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError(path + ": cannot open trace file for writing");
  os << "step\tepoch\telbo\trecon\tkl\tkl_weight\n";
  char buf[200];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%zu\t%zu\t%.10g\t%.10g\t%.10g\t%.6g\n", r.step, r.epoch,
                  r.elbo, r.recon, r.kl, r.kl_weight);
    os << buf;
  }
}

TrainedScvi train_scvi(const SpotDataset& ds, const GeneEncoderConfig& cfg, const RngPool& pool) {
  cfg.validate();
  const RngPool scoped = pool.derive("scvi");
  Rng init = scoped.stream("init");
  Rng shuffle = scoped.stream("shuffle");
  Rng sample = scoped.stream("sample");
  Rng drop = scoped.stream("dropout");

  ScviModel model(ds.n_genes, ds.n_batches, cfg, init);
  AdamWConfig ocfg;
  ocfg.lr = cfg.lr;
  ocfg.weight_decay = cfg.weight_decay;
  AdamW opt(model.parameters(), ocfg);

  const Tensor all_counts = ds.counts_tensor();
  const std::size_t steps_per_epoch = (ds.n_spots + cfg.batch_size - 1) / cfg.batch_size;

  std::vector<TraceRow> trace;
  std::size_t global_step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& chunk : make_minibatches(ds.n_spots, cfg.batch_size, ds.batch_ids, shuffle)) {
      Tensor counts = Tensor::zeros(chunk.size(), ds.n_genes);
      std::vector<int> bids(chunk.size());
      for (std::size_t r = 0; r < chunk.size(); ++r) {
        bids[r] = ds.batch_ids[chunk[r]];
        for (std::size_t g = 0; g < ds.n_genes; ++g) {
          counts.at(r, g) = all_counts.at(chunk[r], g);
        }
      }
      const double w = kl_anneal_weight(global_step, steps_per_epoch);
      opt.zero_grad();
      Tape tape;
      ElboParts parts = elbo_scvi(&tape, model, counts, bids, w, sample, true, &drop);
      Tensor loss = neg(&tape, parts.elbo);
      loss.assert_finite("scvi training loss");
      tape.backward(loss);
      opt.step();
      trace.push_back({epoch, global_step, parts.elbo.item(), parts.recon_mean, parts.kl_mean, w});
      ++global_step;
    }
    Log::info("scvi epoch " + std::to_string(epoch + 1) + "/" + std::to_string(cfg.epochs) +
              " elbo " + std::to_string(trace.back().elbo));
  }
  return {std::move(model), std::move(trace)};
}

}  // namespace stc
