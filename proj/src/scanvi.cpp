#include "stc/scanvi.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "stc/adamw.hpp"
#include "stc/checkpoint.hpp"
#include "stc/errors.hpp"
#include "stc/log.hpp"

namespace stc {

namespace {
MlpConfig head_cfg(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out,
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

void check_labels(const std::vector<int>& ys, std::size_t n_classes, const char* where) {
  for (int y : ys) {
    if (y < 0 || static_cast<std::size_t>(y) >= n_classes) {
      throw UsageError(std::string(where) + ": label " + std::to_string(y) + " out of range");
    }
  }
}
}  // namespace

ScanviModel::ScanviModel(std::size_t n_genes, std::size_t n_batches, std::size_t n_classes,
                         const GeneEncoderConfig& cfg, Rng& init_stream)
    : core_(n_genes, n_batches, cfg, init_stream),
      n_classes_(n_classes),
      classifier_("classifier", head_cfg(cfg.latent_dim, cfg.aux_hidden, n_classes, cfg),
                  init_stream),
      enc_z2_("enc_z2", head_cfg(cfg.latent_dim + n_classes, cfg.aux_hidden, 2 * cfg.latent_dim,
                                 cfg),
              init_stream),
      prior_net_("prior_net", head_cfg(cfg.latent_dim + n_classes, cfg.aux_hidden,
                                       2 * cfg.latent_dim, cfg),
                 init_stream) {
  if (n_classes_ == 0) throw ConfigError("ScanviModel: n_classes must be >= 1");
}

double ScanviModel::alpha() const {
  const double a = core_.config().scanvi_alpha;
  return a >= 0.0 ? a : 50.0 / static_cast<double>(n_classes_);
}

Tensor ScanviModel::classifier_logits(Tape* tape, const Tensor& z1, bool train,
                                      Rng* dropout_stream) const {
  return classifier_.forward(tape, z1, train, dropout_stream);
}

GaussianPosterior ScanviModel::encode_z2(Tape* tape, const Tensor& z1, const std::vector<int>& ys,
                                         bool train, Rng* dropout_stream) const {
  check_labels(ys, n_classes_, "encode_z2");
  if (z1.rows() != ys.size()) throw ShapeError("encode_z2: z1 rows and label count differ");
  const Tensor input = concat_cols(tape, {z1, one_hot_rows(ys, n_classes_)});
  const Tensor out = enc_z2_.forward(tape, input, train, dropout_stream);
  const std::size_t d = out.cols() / 2;
  return make_posterior(tape, slice_cols(tape, out, 0, d), slice_cols(tape, out, d, d));
}

GaussianPosterior ScanviModel::prior_z1(Tape* tape, const Tensor& z2, const std::vector<int>& ys,
                                        bool train, Rng* dropout_stream) const {
  check_labels(ys, n_classes_, "prior_z1");
  if (z2.rows() != ys.size()) throw ShapeError("prior_z1: z2 rows and label count differ");
  const Tensor input = concat_cols(tape, {z2, one_hot_rows(ys, n_classes_)});
  const Tensor out = prior_net_.forward(tape, input, train, dropout_stream);
  const std::size_t d = out.cols() / 2;
  return make_posterior(tape, slice_cols(tape, out, 0, d), slice_cols(tape, out, d, d));
}

std::vector<Param> ScanviModel::named_parameters() const {
  std::vector<Param> out = core_.named_parameters();
  for (const Mlp* m : {&classifier_, &enc_z2_, &prior_net_}) {
    const auto& ps = m->named_parameters();
    out.insert(out.end(), ps.begin(), ps.end());
  }
  return out;
}

std::vector<Tensor> ScanviModel::parameters() const {
  std::vector<Tensor> out;
  for (const auto& p : named_parameters()) out.push_back(p.tensor);
  return out;
}

void ScanviModel::load_checkpoint(const std::string& path) {
  auto params = named_parameters();
  checkpoint::load_into(path, params);
}

ScanviElboParts elbo_scanvi_labeled(Tape* tape, const ScanviModel& model, const Tensor& counts,
                                    const std::vector<int>& labels,
                                    const std::vector<int>& batch_ids, double alpha,
                                    Rng& sample_stream, bool train, Rng* dropout_stream) {
  if (counts.rows() != labels.size()) {
    throw ShapeError("elbo_scanvi_labeled: counts rows and label count differ");
  }
  check_labels(labels, model.n_classes(), "elbo_scanvi_labeled");
  const ScviModel& core = model.core();

  const GaussianPosterior post1 = core.encode(tape, counts, train, dropout_stream);
  const Tensor z1 = sample_reparam(tape, post1, sample_stream);

  Tensor kl1, kl2;
  if (model.bypass_z2) {
    kl1 = gaussian_kl_standard_rows(tape, post1);
    kl2 = Tensor::zeros(counts.rows(), 1);
  } else {
    const GaussianPosterior post2 = model.encode_z2(tape, z1, labels, train, dropout_stream);
    const Tensor z2 = sample_reparam(tape, post2, sample_stream);
    const GaussianPosterior prior = model.prior_z1(tape, z2, labels, train, dropout_stream);
    kl1 = gaussian_kl_rows(tape, post1, prior);
    kl2 = gaussian_kl_standard_rows(tape, post2);
  }

  const auto dec = core.decode(tape, z1, batch_ids, train, dropout_stream);
  const Tensor lib = sum_rows(tape, counts);
  const Tensor mu = mul(tape, lib, dec.rho);
  const Tensor ll = zinb_log_pmf_matrix(tape, counts, mu, core.theta(tape), dec.pi);
  const Tensor recon = sum_rows(tape, ll);

  const Tensor log_q = log_softmax_rows(tape, model.classifier_logits(tape, z1, train,
                                                                      dropout_stream));
  const Tensor class_ll =
      sum_rows(tape, mul(tape, log_q, one_hot_rows(labels, model.n_classes())));

  const Tensor per_spot = add(tape, sub(tape, sub(tape, recon, kl1), kl2),
                              scale(tape, class_ll, alpha));

  ScanviElboParts parts;
  parts.elbo = mean_all(tape, per_spot);
  const double n = static_cast<double>(counts.rows());
  for (std::size_t i = 0; i < counts.rows(); ++i) {
    parts.recon_mean += recon.at(i, 0) / n;
    parts.kl_z1_mean += kl1.at(i, 0) / n;
    parts.kl_z2_mean += kl2.at(i, 0) / n;
    parts.class_ll_mean += class_ll.at(i, 0) / n;
  }
  return parts;
}

ScanviUnlabeledParts elbo_scanvi_unlabeled(Tape* tape, const ScanviModel& model,
                                           const Tensor& counts,
                                           const std::vector<int>& batch_ids, Rng& sample_stream,
                                           bool train, Rng* dropout_stream) {
  const ScviModel& core = model.core();
  const std::size_t b = counts.rows();
  const std::size_t c = model.n_classes();

  const GaussianPosterior post1 = core.encode(tape, counts, train, dropout_stream);
  const Tensor z1 = sample_reparam(tape, post1, sample_stream);

  // The reconstruction does not depend on y, so it is shared across classes.
  const auto dec = core.decode(tape, z1, batch_ids, train, dropout_stream);
  const Tensor lib = sum_rows(tape, counts);
  const Tensor mu = mul(tape, lib, dec.rho);
  const Tensor recon =
      sum_rows(tape, zinb_log_pmf_matrix(tape, counts, mu, core.theta(tape), dec.pi));

  const Tensor logits = model.classifier_logits(tape, z1, train, dropout_stream);
  const Tensor q = softmax_rows(tape, logits);
  const Tensor log_q = log_softmax_rows(tape, logits);

  std::vector<Tensor> cols;
  cols.reserve(c);
  if (model.bypass_z2) {
    const Tensor shared = sub(tape, recon, gaussian_kl_standard_rows(tape, post1));
    for (std::size_t y = 0; y < c; ++y) cols.push_back(shared);
  } else {
    for (std::size_t y = 0; y < c; ++y) {
      const std::vector<int> ys(b, static_cast<int>(y));
      const GaussianPosterior post2 = model.encode_z2(tape, z1, ys, train, dropout_stream);
      const Tensor z2 = sample_reparam(tape, post2, sample_stream);
      const GaussianPosterior prior = model.prior_z1(tape, z2, ys, train, dropout_stream);
      cols.push_back(sub(tape, sub(tape, recon, gaussian_kl_rows(tape, post1, prior)),
                         gaussian_kl_standard_rows(tape, post2)));
    }
  }
  const Tensor class_terms = concat_cols(tape, cols);  // B x C

  const Tensor expected = sum_rows(tape, mul(tape, q, class_terms));
  const Tensor entropy = neg(tape, sum_rows(tape, mul(tape, q, log_q)));
  const Tensor per_spot = add(tape, expected, entropy);

  ScanviUnlabeledParts parts;
  parts.elbo = mean_all(tape, per_spot);
  parts.q_y = q.detach();
  parts.class_terms = class_terms.detach();
  for (std::size_t i = 0; i < b; ++i) {
    parts.entropy_mean += entropy.at(i, 0) / static_cast<double>(b);
  }
  return parts;
}

void write_scanvi_trace(const std::string& path, const std::vector<ScanviTraceRow>& trace) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError(path + ": cannot open trace file for writing");
  os << "step\tepoch\tobjective\tlabeled_elbo\tunlabeled_elbo\tclass_ll\n";
  for (const auto& r : trace) {
    char buf[192];
    std::snprintf(buf, sizeof buf, "%zu\t%zu\t%.10g\t%.10g\t%.10g\t%.10g\n", r.step, r.epoch,
                  r.objective, r.labeled_elbo, r.unlabeled_elbo, r.class_ll);
    os << buf;
  }
}

TrainedScanvi train_scanvi(const SpotDataset& ds, const GeneEncoderConfig& cfg,
                           const RngPool& pool) {
  cfg.validate();
  std::vector<std::size_t> labeled_per_class(ds.n_classes, 0);
  for (int y : ds.labels) {
    if (y >= 0) ++labeled_per_class[static_cast<std::size_t>(y)];
  }
  for (std::size_t k = 0; k < ds.n_classes; ++k) {
    if (labeled_per_class[k] == 0) {
      throw ConfigError("train_scanvi: class " + std::to_string(k) +
                        " has no labeled spots; every class needs at least one");
    }
  }

  const RngPool scoped = pool.derive("scanvi");
  Rng init = scoped.stream("init");
  Rng shuffle = scoped.stream("shuffle");
  Rng sample = scoped.stream("sample");
  Rng drop = scoped.stream("dropout");

  ScanviModel model(ds.n_genes, ds.n_batches, ds.n_classes, cfg, init);
  AdamWConfig opt_cfg;
  opt_cfg.lr = cfg.lr;
  opt_cfg.weight_decay = cfg.weight_decay;
  AdamW opt(model.parameters(), opt_cfg);
  const double alpha = model.alpha();

  const Tensor all_counts = ds.counts_tensor();
  auto gather = [&](const std::vector<std::size_t>& ids, Tensor& counts, std::vector<int>& bids,
                    std::vector<int>& ys) {
    counts = Tensor::zeros(ids.size(), ds.n_genes);
    bids.resize(ids.size());
    ys.resize(ids.size());
    for (std::size_t r = 0; r < ids.size(); ++r) {
      bids[r] = ds.batch_ids[ids[r]];
      ys[r] = ds.labels[ids[r]];
      for (std::size_t g = 0; g < ds.n_genes; ++g) counts.at(r, g) = all_counts.at(ids[r], g);
    }
  };

  std::vector<ScanviTraceRow> trace;
  std::size_t global_step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& chunk : make_minibatches(ds.n_spots, cfg.batch_size, ds.batch_ids, shuffle)) {
      std::vector<std::size_t> lab, unlab;
      for (std::size_t i : chunk) (ds.is_labeled(i) ? lab : unlab).push_back(i);

      opt.zero_grad();
      Tape tape;
      Tensor weighted = Tensor::scalar(0.0);
      ScanviTraceRow row;
      row.epoch = epoch;
      row.step = global_step;
      if (!lab.empty()) {
        Tensor counts;
        std::vector<int> bids, ys;
        gather(lab, counts, bids, ys);
        const ScanviElboParts parts =
            elbo_scanvi_labeled(&tape, model, counts, ys, bids, alpha, sample, true, &drop);
        weighted = add(&tape, weighted,
                       scale(&tape, parts.elbo, static_cast<double>(lab.size())));
        row.labeled_elbo = parts.elbo.item();
        row.class_ll = parts.class_ll_mean;
      }
      if (!unlab.empty()) {
        Tensor counts;
        std::vector<int> bids, ys;
        gather(unlab, counts, bids, ys);
        const ScanviUnlabeledParts parts =
            elbo_scanvi_unlabeled(&tape, model, counts, bids, sample, true, &drop);
        weighted = add(&tape, weighted,
                       scale(&tape, parts.elbo, static_cast<double>(unlab.size())));
        row.unlabeled_elbo = parts.elbo.item();
      }
      const Tensor objective = scale(&tape, weighted, 1.0 / static_cast<double>(chunk.size()));
      Tensor loss = neg(&tape, objective);
      loss.assert_finite("scanvi training loss");
      tape.backward(loss);
      opt.step();
      row.objective = objective.item();
      trace.push_back(row);
      ++global_step;
    }
    Log::info("scanvi epoch " + std::to_string(epoch + 1) + "/" + std::to_string(cfg.epochs) +
              " objective " + std::to_string(trace.back().objective));
  }
  return {std::move(model), std::move(trace)};
}

}  // namespace stc
