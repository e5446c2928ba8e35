#include "stc/contrastive.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>

#include "stc/adamw.hpp"
#include "stc/checkpoint.hpp"
#include "stc/errors.hpp"
#include "stc/log.hpp"

namespace stc {

LossKind parse_loss_kind(const std::string& name) {
  if (name == "si") return LossKind::si;
  if (name == "wsi") return LossKind::wsi;
  if (name == "swsi") return LossKind::swsi;
  throw ConfigError("unknown loss kind '" + name + "' (expected si, wsi, or swsi)");
}

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::si: return "si";
    case LossKind::wsi: return "wsi";
    case LossKind::swsi: return "swsi";
  }
  throw UsageError("invalid LossKind value");
}

void ContrastiveConfig::validate() const {
  if (d_proj == 0) throw ConfigError("contrastive: d_proj must be >= 1");
  if (img_out_dim == 0) throw ConfigError("contrastive: img_out_dim must be >= 1");
  if (tau <= 0.0) throw ConfigError("contrastive: tau must be positive");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw ConfigError("contrastive: dropout_rate must be in [0, 1)");
  }
  if (lr <= 0.0) throw ConfigError("contrastive: lr must be positive");
  if (weight_decay < 0.0) throw ConfigError("contrastive: weight_decay must be >= 0");
  if (batch_size == 0) throw ConfigError("contrastive: batch_size must be >= 1");
  if (epochs == 0) throw ConfigError("contrastive: epochs must be >= 1");
}

Projector::Projector(std::string name, std::size_t d_in, std::size_t d_proj, double dropout_rate,
                     Rng& init_stream)
    : name_(std::move(name)), d_in_(d_in), d_proj_(d_proj), dropout_rate_(dropout_rate) {
  if (d_in_ == 0 || d_proj_ == 0) throw ConfigError(name_ + ": projector dims must be >= 1");
  if (dropout_rate_ < 0.0 || dropout_rate_ >= 1.0) {
    throw ConfigError(name_ + ": dropout_rate must be in [0, 1)");
  }
  params_.push_back({name_ + ".fc1.w", Tensor::glorot(d_in_, d_proj_, init_stream)});
  params_.push_back({name_ + ".fc1.b", Tensor::zeros(1, d_proj_, true)});
  params_.push_back({name_ + ".fc2.w", Tensor::glorot(d_proj_, d_proj_, init_stream)});
  params_.push_back({name_ + ".fc2.b", Tensor::zeros(1, d_proj_, true)});
  params_.push_back({name_ + ".ln_g", Tensor::full(1, d_proj_, 1.0, true)});
  params_.push_back({name_ + ".ln_b", Tensor::zeros(1, d_proj_, true)});
}

Tensor Projector::forward(Tape* tape, const Tensor& x, bool train, Rng* dropout_stream) const {
  if (x.cols() != d_in_) {
    throw ShapeError(name_ + ": input has " + std::to_string(x.cols()) + " features, expected " +
                     std::to_string(d_in_));
  }
  const Tensor h = add(tape, matmul(tape, x, params_[0].tensor), params_[1].tensor);
  Tensor t = add(tape, matmul(tape, gelu(tape, h), params_[2].tensor), params_[3].tensor);
  if (dropout_rate_ > 0.0 && train) {
    t = dropout(tape, t, dropout_rate_, dropout_stream, true);
  }
  return layer_norm_rows(tape, add(tape, h, t), params_[4].tensor, params_[5].tensor);
}

namespace {
MlpConfig image_encoder_cfg(std::size_t image_dim, const ContrastiveConfig& cfg) {
  MlpConfig m;
  m.input_dim = image_dim;
  m.hidden_dims = cfg.img_hidden;
  m.output_dim = cfg.img_out_dim;
  m.activation = Activation::gelu;
  m.dropout_rate = cfg.dropout_rate;
  m.use_layer_norm = true;
  return m;
}
}  // namespace

ContrastiveModel::ContrastiveModel(std::size_t image_dim, std::size_t gene_latent_dim,
                                   const ContrastiveConfig& cfg, Rng& init_stream)
    : cfg_(cfg),
      image_encoder_("img_enc", image_encoder_cfg(image_dim, cfg), init_stream),
      p_v_("p_v", cfg.img_out_dim, cfg.d_proj, cfg.dropout_rate, init_stream),
      p_g_("p_g", gene_latent_dim, cfg.d_proj, cfg.dropout_rate, init_stream) {
  cfg_.validate();
}

std::vector<Param> ContrastiveModel::named_parameters() const {
  std::vector<Param> out = image_encoder_.named_parameters();
  for (const Projector* p : {&p_v_, &p_g_}) {
    const auto& ps = p->named_parameters();
    out.insert(out.end(), ps.begin(), ps.end());
  }
  return out;
}

std::vector<Tensor> ContrastiveModel::parameters() const {
  std::vector<Tensor> out;
  for (const auto& p : named_parameters()) out.push_back(p.tensor);
  return out;
}

void ContrastiveModel::load_checkpoint(const std::string& path) {
  auto params = named_parameters();
  checkpoint::load_into(path, params);
}

ProjectedPair project_pair(Tape* tape, const ContrastiveModel& model, const ScviModel& gene_model,
                           const Tensor& images, const Tensor& counts, bool train,
                           Rng* sample_stream, Rng* dropout_stream) {
  if (images.rows() != counts.rows()) {
    throw ShapeError("project_pair: image batch has " + std::to_string(images.rows()) +
                     " rows, gene batch has " + std::to_string(counts.rows()));
  }
  // Gene branch off-tape: the encoder is frozen by construction.
  const GaussianPosterior post = gene_model.encode(nullptr, counts);
  Tensor z;
  if (train) {
    if (sample_stream == nullptr) {
      throw UsageError("project_pair: train mode needs a sample stream");
    }
    z = sample_reparam(nullptr, post, *sample_stream);
  } else {
    z = post.mu;
  }
  const Tensor e_g = model.p_g().forward(tape, z, train, dropout_stream);
  const Tensor hv = model.image_encoder().forward(tape, images, train, dropout_stream);
  const Tensor e_v = model.p_v().forward(tape, hv, train, dropout_stream);
  return {e_v, e_g};
}

Tensor similarity(Tape* tape, const Tensor& a, const Tensor& b, double tau) {
  if (tau <= 0.0) throw ConfigError("similarity: tau must be positive");
  if (a.cols() != b.cols()) throw ShapeError("similarity: embedding widths differ");
  const auto normalize = [&](const Tensor& e, const char* which) {
    const Tensor norm = sqrt_(tape, sum_rows(tape, mul(tape, e, e)));
    for (std::size_t i = 0; i < norm.rows(); ++i) {
      if (norm.at(i, 0) == 0.0) {
        throw NumericError("similarity: zero-norm row " + std::to_string(i) + " in the " + which +
                           " embeddings");
      }
    }
    return divide(tape, e, norm);
  };
  const Tensor ah = normalize(a, "first");
  const Tensor bh = normalize(b, "second");
  return scale(tape, matmul(tape, ah, transpose(tape, bh)), 1.0 / tau);
}

namespace {
void check_square(const Tensor& s, const char* who) {
  if (s.rows() != s.cols()) {
    throw ShapeError(std::string(who) + ": similarity matrix must be square, got " +
                     std::to_string(s.rows()) + "x" + std::to_string(s.cols()));
  }
}
}  // namespace

Tensor loss_si(Tape* tape, const Tensor& s_vg) {
  check_square(s_vg, "loss_si");
  const Tensor lv = mean_all(tape, take_diag(tape, log_softmax_rows(tape, s_vg)));
  const Tensor lg = mean_all(tape, take_diag(tape, log_softmax_rows(tape, transpose(tape, s_vg))));
  return scale(tape, add(tape, lv, lg), -0.5);
}

Tensor loss_wsi(Tape* tape, const Tensor& s_vg, const Tensor& s_vv, const Tensor& s_gg,
                double tau) {
  check_square(s_vg, "loss_wsi");
  if (!s_vv.same_shape(s_vg) || !s_gg.same_shape(s_vg)) {
    throw ShapeError("loss_wsi: all similarity matrices must share one shape");
  }
  if (tau <= 0.0) throw ConfigError("loss_wsi: tau must be positive");
  const Tensor w =
      take_diag(tape, softmax_rows(tape, scale(tape, add(tape, s_vv, s_gg), 0.25 / tau)));
  const Tensor lv = mean_all(tape, mul(tape, w, take_diag(tape, log_softmax_rows(tape, s_vg))));
  const Tensor lg = mean_all(
      tape, mul(tape, w, take_diag(tape, log_softmax_rows(tape, transpose(tape, s_vg)))));
  return scale(tape, add(tape, lv, lg), -0.5);
}

Tensor loss_swsi(Tape* tape, const Tensor& s_vg, const Tensor& s_vv, const Tensor& s_gg) {
  check_square(s_vg, "loss_swsi");
  if (!s_vv.same_shape(s_vg) || !s_gg.same_shape(s_vg)) {
    throw ShapeError("loss_swsi: all similarity matrices must share one shape");
  }
  const Tensor wv = take_diag(tape, softmax_rows(tape, s_vv));
  const Tensor wg = take_diag(tape, softmax_rows(tape, s_gg));
  const Tensor lv = mean_all(tape, mul(tape, wv, take_diag(tape, log_softmax_rows(tape, s_vg))));
  const Tensor lg = mean_all(
      tape, mul(tape, wg, take_diag(tape, log_softmax_rows(tape, transpose(tape, s_vg)))));
  return scale(tape, add(tape, lv, lg), -0.5);
}

void write_contrastive_trace(const std::string& path,
                             const std::vector<ContrastiveTraceRow>& trace) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError(path + ": cannot open trace file for writing");
  os << "step\tepoch\tloss_kind\tloss\tmean_diag_sim\tmean_offdiag_sim\n";
  for (const auto& r : trace) {
    char buf[192];
    std::snprintf(buf, sizeof buf, "%zu\t%zu\t%s\t%.10g\t%.10g\t%.10g\n", r.step, r.epoch,
                  to_string(r.kind).c_str(), r.loss, r.mean_diag_sim, r.mean_offdiag_sim);
    os << buf;
  }
}

namespace {
Tensor pick_loss(Tape* tape, LossKind kind, double tau, const Tensor& s_vg, const Tensor& s_vv,
                 const Tensor& s_gg) {
  switch (kind) {
    case LossKind::si: return loss_si(tape, s_vg);
    case LossKind::wsi: return loss_wsi(tape, s_vg, s_vv, s_gg, tau);
    case LossKind::swsi: return loss_swsi(tape, s_vg, s_vv, s_gg);
  }
  throw UsageError("invalid LossKind value");
}
}  // namespace

namespace {
// Shared training loop. `gene_embed(chunk, sample_stream)` produces the
// frozen gene-side representation for one minibatch; everything on top of it
// (projectors, image encoder) trains.
TrainedContrastive train_contrastive_impl(
    const SpotDataset& ds, std::size_t gene_dim, const ContrastiveConfig& cfg,
    const RngPool& pool,
    const std::function<Tensor(const std::vector<std::size_t>&, Rng&)>& gene_embed) {
  const RngPool scoped = pool.derive("contrastive");
  Rng init = scoped.stream("init");
  Rng shuffle = scoped.stream("shuffle");
  Rng sample = scoped.stream("sample");
  Rng drop = scoped.stream("dropout");

  ContrastiveModel model(ds.image_dim, gene_dim, cfg, init);
  AdamWConfig opt_cfg;
  opt_cfg.lr = cfg.lr;
  opt_cfg.weight_decay = cfg.weight_decay;
  AdamW opt(model.parameters(), opt_cfg);

  const Tensor all_images = ds.image_tensor();

  std::vector<ContrastiveTraceRow> trace;
  std::size_t global_step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& chunk : make_minibatches(ds.n_spots, cfg.batch_size, ds.batch_ids, shuffle)) {
      Tensor images = Tensor::zeros(chunk.size(), ds.image_dim);
      for (std::size_t r = 0; r < chunk.size(); ++r) {
        for (std::size_t d = 0; d < ds.image_dim; ++d) images.at(r, d) = all_images.at(chunk[r], d);
      }
      opt.zero_grad();
      Tape tape;
      const Tensor z = gene_embed(chunk, sample);
      const Tensor e_g = model.p_g().forward(&tape, z, true, &drop);
      const Tensor hv = model.image_encoder().forward(&tape, images, true, &drop);
      const Tensor e_v = model.p_v().forward(&tape, hv, true, &drop);
      const Tensor s_vg = similarity(&tape, e_v, e_g, cfg.tau);
      Tensor s_vv, s_gg;
      if (cfg.loss_kind != LossKind::si) {
        s_vv = similarity(&tape, e_v, e_v, cfg.tau);
        s_gg = similarity(&tape, e_g, e_g, cfg.tau);
      }
      Tensor loss = pick_loss(&tape, cfg.loss_kind, cfg.tau, s_vg, s_vv, s_gg);
      loss.assert_finite("contrastive training loss");
      tape.backward(loss);
      opt.step();

      ContrastiveTraceRow row;
      row.epoch = epoch;
      row.step = global_step++;
      row.kind = cfg.loss_kind;
      row.loss = loss.item();
      const std::size_t b = s_vg.rows();
      double diag = 0.0, off = 0.0;
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < b; ++j) {
          (i == j ? diag : off) += s_vg.at(i, j);
        }
      }
      row.mean_diag_sim = diag / static_cast<double>(b);
      row.mean_offdiag_sim = b > 1 ? off / static_cast<double>(b * b - b) : 0.0;
      trace.push_back(row);
    }
    Log::info("contrastive epoch " + std::to_string(epoch + 1) + "/" +
              std::to_string(cfg.epochs) + " loss " + std::to_string(trace.back().loss));
  }
  return {std::move(model), std::move(trace)};
}
}  // namespace

TrainedContrastive train_contrastive(const SpotDataset& ds, const ScviModel& gene_model,
                                     const ContrastiveConfig& cfg, const RngPool& pool) {
  cfg.validate();
  if (ds.n_genes != gene_model.n_genes()) {
    throw UsageError("train_contrastive: dataset and gene model disagree on gene count");
  }
  const Tensor all_counts = ds.counts_tensor();
  const auto gene_embed = [&](const std::vector<std::size_t>& chunk, Rng& sample) {
    Tensor counts = Tensor::zeros(chunk.size(), ds.n_genes);
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      for (std::size_t g = 0; g < ds.n_genes; ++g) counts.at(r, g) = all_counts.at(chunk[r], g);
    }
    return sample_reparam(nullptr, gene_model.encode(nullptr, counts), sample);
  };
  return train_contrastive_impl(ds, gene_model.latent_dim(), cfg, pool, gene_embed);
}

TrainedContrastive train_contrastive(const SpotDataset& ds, const Tensor& gene_features,
                                     const ContrastiveConfig& cfg, const RngPool& pool) {
  cfg.validate();
  if (gene_features.rows() != ds.n_spots) {
    throw ShapeError("train_contrastive: feature table has " +
                     std::to_string(gene_features.rows()) + " rows for " +
                     std::to_string(ds.n_spots) + " spots");
  }
  gene_features.assert_finite("train_contrastive gene features");
  const auto gene_embed = [&](const std::vector<std::size_t>& chunk, Rng&) {
    Tensor rows = Tensor::zeros(chunk.size(), gene_features.cols());
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      for (std::size_t c = 0; c < gene_features.cols(); ++c) {
        rows.at(r, c) = gene_features.at(chunk[r], c);
      }
    }
    return rows;
  };
  return train_contrastive_impl(ds, gene_features.cols(), cfg, pool, gene_embed);
}

}  // namespace stc
