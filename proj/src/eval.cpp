#include "stc/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <thread>
#include <utility>

#include "stc/adamw.hpp"
#include "stc/errors.hpp"
#include "stc/scanvi.hpp"

namespace stc {

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void check_pair(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.size() != labels.size()) {
    throw ShapeError("metrics: " + std::to_string(preds.size()) + " predictions vs " +
                     std::to_string(labels.size()) + " labels");
  }
  if (preds.empty()) throw UsageError("metrics: empty prediction set");
}

void fisher_yates(std::vector<std::size_t>& order, Rng& stream) {
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[stream.integer(i)]);
  }
}

// Indices (into the full row range) of the k nearest candidate rows to row
// `self`, self excluded, squared-Euclidean distance ties broken by the lower
// row index.
std::vector<std::size_t> k_nearest_rows(const Tensor& x, std::size_t self,
                                        const std::vector<std::size_t>& candidates,
                                        std::size_t k) {
  const std::size_t d = x.cols();
  const double* base = x.data().data();
  const double* a = base + self * d;
  std::vector<std::pair<double, std::size_t>> dist;
  dist.reserve(candidates.size());
  for (std::size_t j : candidates) {
    if (j == self) continue;
    const double* b = base + j * d;
    double d2 = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double diff = a[c] - b[c];
      d2 += diff * diff;
    }
    dist.emplace_back(d2, j);
  }
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = dist[i].second;
  return out;
}

// Cyclic Jacobi eigendecomposition of a symmetric matrix. `a` is d*d
// row-major and is destroyed; eigenvectors come out as columns of `v`.
void jacobi_eigh(std::size_t d, std::vector<double>& a, std::vector<double>& v,
                 std::vector<double>& w) {
  const auto idx = [d](std::size_t r, std::size_t c) { return r * d + c; };
  v.assign(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) v[idx(i, i)] = 1.0;
  for (int sweep = 0; sweep < 128; ++sweep) {
    double off = 0.0, diag = 0.0;
    for (std::size_t p = 0; p < d; ++p) {
      diag += a[idx(p, p)] * a[idx(p, p)];
      for (std::size_t q = p + 1; q < d; ++q) off += a[idx(p, q)] * a[idx(p, q)];
    }
    if (off <= 1e-26 * (diag + 1e-300)) break;
    for (std::size_t p = 0; p < d; ++p) {
      for (std::size_t q = p + 1; q < d; ++q) {
        const double apq = a[idx(p, q)];
        if (apq == 0.0) continue;
        const double app = a[idx(p, p)], aqq = a[idx(q, q)];
        const double theta = (aqq - app) / (2.0 * apq);
        const double t =
            (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t r = 0; r < d; ++r) {
          if (r == p || r == q) continue;
          const double arp = a[idx(r, p)], arq = a[idx(r, q)];
          a[idx(r, p)] = a[idx(p, r)] = c * arp - s * arq;
          a[idx(r, q)] = a[idx(q, r)] = s * arp + c * arq;
        }
        a[idx(p, p)] = app - t * apq;
        a[idx(q, q)] = aqq + t * apq;
        a[idx(p, q)] = a[idx(q, p)] = 0.0;
        for (std::size_t r = 0; r < d; ++r) {
          const double vrp = v[idx(r, p)], vrq = v[idx(r, q)];
          v[idx(r, p)] = c * vrp - s * vrq;
          v[idx(r, q)] = s * vrp + c * vrq;
        }
      }
    }
  }
  w.resize(d);
  for (std::size_t i = 0; i < d; ++i) w[i] = a[idx(i, i)];
}

// Runs `work(0..n_jobs)` on up to `n_threads` workers (0 = hardware count).
// The first exception wins; remaining workers stop picking up jobs.
void parallel_jobs(std::size_t n_jobs, std::size_t n_threads,
                   const std::function<void(std::size_t)>& work) {
  if (n_threads == 0) n_threads = std::thread::hardware_concurrency();
  if (n_threads == 0) n_threads = 1;
  n_threads = std::min(n_threads, n_jobs);
  if (n_threads <= 1) {
    for (std::size_t j = 0; j < n_jobs; ++j) work(j);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::vector<std::exception_ptr> errors(n_threads);
  std::vector<std::thread> workers;
  workers.reserve(n_threads);
  for (std::size_t t = 0; t < n_threads; ++t) {
    workers.emplace_back([&, t] {
      try {
        for (std::size_t j = next++; j < n_jobs && !failed; j = next++) work(j);
      } catch (...) {
        errors[t] = std::current_exception();
        failed = true;
      }
    });
  }
  for (auto& worker : workers) worker.join();
  for (const auto& err : errors) {
    if (err) std::rethrow_exception(err);
  }
}

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v, double mean) {
  if (v.size() < 2) return 0.0;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

LouoAggregate aggregate_range(const std::vector<FoldResult>& all, std::size_t lo,
                              std::size_t hi) {
  std::vector<double> acc, f1, mix;
  for (std::size_t i = lo; i < hi; ++i) {
    acc.push_back(all[i].accuracy);
    f1.push_back(all[i].macro_f1);
    mix.push_back(all[i].batch_mixing);
  }
  LouoAggregate agg;
  agg.acc_mean = mean_of(acc);
  agg.acc_std = sample_std(acc, agg.acc_mean);
  agg.f1_mean = mean_of(f1);
  agg.f1_std = sample_std(f1, agg.f1_mean);
  agg.mixing_mean = mean_of(mix);
  agg.mixing_std = sample_std(mix, agg.mixing_mean);
  return agg;
}

}  // namespace

// ---------------------------------------------------------------------------
// Embeddings

std::string to_string(EmbeddingSource source) {
  switch (source) {
    case EmbeddingSource::image: return "image";
    case EmbeddingSource::gene: return "gene";
    case EmbeddingSource::latent: return "latent";
  }
  throw UsageError("to_string: invalid EmbeddingSource");
}

EmbeddingSource parse_embedding_source(const std::string& text) {
  if (text == "image") return EmbeddingSource::image;
  if (text == "gene") return EmbeddingSource::gene;
  if (text == "latent") return EmbeddingSource::latent;
  throw ConfigError("unknown embedding source '" + text +
                    "' (expected image, gene, or latent)");
}

void EmbeddingSet::validate() const {
  const std::size_t n = embeddings.rows();
  if (batch_ids.size() != n || labels.size() != n ||
      (!spot_ids.empty() && spot_ids.size() != n)) {
    throw ShapeError("EmbeddingSet: per-spot arrays disagree with " + std::to_string(n) +
                     " embedding rows");
  }
  embeddings.assert_finite("EmbeddingSet embeddings");
  for (int b : batch_ids) {
    if (b < 0) throw DataError("EmbeddingSet: negative batch id");
  }
  for (int y : labels) {
    if (y < -1) throw DataError("EmbeddingSet: label below -1");
  }
}

// ---------------------------------------------------------------------------
// Classification metrics

std::vector<std::vector<std::size_t>> confusion_matrix(const std::vector<int>& preds,
                                                       const std::vector<int>& labels,
                                                       std::size_t n_classes) {
  check_pair(preds, labels);
  std::vector<std::vector<std::size_t>> m(n_classes, std::vector<std::size_t>(n_classes, 0));
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int p = preds[i], y = labels[i];
    if (p < 0 || static_cast<std::size_t>(p) >= n_classes || y < 0 ||
        static_cast<std::size_t>(y) >= n_classes) {
      throw UsageError("confusion_matrix: entry outside [0, " + std::to_string(n_classes) +
                       ") at position " + std::to_string(i));
    }
    ++m[static_cast<std::size_t>(y)][static_cast<std::size_t>(p)];
  }
  return m;
}

double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
  check_pair(preds, labels);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

std::vector<double> per_class_f1(const std::vector<std::vector<std::size_t>>& confusion) {
  const std::size_t c = confusion.size();
  std::vector<double> f1(c, 0.0);
  for (std::size_t k = 0; k < c; ++k) {
    if (confusion[k].size() != c) {
      throw ShapeError("per_class_f1: confusion matrix is not square");
    }
    std::size_t row = 0, col = 0;
    for (std::size_t j = 0; j < c; ++j) {
      row += confusion[k][j];
      col += confusion[j][k];
    }
    const double tp = static_cast<double>(confusion[k][k]);
    const double precision = col == 0 ? 0.0 : tp / static_cast<double>(col);
    const double recall = row == 0 ? 0.0 : tp / static_cast<double>(row);
    f1[k] = precision + recall == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
  }
  return f1;
}

double macro_f1(const std::vector<int>& preds, const std::vector<int>& labels) {
  check_pair(preds, labels);
  int top = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] < 0 || labels[i] < 0) {
      throw UsageError("macro_f1: negative class id at position " + std::to_string(i));
    }
    top = std::max({top, preds[i], labels[i]});
  }
  const std::size_t n_classes = static_cast<std::size_t>(top) + 1;
  const auto confusion = confusion_matrix(preds, labels, n_classes);
  const auto f1 = per_class_f1(confusion);
  // Average over classes present in the ground truth only.
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < n_classes; ++k) {
    std::size_t support = 0;
    for (std::size_t j = 0; j < n_classes; ++j) support += confusion[k][j];
    if (support == 0) continue;
    sum += f1[k];
    ++present;
  }
  return sum / static_cast<double>(present);
}

Tensor cross_entropy(Tape* tape, const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rows() != labels.size()) {
    throw ShapeError("cross_entropy: " + std::to_string(logits.rows()) + " logit rows vs " +
                     std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= logits.cols()) {
      throw UsageError("cross_entropy: label " + std::to_string(labels[i]) + " at position " +
                       std::to_string(i) + " outside [0, " + std::to_string(logits.cols()) +
                       ")");
    }
  }
  const Tensor onehot = one_hot_rows(labels, logits.cols());
  const Tensor log_probs = sub(tape, logits, logsumexp_rows(tape, logits));
  const Tensor picked = sum_rows(tape, mul(tape, log_probs, onehot));
  return neg(tape, mean_all(tape, picked));
}

// ---------------------------------------------------------------------------
// Neighbourhood metrics

double knn_batch_mixing(const EmbeddingSet& emb, std::size_t k) {
  emb.validate();
  const std::size_t n = emb.embeddings.rows();
  if (k == 0 || k >= n) {
    throw UsageError("knn_batch_mixing: k must lie in [1, " + std::to_string(n) + "), got " +
                     std::to_string(k));
  }
  std::vector<int> uniq = emb.batch_ids;
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  if (uniq.size() < 2) {
    throw UsageError("knn_batch_mixing: need at least two batches, got " +
                     std::to_string(uniq.size()));
  }
  const double log_nb = std::log(static_cast<double>(uniq.size()));

  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  std::vector<std::size_t> counts(uniq.size());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t j : k_nearest_rows(emb.embeddings, i, all, k)) {
      const auto slot = std::lower_bound(uniq.begin(), uniq.end(), emb.batch_ids[j]);
      ++counts[static_cast<std::size_t>(slot - uniq.begin())];
    }
    double entropy = 0.0;
    for (std::size_t c : counts) {
      if (c == 0) continue;
      const double p = static_cast<double>(c) / static_cast<double>(k);
      entropy -= p * std::log(p);
    }
    total += entropy / log_nb;
  }
  return total / static_cast<double>(n);
}

double knn_class_accuracy(const EmbeddingSet& emb, std::size_t k) {
  emb.validate();
  std::vector<std::size_t> labeled;
  int top = 0;
  for (std::size_t i = 0; i < emb.labels.size(); ++i) {
    if (emb.labels[i] < 0) continue;
    labeled.push_back(i);
    top = std::max(top, emb.labels[i]);
  }
  if (labeled.size() < 2) {
    throw UsageError("knn_class_accuracy: need at least two labeled points, got " +
                     std::to_string(labeled.size()));
  }
  if (k == 0 || k >= labeled.size()) {
    throw UsageError("knn_class_accuracy: k must lie in [1, " +
                     std::to_string(labeled.size()) + "), got " + std::to_string(k));
  }
  std::vector<std::size_t> votes(static_cast<std::size_t>(top) + 1);
  std::size_t hits = 0;
  for (std::size_t i : labeled) {
    std::fill(votes.begin(), votes.end(), 0);
    for (std::size_t j : k_nearest_rows(emb.embeddings, i, labeled, k)) {
      ++votes[static_cast<std::size_t>(emb.labels[j])];
    }
    std::size_t winner = 0;
    for (std::size_t c = 1; c < votes.size(); ++c) {
      if (votes[c] > votes[winner]) winner = c;  // ties keep the lower class
    }
    hits += static_cast<int>(winner) == emb.labels[i];
  }
  return static_cast<double>(hits) / static_cast<double>(labeled.size());
}

// ---------------------------------------------------------------------------
// PCA

PcaModel fit_pca(const Tensor& x, std::size_t n_components) {
  const std::size_t n = x.rows(), d = x.cols();
  if (n < 2) throw UsageError("fit_pca: need at least two rows, got " + std::to_string(n));
  if (n_components == 0 || n_components > d) {
    throw UsageError("fit_pca: n_components must lie in [1, " + std::to_string(d) +
                     "], got " + std::to_string(n_components));
  }
  x.assert_finite("fit_pca input");

  PcaModel model;
  model.mean = scale(nullptr, sum_cols(nullptr, x), 1.0 / static_cast<double>(n));
  const Tensor centered = sub(nullptr, x, model.mean);
  const Tensor cov = scale(nullptr, matmul(nullptr, transpose(nullptr, centered), centered),
                           1.0 / static_cast<double>(n - 1));

  std::vector<double> a = cov.data();
  std::vector<double> v, w;
  jacobi_eigh(d, a, v, w);

  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return w[i] > w[j]; });

  model.components = Tensor::zeros(d, n_components);
  model.explained_variance.resize(n_components);
  for (std::size_t c = 0; c < n_components; ++c) {
    const std::size_t j = order[c];
    model.explained_variance[c] = std::max(w[j], 0.0);
    std::size_t arg = 0;
    double best = -1.0;
    for (std::size_t r = 0; r < d; ++r) {
      if (std::abs(v[r * d + j]) > best) {
        best = std::abs(v[r * d + j]);
        arg = r;
      }
    }
    const double flip = v[arg * d + j] < 0.0 ? -1.0 : 1.0;
    for (std::size_t r = 0; r < d; ++r) model.components.at(r, c) = flip * v[r * d + j];
  }
  return model;
}

Tensor pca_transform(const PcaModel& pca, const Tensor& x) {
  if (x.cols() != pca.mean.cols()) {
    throw ShapeError("pca_transform: input has " + std::to_string(x.cols()) +
                     " features, model was fit on " + std::to_string(pca.mean.cols()));
  }
  return matmul(nullptr, sub(nullptr, x, pca.mean), pca.components);
}

void export_embeddings(const EmbeddingSet& emb, const std::string& path,
                       const std::string& comment) {
  emb.validate();
  if (emb.embeddings.cols() < 2) {
    throw ShapeError("export_embeddings: need at least two dimensions, got " +
                     std::to_string(emb.embeddings.cols()));
  }
  const PcaModel pca = fit_pca(emb.embeddings, 2);
  const Tensor scores = pca_transform(pca, emb.embeddings);

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError(path + ": cannot open");
  if (!comment.empty()) os << comment << '\n';
  os << "spot_id\tpc1\tpc2\tbatch\tlabel\tsource\n";
  const std::string tag = to_string(emb.source);
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    const std::string id = emb.spot_ids.empty() ? "spot_" + std::to_string(i) : emb.spot_ids[i];
    os << id << '\t' << fmt(scores.at(i, 0)) << '\t' << fmt(scores.at(i, 1)) << '\t'
       << emb.batch_ids[i] << '\t' << emb.labels[i] << '\t' << tag << '\n';
  }
  if (!os) throw DataError(path + ": write failed");
}

// ---------------------------------------------------------------------------
// Classifier fine-tuning

void FinetuneConfig::validate() const {
  if (lr <= 0.0) throw ConfigError("finetune: lr must be > 0");
  if (weight_decay < 0.0) throw ConfigError("finetune: weight_decay must be >= 0");
  if (epochs == 0) throw ConfigError("finetune: epochs must be >= 1");
  if (batch_size == 0) throw ConfigError("finetune: batch_size must be >= 1");
  if (val_fraction < 0.0 || val_fraction >= 1.0) {
    throw ConfigError("finetune: val_fraction must be in [0, 1)");
  }
}

Tensor FinetunedClassifier::logits(Tape* tape, const Tensor& features, bool train,
                                   Rng* dropout_stream) const {
  return head.forward(tape, encoder.forward(tape, features, train, dropout_stream));
}

std::vector<int> FinetunedClassifier::predict(const Tensor& features) const {
  const Tensor scores = logits(nullptr, features);
  std::vector<int> preds(scores.rows());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    std::size_t arg = 0;
    for (std::size_t c = 1; c < scores.cols(); ++c) {
      if (scores.at(i, c) > scores.at(i, arg)) arg = c;  // ties keep the lower class
    }
    preds[i] = static_cast<int>(arg);
  }
  return preds;
}

FinetuneOutcome finetune_classify(const Mlp& image_encoder, const Tensor& features,
                                  const std::vector<int>& labels, std::size_t n_classes,
                                  const FinetuneConfig& cfg, const RngPool& pool) {
  cfg.validate();
  if (n_classes == 0) throw ConfigError("finetune_classify: n_classes must be >= 1");
  if (features.rows() != labels.size()) {
    throw ShapeError("finetune_classify: " + std::to_string(features.rows()) +
                     " feature rows vs " + std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw UsageError("finetune_classify: empty labeled set");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n_classes) {
      throw UsageError("finetune_classify: label " + std::to_string(labels[i]) +
                       " at position " + std::to_string(i) + " outside [0, " +
                       std::to_string(n_classes) + ")");
    }
  }
  features.assert_finite("finetune_classify features");

  const RngPool scoped = pool.derive("finetune");
  Rng init = scoped.stream("init");
  Rng split = scoped.stream("split");
  Rng shuffle = scoped.stream("shuffle");
  Rng dropout = scoped.stream("dropout");

  // Own deep copy: fresh storage, the caller's encoder is never touched.
  Mlp encoder(image_encoder.name(), image_encoder.config(), init);
  {
    auto& dst = encoder.named_parameters();
    const auto& src = image_encoder.named_parameters();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].tensor.data() = src[i].tensor.data();
  }
  MlpConfig head_cfg;
  head_cfg.input_dim = encoder.config().output_dim;
  head_cfg.output_dim = n_classes;
  head_cfg.use_layer_norm = false;
  Mlp head("head", head_cfg, init);

  const std::size_t n = labels.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  fisher_yates(order, split);
  const std::size_t n_val = static_cast<std::size_t>(cfg.val_fraction * static_cast<double>(n));
  const std::vector<std::size_t> val_ids(order.begin(),
                                         order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train_ids(order.begin() + static_cast<std::ptrdiff_t>(n_val),
                                     order.end());

  std::vector<Tensor> params = head.parameters();
  if (!cfg.head_only) {
    const std::vector<Tensor> extra = encoder.parameters();
    params.insert(params.end(), extra.begin(), extra.end());
  }
  AdamWConfig ocfg;
  ocfg.lr = cfg.lr;
  ocfg.weight_decay = cfg.weight_decay;
  AdamW opt(params, ocfg);

  const auto gather = [&](const std::vector<std::size_t>& ids) {
    Tensor xb = Tensor::zeros(ids.size(), features.cols());
    std::vector<int> yb(ids.size());
    for (std::size_t r = 0; r < ids.size(); ++r) {
      yb[r] = labels[ids[r]];
      for (std::size_t c = 0; c < features.cols(); ++c) xb.at(r, c) = features.at(ids[r], c);
    }
    return std::make_pair(xb, yb);
  };

  const bool train_encoder = !cfg.head_only;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    fisher_yates(train_ids, shuffle);
    for (std::size_t start = 0; start < train_ids.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(start + cfg.batch_size, train_ids.size());
      const std::vector<std::size_t> ids(train_ids.begin() + static_cast<std::ptrdiff_t>(start),
                                         train_ids.begin() + static_cast<std::ptrdiff_t>(stop));
      const auto [xb, yb] = gather(ids);
      opt.zero_grad();
      Tape tape;
      const Tensor h = encoder.forward(train_encoder ? &tape : nullptr, xb, train_encoder,
                                       train_encoder ? &dropout : nullptr);
      Tensor loss = cross_entropy(&tape, head.forward(&tape, h), yb);
      loss.assert_finite("finetune_classify loss");
      tape.backward(loss);
      opt.step();
    }
  }

  FinetuneOutcome out{FinetunedClassifier{std::move(encoder), std::move(head)}, 0.0, 0.0,
                      train_ids.size(), val_ids.size()};
  const auto [xe, ye] = gather(val_ids.empty() ? train_ids : val_ids);
  const std::vector<int> preds = out.model.predict(xe);
  out.val_accuracy = accuracy(preds, ye);
  out.val_macro_f1 = macro_f1(preds, ye);
  return out;
}

// ---------------------------------------------------------------------------
// Leave-one-batch-out protocol

TrainView::TrainView(const SpotDataset& ds, int held_out_batch)
    : ds_(&ds), held_out_(held_out_batch) {
  ds.validate();
  if (held_out_batch < 0 || static_cast<std::size_t>(held_out_batch) >= ds.n_batches) {
    throw UsageError("TrainView: held-out batch " + std::to_string(held_out_batch) +
                     " outside [0, " + std::to_string(ds.n_batches) + ")");
  }
  for (std::size_t i = 0; i < ds.n_spots; ++i) {
    (is_held_out(i) ? test_ids_ : train_ids_).push_back(i);
  }
  if (train_ids_.empty()) {
    throw UsageError("TrainView: batch " + std::to_string(held_out_batch) +
                     " covers every spot; nothing left to train on");
  }

  // Both derived datasets read labels exclusively through the guard.
  stage1_ = ds;
  for (std::size_t i = 0; i < ds.n_spots; ++i) {
    stage1_.labels[i] = is_held_out(i) ? -1 : label(i);
  }

  train_.n_spots = train_ids_.size();
  train_.n_genes = ds.n_genes;
  train_.n_batches = ds.n_batches;
  train_.n_classes = ds.n_classes;
  train_.image_dim = ds.image_dim;
  train_.gene_names = ds.gene_names;
  train_.counts.reserve(train_ids_.size() * ds.n_genes);
  train_.image_features.reserve(train_ids_.size() * ds.image_dim);
  for (std::size_t i : train_ids_) {
    train_.counts.insert(train_.counts.end(), ds.counts.begin() + i * ds.n_genes,
                         ds.counts.begin() + (i + 1) * ds.n_genes);
    train_.image_features.insert(train_.image_features.end(),
                                 ds.image_features.begin() + i * ds.image_dim,
                                 ds.image_features.begin() + (i + 1) * ds.image_dim);
    train_.batch_ids.push_back(ds.batch_ids[i]);
    train_.x_um.push_back(ds.x_um[i]);
    train_.y_um.push_back(ds.y_um[i]);
    train_.labels.push_back(label(i));
  }
  train_.validate();
}

bool TrainView::is_held_out(std::size_t spot) const {
  if (spot >= ds_->n_spots) {
    throw UsageError("TrainView: spot " + std::to_string(spot) + " outside [0, " +
                     std::to_string(ds_->n_spots) + ")");
  }
  return ds_->batch_ids[spot] == held_out_;
}

int TrainView::label(std::size_t spot) const {
  if (is_held_out(spot)) {
    throw ProtocolError("TrainView: training-time read of a held-out label (spot " +
                        std::to_string(spot) + ", batch " + std::to_string(held_out_) + ")");
  }
  return ds_->labels[spot];
}

void LouoConfig::validate() const {
  if (method != "scvi" && method != "scanvi") {
    throw ConfigError("run_louo: method must be \"scvi\" or \"scanvi\", got \"" + method +
                      "\"");
  }
  if (n_seeds == 0) throw ConfigError("run_louo: n_seeds must be >= 1");
  if (mixing_k == 0) throw ConfigError("run_louo: mixing_k must be >= 1");
  gene.validate();
  contrastive.validate();
  finetune.validate();
}

namespace {

FoldResult run_one_fold(const SpotDataset& ds, const FoldSplit& fold, const LouoConfig& cfg,
                        std::size_t seed_idx) {
  const TrainView view(ds, fold.test_batch);
  const RngPool pool = RngPool(cfg.base_seed)
                           .derive("louo")
                           .derive(static_cast<std::uint64_t>(fold.test_batch))
                           .derive(seed_idx);

  // Stage 1: gene encoder on all counts, held-out labels masked.
  std::optional<TrainedScvi> scvi_run;
  std::optional<TrainedScanvi> scanvi_run;
  const ScviModel* gene = nullptr;
  if (cfg.method == "scvi") {
    scvi_run = train_scvi(view.stage1_dataset(), cfg.gene, pool);
    gene = &scvi_run->model;
  } else {
    scanvi_run = train_scanvi(view.stage1_dataset(), cfg.gene, pool);
    gene = &scanvi_run->model.core();
  }

  // Stage 2: contrastive heads on the training batches only.
  const TrainedContrastive con =
      train_contrastive(view.train_dataset(), *gene, cfg.contrastive, pool);

  // Fine-tune on the labeled training spots.
  const SpotDataset& train = view.train_dataset();
  std::vector<std::size_t> labeled;
  for (std::size_t i = 0; i < train.n_spots; ++i) {
    if (train.is_labeled(i)) labeled.push_back(i);
  }
  Tensor feat = Tensor::zeros(labeled.size(), train.image_dim);
  std::vector<int> ys(labeled.size());
  for (std::size_t r = 0; r < labeled.size(); ++r) {
    ys[r] = train.labels[labeled[r]];
    for (std::size_t c = 0; c < train.image_dim; ++c) {
      feat.at(r, c) = train.image_features[labeled[r] * train.image_dim + c];
    }
  }
  const FinetuneOutcome tuned = finetune_classify(con.model.image_encoder(), feat, ys,
                                                  ds.n_classes, cfg.finetune, pool);

  // Evaluation happens after training, directly against the source labels.
  std::vector<std::size_t> test_labeled;
  for (std::size_t i : fold.test_ids) {
    if (ds.is_labeled(i)) test_labeled.push_back(i);
  }
  if (test_labeled.empty()) {
    throw UsageError("run_louo: held-out batch " + std::to_string(fold.test_batch) +
                     " has no labeled spots to evaluate");
  }
  Tensor test_feat = Tensor::zeros(test_labeled.size(), ds.image_dim);
  std::vector<int> test_ys(test_labeled.size());
  for (std::size_t r = 0; r < test_labeled.size(); ++r) {
    test_ys[r] = ds.labels[test_labeled[r]];
    for (std::size_t c = 0; c < ds.image_dim; ++c) {
      test_feat.at(r, c) = ds.image_features[test_labeled[r] * ds.image_dim + c];
    }
  }
  const std::vector<int> preds = tuned.model.predict(test_feat);

  FoldResult result;
  result.fold = fold.test_batch;
  result.seed = seed_idx;
  result.confusion = confusion_matrix(preds, test_ys, ds.n_classes);
  result.class_f1 = per_class_f1(result.confusion);
  result.accuracy = accuracy(preds, test_ys);
  result.macro_f1 = macro_f1(preds, test_ys);

  EmbeddingSet latent;
  latent.embeddings = gene->latent(ds.counts_tensor());
  latent.batch_ids = ds.batch_ids;
  latent.labels = ds.labels;
  latent.source = EmbeddingSource::latent;
  result.batch_mixing = knn_batch_mixing(latent, cfg.mixing_k);
  return result;
}

}  // namespace

LouoResult run_louo(const SpotDataset& ds, const LouoConfig& cfg) {
  cfg.validate();
  ds.validate();
  const std::vector<FoldSplit> folds = split_leave_one_batch_out(ds);

  LouoResult result;
  result.folds.resize(folds.size() * cfg.n_seeds);
  parallel_jobs(result.folds.size(), cfg.n_threads, [&](std::size_t job) {
    const std::size_t f = job / cfg.n_seeds;
    const std::size_t s = job % cfg.n_seeds;
    result.folds[job] = run_one_fold(ds, folds[f], cfg, s);
  });

  result.per_fold.resize(folds.size());
  for (std::size_t f = 0; f < folds.size(); ++f) {
    result.per_fold[f] = aggregate_range(result.folds, f * cfg.n_seeds, (f + 1) * cfg.n_seeds);
  }
  result.overall = aggregate_range(result.folds, 0, result.folds.size());
  return result;
}

void write_louo_results(const std::string& path, const LouoResult& result,
                        const LouoConfig& cfg, const std::string& comment) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError(path + ": cannot open");
  if (!comment.empty()) os << comment << '\n';
  const std::string loss = to_string(cfg.contrastive.loss_kind);
  os << "fold\tseed\tmethod\tloss_kind\taccuracy\tmacro_f1\tbatch_mixing\n";
  for (const FoldResult& r : result.folds) {
    os << r.fold << '\t' << r.seed << '\t' << cfg.method << '\t' << loss << '\t'
       << fmt(r.accuracy) << '\t' << fmt(r.macro_f1) << '\t' << fmt(r.batch_mixing) << '\n';
  }
  for (std::size_t f = 0; f < result.per_fold.size(); ++f) {
    const LouoAggregate& a = result.per_fold[f];
    os << "# fold " << result.folds[f * cfg.n_seeds].fold << ": accuracy " << fmt(a.acc_mean)
       << " +/- " << fmt(a.acc_std) << "  macro_f1 " << fmt(a.f1_mean) << " +/- "
       << fmt(a.f1_std) << "  batch_mixing " << fmt(a.mixing_mean) << " +/- "
       << fmt(a.mixing_std) << '\n';
  }
  const LouoAggregate& o = result.overall;
  os << "# overall " << cfg.method << " " << loss << ": accuracy " << fmt(o.acc_mean)
     << " +/- " << fmt(o.acc_std) << "  macro_f1 " << fmt(o.f1_mean) << " +/- "
     << fmt(o.f1_std) << "  batch_mixing " << fmt(o.mixing_mean) << " +/- "
     << fmt(o.mixing_std) << '\n';
  if (!os) throw DataError(path + ": write failed");
}

}  // namespace stc
