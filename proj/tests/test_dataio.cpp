#include <doctest.h>

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "stc/dataset.hpp"
#include "stc/dataset_io.hpp"
#include "stc/errors.hpp"
#include "stc/log.hpp"
#include "stc/rng.hpp"
#include "stc/synthetic.hpp"

using namespace stc;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& content) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os << content;
}

// Rewrites the manifest checksum after a test edits a data file, so the edit
// itself (not the checksum guard) is what load_dataset trips on.
void refresh_checksum(const fs::path& dir) {
  std::string all;
  for (const char* f : {"counts.tsv", "metadata.tsv", "features.tsv", "genes.txt"}) {
    all += slurp(dir / f);
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016" PRIx64, fnv1a64(all));
  std::string manifest = slurp(dir / "manifest.txt");
  const std::size_t pos = manifest.find("checksum=");
  REQUIRE(pos != std::string::npos);
  manifest = manifest.substr(0, pos) + "checksum=" + hex + "\n";
  spit(dir / "manifest.txt", manifest);
}

SynthConfig small_cfg() {
  SynthConfig cfg;
  cfg.n_batches = 2;
  cfg.n_classes = 3;
  cfg.spots_per_batch = 40;
  cfg.n_genes = 25;
  cfg.latent_dim_true = 5;
  cfg.image_feature_dim = 8;
  cfg.seed = 7;
  return cfg;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("dataset round trip is exact and deterministic") {
  TempDir tmp("stc_roundtrip");
  SpotDataset ds = generate_synthetic(small_cfg()).dataset;
  save_dataset(ds, tmp.path.string());
  SpotDataset back = load_dataset(tmp.path.string());

  CHECK(back.n_spots == ds.n_spots);
  CHECK(back.n_genes == ds.n_genes);
  CHECK(back.n_batches == ds.n_batches);
  CHECK(back.n_classes == ds.n_classes);
  CHECK(back.image_dim == ds.image_dim);
  CHECK(back.counts == ds.counts);
  CHECK(back.batch_ids == ds.batch_ids);
  CHECK(back.labels == ds.labels);
  CHECK(back.gene_names == ds.gene_names);
  for (std::size_t i = 0; i < ds.n_spots; ++i) {
    CHECK(back.x_um[i] == ds.x_um[i]);
    CHECK(back.y_um[i] == ds.y_um[i]);
  }
  CHECK(back.image_features == ds.image_features);

  SUBCASE("saving the same dataset twice produces identical bytes") {
    TempDir tmp2("stc_roundtrip2");
    save_dataset(ds, tmp2.path.string());
    for (const char* f :
         {"manifest.txt", "counts.tsv", "metadata.tsv", "features.tsv", "genes.txt"}) {
      CHECK(slurp(tmp.path / f) == slurp(tmp2.path / f));
    }
  }
}

TEST_CASE("zero-total spots are dropped with a warning") {
  TempDir tmp("stc_zerospot");
  SpotDataset ds = generate_synthetic(small_cfg()).dataset;
  const std::size_t before = ds.n_spots;
  save_dataset(ds, tmp.path.string());

  // strip every triplet of spot 0 from counts.tsv
  std::istringstream is(slurp(tmp.path / "counts.tsv"));
  std::string line, kept;
  while (std::getline(is, line)) {
    if (line.rfind("0\t", 0) != 0) kept += line + "\n";
  }
  spit(tmp.path / "counts.tsv", kept);
  refresh_checksum(tmp.path);

  std::vector<std::string> warnings;
  Log::set_sink([&](const std::string& m) { warnings.push_back(m); });
  SpotDataset back = load_dataset(tmp.path.string());
  Log::set_sink(nullptr);

  CHECK(back.n_spots == before - 1);
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("dropped 1 spot") != std::string::npos);
  // remaining rows shifted up by one
  CHECK(back.batch_ids[0] == ds.batch_ids[1]);
  CHECK(back.count(0, 3) == ds.count(1, 3));
}

TEST_CASE("malformed dataset files raise descriptive errors") {
  TempDir tmp("stc_malformed");
  SpotDataset ds = generate_synthetic(small_cfg()).dataset;
  save_dataset(ds, tmp.path.string());

  SUBCASE("fractional count names the line and location") {
    std::string counts = slurp(tmp.path / "counts.tsv");
    const std::size_t nl = counts.find('\n');
    std::string first = counts.substr(0, nl);
    first = first.substr(0, first.rfind('\t')) + "\t3.5";
    spit(tmp.path / "counts.tsv", first + counts.substr(nl));
    refresh_checksum(tmp.path);
    try {
      load_dataset(tmp.path.string());
      FAIL("expected DataError");
    } catch (const DataError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("counts.tsv:1") != std::string::npos);
      CHECK(msg.find("3.5") != std::string::npos);
      CHECK(msg.find("count for spot") != std::string::npos);
    }
  }

  SUBCASE("unknown batch id is rejected with its line") {
    std::string meta = slurp(tmp.path / "metadata.tsv");
    // second data row: spot 1 -> batch 9
    std::size_t p = meta.find("\n1\t");
    REQUIRE(p != std::string::npos);
    meta = meta.substr(0, p + 3) + "9" + meta.substr(p + 4);
    spit(tmp.path / "metadata.tsv", meta);
    refresh_checksum(tmp.path);
    try {
      load_dataset(tmp.path.string());
      FAIL("expected DataError");
    } catch (const DataError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("metadata.tsv:3") != std::string::npos);
      CHECK(msg.find("unknown batch id") != std::string::npos);
    }
  }

  SUBCASE("missing metadata rows are reported") {
    std::string meta = slurp(tmp.path / "metadata.tsv");
    meta = meta.substr(0, meta.rfind('\n', meta.size() - 2) + 1);  // drop last row
    spit(tmp.path / "metadata.tsv", meta);
    refresh_checksum(tmp.path);
    CHECK_THROWS_WITH_AS(load_dataset(tmp.path.string()),
                         doctest::Contains("expected 80 rows"), DataError);
  }

  SUBCASE("corrupted bytes fail the checksum before parsing") {
    std::string counts = slurp(tmp.path / "counts.tsv");
    counts[0] = counts[0] == '0' ? '1' : '0';
    spit(tmp.path / "counts.tsv", counts);
    CHECK_THROWS_WITH_AS(load_dataset(tmp.path.string()), doctest::Contains("checksum"),
                         DataError);
  }

  SUBCASE("missing manifest is reported as such") {
    fs::remove(tmp.path / "manifest.txt");
    CHECK_THROWS_WITH_AS(load_dataset(tmp.path.string()), doctest::Contains("manifest"),
                         DataError);
  }
}

TEST_CASE("leave-one-batch-out split is a partition with per-batch test sets") {
  SpotDataset ds;
  ds.n_spots = 60;
  ds.n_genes = 1;
  ds.n_batches = 3;
  ds.n_classes = 1;
  ds.image_dim = 1;
  ds.counts.assign(60, 1.0);
  ds.image_features.assign(60, 0.0);
  ds.x_um.assign(60, 0.0);
  ds.y_um.assign(60, 0.0);
  ds.labels.assign(60, 0);
  ds.gene_names = {"g"};
  // batch sizes 10, 20, 30
  for (std::size_t i = 0; i < 60; ++i) {
    ds.batch_ids.push_back(i < 10 ? 0 : (i < 30 ? 1 : 2));
  }
  ds.validate();

  auto folds = split_leave_one_batch_out(ds);
  REQUIRE(folds.size() == 3);
  CHECK(folds[0].test_ids.size() == 10);
  CHECK(folds[1].test_ids.size() == 20);
  CHECK(folds[2].test_ids.size() == 30);

  std::vector<int> seen_in_test(60, 0);
  for (const auto& fold : folds) {
    CHECK(fold.train_ids.size() + fold.test_ids.size() == 60);
    std::vector<int> mark(60, 0);
    for (auto i : fold.train_ids) mark[i]++;
    for (auto i : fold.test_ids) {
      mark[i]++;
      CHECK(ds.batch_ids[i] == fold.test_batch);
      seen_in_test[i]++;
    }
    for (int m : mark) CHECK(m == 1);  // disjoint and covering
  }
  for (int m : seen_in_test) CHECK(m == 1);  // each spot in exactly one test set

  SUBCASE("single batch is a usage error") {
    SpotDataset one = ds;
    one.n_batches = 1;
    for (auto& b : one.batch_ids) b = 0;
    CHECK_THROWS_AS(split_leave_one_batch_out(one), UsageError);
  }
}

TEST_CASE("top-k gene selection ranks by log1p variance and keeps gene order") {
  SpotDataset ds;
  ds.n_spots = 6;
  ds.n_genes = 4;
  ds.n_batches = 1;
  ds.n_classes = 1;
  ds.image_dim = 1;
  // gene 0: constant (variance 0); gene 1: wild swings; gene 2: mild; gene 3: moderate
  const double rows[6][4] = {{5, 0, 2, 1},  {5, 90, 3, 7}, {5, 0, 2, 1},
                             {5, 80, 3, 8}, {5, 0, 2, 1},  {5, 70, 3, 9}};
  for (auto& row : rows)
    for (double v : row) ds.counts.push_back(v);
  ds.batch_ids.assign(6, 0);
  ds.x_um.assign(6, 0.0);
  ds.y_um.assign(6, 0.0);
  ds.labels.assign(6, 0);
  ds.image_features.assign(6, 0.0);
  ds.gene_names = {"a", "b", "c", "d"};
  ds.validate();

  SpotDataset top2 = select_top_genes(ds, 2);
  CHECK(top2.n_genes == 2);
  CHECK(top2.gene_names == std::vector<std::string>{"b", "d"});
  CHECK(top2.count(1, 0) == 90.0);
  CHECK(top2.count(1, 1) == 7.0);

  SpotDataset all = select_top_genes(ds, 10);
  CHECK(all.n_genes == 4);
  CHECK(all.gene_names == ds.gene_names);
  CHECK_THROWS_AS(select_top_genes(ds, 0), UsageError);
}

TEST_CASE("generator: strength 0 leaves per-gene batch means statistically equal") {
  SynthConfig cfg;
  cfg.n_batches = 2;
  cfg.n_classes = 4;
  cfg.spots_per_batch = 600;
  cfg.n_genes = 40;
  cfg.batch_effect_strength = 0.0;
  cfg.seed = 11;
  SpotDataset ds = generate_synthetic(cfg).dataset;

  Rng pick(99);
  int worst_gene = -1;
  double worst_z = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto g = static_cast<std::size_t>(pick.integer(cfg.n_genes));
    double mean[2] = {0, 0}, m2[2] = {0, 0};
    double n[2] = {0, 0};
    for (std::size_t i = 0; i < ds.n_spots; ++i) {
      const int b = ds.batch_ids[i];
      const double y = ds.count(i, g);
      n[b] += 1.0;
      const double delta = y - mean[b];
      mean[b] += delta / n[b];
      m2[b] += delta * (y - mean[b]);
    }
    const double se2 = m2[0] / (n[0] - 1) / n[0] + m2[1] / (n[1] - 1) / n[1];
    const double z = std::abs(mean[0] - mean[1]) / std::sqrt(se2);
    if (z > worst_z) {
      worst_z = z;
      worst_gene = static_cast<int>(g);
    }
  }
  // Bonferroni-adjusted two-sided normal critical value for 20 tests at alpha=0.01
  INFO("worst gene ", worst_gene, " z=", worst_z);
  CHECK(worst_z < 3.4807564043462128);
}

TEST_CASE("generator: strength 2 makes batch linearly predictable from log counts") {
  SynthConfig cfg;
  cfg.n_batches = 3;
  cfg.n_classes = 4;
  cfg.spots_per_batch = 200;
  cfg.n_genes = 60;
  cfg.batch_effect_strength = 2.0;
  cfg.seed = 13;
  SpotDataset ds = generate_synthetic(cfg).dataset;

  std::vector<double> logc(ds.counts.size());
  for (std::size_t k = 0; k < ds.counts.size(); ++k) logc[k] = std::log1p(ds.counts[k]);
  std::vector<std::size_t> train, test;
  for (std::size_t i = 0; i < ds.n_spots; ++i) (i % 2 ? test : train).push_back(i);
  const double acc =
      oracle::centroid_probe_ref(logc, ds.n_genes, ds.batch_ids, train, test);
  INFO("batch probe accuracy ", acc);
  CHECK(acc > 0.9);
}

TEST_CASE("generator: determinism and ground-truth moment identities") {
  SynthConfig cfg = small_cfg();

  SUBCASE("same seed, same bytes; different seed differs") {
    SyntheticData a = generate_synthetic(cfg);
    SyntheticData b = generate_synthetic(cfg);
    CHECK(a.dataset.counts == b.dataset.counts);
    CHECK(a.dataset.image_features == b.dataset.image_features);
    CHECK(a.truth.t == b.truth.t);
    cfg.seed = 8;
    SyntheticData c = generate_synthetic(cfg);
    CHECK(a.dataset.counts != c.dataset.counts);
  }

  SUBCASE("empirical gene means match (1-pi) * mean(l * rho) within 3 SE") {
    SynthConfig big;
    big.n_batches = 1;
    big.n_classes = 3;
    big.spots_per_batch = 10000;
    big.n_genes = 30;
    big.latent_dim_true = 5;
    big.image_feature_dim = 4;
    big.seed = 23;
    SyntheticData sd = generate_synthetic(big);
    const auto& ds = sd.dataset;
    const auto& gt = sd.truth;
    for (std::size_t g = 0; g < big.n_genes; g += 7) {
      double mean = 0.0, m2 = 0.0, n = 0.0, expect = 0.0;
      for (std::size_t i = 0; i < ds.n_spots; ++i) {
        const double y = ds.count(i, g);
        n += 1.0;
        const double delta = y - mean;
        mean += delta / n;
        m2 += delta * (y - mean);
        expect += (1.0 - gt.pi[g]) * gt.lib[i] * gt.rho[i * ds.n_genes + g];
      }
      expect /= n;
      const double se = std::sqrt(m2 / (n - 1) / n);
      INFO("gene ", g, " mean ", mean, " expected ", expect, " se ", se);
      CHECK(std::abs(mean - expect) < 3.0 * se);
    }
  }
}

TEST_CASE("generator: image features carry class signal, latent carries no batch signal") {
  SynthConfig cfg;
  cfg.n_batches = 3;
  cfg.n_classes = 6;
  cfg.spots_per_batch = 150;
  cfg.n_genes = 40;
  cfg.labeled_fraction = 1.0;  // label everything so classes are observable
  cfg.batch_effect_strength = 2.0;
  cfg.seed = 17;
  SyntheticData sd = generate_synthetic(cfg);
  const auto& ds = sd.dataset;

  const double img_acc =
      oracle::knn_accuracy_ref(ds.image_features, ds.image_dim, ds.labels, 15);
  INFO("image knn accuracy ", img_acc);
  CHECK(img_acc > 1.0 / 6.0 + 0.2);

  std::vector<std::size_t> train, test;
  for (std::size_t i = 0; i < ds.n_spots; ++i) (i % 2 ? test : train).push_back(i);
  const double batch_acc =
      oracle::centroid_probe_ref(sd.truth.t, sd.truth.latent_dim, ds.batch_ids, train, test);
  INFO("latent batch probe accuracy ", batch_acc);
  CHECK(batch_acc < 1.0 / 3.0 + 0.05);
}
