#include "stc/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <cmath>
#include <map>
#include <set>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "stc/checkpoint.hpp"
#include "stc/config.hpp"
#include "stc/contrastive.hpp"
#include "stc/dataset_io.hpp"
#include "stc/errors.hpp"
#include "stc/eval.hpp"
#include "stc/scanvi.hpp"
#include "stc/scvi.hpp"
#include "stc/synthetic.hpp"

namespace fs = std::filesystem;

namespace stc {

namespace {

struct CliArgs {
  std::string config_path;
  std::string data_dir;
  std::string gene_ckpt;
  std::string contrastive_ckpt;
  std::string out_path;
  std::string in_path;
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool verbose = false;
};

std::string fmt4(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

fs::path output_root(const RunConfig& cfg) {
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  if (const char* env = std::getenv("STC_OUTPUT_ROOT"); env != nullptr && *env != '\0') {
    return env;
  }
  return "runs";
}

RunConfig resolve_config(const CliArgs& args) {
  RunConfig cfg = args.config_path.empty() ? RunConfig{} : load_config(args.config_path);
  if (args.seed_given) cfg.seed = args.seed;
  if (!args.data_dir.empty()) cfg.data_path = args.data_dir;
  return cfg;
}

fs::path resolve_out(const CliArgs& args, const RunConfig& cfg, const char* leaf) {
  const fs::path out = args.out_path.empty() ? output_root(cfg) / leaf : fs::path(args.out_path);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  return out;
}

SpotDataset obtain_dataset(const RunConfig& cfg) {
  if (!cfg.data_path.empty()) {
    LoadOptions opts;
    opts.top_k_genes = cfg.top_genes;
    return load_dataset(cfg.data_path, opts);
  }
  SpotDataset ds = generate_synthetic(cfg.synth).dataset;
  if (cfg.top_genes > 0) ds = select_top_genes(ds, cfg.top_genes);
  return ds;
}

// Provenance sidecar for binary artifacts; text artifacts instead carry the
// provenance line as a leading comment.
void write_meta(const fs::path& artifact, const RunConfig& cfg, const std::string& command) {
  const std::string path = artifact.string() + ".meta";
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError(path + ": cannot open");
  os << provenance_line(cfg) << "\ncommand = " << command << "\n";
  if (!os) throw DataError(path + ": write failed");
}

// Owns whichever stage-1 flavor the config names and exposes the scVI core.
struct GeneStack {
  std::optional<ScviModel> scvi;
  std::optional<ScanviModel> scanvi;
  const ScviModel& core() const { return scanvi ? scanvi->core() : *scvi; }
};

GeneStack load_gene_stack(const RunConfig& cfg, const SpotDataset& ds, const std::string& path) {
  if (!fs::exists(path)) {
    throw DataError("gene checkpoint '" + path + "' not found; run the train-gene stage first");
  }
  GeneStack stack;
  Rng init = RngPool(cfg.seed).derive("rebuild").stream("init");
  if (cfg.method == "scanvi") {
    stack.scanvi.emplace(ds.n_genes, ds.n_batches, ds.n_classes, cfg.gene, init);
    stack.scanvi->load_checkpoint(path);
  } else {
    stack.scvi.emplace(ds.n_genes, ds.n_batches, cfg.gene, init);
    stack.scvi->load_checkpoint(path);
  }
  return stack;
}

ContrastiveModel load_contrastive_model(const RunConfig& cfg, const SpotDataset& ds,
                                        const std::string& path) {
  if (!fs::exists(path)) {
    throw DataError("contrastive checkpoint '" + path +
                    "' not found; run the train-contrastive stage first");
  }
  Rng init = RngPool(cfg.seed).derive("rebuild").stream("init");
  ContrastiveModel model(ds.image_dim, cfg.gene.latent_dim, cfg.contrastive, init);
  model.load_checkpoint(path);
  return model;
}

EmbeddingSet latent_embedding(const GeneStack& stack, const SpotDataset& ds) {
  EmbeddingSet emb;
  emb.embeddings = stack.core().latent(ds.counts_tensor());
  emb.batch_ids = ds.batch_ids;
  emb.labels = ds.labels;
  emb.source = EmbeddingSource::latent;
  return emb;
}

void cmd_generate(const CliArgs& args, const RunConfig& cfg, std::ostream& out) {
  const fs::path dir = args.out_path.empty() ? output_root(cfg) / "dataset"
                                             : fs::path(args.out_path);
  const SyntheticData data = generate_synthetic(cfg.synth);
  save_dataset(data.dataset, dir.string());

  // Ground truth the sampler used, for downstream oracle checks.
  const fs::path truth = dir / "truth_latent.tsv";
  std::ofstream ts(truth, std::ios::binary | std::ios::trunc);
  if (!ts) throw DataError(truth.string() + ": cannot open");
  ts << "spot";
  for (std::size_t c = 0; c < data.truth.latent_dim; ++c) ts << "\tt" << c;
  ts << "\n";
  for (std::size_t i = 0; i < data.dataset.n_spots; ++i) {
    ts << i;
    for (std::size_t c = 0; c < data.truth.latent_dim; ++c) {
      char buf[40];
      std::snprintf(buf, sizeof(buf), "%.17g", data.truth.t[i * data.truth.latent_dim + c]);
      ts << '\t' << buf;
    }
    ts << "\n";
  }
  if (!ts) throw DataError(truth.string() + ": write failed");
  write_meta(dir / "provenance", cfg, "generate");

  out << "generate: wrote " << dir.string() << "\n";
  std::ifstream manifest(dir / "manifest.txt");
  std::string line;
  while (std::getline(manifest, line)) out << "  " << line << "\n";
}

void cmd_train_gene(const CliArgs& args, const RunConfig& cfg, std::ostream& out) {
  const SpotDataset ds = obtain_dataset(cfg);
  const fs::path ckpt = resolve_out(args, cfg, "gene.stck");
  const RngPool pool(cfg.seed);
  if (cfg.method == "scanvi") {
    const TrainedScanvi trained = train_scanvi(ds, cfg.gene, pool);
    checkpoint::save(ckpt.string(), trained.model.named_parameters());
    write_scanvi_trace(ckpt.string() + ".trace.tsv", trained.trace);
    out << "train-gene: scanvi, final objective " << fmt4(trained.trace.back().objective)
        << ", wrote " << ckpt.string() << "\n";
  } else {
    const TrainedScvi trained = train_scvi(ds, cfg.gene, pool);
    checkpoint::save(ckpt.string(), trained.model.named_parameters());
    write_trace(ckpt.string() + ".trace.tsv", trained.trace);
    out << "train-gene: scvi, final elbo " << fmt4(trained.trace.back().elbo) << ", wrote "
        << ckpt.string() << "\n";
  }
  write_meta(ckpt, cfg, "train-gene");
}

void cmd_train_contrastive(const CliArgs& args, const RunConfig& cfg, std::ostream& out) {
  const SpotDataset ds = obtain_dataset(cfg);
  const fs::path default_gene = output_root(cfg) / "gene.stck";
  const std::string gene_path = args.gene_ckpt.empty() ? default_gene.string() : args.gene_ckpt;
  const GeneStack stack = load_gene_stack(cfg, ds, gene_path);

  const fs::path ckpt = resolve_out(args, cfg, "contrastive.stck");
  const TrainedContrastive trained =
      train_contrastive(ds, stack.core(), cfg.contrastive, RngPool(cfg.seed));
  checkpoint::save(ckpt.string(), trained.model.named_parameters());
  write_contrastive_trace(ckpt.string() + ".trace.tsv", trained.trace);
  write_meta(ckpt, cfg, "train-contrastive");
  out << "train-contrastive: " << to_string(cfg.contrastive.loss_kind) << ", final loss "
      << fmt4(trained.trace.back().loss) << ", wrote " << ckpt.string() << "\n";
}

void cmd_evaluate(const CliArgs& args, const RunConfig& cfg, std::ostream& out) {
  const SpotDataset ds = obtain_dataset(cfg);
  const fs::path results = resolve_out(args, cfg, "results.tsv");

  if (cfg.protocol == "louo") {
    const LouoConfig lcfg = cfg.louo();
    const LouoResult res = run_louo(ds, lcfg);
    write_louo_results(results.string(), res, lcfg, provenance_line(cfg));
    out << "evaluate (louo, " << cfg.method << " + "
        << to_string(cfg.contrastive.loss_kind) << "): accuracy "
        << fmt4(res.overall.acc_mean) << " +/- " << fmt4(res.overall.acc_std) << ", macro_f1 "
        << fmt4(res.overall.f1_mean) << " +/- " << fmt4(res.overall.f1_std)
        << ", batch_mixing " << fmt4(res.overall.mixing_mean) << " +/- "
        << fmt4(res.overall.mixing_std) << "\n";
    out << "evaluate: wrote " << results.string() << "\n";
    return;
  }

  // Single-run protocol: fine-tune on the labeled spots and report the
  // validation metrics plus stage-1 batch mixing.
  const fs::path default_gene = output_root(cfg) / "gene.stck";
  const fs::path default_con = output_root(cfg) / "contrastive.stck";
  const std::string gene_path = args.gene_ckpt.empty() ? default_gene.string() : args.gene_ckpt;
  const std::string con_path =
      args.contrastive_ckpt.empty() ? default_con.string() : args.contrastive_ckpt;
  const GeneStack stack = load_gene_stack(cfg, ds, gene_path);
  const ContrastiveModel model = load_contrastive_model(cfg, ds, con_path);

  std::vector<std::size_t> labeled;
  for (std::size_t i = 0; i < ds.n_spots; ++i) {
    if (ds.is_labeled(i)) labeled.push_back(i);
  }
  Tensor features = Tensor::zeros(labeled.size(), ds.image_dim);
  std::vector<int> labels(labeled.size());
  for (std::size_t r = 0; r < labeled.size(); ++r) {
    for (std::size_t c = 0; c < ds.image_dim; ++c) {
      features.at(r, c) = ds.image_features[labeled[r] * ds.image_dim + c];
    }
    labels[r] = ds.labels[labeled[r]];
  }
  const FinetuneOutcome tuned = finetune_classify(model.image_encoder(), features, labels,
                                                  ds.n_classes, cfg.finetune, RngPool(cfg.seed));
  const double mixing = knn_batch_mixing(latent_embedding(stack, ds), cfg.mixing_k);

  std::ofstream os(results, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError(results.string() + ": cannot open");
  os << provenance_line(cfg) << "\n";
  os << "fold\tseed\tmethod\tloss_kind\taccuracy\tmacro_f1\tbatch_mixing\n";
  os << "-1\t" << cfg.seed << '\t' << cfg.method << '\t'
     << to_string(cfg.contrastive.loss_kind) << '\t' << fmt4(tuned.val_accuracy) << '\t'
     << fmt4(tuned.val_macro_f1) << '\t' << fmt4(mixing) << "\n";
  if (!os) throw DataError(results.string() + ": write failed");

  out << "evaluate (single, " << cfg.method << " + " << to_string(cfg.contrastive.loss_kind)
      << "): accuracy " << fmt4(tuned.val_accuracy) << ", macro_f1 "
      << fmt4(tuned.val_macro_f1) << ", batch_mixing " << fmt4(mixing) << " (" << tuned.n_train
      << " train / " << tuned.n_val << " val spots)\n";
  out << "evaluate: wrote " << results.string() << "\n";
}

void cmd_embed(const CliArgs& args, const RunConfig& cfg, std::ostream& out) {
  const SpotDataset ds = obtain_dataset(cfg);
  const fs::path default_gene = output_root(cfg) / "gene.stck";
  const std::string gene_path = args.gene_ckpt.empty() ? default_gene.string() : args.gene_ckpt;
  const GeneStack stack = load_gene_stack(cfg, ds, gene_path);

  EmbeddingSet emb = latent_embedding(stack, ds);
  if (cfg.embed_source != EmbeddingSource::latent) {
    const fs::path default_con = output_root(cfg) / "contrastive.stck";
    const std::string con_path =
        args.contrastive_ckpt.empty() ? default_con.string() : args.contrastive_ckpt;
    const ContrastiveModel model = load_contrastive_model(cfg, ds, con_path);
    if (cfg.embed_source == EmbeddingSource::gene) {
      emb.embeddings = model.p_g().forward(nullptr, emb.embeddings);
    } else {
      const Tensor hidden = model.image_encoder().forward(nullptr, ds.image_tensor());
      emb.embeddings = model.p_v().forward(nullptr, hidden);
    }
    emb.source = cfg.embed_source;
  }

  const fs::path target = resolve_out(args, cfg, "embeddings.tsv");
  export_embeddings(emb, target.string(), provenance_line(cfg));
  out << "embed: " << to_string(emb.source) << " source, " << emb.embeddings.rows()
      << " spots, wrote " << target.string() << "\n";
}

void cmd_report(const CliArgs& args, std::ostream& out) {
  std::ifstream is(args.in_path, std::ios::binary);
  if (!is) throw DataError(args.in_path + ": cannot open");

  struct Group {
    std::vector<double> acc, f1, mixing;
    std::set<std::string> folds, seeds;
  };
  std::map<std::string, Group> groups;
  std::string line;
  bool header_seen = false;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    if (!header_seen) {  // column header row
      header_seen = true;
      continue;
    }
    std::vector<std::string> fields;
    std::string field;
    std::istringstream ls(line);
    while (std::getline(ls, field, '\t')) fields.push_back(field);
    if (fields.size() != 7) {
      throw DataError(args.in_path + ":" + std::to_string(line_no) +
                      ": expected 7 tab-separated fields, got " +
                      std::to_string(fields.size()));
    }
    Group& g = groups[fields[2] + " + " + fields[3]];
    try {
      g.acc.push_back(std::stod(fields[4]));
      g.f1.push_back(std::stod(fields[5]));
      g.mixing.push_back(std::stod(fields[6]));
    } catch (const std::exception&) {
      throw DataError(args.in_path + ":" + std::to_string(line_no) + ": malformed number");
    }
    g.folds.insert(fields[0]);
    g.seeds.insert(fields[1]);
  }
  if (groups.empty()) throw DataError(args.in_path + ": no data rows");

  const auto mean_std = [](const std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double sd = v.size() < 2 ? 0.0 : std::sqrt(ss / static_cast<double>(v.size() - 1));
    return std::pair<double, double>(mean, sd);
  };
  out << "report: " << args.in_path << "\n";
  for (const auto& [name, g] : groups) {
    const auto [am, as] = mean_std(g.acc);
    const auto [fm, fsd] = mean_std(g.f1);
    const auto [mm, ms] = mean_std(g.mixing);
    out << "  " << name << " (" << g.folds.size() << " folds x " << g.seeds.size()
        << " seeds): accuracy " << fmt4(am) << " +/- " << fmt4(as) << ", macro_f1 "
        << fmt4(fm) << " +/- " << fmt4(fsd) << ", batch_mixing " << fmt4(mm) << " +/- "
        << fmt4(ms) << "\n";
  }
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"stc — batch-agnostic contrastive pipeline for spatial transcriptomics"};
  app.require_subcommand(1);
  CliArgs args;

  const auto add_common = [&](CLI::App* cmd, bool with_data) {
    cmd->add_option("-c,--config", args.config_path, "config file (flat-sectioned key=value)");
    cmd->add_option_function<std::uint64_t>(
        "--seed",
        [&](std::uint64_t v) {
          args.seed = v;
          args.seed_given = true;
        },
        "override the [global] seed");
    cmd->add_flag("-v,--verbose", args.verbose, "chatty progress output");
    if (with_data) {
      cmd->add_option("--data", args.data_dir, "dataset directory (overrides [dataset] path)");
    }
  };

  CLI::App* generate = app.add_subcommand("generate", "write a synthetic dataset directory");
  add_common(generate, false);
  generate->add_option("--out", args.out_path, "target directory (default <root>/dataset)");

  CLI::App* train_gene = app.add_subcommand("train-gene", "stage 1: train the gene encoder");
  add_common(train_gene, true);
  train_gene->add_option("--out", args.out_path, "checkpoint path (default <root>/gene.stck)");

  CLI::App* train_con =
      app.add_subcommand("train-contrastive", "stage 2: train image encoder + projectors");
  add_common(train_con, true);
  train_con->add_option("--gene", args.gene_ckpt, "gene checkpoint from train-gene");
  train_con->add_option("--out", args.out_path,
                        "checkpoint path (default <root>/contrastive.stck)");

  CLI::App* evaluate = app.add_subcommand("evaluate", "metrics (single run or LOUO protocol)");
  add_common(evaluate, true);
  evaluate->add_option("--gene", args.gene_ckpt, "gene checkpoint (single protocol)");
  evaluate->add_option("--contrastive", args.contrastive_ckpt,
                       "contrastive checkpoint (single protocol)");
  evaluate->add_option("--out", args.out_path, "results path (default <root>/results.tsv)");

  CLI::App* embed = app.add_subcommand("embed", "export a 2-D projection of an embedding");
  add_common(embed, true);
  embed->add_option("--gene", args.gene_ckpt, "gene checkpoint");
  embed->add_option("--contrastive", args.contrastive_ckpt,
                    "contrastive checkpoint (image/gene sources)");
  embed->add_option("--out", args.out_path, "projection path (default <root>/embeddings.tsv)");

  CLI::App* report = app.add_subcommand("report", "summarize a results file");
  report->add_option("--in", args.in_path, "results file from evaluate")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : static_cast<int>(ExitCode::config);
  }

  try {
    if (report->parsed()) {
      cmd_report(args, out);
      return static_cast<int>(ExitCode::ok);
    }
    const RunConfig cfg = resolve_config(args);
    if (args.verbose) {
      out << "config hash " << config_hash(cfg) << ", seed " << cfg.seed << "\n";
    }
    if (generate->parsed()) {
      cmd_generate(args, cfg, out);
    } else if (train_gene->parsed()) {
      cmd_train_gene(args, cfg, out);
    } else if (train_con->parsed()) {
      cmd_train_contrastive(args, cfg, out);
    } else if (evaluate->parsed()) {
      cmd_evaluate(args, cfg, out);
    } else if (embed->parsed()) {
      cmd_embed(args, cfg, out);
    }
    return static_cast<int>(ExitCode::ok);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::config);
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::data);
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::numeric);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::failure);
  }
}

}  // namespace stc
