#include "stc/config.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "stc/errors.hpp"

namespace stc {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::string fmt_f64(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

[[noreturn]] void unknown_key(const std::string& path) {
  throw ConfigError(path + ": unknown key");
}

std::uint64_t parse_u64(const std::string& path, const std::string& value, std::uint64_t lo,
                        std::uint64_t hi) {
  std::uint64_t out = 0;
  std::size_t used = 0;
  bool ok = !value.empty() && value[0] != '-' && value[0] != '+';
  if (ok) {
    try {
      out = std::stoull(value, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    ok = used == value.size();
  }
  if (!ok) {
    throw ConfigError(path + ": cannot parse '" + value + "' as a non-negative integer");
  }
  if (out < lo || out > hi) {
    throw ConfigError(path + ": " + value + " out of range [" + std::to_string(lo) + ", " +
                      std::to_string(hi) + "]");
  }
  return out;
}

double parse_f64(const std::string& path, const std::string& value, double lo, double hi,
                 bool open_lo = false, bool open_hi = false) {
  double out = 0.0;
  std::size_t used = 0;
  bool ok = !value.empty();
  if (ok) {
    try {
      out = std::stod(value, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    ok = used == value.size();
  }
  if (!ok) throw ConfigError(path + ": cannot parse '" + value + "' as a number");
  const bool below = open_lo ? out <= lo : out < lo;
  const bool above = open_hi ? out >= hi : out > hi;
  if (below || above || !std::isfinite(out)) {
    throw ConfigError(path + ": " + value + " out of range " + (open_lo ? "(" : "[") +
                      fmt_f64(lo) + ", " + fmt_f64(hi) + (open_hi ? ")" : "]"));
  }
  return out;
}

bool parse_bool(const std::string& path, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError(path + ": cannot parse '" + value + "' as a bool (true/false)");
}

std::vector<std::size_t> parse_dims(const std::string& path, const std::string& value) {
  std::vector<std::size_t> dims;
  if (value.empty() || value == "none") return dims;
  std::istringstream is(value);
  std::string tok;
  while (std::getline(is, tok, ',')) {
    dims.push_back(parse_u64(path, trim(tok), 1, 1000000));
  }
  return dims;
}

std::string join_dims(const std::vector<std::size_t>& dims) {
  std::string out;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(dims[i]);
  }
  return out;
}

constexpr std::uint64_t kU64Max = std::numeric_limits<std::uint64_t>::max();

void apply_global(RunConfig& cfg, const std::string& key, const std::string& value) {
  const std::string path = "global." + key;
  if (key == "seed") {
    cfg.seed = parse_u64(path, value, 0, kU64Max);
  } else if (key == "output_dir") {
    cfg.output_dir = value;
  } else {
    unknown_key(path);
  }
}

void apply_dataset(RunConfig& cfg, const std::string& key, const std::string& value) {
  const std::string path = "dataset." + key;
  SynthConfig& s = cfg.synth;
  if (key == "path") {
    cfg.data_path = value;
  } else if (key == "top_genes") {
    cfg.top_genes = parse_u64(path, value, 0, 1000000000);
  } else if (key == "n_batches") {
    s.n_batches = parse_u64(path, value, 1, 1000000);
  } else if (key == "n_classes") {
    s.n_classes = parse_u64(path, value, 1, 1000000);
  } else if (key == "spots_per_batch") {
    s.spots_per_batch = parse_u64(path, value, 1, 1000000000);
  } else if (key == "n_genes") {
    s.n_genes = parse_u64(path, value, 1, 1000000000);
  } else if (key == "latent_dim_true") {
    s.latent_dim_true = parse_u64(path, value, 1, 1000000);
  } else if (key == "image_feature_dim") {
    s.image_feature_dim = parse_u64(path, value, 1, 1000000);
  } else if (key == "batch_effect_strength") {
    s.batch_effect_strength = parse_f64(path, value, 0.0, 1000.0);
  } else if (key == "zero_inflation_base") {
    s.zero_inflation_base = parse_f64(path, value, 0.0, 1.0, true, true);
  } else if (key == "dispersion_lo") {
    s.dispersion_lo = parse_f64(path, value, 0.0, 1000000.0, true);
  } else if (key == "dispersion_hi") {
    s.dispersion_hi = parse_f64(path, value, 0.0, 1000000.0, true);
  } else if (key == "labeled_fraction") {
    s.labeled_fraction = parse_f64(path, value, 0.0, 1.0);
  } else if (key == "seed") {
    s.seed = parse_u64(path, value, 0, kU64Max);
  } else {
    unknown_key(path);
  }
}

void apply_gene(RunConfig& cfg, const std::string& key, const std::string& value) {
  const std::string path = "gene_encoder." + key;
  GeneEncoderConfig& g = cfg.gene;
  if (key == "method") {
    if (value != "scvi" && value != "scanvi") {
      throw ConfigError(path + ": expected scvi or scanvi, got '" + value + "'");
    }
    cfg.method = value;
  } else if (key == "latent_dim") {
    g.latent_dim = parse_u64(path, value, 1, 1000000);
  } else if (key == "enc_hidden") {
    g.enc_hidden = parse_dims(path, value);
  } else if (key == "dec_hidden") {
    g.dec_hidden = parse_dims(path, value);
  } else if (key == "aux_hidden") {
    g.aux_hidden = parse_dims(path, value);
  } else if (key == "activation") {
    try {
      g.activation = parse_activation(value);
    } catch (const ConfigError& e) {
      throw ConfigError(path + ": " + e.what());
    }
  } else if (key == "dropout") {
    g.dropout_rate = parse_f64(path, value, 0.0, 1.0, false, true);
  } else if (key == "lr") {
    g.lr = parse_f64(path, value, 0.0, 1000.0, true);
  } else if (key == "weight_decay") {
    g.weight_decay = parse_f64(path, value, 0.0, 1000.0);
  } else if (key == "batch_size") {
    g.batch_size = parse_u64(path, value, 1, 1000000000);
  } else if (key == "epochs") {
    g.epochs = parse_u64(path, value, 1, 1000000);
  } else if (key == "scanvi_alpha") {
    g.scanvi_alpha = parse_f64(path, value, -1.0, 1000000.0);
  } else {
    unknown_key(path);
  }
}

void apply_contrastive(RunConfig& cfg, const std::string& key, const std::string& value) {
  const std::string path = "contrastive." + key;
  ContrastiveConfig& c = cfg.contrastive;
  if (key == "loss") {
    try {
      c.loss_kind = parse_loss_kind(value);
    } catch (const ConfigError& e) {
      throw ConfigError(path + ": " + e.what());
    }
  } else if (key == "tau") {
    c.tau = parse_f64(path, value, 0.0, 1000.0, true);
  } else if (key == "d_proj") {
    c.d_proj = parse_u64(path, value, 1, 1000000);
  } else if (key == "img_out_dim") {
    c.img_out_dim = parse_u64(path, value, 1, 1000000);
  } else if (key == "img_hidden") {
    c.img_hidden = parse_dims(path, value);
  } else if (key == "dropout") {
    c.dropout_rate = parse_f64(path, value, 0.0, 1.0, false, true);
  } else if (key == "lr") {
    c.lr = parse_f64(path, value, 0.0, 1000.0, true);
  } else if (key == "weight_decay") {
    c.weight_decay = parse_f64(path, value, 0.0, 1000.0);
  } else if (key == "batch_size") {
    c.batch_size = parse_u64(path, value, 1, 1000000000);
  } else if (key == "epochs") {
    c.epochs = parse_u64(path, value, 1, 1000000);
  } else {
    unknown_key(path);
  }
}

void apply_eval(RunConfig& cfg, const std::string& key, const std::string& value) {
  const std::string path = "eval." + key;
  FinetuneConfig& f = cfg.finetune;
  if (key == "protocol") {
    if (value != "single" && value != "louo") {
      throw ConfigError(path + ": expected single or louo, got '" + value + "'");
    }
    cfg.protocol = value;
  } else if (key == "mixing_k") {
    cfg.mixing_k = parse_u64(path, value, 1, 1000000);
  } else if (key == "n_seeds") {
    cfg.n_seeds = parse_u64(path, value, 1, 10000);
  } else if (key == "n_threads") {
    cfg.n_threads = parse_u64(path, value, 0, 4096);
  } else if (key == "embed_source") {
    try {
      cfg.embed_source = parse_embedding_source(value);
    } catch (const ConfigError& e) {
      throw ConfigError(path + ": " + e.what());
    }
  } else if (key == "finetune_lr") {
    f.lr = parse_f64(path, value, 0.0, 1000.0, true);
  } else if (key == "finetune_weight_decay") {
    f.weight_decay = parse_f64(path, value, 0.0, 1000.0);
  } else if (key == "finetune_epochs") {
    f.epochs = parse_u64(path, value, 1, 1000000);
  } else if (key == "finetune_batch_size") {
    f.batch_size = parse_u64(path, value, 1, 1000000000);
  } else if (key == "head_only") {
    f.head_only = parse_bool(path, value);
  } else if (key == "val_fraction") {
    f.val_fraction = parse_f64(path, value, 0.0, 1.0, false, true);
  } else {
    unknown_key(path);
  }
}

std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "gelu") return Activation::gelu;
  throw ConfigError("unknown activation '" + name + "' (expected relu or gelu)");
}

std::string to_string(Activation act) {
  return act == Activation::relu ? "relu" : "gelu";
}

void RunConfig::validate() const {
  if (method != "scvi" && method != "scanvi") {
    throw ConfigError("gene_encoder.method: expected scvi or scanvi, got '" + method + "'");
  }
  if (protocol != "single" && protocol != "louo") {
    throw ConfigError("eval.protocol: expected single or louo, got '" + protocol + "'");
  }
  if (mixing_k == 0) throw ConfigError("eval.mixing_k: must be >= 1");
  if (n_seeds == 0) throw ConfigError("eval.n_seeds: must be >= 1");
  synth.validate();
  gene.validate();
  contrastive.validate();
  finetune.validate();
}

LouoConfig RunConfig::louo() const {
  LouoConfig out;
  out.method = method;
  out.gene = gene;
  out.contrastive = contrastive;
  out.finetune = finetune;
  out.n_seeds = n_seeds;
  out.base_seed = seed;
  out.mixing_k = mixing_k;
  out.n_threads = n_threads;
  return out;
}

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string raw;
  std::string section;
  std::size_t line_no = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    const auto comment = raw.find_first_of("#;");
    if (comment != std::string::npos) raw.erase(comment);
    const std::string line = trim(raw);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) {
        throw ConfigError("line " + std::to_string(line_no) + ": malformed section header '" +
                          line + "'");
      }
      section = trim(line.substr(1, line.size() - 2));
      if (section != "global" && section != "dataset" && section != "gene_encoder" &&
          section != "contrastive" && section != "eval") {
        throw ConfigError("line " + std::to_string(line_no) + ": unknown section '[" + section +
                          "]'");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value, got '" +
                        line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    }
    if (section.empty()) {
      throw ConfigError("line " + std::to_string(line_no) + ": key '" + key +
                        "' appears before any [section] header");
    }
    if (section == "global") {
      apply_global(cfg, key, value);
    } else if (section == "dataset") {
      apply_dataset(cfg, key, value);
    } else if (section == "gene_encoder") {
      apply_gene(cfg, key, value);
    } else if (section == "contrastive") {
      apply_contrastive(cfg, key, value);
    } else {
      apply_eval(cfg, key, value);
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError(path + ": cannot open");
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str());
}

std::string canonical_config(const RunConfig& cfg) {
  std::ostringstream os;
  os << "[global]\n";
  os << "seed = " << cfg.seed << "\n";
  os << "output_dir = " << cfg.output_dir << "\n";
  os << "\n[dataset]\n";
  os << "path = " << cfg.data_path << "\n";
  os << "top_genes = " << cfg.top_genes << "\n";
  os << "n_batches = " << cfg.synth.n_batches << "\n";
  os << "n_classes = " << cfg.synth.n_classes << "\n";
  os << "spots_per_batch = " << cfg.synth.spots_per_batch << "\n";
  os << "n_genes = " << cfg.synth.n_genes << "\n";
  os << "latent_dim_true = " << cfg.synth.latent_dim_true << "\n";
  os << "image_feature_dim = " << cfg.synth.image_feature_dim << "\n";
  os << "batch_effect_strength = " << fmt_f64(cfg.synth.batch_effect_strength) << "\n";
  os << "zero_inflation_base = " << fmt_f64(cfg.synth.zero_inflation_base) << "\n";
  os << "dispersion_lo = " << fmt_f64(cfg.synth.dispersion_lo) << "\n";
  os << "dispersion_hi = " << fmt_f64(cfg.synth.dispersion_hi) << "\n";
  os << "labeled_fraction = " << fmt_f64(cfg.synth.labeled_fraction) << "\n";
  os << "seed = " << cfg.synth.seed << "\n";
  os << "\n[gene_encoder]\n";
  os << "method = " << cfg.method << "\n";
  os << "latent_dim = " << cfg.gene.latent_dim << "\n";
  os << "enc_hidden = " << join_dims(cfg.gene.enc_hidden) << "\n";
  os << "dec_hidden = " << join_dims(cfg.gene.dec_hidden) << "\n";
  os << "aux_hidden = " << join_dims(cfg.gene.aux_hidden) << "\n";
  os << "activation = " << to_string(cfg.gene.activation) << "\n";
  os << "dropout = " << fmt_f64(cfg.gene.dropout_rate) << "\n";
  os << "lr = " << fmt_f64(cfg.gene.lr) << "\n";
  os << "weight_decay = " << fmt_f64(cfg.gene.weight_decay) << "\n";
  os << "batch_size = " << cfg.gene.batch_size << "\n";
  os << "epochs = " << cfg.gene.epochs << "\n";
  os << "scanvi_alpha = " << fmt_f64(cfg.gene.scanvi_alpha) << "\n";
  os << "\n[contrastive]\n";
  os << "loss = " << to_string(cfg.contrastive.loss_kind) << "\n";
  os << "tau = " << fmt_f64(cfg.contrastive.tau) << "\n";
  os << "d_proj = " << cfg.contrastive.d_proj << "\n";
  os << "img_out_dim = " << cfg.contrastive.img_out_dim << "\n";
  os << "img_hidden = " << join_dims(cfg.contrastive.img_hidden) << "\n";
  os << "dropout = " << fmt_f64(cfg.contrastive.dropout_rate) << "\n";
  os << "lr = " << fmt_f64(cfg.contrastive.lr) << "\n";
  os << "weight_decay = " << fmt_f64(cfg.contrastive.weight_decay) << "\n";
  os << "batch_size = " << cfg.contrastive.batch_size << "\n";
  os << "epochs = " << cfg.contrastive.epochs << "\n";
  os << "\n[eval]\n";
  os << "protocol = " << cfg.protocol << "\n";
  os << "mixing_k = " << cfg.mixing_k << "\n";
  os << "n_seeds = " << cfg.n_seeds << "\n";
  os << "n_threads = " << cfg.n_threads << "\n";
  os << "embed_source = " << to_string(cfg.embed_source) << "\n";
  os << "finetune_lr = " << fmt_f64(cfg.finetune.lr) << "\n";
  os << "finetune_weight_decay = " << fmt_f64(cfg.finetune.weight_decay) << "\n";
  os << "finetune_epochs = " << cfg.finetune.epochs << "\n";
  os << "finetune_batch_size = " << cfg.finetune.batch_size << "\n";
  os << "head_only = " << (cfg.finetune.head_only ? "true" : "false") << "\n";
  os << "val_fraction = " << fmt_f64(cfg.finetune.val_fraction) << "\n";
  return os.str();
}

std::string config_hash(const RunConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, fnv1a64(canonical_config(cfg)));
  return buf;
}

std::string provenance_line(const RunConfig& cfg) {
  return "# provenance config=" + config_hash(cfg) + " seed=" + std::to_string(cfg.seed) +
         " version=" + kVersion;
}

}  // namespace stc
