#pragma once

#include <cstdint>
#include <string>

#include "stc/contrastive.hpp"
#include "stc/eval.hpp"
#include "stc/scvi.hpp"
#include "stc/synthetic.hpp"

namespace stc {

inline constexpr const char* kVersion = "0.1.0";

// The whole pipeline in one declarative file. The on-disk format is
// flat-sectioned UTF-8 text: `[section]` headers followed by `key = value`
// lines; `#` and `;` start comments. Sections: global, dataset,
// gene_encoder, contrastive, eval. Every key has a default, so an empty
// file is a valid config; unknown sections or keys are hard errors.
struct RunConfig {
  // [global]
  std::uint64_t seed = 0;
  std::string output_dir;  // empty: $STC_OUTPUT_ROOT, then "runs"

  // [dataset] — `path` empty means "synthesize with the knobs below".
  std::string data_path;
  std::size_t top_genes = 0;  // keep the top-k variable genes on load; 0 = all
  SynthConfig synth;

  // [gene_encoder]
  std::string method = "scvi";  // scvi | scanvi
  GeneEncoderConfig gene;

  // [contrastive]
  ContrastiveConfig contrastive;

  // [eval]
  std::string protocol = "single";  // single | louo
  FinetuneConfig finetune;
  std::size_t mixing_k = 15;
  std::size_t n_seeds = 10;
  std::size_t n_threads = 0;  // 0 = hardware concurrency
  EmbeddingSource embed_source = EmbeddingSource::latent;

  void validate() const;  // ConfigError; delegates to the section validators

  // The assembled view run_louo consumes (base_seed = seed).
  LouoConfig louo() const;
};

// Parses config text. Unknown sections/keys and malformed or out-of-range
// values raise ConfigError naming the offending "section.key" path.
RunConfig parse_config_text(const std::string& text);

// Reads and parses a config file; DataError when the file cannot be read.
RunConfig load_config(const std::string& path);

// Deterministic rendering with every key present in a fixed order. Parsing
// it back yields an equivalent config, so two configs are interchangeable
// iff their canonical forms match byte for byte.
std::string canonical_config(const RunConfig& cfg);

// 16 hex digits of FNV-1a 64 over the canonical form.
std::string config_hash(const RunConfig& cfg);

// "# provenance config=<hash> seed=<seed> version=<kVersion>" — the header
// stamped into every artifact this pipeline writes.
std::string provenance_line(const RunConfig& cfg);

Activation parse_activation(const std::string& name);  // "relu" | "gelu"
std::string to_string(Activation act);

}  // namespace stc
