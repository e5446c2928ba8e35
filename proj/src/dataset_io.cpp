#include "stc/dataset_io.hpp"

#include <charconv>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "stc/errors.hpp"
#include "stc/log.hpp"
#include "stc/rng.hpp"

namespace stc {

namespace {

namespace fs = std::filesystem;

const char* kDataFiles[] = {"counts.tsv", "metadata.tsv", "features.tsv", "genes.txt"};

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DataError(p.string() + ": cannot open");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::uint64_t content_checksum(const fs::path& dir) {
  std::string all;
  for (const char* f : kDataFiles) all += read_file(dir / f);
  return fnv1a64(all);
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

[[noreturn]] void parse_fail(const std::string& file, std::size_t line_no,
                             const std::string& msg) {
  throw DataError(file + ":" + std::to_string(line_no) + ": " + msg);
}

long long parse_int(const std::string& tok, const std::string& file, std::size_t line_no,
                    const std::string& what) {
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size()) {
    parse_fail(file, line_no, what + " is not an integer: '" + tok + "'");
  }
  return v;
}

double parse_double(const std::string& tok, const std::string& file, std::size_t line_no,
                    const std::string& what) {
  if (tok.empty()) parse_fail(file, line_no, what + " is empty");
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end != tok.c_str() + tok.size() || !std::isfinite(v)) {
    parse_fail(file, line_no, what + " is not a finite number: '" + tok + "'");
  }
  return v;
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::string raw = read_file(p);
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < raw.size()) {
    std::size_t nl = raw.find('\n', start);
    if (nl == std::string::npos) nl = raw.size();
    lines.push_back(raw.substr(start, nl - start));
    start = nl + 1;
  }
  return lines;
}

}  // namespace

void save_dataset(const SpotDataset& ds, const std::string& dir) {
  ds.validate();
  fs::create_directories(dir);
  const fs::path root(dir);

  {
    std::ofstream os(root / "counts.tsv", std::ios::binary | std::ios::trunc);
    for (std::size_t i = 0; i < ds.n_spots; ++i)
      for (std::size_t g = 0; g < ds.n_genes; ++g) {
        const double c = ds.count(i, g);
        if (c != 0.0) os << i << '\t' << g << '\t' << static_cast<long long>(c) << '\n';
      }
    if (!os) throw DataError(dir + "/counts.tsv: write failed");
  }
  {
    std::ofstream os(root / "metadata.tsv", std::ios::binary | std::ios::trunc);
    os << "spot_id\tbatch\tx_um\ty_um\tlabel\n";
    char buf[160];
    for (std::size_t i = 0; i < ds.n_spots; ++i) {
      std::snprintf(buf, sizeof buf, "%zu\t%d\t%.17g\t%.17g\t%d\n", i, ds.batch_ids[i],
                    ds.x_um[i], ds.y_um[i], ds.labels[i]);
      os << buf;
    }
    if (!os) throw DataError(dir + "/metadata.tsv: write failed");
  }
  {
    std::ofstream os(root / "features.tsv", std::ios::binary | std::ios::trunc);
    char buf[64];
    for (std::size_t i = 0; i < ds.n_spots; ++i) {
      for (std::size_t j = 0; j < ds.image_dim; ++j) {
        std::snprintf(buf, sizeof buf, "%.17g", ds.image_features[i * ds.image_dim + j]);
        os << (j ? "\t" : "") << buf;
      }
      os << '\n';
    }
    if (!os) throw DataError(dir + "/features.tsv: write failed");
  }
  {
    std::ofstream os(root / "genes.txt", std::ios::binary | std::ios::trunc);
    for (const auto& g : ds.gene_names) os << g << '\n';
    if (!os) throw DataError(dir + "/genes.txt: write failed");
  }
  {
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016" PRIx64, content_checksum(root));
    std::ofstream os(root / "manifest.txt", std::ios::binary | std::ios::trunc);
    os << "n_spots=" << ds.n_spots << '\n'
       << "n_genes=" << ds.n_genes << '\n'
       << "n_batches=" << ds.n_batches << '\n'
       << "n_classes=" << ds.n_classes << '\n'
       << "image_dim=" << ds.image_dim << '\n'
       << "checksum=" << hex << '\n';
    if (!os) throw DataError(dir + "/manifest.txt: write failed");
  }
}

SpotDataset load_dataset(const std::string& dir, const LoadOptions& opts) {
  const fs::path root(dir);
  if (!fs::exists(root / "manifest.txt")) {
    throw DataError(dir + ": not a dataset directory (manifest.txt missing)");
  }

  // manifest
  SpotDataset ds;
  std::uint64_t declared_checksum = 0;
  bool have_checksum = false;
  {
    const std::string file = (root / "manifest.txt").string();
    auto lines = read_lines(root / "manifest.txt");
    for (std::size_t ln = 0; ln < lines.size(); ++ln) {
      const std::string& line = lines[ln];
      if (line.empty()) continue;
      const std::size_t eq = line.find('=');
      if (eq == std::string::npos) parse_fail(file, ln + 1, "expected key=value");
      const std::string key = line.substr(0, eq);
      const std::string val = line.substr(eq + 1);
      if (key == "n_spots") {
        ds.n_spots = static_cast<std::size_t>(parse_int(val, file, ln + 1, "n_spots"));
      } else if (key == "n_genes") {
        ds.n_genes = static_cast<std::size_t>(parse_int(val, file, ln + 1, "n_genes"));
      } else if (key == "n_batches") {
        ds.n_batches = static_cast<std::size_t>(parse_int(val, file, ln + 1, "n_batches"));
      } else if (key == "n_classes") {
        ds.n_classes = static_cast<std::size_t>(parse_int(val, file, ln + 1, "n_classes"));
      } else if (key == "image_dim") {
        ds.image_dim = static_cast<std::size_t>(parse_int(val, file, ln + 1, "image_dim"));
      } else if (key == "checksum") {
        if (val.size() != 16) parse_fail(file, ln + 1, "checksum must be 16 hex digits");
        declared_checksum = std::strtoull(val.c_str(), nullptr, 16);
        have_checksum = true;
      } else {
        parse_fail(file, ln + 1, "unknown manifest key '" + key + "'");
      }
    }
    if (ds.n_spots == 0 || ds.n_genes == 0 || ds.n_batches == 0) {
      throw DataError(file + ": manifest is missing required dimensions");
    }
    if (!have_checksum) throw DataError(file + ": manifest is missing the checksum");
  }

  if (content_checksum(root) != declared_checksum) {
    throw DataError(dir + ": content checksum mismatch — dataset files are corrupted");
  }

  // counts (sparse triplets)
  ds.counts.assign(ds.n_spots * ds.n_genes, 0.0);
  {
    const std::string file = (root / "counts.tsv").string();
    auto lines = read_lines(root / "counts.tsv");
    for (std::size_t ln = 0; ln < lines.size(); ++ln) {
      if (lines[ln].empty()) continue;
      auto cols = split_tabs(lines[ln]);
      if (cols.size() != 3) parse_fail(file, ln + 1, "expected spot<TAB>gene<TAB>count");
      const long long spot = parse_int(cols[0], file, ln + 1, "spot index");
      const long long gene = parse_int(cols[1], file, ln + 1, "gene index");
      if (spot < 0 || static_cast<std::size_t>(spot) >= ds.n_spots) {
        parse_fail(file, ln + 1, "spot index " + cols[0] + " out of range");
      }
      if (gene < 0 || static_cast<std::size_t>(gene) >= ds.n_genes) {
        parse_fail(file, ln + 1, "gene index " + cols[1] + " out of range");
      }
      const long long c = parse_int(
          cols[2], file, ln + 1,
          "count for spot " + cols[0] + ", gene " + cols[1]);
      if (c < 0) {
        parse_fail(file, ln + 1, "count for spot " + cols[0] + " is negative");
      }
      ds.counts[static_cast<std::size_t>(spot) * ds.n_genes + static_cast<std::size_t>(gene)] =
          static_cast<double>(c);
    }
  }

  // metadata
  {
    const std::string file = (root / "metadata.tsv").string();
    auto lines = read_lines(root / "metadata.tsv");
    if (lines.empty() || lines[0] != "spot_id\tbatch\tx_um\ty_um\tlabel") {
      parse_fail(file, 1, "malformed header");
    }
    if (lines.size() - 1 != ds.n_spots) {
      parse_fail(file, lines.size(),
                 "expected " + std::to_string(ds.n_spots) + " rows, found " +
                     std::to_string(lines.size() - 1));
    }
    ds.batch_ids.resize(ds.n_spots);
    ds.x_um.resize(ds.n_spots);
    ds.y_um.resize(ds.n_spots);
    ds.labels.resize(ds.n_spots);
    for (std::size_t i = 0; i < ds.n_spots; ++i) {
      const std::size_t ln = i + 2;
      auto cols = split_tabs(lines[i + 1]);
      if (cols.size() != 5) parse_fail(file, ln, "expected 5 tab-separated columns");
      if (static_cast<std::size_t>(parse_int(cols[0], file, ln, "spot_id")) != i) {
        parse_fail(file, ln, "spot_id out of order: '" + cols[0] + "'");
      }
      const long long batch = parse_int(cols[1], file, ln, "batch");
      if (batch < 0 || static_cast<std::size_t>(batch) >= ds.n_batches) {
        parse_fail(file, ln, "unknown batch id '" + cols[1] + "'");
      }
      ds.batch_ids[i] = static_cast<int>(batch);
      ds.x_um[i] = parse_double(cols[2], file, ln, "x_um");
      ds.y_um[i] = parse_double(cols[3], file, ln, "y_um");
      const long long label = parse_int(cols[4], file, ln, "label");
      if (label < -1 || (label >= 0 && static_cast<std::size_t>(label) >= ds.n_classes)) {
        parse_fail(file, ln, "label '" + cols[4] + "' out of range");
      }
      ds.labels[i] = static_cast<int>(label);
    }
  }

  // image features
  {
    const std::string file = (root / "features.tsv").string();
    auto lines = read_lines(root / "features.tsv");
    if (lines.size() != ds.n_spots) {
      parse_fail(file, lines.size(),
                 "expected " + std::to_string(ds.n_spots) + " rows, found " +
                     std::to_string(lines.size()));
    }
    ds.image_features.resize(ds.n_spots * ds.image_dim);
    for (std::size_t i = 0; i < ds.n_spots; ++i) {
      auto cols = split_tabs(lines[i]);
      if (cols.size() != ds.image_dim) {
        parse_fail(file, i + 1, "expected " + std::to_string(ds.image_dim) + " features");
      }
      for (std::size_t j = 0; j < ds.image_dim; ++j) {
        ds.image_features[i * ds.image_dim + j] =
            parse_double(cols[j], file, i + 1, "feature " + std::to_string(j));
      }
    }
  }

  // gene names
  {
    const std::string file = (root / "genes.txt").string();
    auto lines = read_lines(root / "genes.txt");
    if (lines.size() != ds.n_genes) {
      parse_fail(file, lines.size(),
                 "expected " + std::to_string(ds.n_genes) + " gene names, found " +
                     std::to_string(lines.size()));
    }
    ds.gene_names = std::move(lines);
  }

  // drop zero-total spots
  std::vector<std::size_t> keep;
  keep.reserve(ds.n_spots);
  for (std::size_t i = 0; i < ds.n_spots; ++i) {
    double total = 0.0;
    for (std::size_t g = 0; g < ds.n_genes; ++g) total += ds.counts[i * ds.n_genes + g];
    if (total > 0.0) keep.push_back(i);
  }
  if (keep.size() != ds.n_spots) {
    Log::warn("load_dataset: dropped " + std::to_string(ds.n_spots - keep.size()) +
              " spot(s) with zero total count");
    SpotDataset filtered;
    filtered.n_spots = keep.size();
    filtered.n_genes = ds.n_genes;
    filtered.n_batches = ds.n_batches;
    filtered.n_classes = ds.n_classes;
    filtered.image_dim = ds.image_dim;
    filtered.gene_names = std::move(ds.gene_names);
    filtered.counts.reserve(keep.size() * ds.n_genes);
    filtered.image_features.reserve(keep.size() * ds.image_dim);
    for (std::size_t i : keep) {
      filtered.counts.insert(filtered.counts.end(), ds.counts.begin() + i * ds.n_genes,
                             ds.counts.begin() + (i + 1) * ds.n_genes);
      filtered.image_features.insert(filtered.image_features.end(),
                                     ds.image_features.begin() + i * ds.image_dim,
                                     ds.image_features.begin() + (i + 1) * ds.image_dim);
      filtered.batch_ids.push_back(ds.batch_ids[i]);
      filtered.x_um.push_back(ds.x_um[i]);
      filtered.y_um.push_back(ds.y_um[i]);
      filtered.labels.push_back(ds.labels[i]);
    }
    ds = std::move(filtered);
  }

  ds.validate();
  if (opts.top_k_genes > 0 && opts.top_k_genes < ds.n_genes) {
    ds = select_top_genes(ds, opts.top_k_genes);
  }
  return ds;
}

}  // namespace stc
