#include "stc/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "stc/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint i/o assumes a little-endian host");

namespace stc::checkpoint {

namespace {

constexpr char kMagic[4] = {'S', 'T', 'C', 'K'};

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::istream& is, const std::string& path) {
  std::uint32_t v;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw DataError(path + ": truncated checkpoint");
  }
  return v;
}

std::uint64_t read_u64(std::istream& is, const std::string& path) {
  std::uint64_t v;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw DataError(path + ": truncated checkpoint");
  }
  return v;
}

}  // namespace

void save(const std::string& path, const std::vector<Param>& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError(path + ": cannot open for writing");
  os.write(kMagic, 4);
  write_u32(os, kFormatVersion);
  for (const auto& p : params) {
    write_u32(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_u32(os, 2);
    write_u64(os, p.tensor.rows());
    write_u64(os, p.tensor.cols());
    os.write(reinterpret_cast<const char*>(p.tensor.data().data()),
             static_cast<std::streamsize>(p.tensor.size() * sizeof(double)));
  }
  if (!os) throw DataError(path + ": write failed");
}

std::map<std::string, Tensor> load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError(path + ": cannot open checkpoint");
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw DataError(path + ": not a checkpoint file (bad magic)");
  }
  const std::uint32_t version = read_u32(is, path);
  if (version != kFormatVersion) {
    throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  std::map<std::string, Tensor> out;
  while (true) {
    std::uint32_t name_len;
    if (!is.read(reinterpret_cast<char*>(&name_len), sizeof name_len)) break;  // clean EOF
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw DataError(path + ": truncated checkpoint");
    const std::uint32_t rank = read_u32(is, path);
    if (rank < 1 || rank > 2) {
      throw DataError(path + ": record '" + name + "' has unsupported rank " +
                      std::to_string(rank));
    }
    std::uint64_t rows = 1, cols;
    if (rank == 2) rows = read_u64(is, path);
    cols = read_u64(is, path);
    if (rows == 0 || cols == 0 || rows * cols > (1ull << 32)) {
      throw DataError(path + ": record '" + name + "' has implausible shape");
    }
    Tensor t = Tensor::zeros(rows, cols);
    if (!is.read(reinterpret_cast<char*>(t.data().data()),
                 static_cast<std::streamsize>(t.size() * sizeof(double)))) {
      throw DataError(path + ": truncated checkpoint");
    }
    if (!out.emplace(std::move(name), std::move(t)).second) {
      throw DataError(path + ": duplicate record name");
    }
  }
  return out;
}

void load_into(const std::string& path, std::vector<Param>& params) {
  auto records = load(path);
  for (auto& p : params) {
    auto it = records.find(p.name);
    if (it == records.end()) {
      throw DataError(path + ": checkpoint is missing parameter '" + p.name + "'");
    }
    if (!it->second.same_shape(p.tensor)) {
      throw DataError(path + ": parameter '" + p.name + "' has mismatched shape");
    }
    p.tensor.data() = it->second.data();
    records.erase(it);
  }
  if (!records.empty()) {
    throw DataError(path + ": checkpoint has unexpected record '" + records.begin()->first + "'");
  }
}

}  // namespace stc::checkpoint
