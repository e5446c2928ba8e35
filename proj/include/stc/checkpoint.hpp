#pragma once

#include <map>
#include <string>
#include <vector>

#include "stc/nn.hpp"
#include "stc/tensor.hpp"

namespace stc::checkpoint {

// Binary parameter checkpoint. Layout:
//   magic "STCK" | format version u32 | records...
// and each record is
//   name length u32 | UTF-8 name | rank u32 | dims u64 each | f64 payload.
// All integers and floats are little-endian. Records run to end of file.
inline constexpr std::uint32_t kFormatVersion = 1;

void save(const std::string& path, const std::vector<Param>& params);

// Reads every record. Corrupt or truncated files raise DataError.
std::map<std::string, Tensor> load(const std::string& path);

// Copies checkpoint values into existing parameters, matching strictly by
// name and shape; any missing or extra record raises DataError.
void load_into(const std::string& path, std::vector<Param>& params);

}  // namespace stc::checkpoint
