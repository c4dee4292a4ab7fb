#pragma once

// Binary parameter checkpoint:
//
//   "OSKA" | u32 version | u32 input_dim | u32 n_hidden | u32 hidden[n_hidden]
//   | u32 output_dim | u32 activation | u32 shared_inner_lr | u64 seed
//   | f64 inner_lr_init | f64 values[...]
//
// All integers and floats little-endian. Values follow flatten() order:
// per layer the row-major weight then the bias, then the log step sizes.

#include <cstdint>
#include <string>

#include "osaka/models.hpp"

namespace osaka {

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const ModelParams& params);
/// Throws FormatError on a bad magic, version, or truncated payload.
ModelParams decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::string& path, const ModelParams& params);
ModelParams load_checkpoint(const std::string& path);

}  // namespace osaka
