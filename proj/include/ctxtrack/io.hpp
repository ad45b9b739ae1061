#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ctxtrack/nn.hpp"
#include "ctxtrack/scenario.hpp"

namespace ctxtrack {

/// Malformed or truncated container bytes.
class FormatError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

inline constexpr std::uint32_t kTensorFormatVersion = 1;
inline constexpr std::uint32_t kScenarioFormatVersion = 1;

using NamedTensors = std::map<std::string, Tensor>;

/// Named-tensor container, all integers and floats little-endian:
///   "CTXT" u32 version, u64 count, then per entry in name order:
///   u64 name length, name bytes, u64 rank, rank x u64 dims, f64 data.
std::string encode_tensors(const NamedTensors& tensors);
NamedTensors decode_tensors(const std::string& bytes);

void save_checkpoint(const std::string& path, const ParameterSet& params);
ParameterSet load_checkpoint(const std::string& path);

/// Run lengths of a binary H x W mask in row-major order, starting with a
/// (possibly empty) run of zeros. Throws FormatError on non-binary values.
std::vector<std::uint64_t> rle_encode(const Tensor& mask);
Tensor rle_decode(const std::vector<std::uint64_t>& runs, std::size_t height, std::size_t width);

/// Scenario file:
///   "CTXS" u32 version, u64 + canonical config text,
///   u64 frames, height, width, track count; per track u64 identity, u64 label,
///   per frame u8 present and, when present, u64 run count + u64 runs;
///   per frame u64 detection count + u64 object index (2^64-1 for padding);
///   u64 + named-tensor container with frameNNN.{features,core,masks,class_scores}.
std::string encode_scenario(const Scenario& scenario);
Scenario decode_scenario(const std::string& bytes);
void save_scenario(const std::string& path, const Scenario& scenario);
Scenario load_scenario(const std::string& path);

std::string read_binary_file(const std::string& path);
/// Write to a sibling temp file and rename over `path`.
void write_file_atomic(const std::string& path, const std::string& bytes);

}  // namespace ctxtrack
