#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pls/tensor.hpp"

namespace pls {

// On-disk container: magic "PLS1", version u16, tensor count u32; per tensor:
// name length u16, UTF-8 name, dtype u8, rank u8, dims u32 each, raw data.
// All integers and element payloads are little-endian. Round-trips byte-exactly.

inline constexpr uint16_t kCheckpointVersion = 1;

struct RawTensor {
  std::string name;
  Dtype dtype = Dtype::Single;
  std::vector<uint32_t> dims;
  std::vector<uint8_t> bytes;  // little-endian element payload

  size_t element_count() const {
    size_t n = 1;
    for (uint32_t d : dims) n *= d;
    return n;
  }
};

struct CheckpointMeta {
  std::string config_hash;
  uint64_t seed = 0;
  uint64_t iter = 0;
  Dtype dtype = Dtype::Single;
  std::string model_json;  // serialized ModelSpec, empty when not applicable
  std::string extra_json;  // free-form JSON object, empty when not applicable
};

void write_pls1(const std::string& path, const std::vector<RawTensor>& tensors);
std::vector<RawTensor> read_pls1(const std::string& path);

// Writes <path> plus a "<path>.json" manifest describing the run.
template <typename T>
void save_checkpoint(const std::string& path, const ParamStore<T>& params,
                     const CheckpointMeta& meta);

template <typename T>
ParamStore<T> read_params(const std::string& path);

Dtype checkpoint_dtype(const std::string& path);
CheckpointMeta read_manifest(const std::string& path);  // path of the .pls1 file

template <typename T>
std::vector<RawTensor> to_raw(const ParamStore<T>& params);
template <typename T>
ParamStore<T> from_raw(const std::vector<RawTensor>& tensors);

}  // namespace pls
