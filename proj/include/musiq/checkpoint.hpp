#pragma once

#include <bit>
#include <cstdint>
#include <string>
#include <vector>

#include "musiq/config.hpp"
#include "musiq/model.hpp"

namespace musiq {

// Single-file checkpoint:
//   "MUSIQ1\n" <decimal header byte count> "\n" <JSON header> "\n" <payload>
// The header carries the full model config and a tensor index of
// (name, dtype, shape, offset, bytes); offsets are relative to the payload
// start. The payload is raw little-endian IEEE-754 scalars in index order.
// Serialization is canonical, so save -> load -> save is byte-identical.

struct TensorIndexEntry {
  std::string name;
  std::string dtype;
  Shape shape;
  uint64_t offset = 0;
  uint64_t bytes = 0;
};

struct CheckpointFile {
  ModelConfig config;
  std::vector<TensorIndexEntry> index;
  std::vector<uint8_t> payload;
};

inline constexpr char kCheckpointMagic[] = "MUSIQ1";

CheckpointFile read_checkpoint(const std::string& path);
void write_checkpoint(const std::string& path, const CheckpointFile& file);

namespace detail {

template <typename T>
std::vector<uint8_t> tensor_bytes(const Tensor<T>& t) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint payload assumes a little-endian host");
  std::vector<uint8_t> out(static_cast<size_t>(t.numel()) * sizeof(T));
  std::memcpy(out.data(), t.data(), out.size());
  return out;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& model) {
  CheckpointFile file;
  file.config = model.config();
  uint64_t offset = 0;
  for (const auto& e : model.params().entries()) {
    std::vector<uint8_t> bytes = detail::tensor_bytes(e.value);
    file.index.push_back(TensorIndexEntry{e.name, dtype_name<T>(), e.value.shape(), offset,
                                          static_cast<uint64_t>(bytes.size())});
    file.payload.insert(file.payload.end(), bytes.begin(), bytes.end());
    offset += bytes.size();
  }
  write_checkpoint(path, file);
}

template <typename T>
Model<T> load_checkpoint(const std::string& path) {
  CheckpointFile file = read_checkpoint(path);
  ParamStore<T> params;
  for (const TensorIndexEntry& e : file.index) {
    int64_t n = shape_numel(e.shape);
    Tensor<T> t(e.shape);
    const uint8_t* src = file.payload.data() + e.offset;
    if (e.dtype == "float32") {
      if (e.bytes != static_cast<uint64_t>(n) * 4)
        throw IoError("checkpoint: byte length mismatch for " + e.name);
      for (int64_t i = 0; i < n; ++i) {
        float v;
        std::memcpy(&v, src + i * 4, 4);
        t[i] = static_cast<T>(v);
      }
    } else if (e.dtype == "float64") {
      if (e.bytes != static_cast<uint64_t>(n) * 8)
        throw IoError("checkpoint: byte length mismatch for " + e.name);
      for (int64_t i = 0; i < n; ++i) {
        double v;
        std::memcpy(&v, src + i * 8, 8);
        t[i] = static_cast<T>(v);
      }
    } else {
      throw IoError("checkpoint: unknown dtype " + e.dtype);
    }
    params.adopt(e.name, std::move(t));
  }
  return Model<T>(file.config, std::move(params));
}

}  // namespace musiq
