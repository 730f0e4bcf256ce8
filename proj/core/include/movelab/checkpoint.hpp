#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "movelab/model.hpp"

namespace movelab {

enum class StorageDtype : uint8_t { f64, f32 };

/// Adam moment estimates, one pair per model tensor in canonical order.
struct AdamState {
  std::vector<Array> m, v;
  int64_t step = 0;
};

/// Container format: a text manifest (meta lines, then one line per tensor
/// naming dtype, shape, and byte offset) followed by raw little-endian
/// IEEE-754 arrays in manifest order. The f64 mode round-trips bit-exactly;
/// f32 is a lossy storage encoding.
void checkpoint_save(const std::filesystem::path& path, const ModelParams& params,
                     const AdamState* optimizer = nullptr, StorageDtype dtype = StorageDtype::f64);

struct LoadedCheckpoint {
  ModelParams params;
  std::optional<AdamState> optimizer;
};

/// Validates the manifest (names, shapes against the config) before any
/// tensor data is accepted; a mismatch or truncation rejects the file and
/// leaves no partially-built model behind.
LoadedCheckpoint checkpoint_load(const std::filesystem::path& path);

}  // namespace movelab
