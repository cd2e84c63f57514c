#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "kdlab/models.hpp"
#include "kdlab/tensor.hpp"

namespace kdlab {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

// "KDCK" | u32 version | u32 len + preset | u32 count | per tensor:
// u32 len + name | u32 rank | u32 extents | f32 payload. All little-endian.
struct Checkpoint {
  std::string preset;
  std::vector<StoredTensor> tensors;  // sorted by name

  const StoredTensor* find(std::string_view name) const;
  ModelShape model_shape() const;
  Activation activation() const;
};

Checkpoint snapshot(const Model& model);
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const Model& model);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Copies every parameter and buffer into `model`. Refuses a preset,
// name or shape mismatch.
void restore(Model& model, const Checkpoint& ckpt);

// Rebuilds the model described by the file. When `expected_preset` is
// given and differs from the stored one, throws ConfigError.
std::unique_ptr<Model> load_model(const std::filesystem::path& path,
                                  std::optional<std::string> expected_preset = std::nullopt);

}  // namespace kdlab
