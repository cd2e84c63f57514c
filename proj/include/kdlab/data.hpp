#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kdlab/rng.hpp"
#include "kdlab/tensor.hpp"

namespace kdlab {

enum class Split { train, test };

std::string_view split_name(Split split);

// Images [N, C, H, W] with pixel values in [0, 1].
struct Dataset {
  Tensor images;
  std::vector<std::size_t> labels;
  std::vector<std::string> class_names;
  Split split = Split::train;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }
  std::size_t num_classes() const { return class_names.size(); }
  // C x H x W copy of sample i.
  Tensor image(std::size_t i) const;
  void validate() const;
};

struct SplitDataset {
  Dataset train;
  Dataset test;
};

// IDX files: magic 0x00000803 (u8 images, N x H x W) and 0x00000801 (u8 labels).
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 Split split = Split::train);
void write_idx_images(const std::filesystem::path& path, std::span<const std::uint8_t> pixels,
                      std::size_t count, std::size_t rows, std::size_t cols);
void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels);

// root/<class>/<file>.(png|jpg|jpeg|bmp). Optional manifest CSV with header
// `path,split` (paths relative to root) fixes the split; without one every
// image lands in train. Images of differing sizes need `resize_to`.
SplitDataset load_image_folder(const std::filesystem::path& root,
                               const std::optional<std::filesystem::path>& manifest = std::nullopt,
                               std::optional<std::size_t> resize_to = std::nullopt);

// IDX directory (train/t10k-{images-idx3,labels-idx1}-ubyte) or image folder
// (with `manifest.csv` at the root when present).
SplitDataset load_dataset_dir(const std::filesystem::path& dir);

struct AugmentConfig {
  double crop_low = 0.7;
  double crop_high = 1.0;
  std::size_t target_h = 32;
  std::size_t target_w = 32;
  double hflip_prob = 0.5;
  std::vector<double> mean{0.5};
  std::vector<double> std{0.5};
  bool enabled = true;

  void validate() const;
};

// Half-pixel-centre bilinear resampling of a C x H x W image: output pixel
// (y, x) samples source (y + 0.5) * H / H' - 0.5, clamped to the image.
Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w);
Tensor hflip(const Tensor& image);
Tensor normalize(const Tensor& image, const AugmentConfig& cfg);

// Random crop (area fraction in [crop_low, crop_high], source aspect ratio),
// bilinear resize to target, horizontal flip with hflip_prob, normalize.
Tensor augment(const Tensor& image, const AugmentConfig& cfg, Rng& rng);
// Resize to target and normalize; the evaluation path.
Tensor preprocess(const Tensor& image, const AugmentConfig& cfg);

struct LabeledBatch {
  Tensor images;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> indices;
};

// Index groups of size batch_size (last one partial), optionally shuffled.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size,
                                                    bool shuffle, std::uint64_t seed);
// Raw (unaugmented) batches.
std::vector<LabeledBatch> batches(const Dataset& ds, std::size_t batch_size, bool shuffle,
                                  std::uint64_t seed);
// Stacks the given samples; augmented with `rng` when provided, else preprocessed.
LabeledBatch make_batch(const Dataset& ds, std::span<const std::size_t> indices,
                        const AugmentConfig& cfg, Rng* rng);

}  // namespace kdlab
