#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "kdlab/ops.hpp"
#include "kdlab/rng.hpp"
#include "kdlab/tensor.hpp"

namespace kdlab {

enum class Activation { gelu, relu };

Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation act);

// Named tensors in lexicographic order.
class ParamStore {
 public:
  using Map = std::map<std::string, Tensor, std::less<>>;

  Tensor& add(const std::string& name, Tensor value);
  const Tensor& at(std::string_view name) const;
  Tensor& at(std::string_view name);
  bool contains(std::string_view name) const { return items_.find(name) != items_.end(); }

  std::size_t size() const noexcept { return items_.size(); }
  std::size_t total_numel() const;
  void clear_grads();

  Map::const_iterator begin() const { return items_.begin(); }
  Map::const_iterator end() const { return items_.end(); }
  Map::iterator begin() { return items_.begin(); }
  Map::iterator end() { return items_.end(); }

 private:
  Map items_;
};

// ---------------------------------------------------------------------------
// building blocks

struct LinearParams {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
};

struct AttentionParams {
  LinearParams qkv;   // d -> 3d, columns ordered (q, k, v)
  LinearParams proj;  // d -> d
  std::size_t heads = 1;
};

struct BlockParams {
  LayerNormParams norm1;
  AttentionParams attn;
  LayerNormParams norm2;
  LinearParams fc1;
  LinearParams fc2;
  Activation act = Activation::gelu;
};

struct ConvBlockParams {
  Tensor weight;  // [F, C, k, k]
  Tensor bias;    // [F]
  Tensor gamma;
  Tensor beta;
  BatchNormStats stats;
  std::size_t stride = 1;
  std::size_t padding = 1;
};

using LayerHook = std::function<void(std::string_view layer, const Tensor& value)>;

// Splits images into non-overlapping patches and projects each to proj.weight's width.
Tensor patch_embed(const Tensor& images, std::size_t patch, const LinearParams& proj);

// Multi-head scaled dot-product self-attention. If `attention` is non-null it
// receives the [N·h, n, n] attention weights.
Tensor mhsa(const Tensor& x, const AttentionParams& params, Tensor* attention = nullptr);

// y = x + MHSA(LN(x)); out = y + MLP(LN(y)).
Tensor transformer_block(const Tensor& x, const BlockParams& params,
                         const LayerHook* hook = nullptr, std::string_view prefix = {});

// conv -> batchnorm -> relu
Tensor conv_block(const Tensor& x, ConvBlockParams& params, Mode mode);

// ---------------------------------------------------------------------------
// models

struct ModelShape {
  std::size_t in_channels = 1;
  std::size_t image_size = 32;
  std::size_t num_classes = 10;
};

struct TeacherConfig {
  std::vector<std::size_t> channels{32, 64, 128, 256};
  std::vector<std::size_t> strides{1, 2, 2, 2};
};

struct ViTConfig {
  std::size_t patch = 4;
  std::size_t dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  double mlp_ratio = 2.0;
  Activation act = Activation::gelu;
};

struct PyramidStage {
  std::size_t dim;
  std::size_t depth;
  std::size_t heads;
};

struct PyramidConfig {
  std::size_t patch = 4;
  std::vector<PyramidStage> stages{{48, 2, 4}, {96, 2, 4}};
  double mlp_ratio = 2.0;
  Activation act = Activation::gelu;
};

struct HybridConfig {
  std::vector<std::size_t> stem_channels{16, 32};
  std::vector<std::size_t> stem_strides{1, 2};
  ViTConfig trunk{2, 64, 3, 4, 2.0, Activation::gelu};
};

class Model {
 public:
  virtual ~Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const std::string& preset() const noexcept { return preset_; }
  const ModelShape& shape() const noexcept { return shape_; }
  Activation activation() const noexcept { return activation_; }

  ParamStore& params() noexcept { return params_; }
  const ParamStore& params() const noexcept { return params_; }
  // Non-trainable state (batchnorm running statistics).
  ParamStore& buffers() noexcept { return buffers_; }
  const ParamStore& buffers() const noexcept { return buffers_; }

  // Raw logits [N, classes]. Every model emits at least the layers
  // "features" (classifier input) and "logits" to the hook.
  Tensor forward(const Tensor& images, Mode mode);
  Tensor extract_features(const Tensor& images, Mode mode = Mode::eval);
  // Activation of `layer` flattened to [N, -1], recorded without a tape.
  Tensor capture(const Tensor& images, std::string_view layer, Mode mode = Mode::eval);

  void set_hook(LayerHook hook) { hook_ = std::move(hook); }
  void clear_hook() { hook_ = nullptr; }

  std::size_t count_params() const { return params_.total_numel(); }

 protected:
  Model(std::string preset, ModelShape shape, Activation act)
      : preset_(std::move(preset)), shape_(shape), activation_(act) {}
  virtual Tensor run(const Tensor& images, Mode mode) = 0;
  void emit(std::string_view layer, const Tensor& value) const {
    if (hook_) hook_(layer, value);
  }
  const LayerHook* hook() const { return hook_ ? &hook_ : nullptr; }

  ParamStore params_;
  ParamStore buffers_;

 private:
  std::string preset_;
  ModelShape shape_;
  Activation activation_;
  LayerHook hook_;
};

std::unique_ptr<Model> make_teacher(const ModelShape& shape, const TeacherConfig& cfg,
                                    std::uint64_t seed);
std::unique_ptr<Model> make_vit(const ModelShape& shape, const ViTConfig& cfg, std::uint64_t seed);
std::unique_ptr<Model> make_pyramid_vit(const ModelShape& shape, const PyramidConfig& cfg,
                                        std::uint64_t seed);
std::unique_ptr<Model> make_hybrid_vit(const ModelShape& shape, const HybridConfig& cfg,
                                       std::uint64_t seed);

// Presets: "teacher", "vit", "pvt", "hybrid".
std::unique_ptr<Model> make_model(std::string_view preset, const ModelShape& shape,
                                  std::uint64_t seed, Activation act = Activation::gelu);
const std::vector<std::string>& preset_names();
bool is_teacher_preset(std::string_view preset);

}  // namespace kdlab
