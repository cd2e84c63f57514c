#include "kdlab/models.hpp"

#include <cmath>
#include <optional>

#include "kdlab/errors.hpp"

namespace kdlab {

Activation parse_activation(std::string_view name) {
  if (name == "gelu") return Activation::gelu;
  if (name == "relu") return Activation::relu;
  throw ConfigError("unknown activation '" + std::string(name) + "' (expected gelu or relu)");
}

std::string_view activation_name(Activation act) {
  return act == Activation::gelu ? "gelu" : "relu";
}

// ---------------------------------------------------------------------------
// ParamStore

Tensor& ParamStore::add(const std::string& name, Tensor value) {
  auto [it, inserted] = items_.emplace(name, std::move(value));
  if (!inserted) throw ContractError("duplicate parameter name '" + name + "'");
  return it->second;
}

const Tensor& ParamStore::at(std::string_view name) const {
  auto it = items_.find(name);
  if (it == items_.end()) throw ContractError("no parameter named '" + std::string(name) + "'");
  return it->second;
}

Tensor& ParamStore::at(std::string_view name) {
  auto it = items_.find(name);
  if (it == items_.end()) throw ContractError("no parameter named '" + std::string(name) + "'");
  return it->second;
}

std::size_t ParamStore::total_numel() const {
  std::size_t n = 0;
  for (const auto& [name, t] : items_) n += t.numel();
  return n;
}

void ParamStore::clear_grads() {
  for (auto& [name, t] : items_) t.clear_grad();
}

// ---------------------------------------------------------------------------
// building blocks

Tensor patch_embed(const Tensor& images, std::size_t patch, const LinearParams& proj) {
  return linear(patchify(images, patch), proj.weight, proj.bias);
}

Tensor mhsa(const Tensor& x, const AttentionParams& params, Tensor* attention) {
  if (x.rank() != 3) throw DimensionError("mhsa: expected [N,n,d], got " + shape_str(x.shape()));
  const std::size_t d = x.dim(2);
  if (params.heads == 0 || d % params.heads != 0) {
    throw ConfigError("mhsa: embedding dim " + std::to_string(d) + " not divisible by " +
                      std::to_string(params.heads) + " heads");
  }
  const std::size_t head_dim = d / params.heads;
  Tensor qkv = linear(x, params.qkv.weight, params.qkv.bias);
  Tensor q = split_heads(qkv, 0, params.heads);
  Tensor k = split_heads(qkv, 1, params.heads);
  Tensor v = split_heads(qkv, 2, params.heads);
  Tensor scores = scale(bmm(q, transpose_last(k)), 1.0 / std::sqrt(static_cast<double>(head_dim)));
  Tensor weights = softmax_t(scores, 1.0);
  if (attention) *attention = weights;
  Tensor mixed = merge_heads(bmm(weights, v), params.heads);
  return linear(mixed, params.proj.weight, params.proj.bias);
}

Tensor transformer_block(const Tensor& x, const BlockParams& p, const LayerHook* hook,
                         std::string_view prefix) {
  auto emit = [&](const char* suffix, const Tensor& t) {
    if (hook && *hook) (*hook)(std::string(prefix) + suffix, t);
  };
  emit(".in", x);
  Tensor attn_weights;
  Tensor y = add(x, mhsa(layernorm(x, p.norm1.gamma, p.norm1.beta), p.attn, &attn_weights));
  emit(".attn", attn_weights);
  emit(".y", y);
  Tensor h = linear(layernorm(y, p.norm2.gamma, p.norm2.beta), p.fc1.weight, p.fc1.bias);
  h = p.act == Activation::gelu ? gelu(h) : relu(h);
  Tensor out = add(y, linear(h, p.fc2.weight, p.fc2.bias));
  emit(".out", out);
  return out;
}

Tensor conv_block(const Tensor& x, ConvBlockParams& p, Mode mode) {
  Tensor h = conv2d(x, p.weight, p.bias, p.stride, p.padding);
  return relu(batchnorm2d(h, p.gamma, p.beta, p.stats, mode));
}

// ---------------------------------------------------------------------------
// model plumbing

Tensor Model::forward(const Tensor& images, Mode mode) {
  if (images.rank() != 4 || images.dim(1) != shape_.in_channels ||
      images.dim(2) != shape_.image_size || images.dim(3) != shape_.image_size) {
    throw DimensionError(preset_ + " expects [N," + std::to_string(shape_.in_channels) + "," +
                         std::to_string(shape_.image_size) + "," +
                         std::to_string(shape_.image_size) + "] images, got " +
                         shape_str(images.shape()));
  }
  Tensor logits = run(images, mode);
  emit("logits", logits);
  return logits;
}

Tensor Model::extract_features(const Tensor& images, Mode mode) {
  return capture(images, "features", mode);
}

Tensor Model::capture(const Tensor& images, std::string_view layer, Mode mode) {
  std::optional<Tensor> found;
  LayerHook saved = hook_;
  hook_ = [&](std::string_view name, const Tensor& value) {
    if (name == layer) found = value;
    if (saved) saved(name, value);
  };
  try {
    NoGradScope no_grad;
    forward(images, mode);
  } catch (...) {
    hook_ = std::move(saved);
    throw;
  }
  hook_ = std::move(saved);
  if (!found) throw ConfigError(preset_ + " has no layer named '" + std::string(layer) + "'");
  const std::size_t n = found->dim(0);
  return Tensor({n, found->numel() / n}, std::vector<double>(found->data().begin(), found->data().end()));
}

namespace {

constexpr double kInitStd = 0.02;

class ParamBuilder {
 public:
  ParamBuilder(ParamStore& params, ParamStore& buffers, std::uint64_t seed)
      : params_(params), buffers_(buffers), rng_(Rng::fork(seed, 0x1417)) {}

  Tensor trunc_normal(const std::string& name, const Shape& shape, double std = kInitStd) {
    Tensor t = Tensor::zeros(shape, true);
    for (double& v : t.mutable_data()) v = rng_.truncated_normal(std);
    return params_.add(name, t);
  }

  Tensor he_normal(const std::string& name, const Shape& shape, std::size_t fan_in) {
    Tensor t = Tensor::zeros(shape, true);
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : t.mutable_data()) v = rng_.normal() * std;
    return params_.add(name, t);
  }

  Tensor constant(const std::string& name, const Shape& shape, double value) {
    return params_.add(name, Tensor::full(shape, value, true));
  }

  LinearParams linear(const std::string& prefix, std::size_t in, std::size_t out,
                      bool zero_weight = false) {
    LinearParams p;
    p.weight = zero_weight ? constant(prefix + ".weight", {in, out}, 0.0)
                           : trunc_normal(prefix + ".weight", {in, out});
    p.bias = constant(prefix + ".bias", {out}, 0.0);
    return p;
  }

  LayerNormParams layernorm(const std::string& prefix, std::size_t d) {
    return {constant(prefix + ".gamma", {d}, 1.0), constant(prefix + ".beta", {d}, 0.0)};
  }

  ConvBlockParams conv_block(const std::string& prefix, std::size_t in, std::size_t out,
                             std::size_t stride) {
    ConvBlockParams p;
    p.weight = he_normal(prefix + ".conv.weight", {out, in, 3, 3}, in * 9);
    p.bias = constant(prefix + ".conv.bias", {out}, 0.0);
    p.gamma = constant(prefix + ".bn.gamma", {out}, 1.0);
    p.beta = constant(prefix + ".bn.beta", {out}, 0.0);
    p.stats = BatchNormStats::fresh(out);
    buffers_.add(prefix + ".bn.running_mean", p.stats.running_mean);
    buffers_.add(prefix + ".bn.running_var", p.stats.running_var);
    p.stride = stride;
    p.padding = 1;
    return p;
  }

  BlockParams block(const std::string& prefix, std::size_t d, std::size_t heads,
                    double mlp_ratio, Activation act) {
    if (heads == 0 || d % heads != 0) {
      throw ConfigError(prefix + ": embedding dim " + std::to_string(d) +
                        " not divisible by " + std::to_string(heads) + " heads");
    }
    const auto hidden = static_cast<std::size_t>(std::lround(mlp_ratio * static_cast<double>(d)));
    BlockParams p;
    p.norm1 = layernorm(prefix + ".norm1", d);
    p.attn.qkv = linear(prefix + ".attn.qkv", d, 3 * d);
    p.attn.proj = linear(prefix + ".attn.proj", d, d);
    p.attn.heads = heads;
    p.norm2 = layernorm(prefix + ".norm2", d);
    p.fc1 = linear(prefix + ".mlp.fc1", d, hidden);
    p.fc2 = linear(prefix + ".mlp.fc2", hidden, d);
    p.act = act;
    return p;
  }

 private:
  ParamStore& params_;
  ParamStore& buffers_;
  Rng rng_;
};

std::string indexed(const char* group, std::size_t i) {
  return std::string(group) + "." + std::to_string(i);
}

void require_positive_shape(const ModelShape& s) {
  if (s.in_channels == 0 || s.image_size == 0 || s.num_classes == 0) {
    throw ConfigError("model shape extents must be positive");
  }
}

class TeacherConvNet final : public Model {
 public:
  TeacherConvNet(const ModelShape& shape, const TeacherConfig& cfg, std::uint64_t seed)
      : Model("teacher", shape, Activation::relu) {
    require_positive_shape(shape);
    if (cfg.channels.empty() || cfg.channels.size() != cfg.strides.size()) {
      throw ConfigError("teacher: channels and strides must be non-empty and equally long");
    }
    ParamBuilder b(params_, buffers_, seed);
    std::size_t in = shape.in_channels;
    std::size_t extent = shape.image_size;
    for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
      stages_.push_back(b.conv_block(indexed("stages", i), in, cfg.channels[i], cfg.strides[i]));
      in = cfg.channels[i];
      extent = (extent + 2 - 3) / cfg.strides[i] + 1;
      if (extent == 0) throw ConfigError("teacher: input too small for the stage strides");
    }
    head_ = b.linear("head", in, shape.num_classes, true);
  }

 protected:
  Tensor run(const Tensor& images, Mode mode) override {
    Tensor x = images;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      x = conv_block(x, stages_[i], mode);
      emit(indexed("stages", i), x);
    }
    Tensor feat = global_avg_pool2d(x);
    emit("features", feat);
    return linear(feat, head_.weight, head_.bias);
  }

 private:
  std::vector<ConvBlockParams> stages_;
  LinearParams head_;
};

// Shared token trunk: cls token appended after the patch tokens, learned
// positional embedding, K blocks, final norm, classification on the cls slot.
class TokenTrunk {
 public:
  TokenTrunk() = default;
  TokenTrunk(ParamBuilder& b, std::size_t n_patches, const ViTConfig& cfg)
      : n_patches_(n_patches) {
    cls_ = b.trunc_normal("cls_token", {1, cfg.dim});
    pos_ = b.trunc_normal("pos_embed", {n_patches + 1, cfg.dim});
    for (std::size_t k = 0; k < cfg.depth; ++k) {
      blocks_.push_back(b.block(indexed("blocks", k), cfg.dim, cfg.heads, cfg.mlp_ratio, cfg.act));
    }
    norm_ = b.layernorm("norm", cfg.dim);
  }

  // tokens [N, n_patches, d] -> cls representation [N, d]
  Tensor operator()(const Tensor& tokens, const LayerHook* hook) const {
    Tensor x = add_trailing(append_token(tokens, cls_), pos_);
    if (hook) (*hook)("tokens", x);
    for (std::size_t k = 0; k < blocks_.size(); ++k) {
      x = transformer_block(x, blocks_[k], hook, indexed("blocks", k));
    }
    x = layernorm(x, norm_.gamma, norm_.beta);
    return select_token(x, n_patches_);
  }

 private:
  std::size_t n_patches_ = 0;
  Tensor cls_;
  Tensor pos_;
  std::vector<BlockParams> blocks_;
  LayerNormParams norm_;
};

class StudentViT final : public Model {
 public:
  StudentViT(const ModelShape& shape, const ViTConfig& cfg, std::uint64_t seed)
      : Model("vit", shape, cfg.act), patch_(cfg.patch) {
    require_positive_shape(shape);
    if (cfg.patch == 0 || shape.image_size % cfg.patch != 0) {
      throw DimensionError("vit: image size " + std::to_string(shape.image_size) +
                           " not divisible by patch size " + std::to_string(cfg.patch));
    }
    if (cfg.heads == 0 || cfg.dim % cfg.heads != 0) {
      throw ConfigError("vit: embedding dim not divisible by heads");
    }
    ParamBuilder b(params_, buffers_, seed);
    const std::size_t grid = shape.image_size / cfg.patch;
    embed_ = b.linear("patch_embed", shape.in_channels * cfg.patch * cfg.patch, cfg.dim);
    trunk_ = TokenTrunk(b, grid * grid, cfg);
    head_ = b.linear("head", cfg.dim, shape.num_classes, true);
  }

 protected:
  Tensor run(const Tensor& images, Mode) override {
    Tensor feat = trunk_(patch_embed(images, patch_, embed_), hook());
    emit("features", feat);
    return linear(feat, head_.weight, head_.bias);
  }

 private:
  std::size_t patch_;
  LinearParams embed_;
  TokenTrunk trunk_;
  LinearParams head_;
};

class StudentPyramidViT final : public Model {
 public:
  StudentPyramidViT(const ModelShape& shape, const PyramidConfig& cfg, std::uint64_t seed)
      : Model("pvt", shape, cfg.act), patch_(cfg.patch) {
    require_positive_shape(shape);
    if (cfg.stages.empty()) throw ConfigError("pvt: at least one stage required");
    if (cfg.patch == 0 || shape.image_size % cfg.patch != 0) {
      throw DimensionError("pvt: image size " + std::to_string(shape.image_size) +
                           " not divisible by patch size " + std::to_string(cfg.patch));
    }
    ParamBuilder b(params_, buffers_, seed);
    std::size_t grid = shape.image_size / cfg.patch;
    std::size_t prev_dim = 0;
    for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
      const auto& sc = cfg.stages[s];
      const std::string prefix = indexed("stages", s);
      Stage stage;
      if (s == 0) {
        stage.embed = b.linear(prefix + ".embed", shape.in_channels * cfg.patch * cfg.patch, sc.dim);
      } else {
        if (grid % 2 != 0) {
          throw DimensionError("pvt: token grid " + std::to_string(grid) +
                               " cannot be halved at stage " + std::to_string(s));
        }
        if (sc.dim < prev_dim) throw ConfigError("pvt: stage dims must be non-decreasing");
        grid /= 2;
        stage.embed = b.linear(prefix + ".merge", 4 * prev_dim, sc.dim);
        stage.merge_norm = b.layernorm(prefix + ".merge_norm", sc.dim);
      }
      stage.grid = grid;
      stage.pos = b.trunc_normal(prefix + ".pos_embed", {grid * grid, sc.dim});
      for (std::size_t k = 0; k < sc.depth; ++k) {
        stage.blocks.push_back(
            b.block(prefix + indexed(".blocks", k), sc.dim, sc.heads, cfg.mlp_ratio, cfg.act));
      }
      stages_.push_back(std::move(stage));
      prev_dim = sc.dim;
    }
    norm_ = b.layernorm("norm", prev_dim);
    head_ = b.linear("head", prev_dim, shape.num_classes, true);
  }

 protected:
  Tensor run(const Tensor& images, Mode) override {
    Tensor x;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      const auto& st = stages_[s];
      const std::string prefix = indexed("stages", s);
      if (s == 0) {
        x = patch_embed(images, patch_, st.embed);
      } else {
        const std::size_t prev_grid = stages_[s - 1].grid;
        x = linear(merge_patches(x, prev_grid, prev_grid), st.embed.weight, st.embed.bias);
        x = layernorm(x, st.merge_norm.gamma, st.merge_norm.beta);
      }
      x = add_trailing(x, st.pos);
      for (std::size_t k = 0; k < st.blocks.size(); ++k) {
        x = transformer_block(x, st.blocks[k], hook(), prefix + indexed(".blocks", k));
      }
      emit(prefix, x);
    }
    Tensor feat = mean_tokens(layernorm(x, norm_.gamma, norm_.beta));
    emit("features", feat);
    return linear(feat, head_.weight, head_.bias);
  }

 private:
  struct Stage {
    LinearParams embed;
    LayerNormParams merge_norm;
    Tensor pos;
    std::vector<BlockParams> blocks;
    std::size_t grid = 0;
  };
  std::size_t patch_;
  std::vector<Stage> stages_;
  LayerNormParams norm_;
  LinearParams head_;
};

class StudentHybridViT final : public Model {
 public:
  StudentHybridViT(const ModelShape& shape, const HybridConfig& cfg, std::uint64_t seed)
      : Model("hybrid", shape, cfg.trunk.act), patch_(cfg.trunk.patch) {
    require_positive_shape(shape);
    if (cfg.stem_channels.empty() || cfg.stem_channels.size() != cfg.stem_strides.size()) {
      throw ConfigError("hybrid: stem channels and strides must be non-empty and equally long");
    }
    ParamBuilder b(params_, buffers_, seed);
    std::size_t in = shape.in_channels;
    std::size_t extent = shape.image_size;
    for (std::size_t i = 0; i < cfg.stem_channels.size(); ++i) {
      stem_.push_back(b.conv_block(indexed("stem", i), in, cfg.stem_channels[i], cfg.stem_strides[i]));
      in = cfg.stem_channels[i];
      extent = (extent + 2 - 3) / cfg.stem_strides[i] + 1;
    }
    if (cfg.trunk.patch == 0 || extent % cfg.trunk.patch != 0) {
      throw DimensionError("hybrid: stem output extent " + std::to_string(extent) +
                           " not divisible by trunk patch size " + std::to_string(cfg.trunk.patch));
    }
    const std::size_t grid = extent / cfg.trunk.patch;
    embed_ = b.linear("patch_embed", in * cfg.trunk.patch * cfg.trunk.patch, cfg.trunk.dim);
    trunk_ = TokenTrunk(b, grid * grid, cfg.trunk);
    head_ = b.linear("head", cfg.trunk.dim, shape.num_classes, true);
  }

 protected:
  Tensor run(const Tensor& images, Mode mode) override {
    Tensor x = images;
    for (std::size_t i = 0; i < stem_.size(); ++i) {
      x = conv_block(x, stem_[i], mode);
      emit(indexed("stem", i), x);
    }
    Tensor feat = trunk_(patch_embed(x, patch_, embed_), hook());
    emit("features", feat);
    return linear(feat, head_.weight, head_.bias);
  }

 private:
  std::size_t patch_;
  std::vector<ConvBlockParams> stem_;
  LinearParams embed_;
  TokenTrunk trunk_;
  LinearParams head_;
};

}  // namespace

std::unique_ptr<Model> make_teacher(const ModelShape& shape, const TeacherConfig& cfg,
                                    std::uint64_t seed) {
  return std::make_unique<TeacherConvNet>(shape, cfg, seed);
}

std::unique_ptr<Model> make_vit(const ModelShape& shape, const ViTConfig& cfg, std::uint64_t seed) {
  return std::make_unique<StudentViT>(shape, cfg, seed);
}

std::unique_ptr<Model> make_pyramid_vit(const ModelShape& shape, const PyramidConfig& cfg,
                                        std::uint64_t seed) {
  return std::make_unique<StudentPyramidViT>(shape, cfg, seed);
}

std::unique_ptr<Model> make_hybrid_vit(const ModelShape& shape, const HybridConfig& cfg,
                                       std::uint64_t seed) {
  return std::make_unique<StudentHybridViT>(shape, cfg, seed);
}

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"teacher", "vit", "pvt", "hybrid"};
  return names;
}

bool is_teacher_preset(std::string_view preset) { return preset == "teacher"; }

std::unique_ptr<Model> make_model(std::string_view preset, const ModelShape& shape,
                                  std::uint64_t seed, Activation act) {
  if (preset == "teacher") return make_teacher(shape, TeacherConfig{}, seed);
  if (preset == "vit") {
    ViTConfig cfg;
    cfg.act = act;
    return make_vit(shape, cfg, seed);
  }
  if (preset == "pvt") {
    PyramidConfig cfg;
    cfg.act = act;
    return make_pyramid_vit(shape, cfg, seed);
  }
  if (preset == "hybrid") {
    HybridConfig cfg;
    cfg.trunk.act = act;
    return make_hybrid_vit(shape, cfg, seed);
  }
  throw ConfigError("unknown model preset '" + std::string(preset) +
                    "' (expected teacher, vit, pvt or hybrid)");
}

}  // namespace kdlab
