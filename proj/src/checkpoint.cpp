#include "kdlab/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "kdlab/errors.hpp"

namespace kdlab {

namespace {

constexpr char kMagic[4] = {'K', 'D', 'C', 'K'};
constexpr std::string_view kMetaName = "meta";

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_string(std::vector<std::uint8_t>& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : b_(bytes) {}

  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) {
      throw FormatError("checkpoint truncated at byte " + std::to_string(pos_) + " reading " + what);
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string str(const char* what) {
    const std::uint32_t n = u32(what);
    need(n, what);
    std::string s(b_.begin() + static_cast<long>(pos_), b_.begin() + static_cast<long>(pos_ + n));
    pos_ += n;
    return s;
  }
  float f32() {
    const std::uint32_t bits = u32("payload");
    return std::bit_cast<float>(bits);
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

std::uint32_t activation_code(Activation a) { return a == Activation::gelu ? 0 : 1; }

StoredTensor store(const std::string& name, const Tensor& t) {
  StoredTensor s{name, t.shape(), {}};
  s.values.reserve(t.numel());
  for (double v : t.data()) s.values.push_back(static_cast<float>(v));
  return s;
}

}  // namespace

const StoredTensor* Checkpoint::find(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

ModelShape Checkpoint::model_shape() const {
  const StoredTensor* meta = find(kMetaName);
  if (!meta || meta->values.size() != 4) throw FormatError("checkpoint has no meta record");
  ModelShape shape;
  shape.in_channels = static_cast<std::size_t>(meta->values[0]);
  shape.image_size = static_cast<std::size_t>(meta->values[1]);
  shape.num_classes = static_cast<std::size_t>(meta->values[2]);
  return shape;
}

Activation Checkpoint::activation() const {
  const StoredTensor* meta = find(kMetaName);
  if (!meta || meta->values.size() != 4) throw FormatError("checkpoint has no meta record");
  return meta->values[3] == 0.0f ? Activation::gelu : Activation::relu;
}

Checkpoint snapshot(const Model& model) {
  Checkpoint ckpt;
  ckpt.preset = model.preset();
  for (const auto& [name, t] : model.params()) ckpt.tensors.push_back(store(name, t));
  for (const auto& [name, t] : model.buffers()) ckpt.tensors.push_back(store(name, t));
  const ModelShape& s = model.shape();
  ckpt.tensors.push_back(StoredTensor{
      std::string(kMetaName),
      {4},
      {static_cast<float>(s.in_channels), static_cast<float>(s.image_size),
       static_cast<float>(s.num_classes), static_cast<float>(activation_code(model.activation()))}});
  std::sort(ckpt.tensors.begin(), ckpt.tensors.end(),
            [](const StoredTensor& a, const StoredTensor& b) { return a.name < b.name; });
  return ckpt;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, kCheckpointVersion);
  put_string(out, ckpt.preset);
  put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    if (t.values.size() != shape_numel(t.shape)) {
      throw ContractError("tensor '" + t.name + "' payload does not match its shape");
    }
    put_string(out, t.name);
    put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto e : t.shape) put_u32(out, static_cast<std::uint32_t>(e));
    for (float v : t.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("not a checkpoint: bad magic");
  }
  Reader r(bytes);
  r.u32("magic");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.preset = r.str("preset");
  const std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = r.str("tensor name");
    const std::uint32_t rank = r.u32("rank");
    std::size_t numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      t.shape.push_back(r.u32("extent"));
      numel *= t.shape.back();
    }
    r.need(numel * 4, "payload");
    t.values.reserve(numel);
    for (std::size_t k = 0; k < numel; ++k) t.values.push_back(r.f32());
    ckpt.tensors.push_back(std::move(t));
  }
  if (!r.done()) {
    throw FormatError("trailing bytes after checkpoint at offset " + std::to_string(r.pos()));
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  const auto bytes = encode_checkpoint(snapshot(model));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

void restore(Model& model, const Checkpoint& ckpt) {
  if (ckpt.preset != model.preset()) {
    throw ConfigError("checkpoint holds preset '" + ckpt.preset + "' but model is '" +
                      model.preset() + "'");
  }
  auto fill = [&](ParamStore& store) {
    for (auto& [name, t] : store) {
      const StoredTensor* s = ckpt.find(name);
      if (!s) throw FormatError("checkpoint is missing tensor '" + name + "'");
      if (s->shape != t.shape()) {
        throw DimensionError("tensor '" + name + "' stored as " + shape_str(s->shape) +
                             ", model expects " + shape_str(t.shape()));
      }
      auto dst = t.mutable_data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(s->values[i]);
    }
  };
  fill(model.params());
  fill(model.buffers());
  const std::size_t expected = model.params().size() + model.buffers().size() + 1;
  if (ckpt.tensors.size() != expected) {
    throw FormatError("checkpoint has " + std::to_string(ckpt.tensors.size()) +
                      " tensors, model expects " + std::to_string(expected));
  }
}

std::unique_ptr<Model> load_model(const std::filesystem::path& path,
                                  std::optional<std::string> expected_preset) {
  Checkpoint ckpt = read_checkpoint(path);
  if (expected_preset && *expected_preset != ckpt.preset) {
    throw ConfigError("checkpoint " + path.string() + " holds preset '" + ckpt.preset +
                      "', requested '" + *expected_preset + "'");
  }
  auto model = make_model(ckpt.preset, ckpt.model_shape(), 0, ckpt.activation());
  restore(*model, ckpt);
  return model;
}

}  // namespace kdlab
