#include "kdlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <iterator>
#include <map>
#include <sstream>

#include "kdlab/errors.hpp"
#include "kdlab/image_io.hpp"

namespace kdlab {

namespace fs = std::filesystem;

std::string_view split_name(Split split) { return split == Split::train ? "train" : "test"; }

Tensor Dataset::image(std::size_t i) const {
  const std::size_t c = channels(), h = height(), w = width();
  const std::size_t stride = c * h * w;
  auto src = images.data().subspan(i * stride, stride);
  return Tensor({c, h, w}, std::vector<double>(src.begin(), src.end()));
}

void Dataset::validate() const {
  if (!images.defined() || images.rank() != 4) throw DimensionError("dataset images must be [N,C,H,W]");
  if (images.dim(0) != labels.size()) {
    throw DimensionError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                         std::to_string(labels.size()) + " labels");
  }
  for (auto l : labels) {
    if (l >= class_names.size()) {
      throw ContractError("label " + std::to_string(l) + " >= class count " +
                          std::to_string(class_names.size()));
    }
  }
}

// ---------------------------------------------------------------------------
// IDX

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off, const fs::path& path) {
  if (off + 4 > b.size()) {
    throw FormatError(path.string() + ": truncated header at byte offset " + std::to_string(off));
  }
  return (static_cast<std::uint32_t>(b[off]) << 24) | (static_cast<std::uint32_t>(b[off + 1]) << 16) |
         (static_cast<std::uint32_t>(b[off + 2]) << 8) | static_cast<std::uint32_t>(b[off + 3]);
}

void check_magic(std::uint32_t got, std::uint32_t want, const fs::path& path) {
  if (got != want) {
    std::ostringstream os;
    os << path.string() << ": bad magic 0x" << std::hex << got << " at byte offset 0 (expected 0x"
       << want << ")";
    throw FormatError(os.str());
  }
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                         static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(bytes, 4);
}

std::vector<std::string> numbered_classes(std::size_t count) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < count; ++i) names.push_back(std::to_string(i));
  return names;
}

}  // namespace

Dataset load_idx(const fs::path& images_path, const fs::path& labels_path, Split split) {
  const auto ib = read_bytes(images_path);
  const auto lb = read_bytes(labels_path);
  check_magic(be32(ib, 0, images_path), kIdxImagesMagic, images_path);
  check_magic(be32(lb, 0, labels_path), kIdxLabelsMagic, labels_path);
  const std::size_t n = be32(ib, 4, images_path);
  const std::size_t rows = be32(ib, 8, images_path);
  const std::size_t cols = be32(ib, 12, images_path);
  const std::size_t n_labels = be32(lb, 4, labels_path);
  if (n != n_labels) {
    throw FormatError("IDX count mismatch: " + std::to_string(n) + " images in " +
                      images_path.string() + " vs " + std::to_string(n_labels) + " labels in " +
                      labels_path.string());
  }
  if (n == 0 || rows == 0 || cols == 0) throw FormatError(images_path.string() + ": empty extents");
  const std::size_t pixels = n * rows * cols;
  if (ib.size() < 16 + pixels) {
    throw FormatError(images_path.string() + ": truncated pixel data at byte offset " +
                      std::to_string(ib.size()) + " (expected " + std::to_string(16 + pixels) +
                      " bytes)");
  }
  if (lb.size() < 8 + n) {
    throw FormatError(labels_path.string() + ": truncated label data at byte offset " +
                      std::to_string(lb.size()) + " (expected " + std::to_string(8 + n) + " bytes)");
  }
  Dataset ds;
  std::vector<double> data(pixels);
  for (std::size_t i = 0; i < pixels; ++i) data[i] = static_cast<double>(ib[16 + i]) / 255.0;
  ds.images = Tensor({n, 1, rows, cols}, std::move(data));
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels.push_back(lb[8 + i]);
    max_label = std::max<std::size_t>(max_label, lb[8 + i]);
  }
  ds.class_names = numbered_classes(max_label + 1);
  ds.split = split;
  return ds;
}

void write_idx_images(const fs::path& path, std::span<const std::uint8_t> pixels,
                      std::size_t count, std::size_t rows, std::size_t cols) {
  if (pixels.size() != count * rows * cols) throw DimensionError("write_idx_images: size mismatch");
  std::ofstream out(path, std::ios::binary);
  put_be32(out, kIdxImagesMagic);
  put_be32(out, static_cast<std::uint32_t>(count));
  put_be32(out, static_cast<std::uint32_t>(rows));
  put_be32(out, static_cast<std::uint32_t>(cols));
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw FormatError("cannot write " + path.string());
}

void write_idx_labels(const fs::path& path, std::span<const std::uint8_t> labels) {
  std::ofstream out(path, std::ios::binary);
  put_be32(out, kIdxLabelsMagic);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
  if (!out) throw FormatError("cannot write " + path.string());
}

// ---------------------------------------------------------------------------
// image folders

namespace {

struct Entry {
  fs::path path;
  std::size_t label;
};

Dataset stack_images(const std::vector<Entry>& entries, const std::vector<std::string>& classes,
                     Split split, std::optional<std::size_t> resize_to) {
  Dataset ds;
  ds.class_names = classes;
  ds.split = split;
  if (entries.empty()) return ds;
  std::vector<double> data;
  std::size_t h = 0, w = 0;
  for (const auto& e : entries) {
    RgbImage img;
    try {
      img = read_image(e.path);
    } catch (const FormatError& err) {
      throw FormatError("unreadable image " + e.path.string() + ": " + err.what());
    }
    Tensor t = Tensor::zeros({3, img.height, img.width});
    auto px = t.mutable_data();
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x)
        for (std::size_t c = 0; c < 3; ++c)
          px[(c * img.height + y) * img.width + x] =
              static_cast<double>(img.rgb[(y * img.width + x) * 3 + c]) / 255.0;
    if (resize_to) t = resize_bilinear(t, *resize_to, *resize_to);
    if (h == 0) {
      h = t.dim(1);
      w = t.dim(2);
    } else if (t.dim(1) != h || t.dim(2) != w) {
      throw DimensionError("image " + e.path.string() + " is " + std::to_string(t.dim(2)) + "x" +
                           std::to_string(t.dim(1)) + " but earlier images are " +
                           std::to_string(w) + "x" + std::to_string(h) +
                           "; pass a resize size");
    }
    data.insert(data.end(), t.data().begin(), t.data().end());
    ds.labels.push_back(e.label);
  }
  ds.images = Tensor({entries.size(), 3, h, w}, std::move(data));
  return ds;
}

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

}  // namespace

SplitDataset load_image_folder(const fs::path& root, const std::optional<fs::path>& manifest,
                               std::optional<std::size_t> resize_to) {
  if (!fs::is_directory(root)) throw FormatError("image folder " + root.string() + " not found");
  std::vector<std::string> classes;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) classes.push_back(entry.path().filename().string());
  }
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) throw FormatError(root.string() + " has no class subdirectories");
  std::map<std::string, std::size_t> class_index;
  for (std::size_t i = 0; i < classes.size(); ++i) class_index[classes[i]] = i;

  std::vector<Entry> train, test;
  if (manifest) {
    std::ifstream in(*manifest);
    if (!in) throw FormatError("cannot open manifest " + manifest->string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      line = trim(line);
      if (line.empty()) continue;
      if (line_no == 1) {
        if (line != "path,split") {
          throw FormatError(manifest->string() + ": header must be 'path,split'");
        }
        continue;
      }
      const auto comma = line.rfind(',');
      if (comma == std::string::npos) {
        throw FormatError(manifest->string() + ":" + std::to_string(line_no) + ": expected path,split");
      }
      const fs::path rel = trim(line.substr(0, comma));
      const std::string split = trim(line.substr(comma + 1));
      const std::string cls = rel.begin() != rel.end() ? rel.begin()->string() : "";
      auto it = class_index.find(cls);
      if (it == class_index.end()) {
        throw FormatError(manifest->string() + ":" + std::to_string(line_no) + ": '" +
                          rel.string() + "' is not under a class directory");
      }
      Entry e{root / rel, it->second};
      if (split == "train") {
        train.push_back(e);
      } else if (split == "test") {
        test.push_back(e);
      } else {
        throw FormatError(manifest->string() + ":" + std::to_string(line_no) + ": split must be "
                          "train or test, got '" + split + "'");
      }
    }
  } else {
    for (std::size_t c = 0; c < classes.size(); ++c) {
      std::vector<fs::path> files;
      for (const auto& entry : fs::directory_iterator(root / classes[c])) {
        if (entry.is_regular_file() && is_supported_image(entry.path())) files.push_back(entry.path());
      }
      std::sort(files.begin(), files.end());
      if (files.empty()) std::cerr << "warning: class directory '" << classes[c] << "' is empty\n";
      for (auto& f : files) train.push_back({f, c});
    }
  }
  SplitDataset out{stack_images(train, classes, Split::train, resize_to),
                   stack_images(test, classes, Split::test, resize_to)};
  return out;
}

SplitDataset load_dataset_dir(const fs::path& dir) {
  const fs::path train_images = dir / "train-images-idx3-ubyte";
  if (fs::exists(train_images)) {
    SplitDataset out{load_idx(train_images, dir / "train-labels-idx1-ubyte", Split::train),
                     load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte", Split::test)};
    const std::size_t classes = std::max(out.train.num_classes(), out.test.num_classes());
    out.train.class_names = numbered_classes(classes);
    out.test.class_names = numbered_classes(classes);
    return out;
  }
  const fs::path manifest = dir / "manifest.csv";
  return load_image_folder(dir, fs::exists(manifest) ? std::optional<fs::path>(manifest) : std::nullopt);
}

// ---------------------------------------------------------------------------
// augmentation

void AugmentConfig::validate() const {
  if (!(crop_low > 0.0 && crop_low <= crop_high && crop_high <= 1.0)) {
    throw ParameterError("crop scale range must satisfy 0 < low <= high <= 1");
  }
  if (!(hflip_prob >= 0.0 && hflip_prob <= 1.0)) throw ParameterError("hflip_prob must be in [0,1]");
  if (target_h == 0 || target_w == 0) throw ParameterError("target size must be positive");
  if (mean.empty() || std.empty()) throw ParameterError("normalization mean/std must be given");
  for (double s : std) {
    if (!(s > 0.0)) throw ParameterError("normalization std must be positive");
  }
}

Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w) {
  if (image.rank() != 3) throw DimensionError("resize_bilinear expects C x H x W");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h == out_h && w == out_w) return Tensor(image.shape(), std::vector<double>(image.data().begin(), image.data().end()));
  std::vector<double> out(c * out_h * out_w);
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* p = image.data().data() + ch * h * w;
        const double top = p[y0 * w + x0] * (1.0 - wx) + p[y0 * w + x1] * wx;
        const double bottom = p[y1 * w + x0] * (1.0 - wx) + p[y1 * w + x1] * wx;
        out[(ch * out_h + y) * out_w + x] = top * (1.0 - wy) + bottom * wy;
      }
    }
  }
  return Tensor({c, out_h, out_w}, std::move(out));
}

Tensor hflip(const Tensor& image) {
  if (image.rank() != 3) throw DimensionError("hflip expects C x H x W");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<double> out(image.numel());
  for (std::size_t r = 0; r < c * h; ++r)
    for (std::size_t x = 0; x < w; ++x) out[r * w + x] = image[r * w + (w - 1 - x)];
  return Tensor(image.shape(), std::move(out));
}

Tensor normalize(const Tensor& image, const AugmentConfig& cfg) {
  const std::size_t c = image.dim(0), plane = image.dim(1) * image.dim(2);
  auto pick = [c](const std::vector<double>& v, std::size_t ch) {
    if (v.size() == 1) return v[0];
    if (v.size() != c) throw DimensionError("normalization constants do not match channel count");
    return v[ch];
  };
  std::vector<double> out(image.numel());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double m = pick(cfg.mean, ch), s = pick(cfg.std, ch);
    for (std::size_t p = 0; p < plane; ++p) out[ch * plane + p] = (image[ch * plane + p] - m) / s;
  }
  return Tensor(image.shape(), std::move(out));
}

Tensor augment(const Tensor& image, const AugmentConfig& cfg, Rng& rng) {
  if (image.rank() != 3) throw DimensionError("augment expects C x H x W");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const double area = rng.uniform(cfg.crop_low, cfg.crop_high);
  const double side = std::sqrt(area);
  const auto ch = static_cast<std::size_t>(std::lround(side * static_cast<double>(h)));
  const auto cw = static_cast<std::size_t>(std::lround(side * static_cast<double>(w)));
  Tensor crop;
  if (ch == 0 || cw == 0 || ch > h || cw > w) {
    std::cerr << "warning: degenerate crop " << cw << "x" << ch << ", using the full image\n";
    crop = image;
  } else {
    const auto y0 = static_cast<std::size_t>(rng.below(h - ch + 1));
    const auto x0 = static_cast<std::size_t>(rng.below(w - cw + 1));
    std::vector<double> out(c * ch * cw);
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t y = 0; y < ch; ++y)
        for (std::size_t x = 0; x < cw; ++x)
          out[(k * ch + y) * cw + x] = image[(k * h + y0 + y) * w + x0 + x];
    crop = Tensor({c, ch, cw}, std::move(out));
  }
  Tensor resized = resize_bilinear(crop, cfg.target_h, cfg.target_w);
  if (rng.bernoulli(cfg.hflip_prob)) resized = hflip(resized);
  return normalize(resized, cfg);
}

Tensor preprocess(const Tensor& image, const AugmentConfig& cfg) {
  return normalize(resize_bilinear(image, cfg.target_h, cfg.target_w), cfg);
}

// ---------------------------------------------------------------------------
// batching

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size,
                                                    bool shuffle, std::uint64_t seed) {
  if (batch_size == 0) throw ParameterError("batch_size must be at least 1");
  std::vector<std::size_t> order;
  if (shuffle) {
    Rng rng = Rng::fork(seed, 0x5417);
    order = rng.permutation(n);
  } else {
    order.resize(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    out.emplace_back(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end));
  }
  return out;
}

LabeledBatch make_batch(const Dataset& ds, std::span<const std::size_t> indices,
                        const AugmentConfig& cfg, Rng* rng) {
  if (indices.empty()) throw ContractError("make_batch with no indices");
  LabeledBatch batch;
  std::vector<double> data;
  Shape sample_shape;
  for (auto i : indices) {
    Tensor img = ds.image(i);
    Tensor prepared = rng && cfg.enabled ? augment(img, cfg, *rng) : preprocess(img, cfg);
    sample_shape = prepared.shape();
    data.insert(data.end(), prepared.data().begin(), prepared.data().end());
    batch.labels.push_back(ds.labels[i]);
    batch.indices.push_back(i);
  }
  batch.images = Tensor({indices.size(), sample_shape[0], sample_shape[1], sample_shape[2]}, std::move(data));
  return batch;
}

std::vector<LabeledBatch> batches(const Dataset& ds, std::size_t batch_size, bool shuffle,
                                  std::uint64_t seed) {
  std::vector<LabeledBatch> out;
  const std::size_t stride = ds.channels() * ds.height() * ds.width();
  for (const auto& idx : batch_indices(ds.size(), batch_size, shuffle, seed)) {
    LabeledBatch b;
    std::vector<double> data;
    for (auto i : idx) {
      auto px = ds.images.data().subspan(i * stride, stride);
      data.insert(data.end(), px.begin(), px.end());
      b.labels.push_back(ds.labels[i]);
    }
    b.indices = idx;
    b.images = Tensor({idx.size(), ds.channels(), ds.height(), ds.width()}, std::move(data));
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace kdlab
