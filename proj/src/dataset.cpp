#include "moex/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>

#include "moex/error.hpp"

namespace moex {

Tensor Dataset::gather(std::span<const std::int64_t> indices) const {
  const auto per = images.numel() / std::max<std::int64_t>(1, size());
  Shape shape = images.shape();
  shape[0] = static_cast<std::int64_t>(indices.size());
  Tensor out(shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto src = images.data() + indices[i] * per;
    std::copy(src, src + per, out.data() + static_cast<std::int64_t>(i) * per);
  }
  return out;
}

std::vector<int> Dataset::gather_labels(std::span<const std::int64_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels[static_cast<std::size_t>(i)]);
  return out;
}

Dataset Dataset::subset(std::span<const std::int64_t> indices) const {
  Dataset d;
  d.images = gather(indices);
  d.labels = gather_labels(indices);
  d.class_names = class_names;
  d.stats = stats;
  return d;
}

NormalizationStats compute_stats(const Tensor& raw) {
  const auto n = raw.dim(0);
  const auto c = raw.dim(1);
  const auto plane = raw.dim(2) * raw.dim(3);
  NormalizationStats s;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    double sq = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      const float* p = raw.data() + (i * c + ch) * plane;
      for (std::int64_t k = 0; k < plane; ++k) {
        sum += p[k];
        sq += static_cast<double>(p[k]) * p[k];
      }
    }
    const double count = static_cast<double>(n * plane);
    const double mean = sum / count;
    const double var = std::max(0.0, sq / count - mean * mean);
    s.mean.push_back(static_cast<float>(mean));
    s.stddev.push_back(static_cast<float>(std::max(std::sqrt(var), 1e-6)));
  }
  return s;
}

void normalize_in_place(Tensor& images, const NormalizationStats& stats) {
  const auto n = images.dim(0);
  const auto c = images.dim(1);
  if (static_cast<std::int64_t>(stats.mean.size()) != c || static_cast<std::int64_t>(stats.stddev.size()) != c) {
    throw DimensionError("normalization statistics do not match channel count");
  }
  const auto plane = images.dim(2) * images.dim(3);
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      float* p = images.data() + (i * c + ch) * plane;
      const float m = stats.mean[static_cast<std::size_t>(ch)];
      const float inv = 1.0f / stats.stddev[static_cast<std::size_t>(ch)];
      for (std::int64_t k = 0; k < plane; ++k) p[k] = (p[k] - m) * inv;
    }
  }
}

Tensor denormalize(const Tensor& image, const NormalizationStats& stats) {
  Tensor out = image;
  const auto c = image.dim(0);
  const auto plane = image.dim(1) * image.dim(2);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    float* p = out.data() + ch * plane;
    for (std::int64_t k = 0; k < plane; ++k) {
      p[k] = std::clamp(p[k] * stats.stddev[static_cast<std::size_t>(ch)] + stats.mean[static_cast<std::size_t>(ch)],
                        0.0f, 1.0f);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// IDX

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off, const std::string& path) {
  if (off + 4 > b.size()) {
    throw FormatError(FormatFault::Truncated, path + ": header ends at byte " + std::to_string(b.size()) +
                                                  ", needed " + std::to_string(off + 4));
  }
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path, const NormalizationStats* stats) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  if (img.empty()) throw FormatError(FormatFault::Truncated, images_path + ": empty file");
  if (lab.empty()) throw FormatError(FormatFault::Truncated, labels_path + ": empty file");

  const auto img_magic = read_be32(img, 0, images_path);
  if (img_magic != 0x00000803u) {
    throw FormatError(FormatFault::BadMagic, images_path + ": expected 0x00000803 at byte 0");
  }
  const auto lab_magic = read_be32(lab, 0, labels_path);
  if (lab_magic != 0x00000801u) {
    throw FormatError(FormatFault::BadMagic, labels_path + ": expected 0x00000801 at byte 0");
  }
  const std::int64_t n = read_be32(img, 4, images_path);
  const std::int64_t rows = read_be32(img, 8, images_path);
  const std::int64_t cols = read_be32(img, 12, images_path);
  const std::int64_t n_labels = read_be32(lab, 4, labels_path);
  if (n != n_labels) {
    throw FormatError(FormatFault::CountMismatch, images_path + " holds " + std::to_string(n) + " images but " +
                                                      labels_path + " holds " + std::to_string(n_labels) + " labels");
  }
  if (n == 0) throw FormatError(FormatFault::Truncated, images_path + ": zero images");
  if (rows != cols) throw FormatError(FormatFault::ShapeMismatch, images_path + ": only square images are supported");
  const std::size_t need_img = 16 + static_cast<std::size_t>(n * rows * cols);
  if (img.size() < need_img) {
    throw FormatError(FormatFault::Truncated, images_path + ": pixel data ends at byte " + std::to_string(img.size()) +
                                                  ", needed " + std::to_string(need_img));
  }
  if (lab.size() < 8 + static_cast<std::size_t>(n)) {
    throw FormatError(FormatFault::Truncated, labels_path + ": label data ends at byte " + std::to_string(lab.size()));
  }

  Dataset d;
  d.images = Tensor({n, 1, rows, cols});
  for (std::int64_t i = 0; i < n * rows * cols; ++i) {
    d.images[i] = static_cast<float>(img[16 + static_cast<std::size_t>(i)]) / 255.0f;
  }
  int max_label = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const int y = lab[8 + static_cast<std::size_t>(i)];
    d.labels.push_back(y);
    max_label = std::max(max_label, y);
  }
  for (int c = 0; c <= max_label; ++c) d.class_names.push_back(std::to_string(c));
  d.stats = stats ? *stats : compute_stats(d.images);
  normalize_in_place(d.images, d.stats);
  return d;
}

// ---------------------------------------------------------------------------
// Synthetic shapes

namespace {

constexpr int kShapes = 10;
constexpr std::array<const char*, kShapes> kShapeNames = {"disk",    "square", "triangle", "plus", "ring",
                                                          "hbar",    "vbar",   "diamond",  "x",    "ell"};
constexpr int kColors = 8;
constexpr std::array<const char*, kColors> kColorNames = {"red",     "green", "blue",   "yellow",
                                                          "magenta", "cyan",  "orange", "white"};
constexpr std::array<std::array<float, 3>, kColors> kPalette = {{{0.90f, 0.20f, 0.20f},
                                                                 {0.20f, 0.85f, 0.30f},
                                                                 {0.25f, 0.35f, 0.95f},
                                                                 {0.95f, 0.85f, 0.20f},
                                                                 {0.85f, 0.30f, 0.85f},
                                                                 {0.20f, 0.85f, 0.90f},
                                                                 {0.95f, 0.55f, 0.15f},
                                                                 {0.90f, 0.90f, 0.90f}}};
constexpr float kBackground = 0.1f;

int shape_of(int cls) { return cls % kShapes; }
int color_of(int cls) { return (cls + cls / kShapes) % kColors; }

bool inside(int shape, float u, float v) {
  const float au = std::abs(u);
  const float av = std::abs(v);
  switch (shape) {
    case 0: return u * u + v * v <= 1.0f;
    case 1: return au <= 0.8f && av <= 0.8f;
    case 2: return v >= -0.8f && v <= 0.8f && au <= (v + 0.8f) / 1.6f * 0.9f;
    case 3: return (au <= 0.25f && av <= 0.95f) || (av <= 0.25f && au <= 0.95f);
    case 4: {
      const float r2 = u * u + v * v;
      return r2 <= 1.0f && r2 >= 0.3f;
    }
    case 5: return av <= 0.38f && au <= 1.0f;
    case 6: return au <= 0.38f && av <= 1.0f;
    case 7: return au + av <= 1.0f;
    case 8: return (std::abs(u - v) <= 0.35f || std::abs(u + v) <= 0.35f) && au <= 0.95f && av <= 0.95f;
    case 9: return (u >= -0.85f && u <= -0.2f && av <= 0.9f) || (v >= 0.25f && v <= 0.9f && au <= 0.85f);
    default: return false;
  }
}

/// Renders one raw image into `dst` ([C,H,W]).
void render(const SynthConfig& cfg, int cls, float shift_x, float shift_y, float brightness, float* dst) {
  const int s = cfg.image_size;
  const float radius = 0.32f * static_cast<float>(s);
  const float cx = 0.5f * static_cast<float>(s - 1) + shift_x;
  const float cy = 0.5f * static_cast<float>(s - 1) + shift_y;
  const auto& rgb = kPalette[static_cast<std::size_t>(color_of(cls))];
  const int shape = shape_of(cls);
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      // 4×4 supersampling gives soft edges, so small shifts change few pixels abruptly.
      int hits = 0;
      for (int sy = 0; sy < 4; ++sy) {
        for (int sx = 0; sx < 4; ++sx) {
          const float px = static_cast<float>(x) + (static_cast<float>(sx) - 1.5f) * 0.25f;
          const float py = static_cast<float>(y) + (static_cast<float>(sy) - 1.5f) * 0.25f;
          hits += inside(shape, (px - cx) / radius, (py - cy) / radius);
        }
      }
      const float cover = static_cast<float>(hits) / 16.0f;
      for (int c = 0; c < cfg.channels; ++c) {
        const float base = cfg.channels == 3 ? rgb[static_cast<std::size_t>(c)] : (rgb[0] + rgb[1] + rgb[2]) / 3.0f;
        dst[(c * s + y) * s + x] = kBackground + cover * (base * brightness - kBackground);
      }
    }
  }
}

}  // namespace

void SynthConfig::validate() const {
  if (image_size < 8) throw ConfigError("synthetic images must be at least 8 px");
  if (channels != 1 && channels != 3) throw ConfigError("synthetic images have 1 or 3 channels");
  if (num_classes < 1 || num_classes > kMaxClasses) {
    throw ConfigError("synthetic class count must be in [1, " + std::to_string(kMaxClasses) + "]");
  }
  if (max_shift < 0.0f || noise_std < 0.0f || brightness_jitter < 0.0f) throw ConfigError("negative synthetic jitter");
}

Tensor synth_template(const SynthConfig& config, int cls) {
  config.validate();
  Tensor t({config.channels, config.image_size, config.image_size});
  render(config, cls, 0.0f, 0.0f, 1.0f, t.data());
  return t;
}

std::string synth_class_name(int cls) {
  return std::string(kColorNames[static_cast<std::size_t>(color_of(cls))]) + "_" +
         kShapeNames[static_cast<std::size_t>(shape_of(cls))];
}

Dataset synth_dataset(const SynthConfig& config, std::int64_t n, const Rng& rng, const NormalizationStats* stats) {
  config.validate();
  if (n < 1) throw ConfigError("synthetic dataset needs at least one image");
  const int s = config.image_size;
  const std::int64_t per = static_cast<std::int64_t>(config.channels) * s * s;
  Dataset d;
  d.images = Tensor({n, config.channels, s, s});
  d.labels.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    Rng r = rng.fork(static_cast<std::uint64_t>(i));
    const int cls = static_cast<int>(r.below(static_cast<std::uint64_t>(config.num_classes)));
    const float sx = static_cast<float>(r.uniform(-config.max_shift, config.max_shift));
    const float sy = static_cast<float>(r.uniform(-config.max_shift, config.max_shift));
    const auto bright = static_cast<float>(r.uniform(1.0 - config.brightness_jitter, 1.0 + config.brightness_jitter));
    float* dst = d.images.data() + i * per;
    render(config, cls, sx, sy, bright, dst);
    for (std::int64_t k = 0; k < per; ++k) {
      dst[k] = std::clamp(dst[k] + static_cast<float>(r.normal() * config.noise_std), 0.0f, 1.0f);
    }
    d.labels[static_cast<std::size_t>(i)] = cls;
  }
  for (int c = 0; c < config.num_classes; ++c) d.class_names.push_back(synth_class_name(c));
  d.stats = stats ? *stats : compute_stats(d.images);
  normalize_in_place(d.images, d.stats);
  return d;
}

double pixel_correlation(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size() || a.empty()) throw DimensionError("correlation needs equal, non-empty inputs");
  double ma = 0.0;
  double mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(a.size());
  mb /= static_cast<double>(b.size());
  double sab = 0.0;
  double saa = 0.0;
  double sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace moex
