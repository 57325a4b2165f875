#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "moex/rng.hpp"
#include "moex/tensor.hpp"

namespace moex {

/// Per-channel statistics of the raw [0,1] pixels a dataset was normalized with.
struct NormalizationStats {
  std::vector<float> mean;
  std::vector<float> stddev;
};

/// Labeled images, already normalized to zero mean / unit variance per channel.
struct Dataset {
  Tensor images;  // n × channels × H × W
  std::vector<int> labels;
  std::vector<std::string> class_names;
  NormalizationStats stats;

  std::int64_t size() const { return images.empty() ? 0 : images.dim(0); }
  int num_classes() const { return static_cast<int>(class_names.size()); }
  int channels() const { return static_cast<int>(images.dim(1)); }
  int image_size() const { return static_cast<int>(images.dim(2)); }

  Tensor gather(std::span<const std::int64_t> indices) const;
  std::vector<int> gather_labels(std::span<const std::int64_t> indices) const;
  Dataset subset(std::span<const std::int64_t> indices) const;
};

NormalizationStats compute_stats(const Tensor& raw_images);
void normalize_in_place(Tensor& images, const NormalizationStats& stats);
/// Undo normalization for one image [C,H,W] back to [0,1] pixels.
Tensor denormalize(const Tensor& image, const NormalizationStats& stats);

/// Reads an IDX image file (magic 0x00000803, u8 pixels) and an IDX label file
/// (magic 0x00000801). When `stats` is null, statistics come from the images.
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const NormalizationStats* stats = nullptr);

/// Procedural shapes-and-colors images: each class is one (shape, color)
/// pair drawn on a dark background, jittered by a small shift, a brightness
/// factor and pixel noise.
struct SynthConfig {
  int image_size = 32;
  int channels = 3;
  int num_classes = 10;
  float max_shift = 0.5f;  // pixels, continuous
  float brightness_jitter = 0.1f;
  float noise_std = 0.04f;

  void validate() const;
  static constexpr int kMaxClasses = 80;
};

/// Noise-free, centered rendering of class `cls` as [C,H,W] raw pixels.
Tensor synth_template(const SynthConfig& config, int cls);
std::string synth_class_name(int cls);

/// Image i depends only on (rng state, i), so prefixes of larger sets agree.
Dataset synth_dataset(const SynthConfig& config, std::int64_t n, const Rng& rng,
                      const NormalizationStats* stats = nullptr);

/// Pearson correlation over all pixels of two equally shaped tensors.
double pixel_correlation(std::span<const float> a, std::span<const float> b);

}  // namespace moex
