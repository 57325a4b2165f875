#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "moex/dataset.hpp"
#include "moex/tensor.hpp"
#include "moex/vit.hpp"

namespace moex {

/// Captured tokens of one layer in struct-of-arrays form. Row i of x and y
/// belong to the same token.
struct LayerActivations {
  int layer = 0;
  Tensor x;  // n × e
  Tensor y;  // n × hidden
  std::vector<std::int64_t> image_ids;
  std::vector<int> token_index;
  std::vector<int> class_label;

  std::int64_t size() const { return static_cast<std::int64_t>(image_ids.size()); }
  void validate() const;
  LayerActivations rows(std::span<const std::int64_t> indices) const;
};

/// Packs records of a single layer; mixed layers are a validation error.
LayerActivations pack_records(std::span<const ActivationRecord> records);
std::vector<ActivationRecord> unpack_records(const LayerActivations& acts);

struct CaptureConfig {
  std::vector<int> layers;  // empty means every layer
  bool include_class_token = true;
  int batch_size = 64;
};

/// Runs the dense model over `images` of `data` and returns one
/// LayerActivations per requested layer, in ascending layer order.
std::vector<LayerActivations> capture_activations(const ModelSpec& spec, const ModelWeights& weights,
                                                  const Dataset& data, std::span<const std::int64_t> images,
                                                  const CaptureConfig& config);

}  // namespace moex
