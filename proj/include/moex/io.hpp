#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "moex/activations.hpp"
#include "moex/clustering.hpp"
#include "moex/extraction.hpp"
#include "moex/moe.hpp"

namespace moex {

// Binary container shared by model and capture files:
//   4-byte magic, u32 version, u64 header length, UTF-8 JSON header,
//   then tensor payloads at 64-byte aligned absolute offsets.
// All integers and payloads are little-endian. The header's "tensors" array
// lists name, dtype (f32 | i64 | i32), shape, offset and length of each payload.

inline constexpr std::uint32_t kModelFormatVersion = 1;
inline constexpr std::uint32_t kCaptureFormatVersion = 1;

/// "MOEC" file holding a dense or converted model. Converted layers store
/// their compacted weights, routing means and expert index lists.
std::string model_to_bytes(const MoeModel& model);
MoeModel model_from_bytes(std::string_view bytes);

void save_model(const std::string& path, const MoeModel& model);
MoeModel load_model(const std::string& path);

/// "MOEA" file with captured activations of one or more layers.
std::string activations_to_bytes(const ModelSpec& spec, const std::vector<LayerActivations>& layers);
std::vector<LayerActivations> activations_from_bytes(std::string_view bytes, ModelSpec* spec = nullptr);

void save_activations(const std::string& path, const ModelSpec& spec, const std::vector<LayerActivations>& layers);
std::vector<LayerActivations> load_activations(const std::string& path, ModelSpec* spec = nullptr);

/// Expert list as JSON; floats round-trip exactly.
std::string experts_to_json(const std::vector<ExpertSpec>& experts);
std::vector<ExpertSpec> experts_from_json(const std::string& text);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

}  // namespace moex
