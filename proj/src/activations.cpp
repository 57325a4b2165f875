#include "moex/activations.hpp"

#include <algorithm>
#include <map>

#include "moex/error.hpp"

namespace moex {

void LayerActivations::validate() const {
  const auto n = size();
  if (x.rank() != 2 || y.rank() != 2 || x.dim(0) != n || y.dim(0) != n ||
      static_cast<std::int64_t>(token_index.size()) != n || static_cast<std::int64_t>(class_label.size()) != n) {
    throw DimensionError("activation arrays of layer " + std::to_string(layer) + " disagree in length");
  }
}

LayerActivations LayerActivations::rows(std::span<const std::int64_t> indices) const {
  LayerActivations out;
  out.layer = layer;
  const auto m = static_cast<std::int64_t>(indices.size());
  out.x = Tensor({m, x.dim(1)});
  out.y = Tensor({m, y.dim(1)});
  for (std::int64_t i = 0; i < m; ++i) {
    const auto r = indices[static_cast<std::size_t>(i)];
    if (r < 0 || r >= size()) throw DimensionError("activation row index out of range");
    std::copy_n(x.row(r).begin(), x.dim(1), out.x.row(i).begin());
    std::copy_n(y.row(r).begin(), y.dim(1), out.y.row(i).begin());
    out.image_ids.push_back(image_ids[static_cast<std::size_t>(r)]);
    out.token_index.push_back(token_index[static_cast<std::size_t>(r)]);
    out.class_label.push_back(class_label[static_cast<std::size_t>(r)]);
  }
  return out;
}

LayerActivations pack_records(std::span<const ActivationRecord> records) {
  if (records.empty()) throw ValidationError("no activation records to pack");
  LayerActivations out;
  out.layer = records.front().layer;
  const auto n = static_cast<std::int64_t>(records.size());
  const auto e = records.front().x.numel();
  const auto h = records.front().y.numel();
  out.x = Tensor({n, e});
  out.y = Tensor({n, h});
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& r = records[static_cast<std::size_t>(i)];
    if (r.layer != out.layer) {
      throw ValidationError("records mix layers " + std::to_string(out.layer) + " and " + std::to_string(r.layer));
    }
    if (r.x.numel() != e || r.y.numel() != h) throw DimensionError("activation records differ in width");
    std::copy_n(r.x.data(), e, out.x.row(i).begin());
    std::copy_n(r.y.data(), h, out.y.row(i).begin());
    out.image_ids.push_back(r.image_id);
    out.token_index.push_back(r.token_index);
    out.class_label.push_back(r.class_label);
  }
  return out;
}

std::vector<ActivationRecord> unpack_records(const LayerActivations& acts) {
  std::vector<ActivationRecord> out;
  out.reserve(static_cast<std::size_t>(acts.size()));
  for (std::int64_t i = 0; i < acts.size(); ++i) {
    ActivationRecord r;
    r.layer = acts.layer;
    r.token_index = acts.token_index[static_cast<std::size_t>(i)];
    r.image_id = acts.image_ids[static_cast<std::size_t>(i)];
    r.class_label = acts.class_label[static_cast<std::size_t>(i)];
    auto xr = acts.x.row(i);
    auto yr = acts.y.row(i);
    r.x = Tensor({acts.x.dim(1)}, std::vector<float>(xr.begin(), xr.end()));
    r.y = Tensor({acts.y.dim(1)}, std::vector<float>(yr.begin(), yr.end()));
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<LayerActivations> capture_activations(const ModelSpec& spec, const ModelWeights& weights,
                                                  const Dataset& data, std::span<const std::int64_t> images,
                                                  const CaptureConfig& config) {
  std::vector<int> layers = config.layers;
  if (layers.empty()) {
    for (int l = 0; l < spec.num_layers; ++l) layers.push_back(l);
  }
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  for (int l : layers) {
    if (l < 0 || l >= spec.num_layers) throw ConfigError("capture layer " + std::to_string(l) + " out of range");
  }
  if (config.batch_size < 1) throw ConfigError("capture batch size must be positive");

  const int tokens = spec.seq_len() - (config.include_class_token ? 0 : 1);
  const auto n = static_cast<std::int64_t>(images.size()) * tokens;
  std::vector<LayerActivations> out(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    out[i].layer = layers[i];
    out[i].x = Tensor({n, spec.embed_dim});
    out[i].y = Tensor({n, spec.hidden_dim()});
    out[i].image_ids.reserve(static_cast<std::size_t>(n));
  }

  DenseMlpBackend mlp(weights);
  std::int64_t row = 0;
  for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(config.batch_size)) {
    const auto end = std::min(images.size(), start + static_cast<std::size_t>(config.batch_size));
    auto idx = images.subspan(start, end - start);
    Tensor batch = data.gather(idx);
    std::vector<int> labels = data.gather_labels(idx);
    std::vector<ActivationRecord> records;
    CaptureRequest req;
    req.layers = layers;
    req.labels = labels;
    req.include_class_token = config.include_class_token;
    req.out = &records;
    encoder_forward(spec, weights, mlp, batch, idx, false, &req);
    // Records arrive layer by layer within the batch, tokens in order.
    std::map<int, std::size_t> slot;
    for (std::size_t i = 0; i < layers.size(); ++i) slot[layers[i]] = i;
    std::vector<std::int64_t> cursor(layers.size(), row);
    for (const auto& r : records) {
      auto& dst = out[slot.at(r.layer)];
      auto& c = cursor[slot.at(r.layer)];
      std::copy_n(r.x.data(), r.x.numel(), dst.x.row(c).begin());
      std::copy_n(r.y.data(), r.y.numel(), dst.y.row(c).begin());
      dst.image_ids.push_back(r.image_id);
      dst.token_index.push_back(r.token_index);
      dst.class_label.push_back(r.class_label);
      ++c;
    }
    row += static_cast<std::int64_t>(idx.size()) * tokens;
  }
  return out;
}

}  // namespace moex
