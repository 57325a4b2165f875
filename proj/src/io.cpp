#include "moex/io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "moex/error.hpp"

namespace moex {

static_assert(std::endian::native == std::endian::little, "payloads are written in host order");

using nlohmann::json;

namespace {

constexpr std::size_t kPrefix = 16;  // magic + version + header length
constexpr std::uint64_t kAlign = 64;

std::uint64_t align_up(std::uint64_t v) { return (v + kAlign - 1) / kAlign * kAlign; }

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32" || dtype == "i32") return 4;
  if (dtype == "i64") return 8;
  return 0;
}

struct Blob {
  std::string name;
  std::string dtype;
  Shape shape;
  const void* data = nullptr;
  std::uint64_t bytes = 0;
};

Blob f32_blob(std::string name, const Tensor& t) {
  return {std::move(name), "f32", t.shape(), t.data(), static_cast<std::uint64_t>(t.numel()) * 4};
}

template <class T>
Blob int_blob(std::string name, const std::vector<T>& v) {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  return {std::move(name), sizeof(T) == 8 ? "i64" : "i32", Shape{static_cast<std::int64_t>(v.size())}, v.data(),
          static_cast<std::uint64_t>(v.size()) * sizeof(T)};
}

std::string write_container(const char* magic, std::uint32_t version, json header, const std::vector<Blob>& blobs) {
  std::uint64_t start = align_up(kPrefix);
  std::string text;
  std::vector<std::uint64_t> offsets(blobs.size());
  for (;;) {
    json manifest = json::array();
    std::uint64_t at = start;
    for (std::size_t i = 0; i < blobs.size(); ++i) {
      offsets[i] = at;
      manifest.push_back({{"name", blobs[i].name},
                          {"dtype", blobs[i].dtype},
                          {"shape", blobs[i].shape},
                          {"offset", at},
                          {"length", blobs[i].bytes}});
      at = align_up(at + blobs[i].bytes);
    }
    header["tensors"] = manifest;
    text = header.dump();
    if (kPrefix + text.size() <= start) break;
    start = align_up(kPrefix + text.size());
  }
  text.resize(start - kPrefix, ' ');

  std::string out;
  out.append(magic, 4);
  const std::uint64_t hlen = text.size();
  out.append(reinterpret_cast<const char*>(&version), 4);
  out.append(reinterpret_cast<const char*>(&hlen), 8);
  out += text;
  for (std::size_t i = 0; i < blobs.size(); ++i) {
    out.resize(offsets[i], '\0');
    out.append(static_cast<const char*>(blobs[i].data), blobs[i].bytes);
  }
  return out;
}

struct Entry {
  std::string dtype;
  Shape shape;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
};

struct Container {
  json header;
  std::map<std::string, Entry> entries;
  std::string_view bytes;
};

Container read_container(std::string_view bytes, const char* magic, std::uint32_t version, const char* what) {
  if (bytes.size() < kPrefix) {
    throw FormatError(FormatFault::Truncated, std::string(what) + " is " + std::to_string(bytes.size()) +
                                                  " bytes, shorter than the 16-byte prefix");
  }
  if (std::memcmp(bytes.data(), magic, 4) != 0) {
    throw FormatError(FormatFault::BadMagic, std::string(what) + " does not start with \"" + magic + "\" at offset 0");
  }
  std::uint32_t ver = 0;
  std::uint64_t hlen = 0;
  std::memcpy(&ver, bytes.data() + 4, 4);
  std::memcpy(&hlen, bytes.data() + 8, 8);
  if (ver != version) {
    throw FormatError(FormatFault::UnsupportedVersion, std::string(what) + " version " + std::to_string(ver) +
                                                           " at offset 4; this build reads version " +
                                                           std::to_string(version));
  }
  if (hlen > bytes.size() - kPrefix) {
    throw FormatError(FormatFault::Truncated, "header of " + std::to_string(hlen) + " bytes at offset 16 runs past the " +
                                                  std::to_string(bytes.size()) + "-byte file");
  }
  Container c;
  c.bytes = bytes;
  try {
    c.header = json::parse(bytes.substr(kPrefix, hlen));
  } catch (const json::parse_error& e) {
    throw FormatError(FormatFault::BadHeader, "JSON header (offset 16) does not parse: " + std::string(e.what()));
  }
  if (!c.header.is_object() || !c.header.contains("tensors") || !c.header["tensors"].is_array()) {
    throw FormatError(FormatFault::BadHeader, "JSON header lacks a tensor manifest");
  }
  const std::uint64_t payload_start = kPrefix + hlen;
  std::vector<std::pair<std::uint64_t, std::string>> spans;
  for (const auto& t : c.header["tensors"]) {
    Entry e;
    std::string name;
    try {
      name = t.at("name").get<std::string>();
      e.dtype = t.at("dtype").get<std::string>();
      e.shape = t.at("shape").get<Shape>();
      e.offset = t.at("offset").get<std::uint64_t>();
      e.length = t.at("length").get<std::uint64_t>();
    } catch (const json::exception& ex) {
      throw FormatError(FormatFault::BadHeader, "malformed manifest entry: " + std::string(ex.what()));
    }
    const std::size_t es = dtype_size(e.dtype);
    if (es == 0) throw FormatError(FormatFault::BadHeader, "tensor " + name + " has unsupported dtype " + e.dtype);
    std::uint64_t numel = 1;
    for (auto d : e.shape) {
      if (d < 0) throw FormatError(FormatFault::BadHeader, "tensor " + name + " has a negative dimension");
      if (d != 0 && numel > std::numeric_limits<std::uint64_t>::max() / 8 / static_cast<std::uint64_t>(d)) {
        throw FormatError(FormatFault::ManifestOverflow, "tensor " + name + " shape overflows");
      }
      numel *= static_cast<std::uint64_t>(d);
    }
    if (numel * es != e.length) {
      throw FormatError(FormatFault::ManifestOverflow, "tensor " + name + " declares " + std::to_string(e.length) +
                                                           " bytes for shape " + shape_to_string(e.shape));
    }
    if (e.offset < payload_start) {
      throw FormatError(FormatFault::ManifestOverflow, "tensor " + name + " offset " + std::to_string(e.offset) +
                                                           " lies inside the header ending at " +
                                                           std::to_string(payload_start));
    }
    if (e.offset % kAlign != 0) {
      throw FormatError(FormatFault::BadHeader, "tensor " + name + " offset " + std::to_string(e.offset) +
                                                    " is not 64-byte aligned");
    }
    if (e.length > std::numeric_limits<std::uint64_t>::max() - e.offset) {
      throw FormatError(FormatFault::ManifestOverflow, "tensor " + name + " extent overflows");
    }
    if (e.offset + e.length > bytes.size()) {
      throw FormatError(FormatFault::Truncated, "tensor " + name + " needs bytes [" + std::to_string(e.offset) + ", " +
                                                    std::to_string(e.offset + e.length) + ") but the file has " +
                                                    std::to_string(bytes.size()));
    }
    if (!c.entries.emplace(name, e).second) {
      throw FormatError(FormatFault::BadHeader, "tensor " + name + " listed twice");
    }
    spans.emplace_back(e.offset, name);
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i) {
    const auto& prev = c.entries[spans[i - 1].second];
    if (prev.offset + prev.length > spans[i].first) {
      throw FormatError(FormatFault::OverlappingTensors, "tensors " + spans[i - 1].second + " and " + spans[i].second +
                                                             " overlap at offset " + std::to_string(spans[i].first));
    }
  }
  return c;
}

const Entry& entry(const Container& c, const std::string& name, const std::string& dtype) {
  auto it = c.entries.find(name);
  if (it == c.entries.end()) throw FormatError(FormatFault::BadHeader, "tensor " + name + " missing from manifest");
  if (it->second.dtype != dtype) {
    throw FormatError(FormatFault::BadHeader, "tensor " + name + " has dtype " + it->second.dtype + ", expected " + dtype);
  }
  return it->second;
}

void read_tensor(const Container& c, const std::string& name, Tensor& t) {
  const auto& e = entry(c, name, "f32");
  if (e.shape != t.shape()) {
    throw FormatError(FormatFault::ShapeMismatch, "tensor " + name + " has shape " + shape_to_string(e.shape) +
                                                      ", the spec implies " + shape_to_string(t.shape()));
  }
  if (e.length) std::memcpy(t.data(), c.bytes.data() + e.offset, e.length);
}

Tensor read_tensor(const Container& c, const std::string& name) {
  const auto& e = entry(c, name, "f32");
  Tensor t(e.shape);
  if (e.length) std::memcpy(t.data(), c.bytes.data() + e.offset, e.length);
  return t;
}

template <class T>
std::vector<T> read_ints(const Container& c, const std::string& name) {
  const auto& e = entry(c, name, sizeof(T) == 8 ? "i64" : "i32");
  if (e.shape.size() != 1) throw FormatError(FormatFault::ShapeMismatch, "tensor " + name + " must be one-dimensional");
  std::vector<T> v(static_cast<std::size_t>(e.shape[0]));
  if (e.length) std::memcpy(v.data(), c.bytes.data() + e.offset, e.length);
  return v;
}

json spec_to_json(const ModelSpec& s) {
  return {{"image_size", s.image_size}, {"patch_size", s.patch_size}, {"channels", s.channels},
          {"embed_dim", s.embed_dim},   {"num_layers", s.num_layers}, {"num_heads", s.num_heads},
          {"mlp_ratio", s.mlp_ratio},   {"num_classes", s.num_classes}, {"layer_norm_eps", s.layer_norm_eps}};
}

ModelSpec spec_from_json(const json& j) {
  ModelSpec s;
  try {
    s.image_size = j.at("image_size").get<int>();
    s.patch_size = j.at("patch_size").get<int>();
    s.channels = j.at("channels").get<int>();
    s.embed_dim = j.at("embed_dim").get<int>();
    s.num_layers = j.at("num_layers").get<int>();
    s.num_heads = j.at("num_heads").get<int>();
    s.mlp_ratio = j.at("mlp_ratio").get<double>();
    s.num_classes = j.at("num_classes").get<int>();
    s.layer_norm_eps = j.at("layer_norm_eps").get<float>();
    s.validate();
  } catch (const json::exception& e) {
    throw FormatError(FormatFault::BadHeader, "model spec in header: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw FormatError(FormatFault::BadHeader, e.what());
  }
  return s;
}

}  // namespace

std::string model_to_bytes(const MoeModel& model) {
  model.validate();
  json header;
  header["format"] = "moe-model";
  header["spec"] = spec_to_json(model.spec);
  std::vector<Blob> blobs;
  model.weights.for_each([&](const std::string& name, const Tensor& t) { blobs.push_back(f32_blob(name, t)); });
  json moe = json::object();
  moe["metric"] = to_string(model.metric);
  moe["routing_seed"] = model.routing_seed;
  json layers = json::array();
  for (int l : model.converted_layers()) {
    const auto& ml = *model.layers[static_cast<std::size_t>(l)];
    layers.push_back({{"layer", ml.layer},
                      {"original_hidden", ml.original_hidden},
                      {"kept_indices", ml.kept_indices},
                      {"expert_ids", ml.expert_ids},
                      {"experts", ml.experts},
                      {"member_counts", ml.member_counts}});
    const std::string p = "moe." + std::to_string(l) + ".";
    blobs.push_back(f32_blob(p + "w1", ml.compact.w1));
    blobs.push_back(f32_blob(p + "b1", ml.compact.b1));
    blobs.push_back(f32_blob(p + "w2", ml.compact.w2));
    blobs.push_back(f32_blob(p + "b2", ml.compact.b2));
    blobs.push_back(f32_blob(p + "means", ml.means));
    blobs.push_back(f32_blob(p + "raw_means", ml.raw_means));
  }
  moe["layers"] = layers;
  header["moe"] = moe;
  return write_container("MOEC", kModelFormatVersion, std::move(header), blobs);
}

MoeModel model_from_bytes(std::string_view bytes) {
  const auto c = read_container(bytes, "MOEC", kModelFormatVersion, "model file");
  if (!c.header.contains("spec")) throw FormatError(FormatFault::BadHeader, "model header lacks \"spec\"");
  MoeModel model;
  model.spec = spec_from_json(c.header["spec"]);
  model.layers.resize(static_cast<std::size_t>(model.spec.num_layers));
  model.weights = ModelWeights::zeros(model.spec);
  try {
    if (c.header.contains("moe")) {
      const auto& moe = c.header["moe"];
      model.metric = parse_metric(moe.value("metric", std::string("cosine")));
      model.routing_seed = moe.value("routing_seed", std::uint64_t{0});
      for (const auto& j : moe.value("layers", json::array())) {
        MoeLayer ml;
        ml.layer = j.at("layer").get<int>();
        if (ml.layer < 0 || ml.layer >= model.spec.num_layers || model.layers[static_cast<std::size_t>(ml.layer)]) {
          throw FormatError(FormatFault::BadHeader, "MoE layer index " + std::to_string(ml.layer) + " invalid or repeated");
        }
        ml.original_hidden = j.at("original_hidden").get<std::int64_t>();
        ml.kept_indices = j.at("kept_indices").get<std::vector<int>>();
        ml.expert_ids = j.at("expert_ids").get<std::vector<int>>();
        ml.experts = j.at("experts").get<std::vector<std::vector<int>>>();
        ml.member_counts = j.at("member_counts").get<std::vector<std::int64_t>>();
        const std::string p = "moe." + std::to_string(ml.layer) + ".";
        ml.compact.w1 = read_tensor(c, p + "w1");
        ml.compact.b1 = read_tensor(c, p + "b1");
        ml.compact.w2 = read_tensor(c, p + "w2");
        ml.compact.b2 = read_tensor(c, p + "b2");
        ml.means = read_tensor(c, p + "means");
        ml.raw_means = read_tensor(c, p + "raw_means");
        model.weights.blocks[static_cast<std::size_t>(ml.layer)].mlp = MlpParams{};
        model.layers[static_cast<std::size_t>(ml.layer)] = std::move(ml);
      }
    }
  } catch (const json::exception& e) {
    throw FormatError(FormatFault::BadHeader, "MoE metadata: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw FormatError(FormatFault::BadHeader, e.what());
  }
  model.weights.for_each([&](const std::string& name, Tensor& t) { read_tensor(c, name, t); });
  try {
    model.validate();
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    throw FormatError(FormatFault::ShapeMismatch, std::string("model contents inconsistent: ") + e.what());
  }
  return model;
}

void save_model(const std::string& path, const MoeModel& model) { write_file(path, model_to_bytes(model)); }

MoeModel load_model(const std::string& path) { return model_from_bytes(read_file(path)); }

std::string activations_to_bytes(const ModelSpec& spec, const std::vector<LayerActivations>& layers) {
  json header;
  header["format"] = "moe-activations";
  header["spec"] = spec_to_json(spec);
  json meta = json::array();
  std::vector<Blob> blobs;
  for (const auto& a : layers) {
    a.validate();
    meta.push_back({{"layer", a.layer}, {"tokens", a.size()}});
    const std::string p = "layer." + std::to_string(a.layer) + ".";
    blobs.push_back(f32_blob(p + "x", a.x));
    blobs.push_back(f32_blob(p + "y", a.y));
    blobs.push_back(int_blob(p + "image_ids", a.image_ids));
    blobs.push_back(int_blob(p + "token_index", a.token_index));
    blobs.push_back(int_blob(p + "class_label", a.class_label));
  }
  header["layers"] = meta;
  return write_container("MOEA", kCaptureFormatVersion, std::move(header), blobs);
}

std::vector<LayerActivations> activations_from_bytes(std::string_view bytes, ModelSpec* spec) {
  const auto c = read_container(bytes, "MOEA", kCaptureFormatVersion, "capture file");
  if (!c.header.contains("spec")) throw FormatError(FormatFault::BadHeader, "capture header lacks \"spec\"");
  const ModelSpec s = spec_from_json(c.header["spec"]);
  if (spec) *spec = s;
  std::vector<LayerActivations> out;
  try {
    for (const auto& j : c.header.at("layers")) {
      LayerActivations a;
      a.layer = j.at("layer").get<int>();
      const std::string p = "layer." + std::to_string(a.layer) + ".";
      a.x = read_tensor(c, p + "x");
      a.y = read_tensor(c, p + "y");
      a.image_ids = read_ints<std::int64_t>(c, p + "image_ids");
      a.token_index = read_ints<int>(c, p + "token_index");
      a.class_label = read_ints<int>(c, p + "class_label");
      if (j.at("tokens").get<std::int64_t>() != a.size()) {
        throw FormatError(FormatFault::CountMismatch, "layer " + std::to_string(a.layer) + " token count disagrees");
      }
      try {
        a.validate();
      } catch (const FormatError&) {
        throw;
      } catch (const Error& e) {
        throw FormatError(FormatFault::ShapeMismatch, e.what());
      }
      if (a.x.cols() != s.embed_dim || a.y.cols() != s.hidden_dim()) {
        throw FormatError(FormatFault::ShapeMismatch, "layer " + std::to_string(a.layer) + " widths differ from the spec");
      }
      out.push_back(std::move(a));
    }
  } catch (const json::exception& e) {
    throw FormatError(FormatFault::BadHeader, "capture metadata: " + std::string(e.what()));
  }
  return out;
}

void save_activations(const std::string& path, const ModelSpec& spec, const std::vector<LayerActivations>& layers) {
  write_file(path, activations_to_bytes(spec, layers));
}

std::vector<LayerActivations> load_activations(const std::string& path, ModelSpec* spec) {
  return activations_from_bytes(read_file(path), spec);
}

std::string experts_to_json(const std::vector<ExpertSpec>& experts) {
  json arr = json::array();
  for (const auto& e : experts) {
    arr.push_back({{"layer", e.layer},
                   {"expert_id", e.expert_id},
                   {"neuron_indices", e.neuron_indices},
                   {"member_count", e.member_count},
                   {"mu", e.mu.storage()},
                   {"raw_mean", e.raw_mean.storage()}});
  }
  return json{{"experts", arr}}.dump();
}

std::vector<ExpertSpec> experts_from_json(const std::string& text) {
  std::vector<ExpertSpec> out;
  try {
    const auto j = json::parse(text);
    for (const auto& x : j.at("experts")) {
      ExpertSpec e;
      e.layer = x.at("layer").get<int>();
      e.expert_id = x.at("expert_id").get<int>();
      e.neuron_indices = x.at("neuron_indices").get<std::vector<int>>();
      e.member_count = x.at("member_count").get<std::int64_t>();
      e.mu = Tensor::vector(x.at("mu").get<std::vector<float>>());
      e.raw_mean = Tensor::vector(x.at("raw_mean").get<std::vector<float>>());
      out.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw FormatError(FormatFault::BadHeader, std::string("expert list: ") + e.what());
  }
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  if (f.bad()) throw IoError("failed reading " + path);
  return ss.str();
}

void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  f.close();
  if (!f) throw IoError("failed writing " + path);
}

}  // namespace moex
