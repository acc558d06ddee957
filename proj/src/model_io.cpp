#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "raproscope/errors.hpp"
#include "raproscope/model.hpp"

namespace raproscope {

static_assert(std::endian::native == std::endian::little, "blob format assumes a little-endian host");

using json = nlohmann::json;

std::string sha256_hex(std::span<const unsigned char> bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 computation failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) {
    os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  }
  return os.str();
}

namespace {

using Kind = ModelError::Kind;

[[noreturn]] void invalid(const std::string& id, const std::string& msg) {
  throw ModelError(Kind::kInvalidManifest, id, msg);
}

std::vector<unsigned char> read_bytes(const std::filesystem::path& path, const std::string& id) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelError(Kind::kMissingFile, id, "cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Shape shape_of(const json& j, const std::string& id) {
  if (!j.is_array() || j.empty()) invalid(id, "node '" + id + "': shape must be a non-empty array");
  Shape s;
  for (const json& d : j) {
    if (!d.is_number_unsigned() || d.get<std::size_t>() == 0) {
      invalid(id, "node '" + id + "': shape entries must be positive integers");
    }
    s.push_back(d.get<std::size_t>());
  }
  return s;
}

Tensor floats_to_tensor(const json& j, Shape shape, const std::string& what) {
  if (!j.is_array()) invalid(what, what + " must be an array of numbers");
  std::vector<float> v;
  v.reserve(j.size());
  for (const json& x : j) {
    if (!x.is_number()) invalid(what, what + " must contain numbers only");
    v.push_back(x.get<float>());
  }
  if (v.size() != shape_size(shape)) {
    invalid(what, what + " has " + std::to_string(v.size()) + " values, expected " +
                      std::to_string(shape_size(shape)));
  }
  return Tensor(std::move(shape), std::move(v));
}

std::size_t get_size(const json& layer, const char* key, const std::string& id, std::size_t fallback,
                     bool required) {
  auto it = layer.find(key);
  if (it == layer.end()) {
    if (required) invalid(id, "node '" + id + "' is missing '" + key + "'");
    return fallback;
  }
  if (!it->is_number_unsigned()) invalid(id, "node '" + id + "': '" + key + "' must be a non-negative integer");
  return it->get<std::size_t>();
}

struct BlobView {
  const std::vector<unsigned char>& bytes;
  std::size_t max_end = 0;
};

Tensor read_param(const json& params, const char* name, const std::string& id, BlobView& blob,
                  bool required) {
  auto it = params.find(name);
  if (it == params.end()) {
    if (required) invalid(id, "node '" + id + "' is missing parameter '" + name + "'");
    return {};
  }
  const std::string tensor_id = id + "." + name;
  if (!it->is_object() || !it->contains("offset") || !it->contains("shape")) {
    invalid(tensor_id, "tensor '" + tensor_id + "' needs 'offset' and 'shape'");
  }
  if (!(*it)["offset"].is_number_unsigned()) invalid(tensor_id, "tensor '" + tensor_id + "': bad offset");
  const std::size_t offset = (*it)["offset"].get<std::size_t>();
  Shape shape = shape_of((*it)["shape"], tensor_id);
  const std::size_t bytes = shape_size(shape) * sizeof(float);
  if (offset % sizeof(float) != 0) invalid(tensor_id, "tensor '" + tensor_id + "': offset not float aligned");
  if (offset + bytes > blob.bytes.size()) {
    throw ModelError(Kind::kLengthMismatch, tensor_id,
                     "tensor '" + tensor_id + "' spans bytes [" + std::to_string(offset) + ", " +
                         std::to_string(offset + bytes) + ") but the blob has " +
                         std::to_string(blob.bytes.size()) + " bytes");
  }
  blob.max_end = std::max(blob.max_end, offset + bytes);
  std::vector<float> data(shape_size(shape));
  std::memcpy(data.data(), blob.bytes.data() + offset, bytes);
  return Tensor(std::move(shape), std::move(data));
}

LayerSpec parse_layer(const json& j, BlobView& blob) {
  if (!j.is_object()) invalid("", "layer entries must be objects");
  if (!j.contains("id") || !j["id"].is_string()) invalid("", "layer without string 'id'");
  LayerSpec l;
  l.id = j["id"].get<std::string>();
  if (!j.contains("kind") || !j["kind"].is_string()) invalid(l.id, "node '" + l.id + "' has no kind");
  const auto kind = parse_layer_kind(j["kind"].get<std::string>());
  if (!kind) {
    invalid(l.id, "node '" + l.id + "' has unknown kind '" + j["kind"].get<std::string>() + "'");
  }
  l.kind = *kind;
  if (!j.contains("inputs") || !j["inputs"].is_array()) invalid(l.id, "node '" + l.id + "' has no inputs");
  for (const json& s : j["inputs"]) {
    if (!s.is_string()) invalid(l.id, "node '" + l.id + "': inputs must be ids");
    l.inputs.push_back(s.get<std::string>());
  }
  static const json kNoParams = json::object();
  const json& params = j.contains("params") ? j["params"] : kNoParams;

  switch (l.kind) {
    case LayerKind::kDense:
      l.in_features = get_size(j, "in_features", l.id, 0, true);
      l.out_features = get_size(j, "out_features", l.id, 0, true);
      l.weight = read_param(params, "weight", l.id, blob, true);
      l.bias = read_param(params, "bias", l.id, blob, false);
      break;
    case LayerKind::kConv2D: {
      l.in_channels = get_size(j, "in_channels", l.id, 0, true);
      l.out_channels = get_size(j, "out_channels", l.id, 0, true);
      if (!j.contains("kernel") || !j["kernel"].is_array() || j["kernel"].size() != 2) {
        invalid(l.id, "node '" + l.id + "': kernel must be [kh, kw]");
      }
      const Shape k = shape_of(j["kernel"], l.id);
      l.kernel_h = k[0];
      l.kernel_w = k[1];
      l.stride = get_size(j, "stride", l.id, 1, false);
      l.pad = get_size(j, "pad", l.id, 0, false);
      l.weight = read_param(params, "weight", l.id, blob, true);
      l.bias = read_param(params, "bias", l.id, blob, false);
      break;
    }
    case LayerKind::kMaxPool2D:
    case LayerKind::kAvgPool2D:
      l.kernel_h = l.kernel_w = get_size(j, "kernel", l.id, 0, true);
      l.stride = get_size(j, "stride", l.id, l.kernel_h, false);
      break;
    case LayerKind::kBatchNorm:
      l.in_channels = get_size(j, "channels", l.id, 0, false);
      if (j.contains("eps")) {
        if (!j["eps"].is_number() || j["eps"].get<double>() < 0) invalid(l.id, "node '" + l.id + "': bad eps");
        l.eps = j["eps"].get<float>();
      }
      l.gamma = read_param(params, "gamma", l.id, blob, true);
      l.beta = read_param(params, "beta", l.id, blob, true);
      l.running_mean = read_param(params, "running_mean", l.id, blob, true);
      l.running_var = read_param(params, "running_var", l.id, blob, true);
      break;
    default:
      break;
  }
  return l;
}

}  // namespace

ModelGraph load_model(const std::filesystem::path& manifest_path, const LoadOptions& options) {
  const std::vector<unsigned char> text = read_bytes(manifest_path, "manifest");
  json m;
  try {
    m = json::parse(text.begin(), text.end());
  } catch (const json::exception& e) {
    invalid("manifest", "manifest '" + manifest_path.string() + "' is not valid JSON: " + e.what());
  }
  for (const char* key : {"version", "input_shape", "num_classes", "layers", "blob", "blob_sha256"}) {
    if (!m.contains(key)) invalid("manifest", std::string("manifest is missing '") + key + "'");
  }
  if (!m["version"].is_number_integer() || m["version"].get<int>() != 1) {
    invalid("manifest", "unsupported manifest version");
  }
  const Shape input_shape = shape_of(m["input_shape"], "input");
  if (!m["num_classes"].is_number_unsigned()) invalid("manifest", "num_classes must be a positive integer");
  const std::size_t num_classes = m["num_classes"].get<std::size_t>();
  if (!m["blob"].is_string() || !m["blob_sha256"].is_string() || !m["layers"].is_array()) {
    invalid("manifest", "manifest fields have wrong types");
  }

  const std::filesystem::path blob_path = manifest_path.parent_path() / m["blob"].get<std::string>();
  const std::vector<unsigned char> bytes = read_bytes(blob_path, "blob");
  BlobView blob{bytes};

  std::vector<LayerSpec> list;
  for (const json& lj : m["layers"]) list.push_back(parse_layer(lj, blob));
  if (blob.max_end != bytes.size()) {
    throw ModelError(Kind::kLengthMismatch, "blob",
                     "blob has " + std::to_string(bytes.size()) + " bytes but tensors cover " +
                         std::to_string(blob.max_end));
  }
  if (options.verify_checksum) {
    const std::string digest = sha256_hex(bytes);
    if (digest != m["blob_sha256"].get<std::string>()) {
      throw ModelError(Kind::kChecksumMismatch, "blob",
                       "blob SHA-256 " + digest + " does not match manifest " +
                           m["blob_sha256"].get<std::string>());
    }
  }

  InputBounds bounds;
  if (m.contains("input_bounds")) {
    const json& b = m["input_bounds"];
    try {
      bounds.low = b.at("low").get<std::vector<float>>();
      bounds.high = b.at("high").get<std::vector<float>>();
    } catch (const json::exception&) {
      invalid("manifest", "input_bounds needs numeric 'low' and 'high' arrays");
    }
  }

  ModelGraph graph;
  try {
    graph = ModelGraph::build(input_shape, num_classes, std::move(list), std::move(bounds));
  } catch (const ConfigError& e) {
    invalid("manifest", e.what());
  }
  if (m.contains("reference_input") && !m["reference_input"].is_null()) {
    graph.reference_input = floats_to_tensor(m["reference_input"], input_shape, "reference_input");
  }
  if (m.contains("reference_logits") && !m["reference_logits"].is_null()) {
    graph.reference_logits = floats_to_tensor(m["reference_logits"], {num_classes}, "reference_logits");
  }
  if (options.fold_batchnorm && graph.has_batchnorm()) return fold_batchnorm(graph);
  return graph;
}

void save_model(const ModelGraph& graph, const std::filesystem::path& manifest_path) {
  std::vector<unsigned char> blob;
  auto put = [&](json& params, const char* name, const Tensor& t) {
    if (t.empty()) return;
    params[name] = {{"offset", blob.size()}, {"shape", t.shape()}};
    const auto* p = reinterpret_cast<const unsigned char*>(t.data().data());
    blob.insert(blob.end(), p, p + t.size() * sizeof(float));
  };

  json layers_json = json::array();
  for (const LayerSpec& l : graph.layers()) {
    json j = {{"id", l.id}, {"kind", std::string(to_string(l.kind))}, {"inputs", l.inputs}};
    json params = json::object();
    switch (l.kind) {
      case LayerKind::kDense:
        j["in_features"] = l.in_features;
        j["out_features"] = l.out_features;
        put(params, "weight", l.weight);
        put(params, "bias", l.bias);
        break;
      case LayerKind::kConv2D:
        j["in_channels"] = l.in_channels;
        j["out_channels"] = l.out_channels;
        j["kernel"] = {l.kernel_h, l.kernel_w};
        j["stride"] = l.stride;
        j["pad"] = l.pad;
        put(params, "weight", l.weight);
        put(params, "bias", l.bias);
        break;
      case LayerKind::kMaxPool2D:
      case LayerKind::kAvgPool2D:
        j["kernel"] = l.kernel_h;
        j["stride"] = l.stride;
        break;
      case LayerKind::kBatchNorm:
        j["channels"] = l.gamma.size();
        j["eps"] = l.eps;
        put(params, "gamma", l.gamma);
        put(params, "beta", l.beta);
        put(params, "running_mean", l.running_mean);
        put(params, "running_var", l.running_var);
        break;
      default:
        break;
    }
    if (!params.empty()) j["params"] = std::move(params);
    layers_json.push_back(std::move(j));
  }

  std::filesystem::path blob_path = manifest_path;
  blob_path.replace_extension(".bin");
  json m = {
      {"version", 1},
      {"input_shape", graph.input_shape()},
      {"num_classes", graph.num_classes()},
      {"input_bounds", {{"low", graph.input_bounds().low}, {"high", graph.input_bounds().high}}},
      {"layers", std::move(layers_json)},
      {"blob", blob_path.filename().string()},
      {"blob_sha256", sha256_hex(blob)},
  };
  m["reference_input"] = graph.reference_input ? json(graph.reference_input->values()) : json(nullptr);
  m["reference_logits"] = graph.reference_logits ? json(graph.reference_logits->values()) : json(nullptr);

  std::ofstream bout(blob_path, std::ios::binary);
  if (!bout) throw IoError("cannot write '" + blob_path.string() + "'");
  bout.write(reinterpret_cast<const char*>(blob.data()), std::streamsize(blob.size()));
  std::ofstream mout(manifest_path);
  if (!mout) throw IoError("cannot write '" + manifest_path.string() + "'");
  mout << m.dump(2) << '\n';
  if (!bout || !mout) throw IoError("failed writing model to '" + manifest_path.string() + "'");
}

}  // namespace raproscope
