#include "raproscope/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <unordered_map>

#include "raproscope/errors.hpp"

namespace raproscope {

namespace {

constexpr std::pair<LayerKind, std::string_view> kKindNames[] = {
    {LayerKind::kInput, "Input"},         {LayerKind::kDense, "Dense"},
    {LayerKind::kConv2D, "Conv2D"},       {LayerKind::kMaxPool2D, "MaxPool2D"},
    {LayerKind::kAvgPool2D, "AvgPool2D"}, {LayerKind::kReLU, "ReLU"},
    {LayerKind::kFlatten, "Flatten"},     {LayerKind::kAdd, "Add"},
    {LayerKind::kBatchNorm, "BatchNorm"}, {LayerKind::kGlobalAvgPool, "GlobalAvgPool"},
    {LayerKind::kOutput, "Output"},
};

[[noreturn]] void shape_fail(const std::string& id, const std::string& msg) {
  throw ModelError(ModelError::Kind::kShapeInconsistency, id, "node '" + id + "': " + msg);
}

void expect_shape(const LayerSpec& l, const Tensor& t, const Shape& want, const char* name,
                  bool optional) {
  if (optional && t.empty()) return;
  if (t.shape() != want) {
    shape_fail(l.id, std::string(name) + " has shape " + shape_string(t.shape()) + ", expected " +
                         shape_string(want));
  }
}

Shape infer_shape(const LayerSpec& l, const std::vector<const Shape*>& in) {
  const Shape& x = *in.front();
  switch (l.kind) {
    case LayerKind::kDense: {
      if (x.size() != 1) shape_fail(l.id, "Dense input must be rank 1, got " + shape_string(x));
      if (x[0] != l.in_features) {
        shape_fail(l.id, "input " + shape_string(x) + " does not match in_features " +
                             std::to_string(l.in_features));
      }
      expect_shape(l, l.weight, {l.in_features, l.out_features}, "weight", false);
      expect_shape(l, l.bias, {l.out_features}, "bias", true);
      return {l.out_features};
    }
    case LayerKind::kConv2D: {
      if (x.size() != 3) shape_fail(l.id, "Conv2D input must be rank 3, got " + shape_string(x));
      if (x[0] != l.in_channels) {
        shape_fail(l.id, "input channels " + std::to_string(x[0]) + " differ from in_channels " +
                             std::to_string(l.in_channels));
      }
      expect_shape(l, l.weight, {l.out_channels, l.in_channels, l.kernel_h, l.kernel_w}, "weight",
                   false);
      expect_shape(l, l.bias, {l.out_channels}, "bias", true);
      try {
        return {l.out_channels, conv_extent(x[1], l.kernel_h, l.stride, l.pad),
                conv_extent(x[2], l.kernel_w, l.stride, l.pad)};
      } catch (const ShapeError& e) {
        shape_fail(l.id, e.what());
      }
    }
    case LayerKind::kMaxPool2D:
    case LayerKind::kAvgPool2D: {
      if (x.size() != 3) shape_fail(l.id, "pooling input must be rank 3, got " + shape_string(x));
      try {
        return {x[0], pooled_extent(x[1], l.kernel_h, l.stride),
                pooled_extent(x[2], l.kernel_h, l.stride)};
      } catch (const ShapeError& e) {
        shape_fail(l.id, e.what());
      }
    }
    case LayerKind::kGlobalAvgPool:
      if (x.size() != 3) shape_fail(l.id, "GlobalAvgPool input must be rank 3, got " + shape_string(x));
      return {x[0]};
    case LayerKind::kReLU:
    case LayerKind::kOutput:
      return x;
    case LayerKind::kFlatten:
      return {shape_size(x)};
    case LayerKind::kAdd:
      if (*in[0] != *in[1]) {
        shape_fail(l.id, "Add operands differ: " + shape_string(*in[0]) + " vs " +
                             shape_string(*in[1]));
      }
      return x;
    case LayerKind::kBatchNorm: {
      const std::size_t c = x[0];
      if (l.in_channels != 0 && l.in_channels != c) {
        shape_fail(l.id, "channels " + std::to_string(l.in_channels) + " differ from input " +
                             shape_string(x));
      }
      expect_shape(l, l.gamma, {c}, "gamma", false);
      expect_shape(l, l.beta, {c}, "beta", false);
      expect_shape(l, l.running_mean, {c}, "running_mean", false);
      expect_shape(l, l.running_var, {c}, "running_var", false);
      return x;
    }
    case LayerKind::kInput:
      break;
  }
  shape_fail(l.id, "unexpected layer kind");
}

void validate_bounds(const InputBounds& b, const Shape& input_shape) {
  const std::size_t channels = input_shape.front();
  auto ok = [&](std::size_t n) { return n == 1 || n == channels; };
  if (!ok(b.low.size()) || b.low.size() != b.high.size()) {
    throw ConfigError("input bounds must have 1 or " + std::to_string(channels) + " entries");
  }
  for (std::size_t i = 0; i < b.low.size(); ++i) {
    if (!(b.low[i] <= b.high[i])) throw ConfigError("input bound low exceeds high");
  }
}

Tensor expand_bounds(const std::vector<float>& per_channel, const Shape& shape) {
  Tensor t(shape);
  const std::size_t inner = t.size() / shape.front();
  for (std::size_t i = 0; i < t.size(); ++i) {
    t[i] = per_channel.size() == 1 ? per_channel[0] : per_channel[i / inner];
  }
  return t;
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "Unknown";
}

std::optional<LayerKind> parse_layer_kind(std::string_view name) {
  for (const auto& [k, n] : kKindNames) {
    if (n == name && k != LayerKind::kInput && k != LayerKind::kOutput) return k;
  }
  return std::nullopt;
}

namespace layers {

LayerSpec dense(std::string id, std::string input, Tensor weight, Tensor bias) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = LayerKind::kDense;
  l.inputs = {std::move(input)};
  if (weight.rank() == 2) {
    l.in_features = weight.dim(0);
    l.out_features = weight.dim(1);
  }
  l.weight = std::move(weight);
  l.bias = std::move(bias);
  return l;
}

LayerSpec conv2d(std::string id, std::string input, Tensor weight, Tensor bias, std::size_t stride,
                 std::size_t pad) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = LayerKind::kConv2D;
  l.inputs = {std::move(input)};
  if (weight.rank() == 4) {
    l.out_channels = weight.dim(0);
    l.in_channels = weight.dim(1);
    l.kernel_h = weight.dim(2);
    l.kernel_w = weight.dim(3);
  }
  l.stride = stride;
  l.pad = pad;
  l.weight = std::move(weight);
  l.bias = std::move(bias);
  return l;
}

namespace {
LayerSpec simple(std::string id, LayerKind kind, std::vector<std::string> inputs) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = kind;
  l.inputs = std::move(inputs);
  return l;
}
}  // namespace

LayerSpec maxpool2d(std::string id, std::string input, std::size_t k, std::size_t stride) {
  LayerSpec l = simple(std::move(id), LayerKind::kMaxPool2D, {std::move(input)});
  l.kernel_h = l.kernel_w = k;
  l.stride = stride;
  return l;
}

LayerSpec avgpool2d(std::string id, std::string input, std::size_t k, std::size_t stride) {
  LayerSpec l = simple(std::move(id), LayerKind::kAvgPool2D, {std::move(input)});
  l.kernel_h = l.kernel_w = k;
  l.stride = stride;
  return l;
}

LayerSpec relu(std::string id, std::string input) {
  return simple(std::move(id), LayerKind::kReLU, {std::move(input)});
}

LayerSpec flatten(std::string id, std::string input) {
  return simple(std::move(id), LayerKind::kFlatten, {std::move(input)});
}

LayerSpec global_avgpool(std::string id, std::string input) {
  return simple(std::move(id), LayerKind::kGlobalAvgPool, {std::move(input)});
}

LayerSpec add(std::string id, std::string a, std::string b) {
  return simple(std::move(id), LayerKind::kAdd, {std::move(a), std::move(b)});
}

LayerSpec batchnorm(std::string id, std::string input, Tensor gamma, Tensor beta, Tensor mean,
                    Tensor var, float eps) {
  LayerSpec l = simple(std::move(id), LayerKind::kBatchNorm, {std::move(input)});
  l.in_channels = gamma.size();
  l.gamma = std::move(gamma);
  l.beta = std::move(beta);
  l.running_mean = std::move(mean);
  l.running_var = std::move(var);
  l.eps = eps;
  return l;
}

}  // namespace layers

ModelGraph ModelGraph::build(Shape input_shape, std::size_t num_classes,
                             std::vector<LayerSpec> layer_list, InputBounds bounds) {
  if (input_shape.empty() || shape_size(input_shape) == 0) {
    throw ModelError(ModelError::Kind::kShapeInconsistency, std::string(kInputId),
                     "input shape must be non-empty with positive dimensions");
  }
  validate_bounds(bounds, input_shape);

  ModelGraph g;
  g.num_classes_ = num_classes;
  g.bounds_ = std::move(bounds);

  LayerSpec input;
  input.id = std::string(kInputId);
  input.kind = LayerKind::kInput;
  g.nodes_.push_back(std::move(input));
  for (auto& l : layer_list) g.nodes_.push_back(std::move(l));

  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < g.nodes_.size(); ++i) {
    const LayerSpec& l = g.nodes_[i];
    if (i > 0 && (l.kind == LayerKind::kInput || l.kind == LayerKind::kOutput)) {
      throw ModelError(ModelError::Kind::kInvalidManifest, l.id, "node '" + l.id + "' has a reserved kind");
    }
    if (l.id.empty() || (i > 0 && (l.id == kInputId || l.id == kOutputId))) {
      throw ModelError(ModelError::Kind::kInvalidManifest, l.id, "invalid or reserved node id '" + l.id + "'");
    }
    if (!index.emplace(l.id, i).second) {
      throw ModelError(ModelError::Kind::kInvalidManifest, l.id, "duplicate node id '" + l.id + "'");
    }
  }

  const std::size_t n = g.nodes_.size();
  g.inputs_.assign(n, {});
  g.consumers_.assign(n, {});
  for (std::size_t i = 1; i < n; ++i) {
    const LayerSpec& l = g.nodes_[i];
    const std::size_t arity = l.kind == LayerKind::kAdd ? 2 : 1;
    if (l.inputs.size() != arity) {
      throw ModelError(ModelError::Kind::kUnsupportedTopology, l.id,
                       "node '" + l.id + "' needs " + std::to_string(arity) + " input(s), has " +
                           std::to_string(l.inputs.size()));
    }
    for (const std::string& src : l.inputs) {
      auto it = index.find(src);
      if (it == index.end()) {
        throw ModelError(ModelError::Kind::kInvalidManifest, l.id,
                         "node '" + l.id + "' references unknown input '" + src + "'");
      }
      g.inputs_[i].push_back(it->second);
      g.consumers_[it->second].push_back(i);
    }
  }

  // Kahn's algorithm; ready nodes are taken in id order.
  std::vector<std::size_t> pending(n);
  std::set<std::pair<std::string, std::size_t>> ready;
  for (std::size_t i = 0; i < n; ++i) {
    pending[i] = g.inputs_[i].size();
    if (pending[i] == 0) ready.emplace(g.nodes_[i].id, i);
  }
  while (!ready.empty()) {
    const std::size_t i = ready.begin()->second;
    ready.erase(ready.begin());
    g.topo_.push_back(i);
    for (std::size_t c : g.consumers_[i]) {
      if (--pending[c] == 0) ready.emplace(g.nodes_[c].id, c);
    }
  }
  if (g.topo_.size() != n) {
    std::string culprit;
    for (std::size_t i = 0; i < n; ++i) {
      if (pending[i] != 0 && (culprit.empty() || g.nodes_[i].id < culprit)) culprit = g.nodes_[i].id;
    }
    throw ModelError(ModelError::Kind::kCyclicGraph, culprit,
                     "graph has a cycle through node '" + culprit + "'");
  }

  g.shapes_.assign(n, {});
  g.shapes_[0] = std::move(input_shape);
  for (std::size_t i : g.topo_) {
    if (i == 0) continue;
    std::vector<const Shape*> in;
    for (std::size_t s : g.inputs_[i]) in.push_back(&g.shapes_[s]);
    g.shapes_[i] = infer_shape(g.nodes_[i], in);
  }

  std::vector<std::size_t> sinks;
  for (std::size_t i = 1; i < n; ++i) {
    if (g.consumers_[i].empty()) sinks.push_back(i);
  }
  if (sinks.size() != 1) {
    const std::string id = sinks.empty() ? std::string(kInputId) : g.nodes_[sinks[1 % sinks.size()]].id;
    throw ModelError(ModelError::Kind::kUnsupportedTopology, id,
                     "graph must have exactly one sink layer, found " + std::to_string(sinks.size()));
  }
  const LayerSpec& sink = g.nodes_[sinks[0]];
  if (sink.kind != LayerKind::kDense) {
    throw ModelError(ModelError::Kind::kUnsupportedTopology, sink.id,
                     "sink '" + sink.id + "' must be a Dense logit layer");
  }
  if (sink.out_features != num_classes) {
    throw ModelError(ModelError::Kind::kShapeInconsistency, sink.id,
                     "sink produces " + std::to_string(sink.out_features) + " scores, manifest declares " +
                         std::to_string(num_classes) + " classes");
  }
  g.sink_ = sinks[0];

  LayerSpec out;
  out.id = std::string(kOutputId);
  out.kind = LayerKind::kOutput;
  out.inputs = {sink.id};
  g.nodes_.push_back(std::move(out));
  g.inputs_.push_back({g.sink_});
  g.consumers_.push_back({});
  g.consumers_[g.sink_].push_back(n);
  g.shapes_.push_back(g.shapes_[g.sink_]);
  g.topo_.push_back(n);
  return g;
}

std::optional<std::size_t> ModelGraph::find(std::string_view id) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].id == id) return i;
  }
  return std::nullopt;
}

std::size_t ModelGraph::index_of(std::string_view id) const {
  if (auto i = find(id)) return *i;
  throw IndexError("unknown node '" + std::string(id) + "'");
}

Tensor ModelGraph::lower_bound_tensor() const { return expand_bounds(bounds_.low, input_shape()); }
Tensor ModelGraph::upper_bound_tensor() const { return expand_bounds(bounds_.high, input_shape()); }

bool ModelGraph::has_batchnorm() const {
  return std::any_of(nodes_.begin(), nodes_.end(),
                     [](const LayerSpec& l) { return l.kind == LayerKind::kBatchNorm; });
}

std::vector<LayerSpec> ModelGraph::layers() const {
  return {nodes_.begin() + 1, nodes_.end() - 1};
}

ModelGraph fold_batchnorm(const ModelGraph& graph) {
  std::vector<LayerSpec> list = graph.layers();
  std::map<std::string, std::string> renamed;  // bn id -> folded producer id
  std::unordered_map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < list.size(); ++i) pos[list[i].id] = i;

  std::vector<bool> drop(list.size(), false);
  for (std::size_t i = 0; i < list.size(); ++i) {
    const LayerSpec& bn = list[i];
    if (bn.kind != LayerKind::kBatchNorm) continue;
    const std::size_t src_node = graph.inputs_of(i + 1).front();
    const LayerSpec& src_spec = graph.node(src_node);
    if (!src_spec.is_affine()) {
      throw ModelError(ModelError::Kind::kUnsupportedTopology, bn.id,
                       "BatchNorm '" + bn.id + "' follows " + std::string(to_string(src_spec.kind)) +
                           " '" + src_spec.id + "'; only Conv2D and Dense can absorb it");
    }
    if (graph.consumers_of(src_node).size() != 1) {
      throw ModelError(ModelError::Kind::kUnsupportedTopology, bn.id,
                       "BatchNorm '" + bn.id + "' input '" + src_spec.id + "' has other consumers");
    }
    LayerSpec& layer = list[pos.at(src_spec.id)];
    const std::size_t channels = bn.gamma.size();
    const bool conv = layer.kind == LayerKind::kConv2D;
    const std::size_t out_ch = conv ? layer.out_channels : layer.out_features;
    if (out_ch != channels) {
      throw ModelError(ModelError::Kind::kShapeInconsistency, bn.id,
                       "BatchNorm '" + bn.id + "' channel count does not match '" + layer.id + "'");
    }
    if (layer.bias.empty()) layer.bias = Tensor({out_ch});
    std::vector<double> scale(channels);
    for (std::size_t c = 0; c < channels; ++c) {
      scale[c] = double(bn.gamma[c]) / std::sqrt(double(bn.running_var[c]) + bn.eps);
      layer.bias[c] = static_cast<float>((double(layer.bias[c]) - bn.running_mean[c]) * scale[c] +
                                         bn.beta[c]);
    }
    auto w = layer.weight.mutable_data();
    if (conv) {
      const std::size_t per = w.size() / out_ch;
      for (std::size_t i2 = 0; i2 < w.size(); ++i2) w[i2] = static_cast<float>(w[i2] * scale[i2 / per]);
    } else {
      for (std::size_t i2 = 0; i2 < w.size(); ++i2) {
        w[i2] = static_cast<float>(w[i2] * scale[i2 % out_ch]);
      }
    }
    renamed[bn.id] = layer.id;
    drop[i] = true;
  }

  std::vector<LayerSpec> folded;
  for (std::size_t i = 0; i < list.size(); ++i) {
    if (drop[i]) continue;
    LayerSpec l = std::move(list[i]);
    for (std::string& in : l.inputs) {
      if (auto it = renamed.find(in); it != renamed.end()) in = it->second;
    }
    folded.push_back(std::move(l));
  }
  ModelGraph out = ModelGraph::build(graph.input_shape(), graph.num_classes(), std::move(folded),
                                     graph.input_bounds());
  out.reference_input = graph.reference_input;
  out.reference_logits = graph.reference_logits;
  return out;
}

}  // namespace raproscope
