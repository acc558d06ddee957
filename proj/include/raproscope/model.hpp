#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "raproscope/tensor.hpp"

namespace raproscope {

enum class LayerKind {
  kInput,
  kDense,
  kConv2D,
  kMaxPool2D,
  kAvgPool2D,
  kReLU,
  kFlatten,
  kAdd,
  kBatchNorm,
  kGlobalAvgPool,
  kOutput,  // alias of the logit layer
};

std::string_view to_string(LayerKind kind);
std::optional<LayerKind> parse_layer_kind(std::string_view name);

struct LayerSpec {
  std::string id;
  LayerKind kind = LayerKind::kInput;
  std::vector<std::string> inputs;

  // Dense
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  // Conv2D (channels also used by BatchNorm)
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  // Conv2D kernel is kernel_h x kernel_w; pooling uses kernel_h as a square window.
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
  // BatchNorm
  float eps = 1e-5f;

  // Dense: [in x out]; Conv2D: [out_ch x in_ch x kh x kw]. Bias may be empty.
  Tensor weight;
  Tensor bias;
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;

  bool is_affine() const noexcept {
    return kind == LayerKind::kDense || kind == LayerKind::kConv2D;
  }
};

// Layer constructors used by tests and tools that build graphs in code.
namespace layers {
LayerSpec dense(std::string id, std::string input, Tensor weight, Tensor bias = {});
LayerSpec conv2d(std::string id, std::string input, Tensor weight, Tensor bias, std::size_t stride,
                 std::size_t pad);
LayerSpec maxpool2d(std::string id, std::string input, std::size_t k, std::size_t stride);
LayerSpec avgpool2d(std::string id, std::string input, std::size_t k, std::size_t stride);
LayerSpec relu(std::string id, std::string input);
LayerSpec flatten(std::string id, std::string input);
LayerSpec global_avgpool(std::string id, std::string input);
LayerSpec add(std::string id, std::string a, std::string b);
LayerSpec batchnorm(std::string id, std::string input, Tensor gamma, Tensor beta, Tensor mean,
                    Tensor var, float eps);
}  // namespace layers

// Per-channel domain of the input; Z-beta uses it as the lowest/highest pixel value.
struct InputBounds {
  std::vector<float> low{0.0f};
  std::vector<float> high{1.0f};
};

// Immutable, validated DAG. Node 0 is the input, the last node is the output
// alias of the single Dense logit layer.
class ModelGraph {
 public:
  static constexpr std::string_view kInputId = "input";
  static constexpr std::string_view kOutputId = "output";

  // Validates ids, arity, acyclicity, shapes and the single Dense sink.
  static ModelGraph build(Shape input_shape, std::size_t num_classes, std::vector<LayerSpec> layers,
                          InputBounds bounds = {});

  const std::vector<LayerSpec>& nodes() const noexcept { return nodes_; }
  const LayerSpec& node(std::size_t index) const { return nodes_.at(index); }
  std::size_t size() const noexcept { return nodes_.size(); }
  std::optional<std::size_t> find(std::string_view id) const;
  std::size_t index_of(std::string_view id) const;

  // Reverse of this order is the relevance/gradient traversal order. Ties
  // between ready nodes are broken by id so the order does not depend on how
  // the layers were listed.
  const std::vector<std::size_t>& topological_order() const noexcept { return topo_; }
  const std::vector<std::size_t>& inputs_of(std::size_t index) const { return inputs_.at(index); }
  const std::vector<std::size_t>& consumers_of(std::size_t index) const { return consumers_.at(index); }
  const Shape& output_shape(std::size_t index) const { return shapes_.at(index); }

  const Shape& input_shape() const noexcept { return shapes_.front(); }
  std::size_t num_classes() const noexcept { return num_classes_; }
  std::size_t input_index() const noexcept { return 0; }
  std::size_t output_index() const noexcept { return nodes_.size() - 1; }
  // The Dense layer producing the pre-softmax scores.
  std::size_t sink_index() const noexcept { return sink_; }

  const InputBounds& input_bounds() const noexcept { return bounds_; }
  // Bounds expanded to one value per input element.
  Tensor lower_bound_tensor() const;
  Tensor upper_bound_tensor() const;

  bool has_batchnorm() const;

  // Layers in manifest order (no input/output nodes).
  std::vector<LayerSpec> layers() const;

  std::optional<Tensor> reference_input;
  std::optional<Tensor> reference_logits;

 private:
  std::vector<LayerSpec> nodes_;
  std::vector<std::vector<std::size_t>> inputs_;
  std::vector<std::vector<std::size_t>> consumers_;
  std::vector<Shape> shapes_;
  std::vector<std::size_t> topo_;
  std::size_t num_classes_ = 0;
  std::size_t sink_ = 0;
  InputBounds bounds_;
};

struct LoadOptions {
  bool fold_batchnorm = true;
  bool verify_checksum = true;
};

ModelGraph load_model(const std::filesystem::path& manifest_path, const LoadOptions& options = {});

// Writes `manifest_path` and a blob next to it (same stem, ".bin").
void save_model(const ModelGraph& graph, const std::filesystem::path& manifest_path);

// Merges every BatchNorm into the preceding Conv2D/Dense and drops the node.
ModelGraph fold_batchnorm(const ModelGraph& graph);

std::string sha256_hex(std::span<const unsigned char> bytes);

}  // namespace raproscope
