#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "raproscope/inference.hpp"
#include "raproscope/model.hpp"
#include "raproscope/tensor.hpp"

namespace raproscope {

// Sparse view of an affine map: output j receives sum_i m_i * w_ij over its
// edges. Dense, Conv2D, average pooling and Add are all expressed this way so
// that each relevance rule is written once.
class LinearMap {
 public:
  struct Edge {
    std::uint32_t from;
    float weight;
  };

  LinearMap(std::size_t in_size, std::size_t out_size);

  // Dense weight layout [in x out].
  static LinearMap from_matrix(const Tensor& w);
  static LinearMap conv2d(const Shape& in_shape, const Tensor& w, std::size_t stride, std::size_t pad);
  static LinearMap avgpool2d(const Shape& in_shape, std::size_t k, std::size_t stride);
  static LinearMap global_avgpool(const Shape& in_shape);
  // Two operands of n elements laid out as [a; b].
  static LinearMap add(std::size_t n);
  // Dense, Conv2D, AvgPool2D, GlobalAvgPool or Add.
  static LinearMap of(const LayerSpec& layer, const Shape& in_shape);

  std::size_t in_size() const noexcept { return in_size_; }
  std::size_t out_size() const noexcept { return row_start_.size() - 1; }
  std::span<const Edge> edges(std::size_t j) const {
    return {edges_.data() + row_start_[j], edges_.data() + row_start_[j + 1]};
  }

  // Rows are appended in output order.
  void add_edge(std::size_t from, float weight);
  void end_row();

 private:
  std::size_t in_size_;
  std::size_t expected_rows_;
  std::vector<std::size_t> row_start_{0};
  std::vector<Edge> edges_;
};

enum class Method {
  kRap,
  kLrpEpsilon,
  kLrpAlphaBeta,
  kGradient,
  kInputXGradient,
  kIntegratedGradients,
  kGuidedBackprop,
};

std::string_view to_string(Method m);
// CLI names: rap, lrp-eps, lrp-ab, grad, ixg, ig, gbp.
std::optional<Method> parse_method(std::string_view name);
bool is_propagation_method(Method m);

struct AttributionConfig {
  Method method = Method::kRap;
  float epsilon = 1e-6f;
  float alpha = 2.0f;
  float beta = 1.0f;
  int ig_steps = 50;
  // Per-channel Z-beta bounds; empty means the model's input bounds.
  std::vector<float> input_low;
  std::vector<float> input_high;
  float stabilizer = 1e-9f;
  // Explicit class index; the predicted class when unset.
  std::optional<std::size_t> target;

  void validate() const;
  nlohmann::json to_json() const;
};

struct LayerTransition {
  std::string node;
  double relevance_out = 0.0;  // relevance arriving at the node's output
  double relevance_in = 0.0;   // relevance handed to its input(s)
  bool init = false;           // the logit-layer initialisation step of RAP
  double residual() const;
};

struct RelevanceMap {
  Method method = Method::kRap;
  std::size_t target = 0;
  float logit = 0.0f;
  // Total relevance the propagation starts from: the logit, or for RAP the
  // sum of the normalised penultimate relevance.
  double initial_relevance = 0.0;
  // Relevance at every node output, aligned with ForwardTrace::outputs.
  // Empty for gradient-based methods.
  std::vector<Tensor> node_relevance;
  Tensor input;
  std::vector<LayerTransition> transitions;

  double conservation_residual() const;
};

RelevanceMap attribute(const ModelGraph& graph, const ForwardTrace& trace, const AttributionConfig& config);

// ---- Per-layer rules. Inputs and results are flat, in LinearMap order. ----

// R_i = sum_j z_ij / (z_j + eps * sign(z_j)) * R_j.
Tensor lrp_epsilon_layer(const LinearMap& map, std::span<const float> m, std::span<const float> r_next,
                         float eps, float stabilizer = 1e-9f);

// R_i = sum_j (alpha * z+_ij / sum z+_j - beta * z-_ij / sum z-_j) * R_j.
Tensor lrp_alphabeta_layer(const LinearMap& map, std::span<const float> m, std::span<const float> r_next,
                           float alpha, float beta, float stabilizer = 1e-9f);

// Logit-layer initialisation of RAP for output `target`: signed relevance
// z_ij * (R + b) / R, then made one-signed by absolute value while keeping
// the total.
Tensor rap_absolute_influence_init(const LinearMap& sink, std::span<const float> m, std::size_t target,
                                   float logit, float bias);

struct RapStep {
  Tensor relevance;
  double shift = 0.0;           // value subtracted from every activated neuron
  double negative_route = 0.0;  // relevance delivered through negative contributions
  std::size_t activated = 0;
};

// Signed-split propagation followed by the uniform shift over activated inputs.
RapStep rap_layer_propagate(const LinearMap& map, std::span<const float> m, std::span<const float> r_next,
                            float stabilizer = 1e-9f);

// Z-beta rule for the layer reading the image; low/high are per input element.
Tensor zbeta_input_layer(const LinearMap& map, std::span<const float> x, std::span<const float> low,
                         std::span<const float> high, std::span<const float> r_next,
                         float stabilizer = 1e-9f);

// Right-endpoint Riemann sum from the zero baseline.
Tensor integrated_gradients(const ModelGraph& graph, const Tensor& image, const AttributionConfig& config);

// ---- .rel files: one JSON header line, then raw little-endian float32 data. ----

struct RelevanceFile {
  nlohmann::json header;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(std::string_view name) const;
  const Tensor& attribution() const;
};

void write_relevance(const std::filesystem::path& path, const ModelGraph& graph, const RelevanceMap& map,
                     const AttributionConfig& config);
RelevanceFile read_relevance(const std::filesystem::path& path);

}  // namespace raproscope
