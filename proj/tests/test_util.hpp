#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "raproscope/model.hpp"
#include "raproscope/tensor.hpp"

namespace testutil {

using raproscope::LayerSpec;
using raproscope::ModelGraph;
using raproscope::Shape;
using raproscope::Tensor;

inline std::filesystem::path fixture(const std::string& rel) {
  return std::filesystem::path(RAPROSCOPE_FIXTURE_DIR) / rel;
}

// Fresh empty directory under the system temp dir.
std::filesystem::path scratch_dir(const std::string& name);

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f);
std::vector<double> to_double(const Tensor& t);

// Straightforward double-precision forward pass written directly from the
// layer definitions, independent of the engine's kernels.
struct Reference {
  std::vector<std::vector<double>> outputs;  // per node
  std::vector<std::vector<double>> pre_relu;  // input of each ReLU node (empty otherwise)
  std::vector<std::vector<std::size_t>> winners;  // maxpool argmax (empty otherwise)
  std::vector<double> logits() const { return outputs.back(); }
};
Reference reference_forward(const ModelGraph& graph, const std::vector<double>& x);

// True when both passes share ReLU sign patterns and maxpool winners.
bool same_pattern(const Reference& a, const Reference& b);
// Smallest |pre-activation| over all ReLU nodes.
double relu_margin(const Reference& r);

struct RandomNetOptions {
  std::size_t min_layers = 2;  // parametric or pooling layers
  std::size_t max_layers = 6;
  bool allow_add = true;
  bool allow_global_pool = true;
  bool intermediate_bias = true;
  bool sink_bias = false;
};

// Conv/pool stack followed by dense layers, or a dense-only MLP when the
// drawn input is rank 1.
ModelGraph random_network(std::mt19937_64& rng, const RandomNetOptions& opt = {});

// Central differences of d logit[target] / d x on the reference pass. Empty
// when some perturbed evaluation changes a ReLU sign or maxpool winner, i.e.
// the difference would straddle a kink.
std::optional<std::vector<double>> finite_difference_gradient(const ModelGraph& graph, const std::vector<double>& x,
                                                              std::size_t target, double h = 1e-3);

// max |a - b| / max |b|.
double relative_deviation(const std::vector<double>& a, const std::vector<double>& b);

// One small graph per layer kind, each ending in a Dense sink.
std::vector<std::pair<std::string, ModelGraph>> layer_kind_graphs(std::mt19937_64& rng);

// Bias-free ReLU MLP with the given layer widths (first = input size).
ModelGraph random_mlp(std::mt19937_64& rng, const std::vector<std::size_t>& widths, bool bias = false);

}  // namespace testutil
