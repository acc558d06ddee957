#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "raproscope/model.hpp"
#include "raproscope/tensor.hpp"

namespace raproscope {

// Activations recorded by one forward pass. `outputs[i]` is the output of
// node i; a node's inputs are the outputs of graph.inputs_of(i).
struct ForwardTrace {
  std::vector<Tensor> outputs;
  // Winner indices, filled for MaxPool2D nodes only.
  std::vector<std::vector<std::size_t>> argmax;
  Tensor logits;
  std::size_t predicted = 0;

  const Tensor& image() const { return outputs.front(); }
  const Tensor& input_of(const ModelGraph& graph, std::size_t node, std::size_t k = 0) const {
    return outputs.at(graph.inputs_of(node).at(k));
  }
};

// Evaluates a single layer on explicit inputs. `argmax` receives maxpool winners.
Tensor evaluate_layer(const LayerSpec& layer, std::span<const Tensor* const> inputs,
                      std::vector<std::size_t>* argmax = nullptr);

ForwardTrace forward(const ModelGraph& graph, const Tensor& image);

// Convenience: logits only.
Tensor predict(const ModelGraph& graph, const Tensor& image);

// argmax with ties resolved to the lowest index.
std::size_t argmax_index(const Tensor& t);

// d logit[target_class] / d image. With `guided`, negative upstream gradients
// are also zeroed at every ReLU.
Tensor backward(const ModelGraph& graph, const ForwardTrace& trace, std::size_t target_class,
                bool guided);

}  // namespace raproscope
