#include "raproscope/inference.hpp"

#include <cmath>

#include "raproscope/errors.hpp"

namespace raproscope {

Tensor evaluate_layer(const LayerSpec& l, std::span<const Tensor* const> in,
                      std::vector<std::size_t>* argmax) {
  const Tensor& x = *in.front();
  switch (l.kind) {
    case LayerKind::kInput:
    case LayerKind::kOutput:
      return x;
    case LayerKind::kDense:
      return dense(x, l.weight, l.bias);
    case LayerKind::kConv2D:
      return conv2d(x, l.weight, l.bias, l.stride, l.pad);
    case LayerKind::kMaxPool2D: {
      PoolResult r = maxpool2d(x, l.kernel_h, l.stride);
      if (argmax) *argmax = std::move(r.argmax);
      return std::move(r.values);
    }
    case LayerKind::kAvgPool2D:
      return avgpool2d(x, l.kernel_h, l.stride);
    case LayerKind::kGlobalAvgPool:
      return global_avgpool(x);
    case LayerKind::kReLU:
      return relu(x);
    case LayerKind::kFlatten:
      return flatten(x);
    case LayerKind::kAdd:
      return add(x, *in[1]);
    case LayerKind::kBatchNorm:
      return batchnorm(x, l.gamma, l.beta, l.running_mean, l.running_var, l.eps);
  }
  throw Error("unknown layer kind");
}

std::size_t argmax_index(const Tensor& t) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < t.size(); ++i) {
    if (t[i] > t[best]) best = i;
  }
  return best;
}

ForwardTrace forward(const ModelGraph& graph, const Tensor& image) {
  if (image.shape() != graph.input_shape()) {
    throw DimensionError("image shape " + shape_string(image.shape()) + " does not match model input " +
                         shape_string(graph.input_shape()));
  }
  ForwardTrace t;
  t.outputs.resize(graph.size());
  t.argmax.resize(graph.size());
  for (std::size_t i : graph.topological_order()) {
    if (i == graph.input_index()) {
      t.outputs[i] = image;
      continue;
    }
    std::vector<const Tensor*> in;
    for (std::size_t s : graph.inputs_of(i)) in.push_back(&t.outputs[s]);
    t.outputs[i] = evaluate_layer(graph.node(i), in, &t.argmax[i]);
  }
  t.logits = t.outputs[graph.output_index()];
  t.predicted = argmax_index(t.logits);
  return t;
}

Tensor predict(const ModelGraph& graph, const Tensor& image) { return forward(graph, image).logits; }

namespace {

void accumulate(Tensor& into, const std::vector<double>& g, const Shape& shape) {
  if (into.empty()) into = Tensor(shape);
  for (std::size_t i = 0; i < g.size(); ++i) into[i] = static_cast<float>(into[i] + g[i]);
}

}  // namespace

Tensor backward(const ModelGraph& graph, const ForwardTrace& trace, std::size_t target_class,
                bool guided) {
  if (target_class >= graph.num_classes()) {
    throw IndexError("target class " + std::to_string(target_class) + " out of range for " +
                     std::to_string(graph.num_classes()) + " classes");
  }
  if (trace.outputs.size() != graph.size()) throw DimensionError("trace does not belong to this graph");

  std::vector<Tensor> grad(graph.size());
  grad[graph.output_index()] = Tensor({graph.num_classes()});
  grad[graph.output_index()][target_class] = 1.0f;

  const auto& order = graph.topological_order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const std::size_t n = *it;
    if (n == graph.input_index()) continue;
    const LayerSpec& l = graph.node(n);
    const auto& srcs = graph.inputs_of(n);
    const Tensor& x = trace.outputs[srcs.front()];
    const Shape& xs = x.shape();
    if (grad[n].empty()) grad[n] = Tensor(graph.output_shape(n));
    const Tensor& g = grad[n];
    std::vector<double> gi(x.size(), 0.0);

    switch (l.kind) {
      case LayerKind::kOutput:
      case LayerKind::kFlatten:
        for (std::size_t i = 0; i < gi.size(); ++i) gi[i] = g[i];
        break;
      case LayerKind::kDense: {
        const std::size_t in = l.in_features, out = l.out_features;
        for (std::size_t i = 0; i < in; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < out; ++j) acc += double(l.weight[i * out + j]) * g[j];
          gi[i] = acc;
        }
        break;
      }
      case LayerKind::kConv2D: {
        const std::size_t C = xs[0], H = xs[1], W = xs[2];
        const Shape& os = graph.output_shape(n);
        const std::size_t F = os[0], OH = os[1], OW = os[2], kh = l.kernel_h, kw = l.kernel_w;
        for (std::size_t f = 0; f < F; ++f) {
          for (std::size_t oy = 0; oy < OH; ++oy) {
            for (std::size_t ox = 0; ox < OW; ++ox) {
              const double go = g[(f * OH + oy) * OW + ox];
              if (go == 0.0) continue;
              for (std::size_t c = 0; c < C; ++c) {
                for (std::size_t ky = 0; ky < kh; ++ky) {
                  const std::ptrdiff_t iy = std::ptrdiff_t(oy * l.stride + ky) - std::ptrdiff_t(l.pad);
                  if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
                  for (std::size_t kx = 0; kx < kw; ++kx) {
                    const std::ptrdiff_t ix = std::ptrdiff_t(ox * l.stride + kx) - std::ptrdiff_t(l.pad);
                    if (ix < 0 || ix >= std::ptrdiff_t(W)) continue;
                    gi[(c * H + std::size_t(iy)) * W + std::size_t(ix)] +=
                        double(l.weight[((f * C + c) * kh + ky) * kw + kx]) * go;
                  }
                }
              }
            }
          }
        }
        break;
      }
      case LayerKind::kMaxPool2D: {
        const auto& winners = trace.argmax[n];
        for (std::size_t o = 0; o < winners.size(); ++o) gi[winners[o]] += g[o];
        break;
      }
      case LayerKind::kAvgPool2D: {
        const std::size_t C = xs[0], H = xs[1], W = xs[2], k = l.kernel_h;
        const Shape& os = graph.output_shape(n);
        const double inv = 1.0 / double(k * k);
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t oy = 0; oy < os[1]; ++oy) {
            for (std::size_t ox = 0; ox < os[2]; ++ox) {
              const double go = g[(c * os[1] + oy) * os[2] + ox] * inv;
              for (std::size_t ky = 0; ky < k; ++ky) {
                for (std::size_t kx = 0; kx < k; ++kx) {
                  gi[(c * H + oy * l.stride + ky) * W + ox * l.stride + kx] += go;
                }
              }
            }
          }
        }
        break;
      }
      case LayerKind::kGlobalAvgPool: {
        const std::size_t hw = xs[1] * xs[2];
        for (std::size_t i = 0; i < gi.size(); ++i) gi[i] = double(g[i / hw]) / double(hw);
        break;
      }
      case LayerKind::kReLU:
        // Subgradient 0 at the kink.
        for (std::size_t i = 0; i < gi.size(); ++i) {
          const bool pass = x[i] > 0.0f && (!guided || g[i] > 0.0f);
          gi[i] = pass ? g[i] : 0.0;
        }
        break;
      case LayerKind::kBatchNorm: {
        const std::size_t inner = x.size() / xs[0];
        for (std::size_t i = 0; i < gi.size(); ++i) {
          const std::size_t c = i / inner;
          gi[i] = double(g[i]) * l.gamma[c] / std::sqrt(double(l.running_var[c]) + l.eps);
        }
        break;
      }
      case LayerKind::kAdd: {
        for (std::size_t i = 0; i < gi.size(); ++i) gi[i] = g[i];
        accumulate(grad[srcs[1]], gi, trace.outputs[srcs[1]].shape());
        break;
      }
      case LayerKind::kInput:
        break;
    }
    accumulate(grad[srcs.front()], gi, xs);
  }
  Tensor out = std::move(grad[graph.input_index()]);
  if (out.empty()) out = Tensor(graph.input_shape());
  require_finite(out, "backward");
  return out;
}

}  // namespace raproscope
