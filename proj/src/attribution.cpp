#include "raproscope/attribution.hpp"

#include <cmath>

#include "raproscope/errors.hpp"

namespace raproscope {

namespace {

constexpr std::pair<Method, std::string_view> kMethodNames[] = {
    {Method::kRap, "rap"},
    {Method::kLrpEpsilon, "lrp-eps"},
    {Method::kLrpAlphaBeta, "lrp-ab"},
    {Method::kGradient, "grad"},
    {Method::kInputXGradient, "ixg"},
    {Method::kIntegratedGradients, "ig"},
    {Method::kGuidedBackprop, "gbp"},
};

// d + s * sign(d), with sign(0) = +1.
double stabilize(double d, double s) { return d >= 0.0 ? d + s : d - s; }

void check_sizes(const LinearMap& map, std::size_t m, std::size_t r_next, const char* rule) {
  if (m != map.in_size() || r_next != map.out_size()) {
    throw DimensionError(std::string(rule) + ": activations (" + std::to_string(m) + ") / relevance (" +
                         std::to_string(r_next) + ") do not match the layer (" +
                         std::to_string(map.in_size()) + " -> " + std::to_string(map.out_size()) + ")");
  }
}

Tensor to_tensor(const std::vector<double>& v, const char* rule) {
  Tensor t({v.size()});
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<float>(v[i]);
  require_finite(t, rule);
  return t;
}

}  // namespace

std::string_view to_string(Method m) {
  for (const auto& [k, n] : kMethodNames) {
    if (k == m) return n;
  }
  return "unknown";
}

std::optional<Method> parse_method(std::string_view name) {
  for (const auto& [k, n] : kMethodNames) {
    if (n == name) return k;
  }
  return std::nullopt;
}

bool is_propagation_method(Method m) {
  return m == Method::kRap || m == Method::kLrpEpsilon || m == Method::kLrpAlphaBeta;
}

void AttributionConfig::validate() const {
  if (!(epsilon >= 0.0f)) throw ConfigError("epsilon must be >= 0");
  if (!(stabilizer >= 0.0f)) throw ConfigError("stabilizer must be >= 0");
  if (method == Method::kLrpAlphaBeta && std::fabs(double(alpha) - double(beta) - 1.0) > 1e-6) {
    throw ConfigError("LRP-alpha-beta requires alpha - beta = 1");
  }
  if (ig_steps < 1) throw ConfigError("ig_steps must be >= 1");
  if (input_low.size() != input_high.size()) throw ConfigError("input bounds need matching low/high");
  for (std::size_t i = 0; i < input_low.size(); ++i) {
    if (!(input_low[i] <= input_high[i])) throw ConfigError("input bound low exceeds high");
  }
}

nlohmann::json AttributionConfig::to_json() const {
  nlohmann::json j = {{"method", std::string(to_string(method))},
                      {"epsilon", epsilon},
                      {"alpha", alpha},
                      {"beta", beta},
                      {"ig_steps", ig_steps},
                      {"stabilizer", stabilizer},
                      {"input_low", input_low},
                      {"input_high", input_high}};
  j["target"] = target ? nlohmann::json(*target) : nlohmann::json(nullptr);
  return j;
}

double LayerTransition::residual() const {
  const double d = std::fabs(relevance_in - relevance_out);
  return relevance_out == 0.0 ? d : d / std::fabs(relevance_out);
}

double RelevanceMap::conservation_residual() const {
  const double d = std::fabs(input.sum() - initial_relevance);
  return initial_relevance == 0.0 ? d : d / std::fabs(initial_relevance);
}

Tensor lrp_epsilon_layer(const LinearMap& map, std::span<const float> m, std::span<const float> r_next,
                         float eps, float stabilizer) {
  check_sizes(map, m.size(), r_next.size(), "lrp_epsilon_layer");
  std::vector<double> r(map.in_size(), 0.0);
  for (std::size_t j = 0; j < map.out_size(); ++j) {
    if (r_next[j] == 0.0f) continue;
    double zj = 0.0;
    for (const auto& e : map.edges(j)) zj += double(m[e.from]) * e.weight;
    double den = stabilize(zj, eps);
    if (den == 0.0) den = stabilizer;
    const double scale = r_next[j] / den;
    for (const auto& e : map.edges(j)) r[e.from] += double(m[e.from]) * e.weight * scale;
  }
  return to_tensor(r, "lrp_epsilon_layer");
}

Tensor lrp_alphabeta_layer(const LinearMap& map, std::span<const float> m, std::span<const float> r_next,
                           float alpha, float beta, float stabilizer) {
  if (std::fabs(double(alpha) - double(beta) - 1.0) > 1e-6) {
    throw ConfigError("LRP-alpha-beta requires alpha - beta = 1");
  }
  check_sizes(map, m.size(), r_next.size(), "lrp_alphabeta_layer");
  std::vector<double> r(map.in_size(), 0.0);
  for (std::size_t j = 0; j < map.out_size(); ++j) {
    if (r_next[j] == 0.0f) continue;
    double pos = 0.0, neg = 0.0;
    for (const auto& e : map.edges(j)) {
      const double z = double(m[e.from]) * e.weight;
      if (z > 0.0) pos += z; else neg += z;
    }
    const double pos_scale = alpha * r_next[j] / stabilize(pos, stabilizer);
    const double neg_scale = beta * r_next[j] / stabilize(neg, stabilizer);
    for (const auto& e : map.edges(j)) {
      const double z = double(m[e.from]) * e.weight;
      if (z > 0.0) r[e.from] += z * pos_scale;
      if (z < 0.0) r[e.from] -= z * neg_scale;
    }
  }
  return to_tensor(r, "lrp_alphabeta_layer");
}

Tensor rap_absolute_influence_init(const LinearMap& sink, std::span<const float> m, std::size_t target,
                                   float logit, float bias) {
  if (m.size() != sink.in_size()) throw DimensionError("rap init: activations do not match the logit layer");
  if (target >= sink.out_size()) throw IndexError("rap init: target out of range");
  if (logit == 0.0f) throw DegenerateError("target logit is zero; relevance cannot be normalised");

  const double gain = (double(logit) + bias) / logit;
  std::vector<double> r(sink.in_size(), 0.0);
  for (const auto& e : sink.edges(target)) r[e.from] += double(m[e.from]) * e.weight * gain;

  double total = 0.0, total_abs = 0.0;
  for (double v : r) {
    total += v;
    total_abs += std::fabs(v);
  }
  if (total_abs == 0.0) throw DegenerateError("no neuron contributes to the target logit");
  const double scale = total / total_abs;
  for (double& v : r) v = std::fabs(v) * scale;
  return to_tensor(r, "rap_absolute_influence_init");
}

RapStep rap_layer_propagate(const LinearMap& map, std::span<const float> m, std::span<const float> r_next,
                            float stabilizer) {
  check_sizes(map, m.size(), r_next.size(), "rap_layer_propagate");
  std::vector<double> r(map.in_size(), 0.0);
  RapStep step;
  double r_next_total = 0.0;
  bool any_relevance = false;
  for (std::size_t j = 0; j < map.out_size(); ++j) {
    const double rj = r_next[j];
    if (rj == 0.0) continue;
    any_relevance = true;
    r_next_total += rj;
    double pos = 0.0, neg = 0.0;
    for (const auto& e : map.edges(j)) {
      const double z = double(m[e.from]) * e.weight;
      if (z > 0.0) pos += z; else neg += z;
    }
    // Share of the negative contributions, measured on absolute values.
    const double nu = rj * -neg / stabilize(pos - neg, stabilizer);
    const double pos_scale = rj / stabilize(pos, stabilizer);
    const double neg_scale = nu / stabilize(neg, stabilizer);
    for (const auto& e : map.edges(j)) {
      const double z = double(m[e.from]) * e.weight;
      if (z > 0.0) {
        r[e.from] += z * pos_scale;
      } else if (z < 0.0) {
        r[e.from] += z * neg_scale;
        step.negative_route += z * neg_scale;
      }
    }
  }

  for (float v : m) step.activated += v != 0.0f ? 1 : 0;
  if (!any_relevance) {
    step.relevance = to_tensor(r, "rap_layer_propagate");
    return step;
  }
  if (step.activated == 0) {
    throw DegenerateError("layer receives relevance but has no activated neuron");
  }

  // The negative route over-allocates; the excess is taken back evenly from
  // every activated neuron, which keeps the layer total unchanged.
  double allocated = 0.0;
  for (double v : r) allocated += v;
  step.shift = (allocated - r_next_total) / double(step.activated);
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (m[i] != 0.0f) r[i] -= step.shift;
  }
  step.relevance = to_tensor(r, "rap_layer_propagate");
  return step;
}

Tensor zbeta_input_layer(const LinearMap& map, std::span<const float> x, std::span<const float> low,
                         std::span<const float> high, std::span<const float> r_next, float stabilizer) {
  check_sizes(map, x.size(), r_next.size(), "zbeta_input_layer");
  if (low.size() != x.size() || high.size() != x.size()) {
    throw DimensionError("zbeta_input_layer: bounds do not match the input");
  }
  for (std::size_t i = 0; i < low.size(); ++i) {
    if (low[i] > high[i]) throw ConfigError("zbeta_input_layer: lower bound exceeds upper bound");
  }
  std::vector<double> r(map.in_size(), 0.0);
  auto term = [&](const LinearMap::Edge& e) {
    const double w = e.weight;
    return double(x[e.from]) * w - double(low[e.from]) * std::max(w, 0.0) -
           double(high[e.from]) * std::min(w, 0.0);
  };
  for (std::size_t j = 0; j < map.out_size(); ++j) {
    if (r_next[j] == 0.0f) continue;
    double den = 0.0;
    for (const auto& e : map.edges(j)) den += term(e);
    const double scale = r_next[j] / stabilize(den, stabilizer);
    for (const auto& e : map.edges(j)) r[e.from] += term(e) * scale;
  }
  return to_tensor(r, "zbeta_input_layer");
}

namespace {

std::size_t resolve_target(const ModelGraph& graph, const ForwardTrace& trace, const AttributionConfig& cfg) {
  const std::size_t target = cfg.target.value_or(trace.predicted);
  if (target >= graph.num_classes()) {
    throw IndexError("target class " + std::to_string(target) + " out of range for " +
                     std::to_string(graph.num_classes()) + " classes");
  }
  return target;
}

// True when the node's (first) input is the image, possibly through Flatten.
bool reads_image(const ModelGraph& graph, std::size_t node) {
  std::size_t s = graph.inputs_of(node).front();
  while (graph.node(s).kind == LayerKind::kFlatten) s = graph.inputs_of(s).front();
  return s == graph.input_index();
}

std::vector<float> expand_per_channel(const std::vector<float>& v, const Shape& shape) {
  const std::size_t channels = shape.front();
  if (v.size() != 1 && v.size() != channels) {
    throw ConfigError("input bounds must have 1 or " + std::to_string(channels) + " entries");
  }
  const std::size_t n = shape_size(shape), inner = n / channels;
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = v.size() == 1 ? v[0] : v[i / inner];
  return out;
}

class Propagator {
 public:
  Propagator(const ModelGraph& g, const ForwardTrace& t, const AttributionConfig& c, std::size_t target)
      : graph_(g), trace_(t), cfg_(c), target_(target) {}

  RelevanceMap run() {
    RelevanceMap out;
    out.method = cfg_.method;
    out.target = target_;
    out.logit = trace_.logits[target_];
    out.initial_relevance = out.logit;
    rel_.assign(graph_.size(), Tensor());

    Tensor seed({graph_.num_classes()});
    seed[target_] = out.logit;
    rel_[graph_.output_index()] = seed;

    const auto& order = graph_.topological_order();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const std::size_t n = *it;
      if (n == graph_.input_index()) continue;
      if (rel_[n].empty()) rel_[n] = Tensor(graph_.output_shape(n));
      step(n, out);
    }
    out.node_relevance = rel_;
    out.input = rel_[graph_.input_index()];
    if (out.input.empty()) out.input = Tensor(graph_.input_shape());
    return out;
  }

 private:
  void deliver(std::size_t src, const Tensor& flat) {
    const Shape& shape = trace_.outputs[src].shape();
    if (rel_[src].empty()) {
      rel_[src] = flat.reshaped(shape);
      return;
    }
    for (std::size_t i = 0; i < flat.size(); ++i) rel_[src][i] += flat[i];
  }

  void step(std::size_t n, RelevanceMap& out) {
    const LayerSpec& l = graph_.node(n);
    const auto& srcs = graph_.inputs_of(n);
    const Tensor& r_next = rel_[n];
    LayerTransition tr{l.id, r_next.sum(), 0.0, false};

    switch (l.kind) {
      case LayerKind::kOutput:
      case LayerKind::kReLU:
      case LayerKind::kFlatten:
        deliver(srcs[0], r_next);
        tr.relevance_in = r_next.sum();
        break;
      case LayerKind::kMaxPool2D: {
        Tensor r(trace_.outputs[srcs[0]].shape());
        const auto& winners = trace_.argmax[n];
        for (std::size_t o = 0; o < winners.size(); ++o) r[winners[o]] += r_next[o];
        deliver(srcs[0], r);
        tr.relevance_in = r.sum();
        break;
      }
      case LayerKind::kBatchNorm:
      case LayerKind::kInput:
        throw UnsupportedLayerError(l.id, std::string(to_string(cfg_.method)));
      case LayerKind::kDense:
      case LayerKind::kConv2D:
      case LayerKind::kAvgPool2D:
      case LayerKind::kGlobalAvgPool:
      case LayerKind::kAdd: {
        const Tensor& x = trace_.outputs[srcs[0]];
        std::vector<float> m(x.values());
        if (l.kind == LayerKind::kAdd) {
          const auto& b = trace_.outputs[srcs[1]].values();
          m.insert(m.end(), b.begin(), b.end());
        }
        const LinearMap map = LinearMap::of(l, x.shape());
        Tensor r;
        if (n == graph_.sink_index() && cfg_.method == Method::kRap) {
          const float bias = l.bias.empty() ? 0.0f : l.bias[target_];
          r = rap_absolute_influence_init(map, m, target_, out.logit, bias);
          out.initial_relevance = r.sum();
          tr.init = true;
        } else {
          r = apply_rule(n, map, m, r_next);
        }
        tr.relevance_in = r.sum();
        if (l.kind == LayerKind::kAdd) {
          const std::size_t half = x.size();
          const auto& v = r.values();
          deliver(srcs[0], Tensor({half}, std::vector<float>(v.begin(), v.begin() + half)));
          deliver(srcs[1], Tensor({half}, std::vector<float>(v.begin() + half, v.end())));
        } else {
          deliver(srcs[0], r);
        }
        break;
      }
    }
    out.transitions.push_back(std::move(tr));
  }

  Tensor apply_rule(std::size_t n, const LinearMap& map, const std::vector<float>& m, const Tensor& r_next) {
    switch (cfg_.method) {
      case Method::kLrpEpsilon:
        return lrp_epsilon_layer(map, m, r_next.data(), cfg_.epsilon, cfg_.stabilizer);
      case Method::kLrpAlphaBeta:
        return lrp_alphabeta_layer(map, m, r_next.data(), cfg_.alpha, cfg_.beta, cfg_.stabilizer);
      case Method::kRap: {
        const LayerSpec& l = graph_.node(n);
        if (l.is_affine() && reads_image(graph_, n)) {
          const Shape& shape = graph_.input_shape();
          const std::vector<float> low = cfg_.input_low.empty() ? graph_.lower_bound_tensor().values()
                                                                : expand_per_channel(cfg_.input_low, shape);
          const std::vector<float> high = cfg_.input_high.empty() ? graph_.upper_bound_tensor().values()
                                                                  : expand_per_channel(cfg_.input_high, shape);
          return zbeta_input_layer(map, m, low, high, r_next.data(), cfg_.stabilizer);
        }
        return rap_layer_propagate(map, m, r_next.data(), cfg_.stabilizer).relevance;
      }
      default:
        throw UnsupportedLayerError(graph_.node(n).id, std::string(to_string(cfg_.method)));
    }
  }

  const ModelGraph& graph_;
  const ForwardTrace& trace_;
  const AttributionConfig& cfg_;
  std::size_t target_;
  std::vector<Tensor> rel_;
};

}  // namespace

Tensor integrated_gradients(const ModelGraph& graph, const Tensor& image, const AttributionConfig& config) {
  config.validate();
  const ForwardTrace at_image = forward(graph, image);
  const std::size_t target = resolve_target(graph, at_image, config);
  const int steps = config.ig_steps;
  std::vector<double> mean(image.size(), 0.0);
  for (int k = 1; k <= steps; ++k) {
    const double alpha = double(k) / steps;
    Tensor scaled(image.shape());
    for (std::size_t i = 0; i < image.size(); ++i) scaled[i] = static_cast<float>(alpha * image[i]);
    const Tensor g = k == steps ? backward(graph, at_image, target, false)
                                : backward(graph, forward(graph, scaled), target, false);
    for (std::size_t i = 0; i < g.size(); ++i) mean[i] += g[i];
  }
  Tensor out(image.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(image[i] * (mean[i] / steps));
  require_finite(out, "integrated_gradients");
  return out;
}

RelevanceMap attribute(const ModelGraph& graph, const ForwardTrace& trace, const AttributionConfig& config) {
  config.validate();
  if (trace.outputs.size() != graph.size()) throw DimensionError("trace does not belong to this graph");
  const std::size_t target = resolve_target(graph, trace, config);

  if (is_propagation_method(config.method)) return Propagator(graph, trace, config, target).run();

  RelevanceMap out;
  out.method = config.method;
  out.target = target;
  out.logit = trace.logits[target];
  out.initial_relevance = out.logit;
  const Tensor& x = trace.image();
  switch (config.method) {
    case Method::kGradient:
      out.input = backward(graph, trace, target, false);
      break;
    case Method::kGuidedBackprop:
      out.input = backward(graph, trace, target, true);
      break;
    case Method::kInputXGradient: {
      out.input = backward(graph, trace, target, false);
      for (std::size_t i = 0; i < x.size(); ++i) out.input[i] *= x[i];
      break;
    }
    case Method::kIntegratedGradients: {
      AttributionConfig c = config;
      c.target = target;
      out.input = integrated_gradients(graph, x, c);
      break;
    }
    default:
      break;
  }
  return out;
}

}  // namespace raproscope
