#include "raproscope/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "raproscope/errors.hpp"
#include "raproscope/image_io.hpp"
#include "raproscope/inference.hpp"
#include "raproscope/parallel.hpp"

namespace raproscope {

void EvalSample::validate() const {
  if (image.rank() != 3) throw DimensionError("sample '" + name + "': image must be [C,H,W]");
  if (bbox) {
    const BoundingBox& b = *bbox;
    if (b.x1 > width() || b.y1 > height() || b.x0 > b.x1 || b.y0 > b.y1) {
      throw MetricError(MetricError::Kind::kDegenerateBox, "sample '" + name + "': bbox outside the image");
    }
  }
  if (mask && mask->shape() != Shape{height(), width()}) {
    throw DimensionError("sample '" + name + "': mask " + shape_string(mask->shape()) +
                         " does not match image " + shape_string(image.shape()));
  }
}

std::vector<EvalSample> load_dataset(const std::filesystem::path& jsonl, const Shape& input_shape) {
  std::ifstream in(jsonl);
  if (!in) throw IoError("cannot open dataset '" + jsonl.string() + "'");
  if (input_shape.size() != 3) throw DimensionError("datasets need a [C,H,W] model input");
  const std::filesystem::path base = jsonl.parent_path();
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base / path;
  };

  std::vector<EvalSample> samples;
  std::string line;
  for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = jsonl.string() + ":" + std::to_string(line_no);
    EvalSample s;
    try {
      const nlohmann::json rec = nlohmann::json::parse(line);
      const std::string image = rec.at("image").get<std::string>();
      s.name = rec.value("name", image);
      const long long label = rec.at("label").get<long long>();
      if (label < 0) throw ConfigError(where + ": negative label");
      s.label = std::size_t(label);
      s.image = read_image(resolve(image), input_shape);
      if (rec.contains("bbox") && !rec["bbox"].is_null()) {
        const auto b = rec["bbox"].get<std::vector<long long>>();
        if (b.size() != 4 || *std::min_element(b.begin(), b.end()) < 0) {
          throw ConfigError(where + ": bbox must be four non-negative integers [x0,y0,x1,y1]");
        }
        s.bbox = BoundingBox{std::size_t(b[0]), std::size_t(b[1]), std::size_t(b[2]), std::size_t(b[3])};
      }
      if (rec.contains("mask") && !rec["mask"].is_null()) {
        const std::filesystem::path mp = resolve(rec["mask"].get<std::string>());
        const Shape hw{input_shape[1], input_shape[2]};
        Tensor m = mp.extension() == ".png" ? read_png_tensor(mp) : read_raw_tensor(mp, hw);
        if (m.rank() == 3) {
          if (m.dim(1) != hw[0] || m.dim(2) != hw[1]) {
            throw DimensionError(where + ": mask is " + shape_string(m.shape()));
          }
          Tensor first(hw);
          for (std::size_t i = 0; i < first.size(); ++i) first[i] = m[i];
          m = std::move(first);
        }
        for (std::size_t i = 0; i < m.size(); ++i) m[i] = m[i] > 0.5f ? 1.0f : 0.0f;
        s.mask = std::move(m);
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where + ": " + e.what());
    }
    s.validate();
    samples.push_back(std::move(s));
  }
  return samples;
}

Tensor spatial_relevance(const Tensor& relevance) {
  if (relevance.rank() != 3) {
    throw DimensionError("spatial relevance needs a [C,H,W] map, got " + shape_string(relevance.shape()));
  }
  return channel_sum(relevance);
}

namespace {

void require_map(const Tensor& r0, const char* where) {
  if (r0.rank() != 2) {
    throw DimensionError(std::string(where) + ": expected a [H,W] map, got " + shape_string(r0.shape()));
  }
}

}  // namespace

double outside_inside_ratio(const Tensor& r0, const BoundingBox& box, RatioMode mode) {
  require_map(r0, "outside_inside_ratio");
  const std::size_t H = r0.dim(0), W = r0.dim(1);
  if (box.x1 > W || box.y1 > H || box.x0 > box.x1 || box.y0 > box.y1) {
    throw MetricError(MetricError::Kind::kDegenerateBox, "bbox lies outside the relevance map");
  }
  const std::size_t inside = box.area(), outside = H * W - inside;
  if (inside == 0 || outside == 0) {
    throw MetricError(MetricError::Kind::kDegenerateBox, "bbox leaves no pixels inside or outside");
  }
  double pos_in = 0.0, pos_out = 0.0, neg_in = 0.0, neg_out = 0.0;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double v = r0.at(y, x);
      const bool in = box.contains(x, y);
      if (v > 0.0) {
        (in ? pos_in : pos_out) += v;
      } else if (v < 0.0 && mode == RatioMode::kAll) {
        (in ? neg_in : neg_out) -= v;
      }
    }
  }
  const double num = pos_out / double(outside) + neg_in / double(inside);
  const double den = pos_in / double(inside) + neg_out / double(outside);
  if (den == 0.0) throw MetricError(MetricError::Kind::kUndefinedRatio, "outside-inside ratio has a zero denominator");
  return num / den;
}

double segmentation_threshold(const Tensor& r0, SegmentationMode mode) {
  require_map(r0, "segmentation_threshold");
  if (mode == SegmentationMode::kSigned) return 0.0;
  double total = 0.0;
  for (float v : r0.data()) total += std::max(v, 0.0f);
  return total / double(r0.size());
}

SegmentationResult segmentation_metrics(const Tensor& r0, const Tensor& mask, SegmentationMode mode) {
  require_map(r0, "segmentation_metrics");
  if (mask.shape() != r0.shape()) {
    throw DimensionError("mask " + shape_string(mask.shape()) + " does not match relevance " +
                         shape_string(r0.shape()));
  }
  SegmentationResult res;
  res.threshold = segmentation_threshold(r0, mode);
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < r0.size(); ++i) {
    if (mask[i] != 0.0f && mask[i] != 1.0f) {
      throw MetricError(MetricError::Kind::kInvalidInput, "mask must be binary");
    }
    const bool pred = double(r0[i]) > res.threshold;
    const bool truth = mask[i] == 1.0f;
    if (pred && truth) ++tp;
    else if (pred) ++fp;
    else if (truth) ++fn;
    else ++tn;
  }
  res.pixel_accuracy = double(tp + tn) / double(r0.size());
  auto iou = [&](std::size_t inter, std::size_t uni) {
    if (uni == 0) {
      res.empty_union = true;
      return 1.0;
    }
    return double(inter) / double(uni);
  };
  res.iou = iou(tp, tp + fp + fn);
  res.background_iou = iou(tn, tn + fp + fn);
  return res;
}

std::vector<std::size_t> removal_order(const Tensor& r0, RemovalOrder order) {
  require_map(r0, "removal_order");
  std::vector<std::size_t> idx(r0.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (order == RemovalOrder::kLeastRelevantFirst) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return r0[a] < r0[b]; });
  } else {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return r0[a] > r0[b]; });
  }
  return idx;
}

std::vector<std::size_t> random_order(std::size_t pixels, std::uint64_t seed) {
  std::vector<std::size_t> idx(pixels);
  std::iota(idx.begin(), idx.end(), 0);
  // Fisher-Yates with an explicit draw so the order does not depend on the
  // standard library's shuffle implementation.
  std::mt19937_64 rng(seed);
  for (std::size_t i = pixels; i > 1; --i) {
    const std::size_t j = std::size_t(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

PerturbationCurve perturbation_curve(const ModelGraph& graph, std::span<const EvalSample> samples,
                                     std::span<const std::vector<std::size_t>> orders,
                                     const PerturbationConfig& config) {
  if (samples.empty()) throw ConfigError("perturbation needs at least one sample");
  if (orders.size() != samples.size()) throw ConfigError("one removal order per sample is required");
  if (config.total_steps > 0 && config.pixels_per_step == 0) throw ConfigError("pixels_per_step must be positive");
  const std::size_t budget = config.pixels_per_step * config.total_steps;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const std::size_t pixels = samples[s].height() * samples[s].width();
    if (budget > pixels) {
      throw ConfigError("perturbation budget of " + std::to_string(budget) + " pixels exceeds the " +
                        std::to_string(pixels) + " pixels of sample '" + samples[s].name + "'");
    }
    if (orders[s].size() < budget) throw ConfigError("removal order shorter than the perturbation budget");
    for (std::size_t i = 0; i < budget; ++i) {
      if (orders[s][i] >= pixels) throw IndexError("removal order refers to a pixel outside the image");
    }
  }

  PerturbationCurve curve;
  curve.pixels_per_step = config.pixels_per_step;
  curve.total_steps = config.total_steps;
  curve.predictions.assign(samples.size(), std::vector<std::size_t>(config.total_steps + 1));

  parallel_for(samples.size(), [&](std::size_t s) {
    const EvalSample& sample = samples[s];
    Tensor x = sample.image;
    const std::size_t C = x.dim(0), HW = sample.height() * sample.width();
    std::vector<float> fill(C, 0.0f);
    if (config.replacement == Replacement::kChannelMean) {
      for (std::size_t c = 0; c < C; ++c) {
        double total = 0.0;
        for (std::size_t p = 0; p < HW; ++p) total += x[c * HW + p];
        fill[c] = static_cast<float>(total / double(HW));
      }
    }
    auto& preds = curve.predictions[s];
    preds[0] = argmax_index(predict(graph, x));
    for (std::size_t k = 1; k <= config.total_steps; ++k) {
      for (std::size_t i = (k - 1) * config.pixels_per_step; i < k * config.pixels_per_step; ++i) {
        const std::size_t p = orders[s][i];
        for (std::size_t c = 0; c < C; ++c) x[c * HW + p] = fill[c];
      }
      preds[k] = argmax_index(predict(graph, x));
    }
  });

  for (std::size_t k = 0; k <= config.total_steps; ++k) {
    std::size_t correct = 0;
    for (std::size_t s = 0; s < samples.size(); ++s) correct += curve.predictions[s][k] == samples[s].label;
    curve.steps.push_back({k * config.pixels_per_step, double(correct) / double(samples.size())});
  }
  return curve;
}

PerturbationCurve lerf_perturbation(const ModelGraph& graph, std::span<const EvalSample> samples,
                                    std::span<const Tensor> r0s, const PerturbationConfig& config) {
  if (r0s.size() != samples.size()) throw ConfigError("one relevance map per sample is required");
  std::vector<std::vector<std::size_t>> orders;
  orders.reserve(samples.size());
  for (std::size_t s = 0; s < samples.size(); ++s) {
    if (r0s[s].shape() != Shape{samples[s].height(), samples[s].width()}) {
      throw DimensionError("relevance map of sample '" + samples[s].name + "' does not match its image");
    }
    orders.push_back(removal_order(r0s[s], RemovalOrder::kLeastRelevantFirst));
  }
  return perturbation_curve(graph, samples, orders, config);
}

std::vector<Tensor> attribute_samples(const ModelGraph& graph, std::span<const EvalSample> samples,
                                      const AttributionConfig& config, TargetSource source) {
  config.validate();
  std::vector<Tensor> maps(samples.size());
  parallel_for(samples.size(), [&](std::size_t s) {
    AttributionConfig c = config;
    c.target = source == TargetSource::kLabel ? std::optional<std::size_t>(samples[s].label) : std::nullopt;
    const ForwardTrace trace = forward(graph, samples[s].image);
    maps[s] = spatial_relevance(attribute(graph, trace, c).input);
  });
  return maps;
}

}  // namespace raproscope
