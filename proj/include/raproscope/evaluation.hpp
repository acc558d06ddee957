#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "raproscope/attribution.hpp"
#include "raproscope/model.hpp"
#include "raproscope/tensor.hpp"

namespace raproscope {

// Pixel rectangle [x0, x1) x [y0, y1).
struct BoundingBox {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  bool contains(std::size_t x, std::size_t y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
  std::size_t area() const { return (x1 - x0) * (y1 - y0); }
};

struct EvalSample {
  std::string name;
  Tensor image;  // [C, H, W]
  std::size_t label = 0;
  std::optional<BoundingBox> bbox;
  std::optional<Tensor> mask;  // [H, W] with values 0 or 1

  std::size_t height() const { return image.dim(1); }
  std::size_t width() const { return image.dim(2); }
  // Checks bbox bounds and mask shape against the image.
  void validate() const;
};

// JSON lines: {"image": path, "label": k, "bbox": [x0,y0,x1,y1], "mask": path}.
// Relative paths resolve against the manifest's directory. PNG masks count
// pixels above one half as foreground; other mask files are raw float32 [H, W].
std::vector<EvalSample> load_dataset(const std::filesystem::path& jsonl, const Shape& input_shape);

// Per-pixel relevance [H, W]: channel sum of a [C, H, W] attribution.
Tensor spatial_relevance(const Tensor& relevance);

// ---- Outside-inside ratio ----

enum class RatioMode {
  kAll,       // positive and negative relevance
  kPositive,  // negative relevance zeroed first
};

// [mean(R+ out) + mean(|R-| in)] / [mean(R+ in) + mean(|R-| out)] over a [H, W] map.
double outside_inside_ratio(const Tensor& r0, const BoundingBox& box, RatioMode mode = RatioMode::kAll);

// ---- Segmentation ----

enum class SegmentationMode {
  kPositiveOnly,  // threshold at the mean of the map with negatives clipped to 0
  kSigned,        // threshold at 0
};

struct SegmentationResult {
  double threshold = 0.0;
  double pixel_accuracy = 0.0;
  double iou = 0.0;             // foreground
  double background_iou = 0.0;
  // Set when a class is absent from both prediction and mask; its IOU is then 1.
  bool empty_union = false;

  double mean_iou() const { return 0.5 * (iou + background_iou); }
};

double segmentation_threshold(const Tensor& r0, SegmentationMode mode);
SegmentationResult segmentation_metrics(const Tensor& r0, const Tensor& mask, SegmentationMode mode);

// ---- Pixel perturbation ----

enum class RemovalOrder { kLeastRelevantFirst, kMostRelevantFirst };
enum class Replacement { kZero, kChannelMean };

struct PerturbationConfig {
  std::size_t pixels_per_step = 1;
  std::size_t total_steps = 0;
  Replacement replacement = Replacement::kZero;
};

struct PerturbationPoint {
  std::size_t pixels_removed = 0;
  double accuracy = 0.0;
};

struct PerturbationCurve {
  std::vector<PerturbationPoint> steps;
  std::size_t pixels_per_step = 0;
  std::size_t total_steps = 0;
  // predictions[s][k]: top-1 class of sample s after step k.
  std::vector<std::vector<std::size_t>> predictions;
};

// Linear pixel indices of a [H, W] map sorted by relevance, ties by index.
std::vector<std::size_t> removal_order(const Tensor& r0, RemovalOrder order = RemovalOrder::kLeastRelevantFirst);

// Uniformly random pixel order, reproducible from `seed`.
std::vector<std::size_t> random_order(std::size_t pixels, std::uint64_t seed);

// Removes pixels in the given per-sample orders and tracks top-1 accuracy.
PerturbationCurve perturbation_curve(const ModelGraph& graph, std::span<const EvalSample> samples,
                                     std::span<const std::vector<std::size_t>> orders,
                                     const PerturbationConfig& config);

// Least-relevant-first removal driven by per-sample [H, W] relevance maps.
PerturbationCurve lerf_perturbation(const ModelGraph& graph, std::span<const EvalSample> samples,
                                    std::span<const Tensor> r0s, const PerturbationConfig& config);

// ---- Batch attribution ----

enum class TargetSource { kLabel, kPredicted };

// Spatial relevance [H, W] for every sample, computed in parallel.
std::vector<Tensor> attribute_samples(const ModelGraph& graph, std::span<const EvalSample> samples,
                                      const AttributionConfig& config, TargetSource source = TargetSource::kLabel);

}  // namespace raproscope
