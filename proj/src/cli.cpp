#include "raproscope/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

#include <json.hpp>

#include "raproscope/attribution.hpp"
#include "raproscope/errors.hpp"
#include "raproscope/evaluation.hpp"
#include "raproscope/image_io.hpp"
#include "raproscope/inference.hpp"
#include "raproscope/model.hpp"
#include "raproscope/render.hpp"

namespace raproscope {

namespace {

using nlohmann::json;

const std::vector<std::string> kMethods = {"rap", "lrp-eps", "lrp-ab", "grad", "ixg", "ig", "gbp"};

struct MethodOptions {
  std::string method = "rap";
  float eps = 1e-6f;
  float alpha = 2.0f;
  float beta = 1.0f;
  int ig_steps = 50;

  void add_to(CLI::App& cmd) {
    cmd.add_option("--method", method, "Attribution method")->check(CLI::IsMember(kMethods))->capture_default_str();
    cmd.add_option("--eps", eps, "LRP-epsilon stabiliser")->capture_default_str();
    cmd.add_option("--alpha", alpha, "LRP-alpha-beta positive weight")->capture_default_str();
    cmd.add_option("--beta", beta, "LRP-alpha-beta negative weight")->capture_default_str();
    cmd.add_option("--ig-steps", ig_steps, "Integrated-gradients steps")->capture_default_str();
  }

  AttributionConfig config() const {
    AttributionConfig c;
    c.method = *parse_method(method);
    c.epsilon = eps;
    c.alpha = alpha;
    c.beta = beta;
    c.ig_steps = ig_steps;
    c.validate();
    return c;
  }
};

struct EvalOptions {
  std::string model, dataset, report;
  std::string target_source = "label";
  MethodOptions method;

  void add_to(CLI::App& cmd) {
    cmd.add_option("--model", model, "Model manifest (JSON)")->required();
    cmd.add_option("--dataset", dataset, "Dataset manifest (JSON lines)")->required();
    cmd.add_option("--report", report, "Output report (JSON)")->required();
    cmd.add_option("--target-source", target_source, "Class explained per sample")
        ->check(CLI::IsMember({"label", "predicted"}))
        ->capture_default_str();
    method.add_to(cmd);
  }

  TargetSource source() const { return target_source == "label" ? TargetSource::kLabel : TargetSource::kPredicted; }
};

void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

json report_header(const char* protocol, const EvalOptions& opt, const AttributionConfig& cfg) {
  return {{"protocol", protocol}, {"config", cfg.to_json()}, {"target_source", opt.target_source}};
}

std::vector<EvalSample> load_checked_dataset(const EvalOptions& opt, const ModelGraph& graph) {
  std::vector<EvalSample> samples = load_dataset(opt.dataset, graph.input_shape());
  if (samples.empty()) throw ConfigError("dataset '" + opt.dataset + "' has no samples");
  for (const auto& s : samples) {
    if (s.label >= graph.num_classes()) {
      throw IndexError("sample '" + s.name + "' has label " + std::to_string(s.label) + " but the model has " +
                       std::to_string(graph.num_classes()) + " classes");
    }
  }
  return samples;
}

void run_attribute(const std::string& model_path, const std::string& image_path, const MethodOptions& m,
                   std::optional<std::size_t> target, const std::string& out_path, std::ostream& out) {
  const ModelGraph graph = load_model(model_path);
  AttributionConfig cfg = m.config();
  cfg.target = target;
  const Tensor image = read_image(image_path, graph.input_shape());
  const ForwardTrace trace = forward(graph, image);
  const RelevanceMap map = attribute(graph, trace, cfg);
  write_relevance(out_path, graph, map, cfg);
  out << "method " << to_string(map.method) << ", target " << map.target << " (predicted " << trace.predicted
      << "), logit " << map.logit << "\n"
      << "attribution sum " << map.input.sum() << ", conservation residual " << map.conservation_residual()
      << "\n";
}

void run_render(const std::string& rel_path, const std::string& layer, std::size_t scale, const std::string& out_path) {
  const RelevanceFile file = read_relevance(rel_path);
  const Tensor* t = file.find(layer);
  if (!t) throw ConfigError("relevance file has no tensor for node '" + layer + "'");
  render_heatmap(*t, out_path, scale);
}

void run_inspect(const std::string& model_path, std::ostream& out) {
  const ModelGraph graph = load_model(model_path);
  out << "input " << shape_string(graph.input_shape()) << ", " << graph.num_classes() << " classes\n";
  out << "nodes:\n";
  for (std::size_t i = 0; i < graph.size(); ++i) {
    const LayerSpec& l = graph.node(i);
    out << "  " << l.id << "  " << to_string(l.kind) << "  -> " << shape_string(graph.output_shape(i));
    const auto& srcs = graph.inputs_of(i);
    if (!srcs.empty()) {
      out << "  from";
      for (std::size_t s : srcs) out << ' ' << graph.node(s).id;
    }
    out << '\n';
  }
  out << "topological order:";
  for (std::size_t n : graph.topological_order()) out << ' ' << graph.node(n).id;
  out << '\n';
  if (graph.reference_input && graph.reference_logits) {
    const Tensor logits = predict(graph, *graph.reference_input);
    double worst = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      worst = std::max(worst, std::fabs(double(logits[i]) - (*graph.reference_logits)[i]));
    }
    out << "reference logits max abs deviation " << worst << '\n';
  }
}

void run_ratio(const EvalOptions& opt, const std::string& mode) {
  const ModelGraph graph = load_model(opt.model);
  const AttributionConfig cfg = opt.method.config();
  const std::vector<EvalSample> samples = load_checked_dataset(opt, graph);
  for (const auto& s : samples) {
    if (!s.bbox) throw ConfigError("sample '" + s.name + "' has no bbox");
  }
  const std::vector<Tensor> maps = attribute_samples(graph, samples, cfg, opt.source());
  const RatioMode rm = mode == "pos" ? RatioMode::kPositive : RatioMode::kAll;

  json per_sample = json::array();
  double total = 0.0;
  std::size_t defined = 0;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    json rec = {{"name", samples[s].name}, {"label", samples[s].label}};
    try {
      const double mu = outside_inside_ratio(maps[s], *samples[s].bbox, rm);
      rec["mu"] = mu;
      total += mu;
      ++defined;
    } catch (const MetricError& e) {
      rec["mu"] = nullptr;
      rec["error"] = e.what();
    }
    per_sample.push_back(std::move(rec));
  }
  json report = report_header("ratio", opt, cfg);
  report["mode"] = mode;
  report["samples"] = std::move(per_sample);
  report["aggregate"] = {{"count", samples.size()},
                         {"defined", defined},
                         {"mean_mu", defined ? json(total / double(defined)) : json(nullptr)}};
  write_json(opt.report, report);
}

void run_segmentation(const EvalOptions& opt, const std::string& mode) {
  const ModelGraph graph = load_model(opt.model);
  const AttributionConfig cfg = opt.method.config();
  const std::vector<EvalSample> samples = load_checked_dataset(opt, graph);
  for (const auto& s : samples) {
    if (!s.mask) throw ConfigError("sample '" + s.name + "' has no mask");
  }
  const std::vector<Tensor> maps = attribute_samples(graph, samples, cfg, opt.source());
  const SegmentationMode sm = mode == "signed" ? SegmentationMode::kSigned : SegmentationMode::kPositiveOnly;

  json per_sample = json::array();
  double acc = 0.0, iou = 0.0, miou = 0.0;
  std::size_t flagged = 0;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const SegmentationResult r = segmentation_metrics(maps[s], *samples[s].mask, sm);
    per_sample.push_back({{"name", samples[s].name},
                          {"threshold", r.threshold},
                          {"pixel_accuracy", r.pixel_accuracy},
                          {"iou", r.iou},
                          {"background_iou", r.background_iou},
                          {"empty_union", r.empty_union}});
    acc += r.pixel_accuracy;
    iou += r.iou;
    miou += r.mean_iou();
    flagged += r.empty_union;
  }
  const double n = double(samples.size());
  json report = report_header("segmentation", opt, cfg);
  report["mode"] = mode;
  report["samples"] = std::move(per_sample);
  report["aggregate"] = {{"count", samples.size()},
                         {"pixel_accuracy", acc / n},
                         {"iou", iou / n},
                         {"miou", miou / n},
                         {"empty_union", flagged}};
  write_json(opt.report, report);
}

struct PerturbOptions {
  std::size_t pixels_per_step = 0;
  std::size_t steps = 40;
  std::string replacement = "zero";
  std::string order = "lerf";
  std::uint64_t seed = 0;
  std::string csv;
};

void run_perturb(const EvalOptions& opt, const PerturbOptions& p) {
  const ModelGraph graph = load_model(opt.model);
  const AttributionConfig cfg = opt.method.config();
  const std::vector<EvalSample> samples = load_checked_dataset(opt, graph);
  const std::size_t pixels = samples.front().height() * samples.front().width();

  PerturbationConfig pc;
  pc.pixels_per_step = p.pixels_per_step ? p.pixels_per_step : (pixels + 99) / 100;
  pc.total_steps = p.steps;
  pc.replacement = p.replacement == "mean" ? Replacement::kChannelMean : Replacement::kZero;

  std::vector<std::vector<std::size_t>> orders(samples.size());
  if (p.steps > 0) {
    if (p.order == "random") {
      for (std::size_t s = 0; s < samples.size(); ++s) {
        orders[s] = random_order(samples[s].height() * samples[s].width(), p.seed + s);
      }
    } else {
      const std::vector<Tensor> maps = attribute_samples(graph, samples, cfg, opt.source());
      const RemovalOrder ro = p.order == "morf" ? RemovalOrder::kMostRelevantFirst : RemovalOrder::kLeastRelevantFirst;
      for (std::size_t s = 0; s < samples.size(); ++s) orders[s] = removal_order(maps[s], ro);
    }
  }
  const PerturbationCurve curve = perturbation_curve(graph, samples, orders, pc);

  json steps = json::array();
  for (const auto& pt : curve.steps) steps.push_back({{"pixels_removed", pt.pixels_removed}, {"accuracy", pt.accuracy}});
  json per_sample = json::array();
  for (std::size_t s = 0; s < samples.size(); ++s) {
    per_sample.push_back({{"name", samples[s].name}, {"label", samples[s].label}, {"predictions", curve.predictions[s]}});
  }
  json report = report_header("perturb", opt, cfg);
  report["order"] = p.order;
  if (p.order == "random") report["seed"] = p.seed;
  report["replacement"] = p.replacement;
  report["pixels_per_step"] = curve.pixels_per_step;
  report["total_steps"] = curve.total_steps;
  report["baseline_accuracy"] = curve.steps.front().accuracy;
  report["steps"] = std::move(steps);
  report["samples"] = std::move(per_sample);
  write_json(opt.report, report);

  if (!p.csv.empty()) {
    std::ofstream csv(p.csv);
    if (!csv) throw IoError("cannot write '" + p.csv + "'");
    csv << "step,pixels_removed,accuracy\n" << std::setprecision(17);
    for (std::size_t k = 0; k < curve.steps.size(); ++k) {
      csv << k << ',' << curve.steps[k].pixels_removed << ',' << curve.steps[k].accuracy << '\n';
    }
  }
}

const CLI::App* deepest_selected(const CLI::App& app) {
  for (const CLI::App* sub : app.get_subcommands()) return deepest_selected(*sub);
  return &app;
}

int exit_code_for(const Error& e) {
  if (dynamic_cast<const IoError*>(&e)) return kExitIo;
  if (const auto* me = dynamic_cast<const ModelError*>(&e); me && me->kind() == ModelError::Kind::kMissingFile) {
    return kExitIo;
  }
  return kExitValidation;
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Relevance attribution for feed-forward CNN/MLP models", "raproscope"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");
  std::function<void()> action;

  // attribute
  std::string model, image, out_path;
  std::optional<std::size_t> target;
  MethodOptions method;
  CLI::App* attribute_cmd = app.add_subcommand("attribute", "Compute a relevance map and write a .rel file");
  attribute_cmd->add_option("--model", model, "Model manifest (JSON)")->required();
  attribute_cmd->add_option("--image", image, "Input image (PNG or raw float32)")->required();
  attribute_cmd->add_option("--target", target, "Class to explain (default: predicted)");
  attribute_cmd->add_option("--out", out_path, "Output .rel file")->required();
  method.add_to(*attribute_cmd);
  attribute_cmd->callback([&] { action = [&] { run_attribute(model, image, method, target, out_path, out); }; });

  // render
  std::string rel_path, layer(ModelGraph::kInputId);
  std::size_t scale = 1;
  CLI::App* render_cmd = app.add_subcommand("render", "Render a relevance map as a PNG heatmap");
  render_cmd->add_option("--rel", rel_path, "Input .rel file")->required();
  render_cmd->add_option("--out", out_path, "Output PNG")->required();
  render_cmd->add_option("--layer", layer, "Node whose relevance is drawn")->capture_default_str();
  render_cmd->add_option("--scale", scale, "Nearest-neighbour upscaling factor")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  render_cmd->callback([&] { action = [&] { run_render(rel_path, layer, scale, out_path); }; });

  // inspect
  CLI::App* inspect_cmd = app.add_subcommand("inspect", "Print the model graph");
  inspect_cmd->add_option("--model", model, "Model manifest (JSON)")->required();
  inspect_cmd->callback([&] { action = [&] { run_inspect(model, out); }; });

  // evaluate
  CLI::App* evaluate_cmd = app.add_subcommand("evaluate", "Run an evaluation protocol over a dataset");
  evaluate_cmd->require_subcommand(1);
  EvalOptions eval;
  std::string ratio_mode = "all", seg_mode = "positive";
  PerturbOptions perturb;

  CLI::App* ratio_cmd = evaluate_cmd->add_subcommand("ratio", "Outside-inside relevance ratio over bounding boxes");
  eval.add_to(*ratio_cmd);
  ratio_cmd->add_option("--mode", ratio_mode, "all: signed relevance, pos: negatives zeroed")
      ->check(CLI::IsMember({"all", "pos"}))
      ->capture_default_str();
  ratio_cmd->callback([&] { action = [&] { run_ratio(eval, ratio_mode); }; });

  CLI::App* seg_cmd = evaluate_cmd->add_subcommand("segmentation", "Pixel accuracy and IOU against masks");
  eval.add_to(*seg_cmd);
  seg_cmd->add_option("--mode", seg_mode, "positive: mean threshold, signed: zero threshold")
      ->check(CLI::IsMember({"positive", "signed"}))
      ->capture_default_str();
  seg_cmd->callback([&] { action = [&] { run_segmentation(eval, seg_mode); }; });

  CLI::App* perturb_cmd = evaluate_cmd->add_subcommand("perturb", "Accuracy under progressive pixel removal");
  eval.add_to(*perturb_cmd);
  perturb_cmd->add_option("--pixels-per-step", perturb.pixels_per_step, "Pixels removed per step (default: 1% of the image)");
  perturb_cmd->add_option("--steps", perturb.steps, "Number of removal steps")->capture_default_str();
  perturb_cmd->add_option("--replacement", perturb.replacement, "Value written into removed pixels")
      ->check(CLI::IsMember({"zero", "mean"}))
      ->capture_default_str();
  perturb_cmd->add_option("--order", perturb.order, "lerf: least relevant first, morf: most relevant first")
      ->check(CLI::IsMember({"lerf", "morf", "random"}))
      ->capture_default_str();
  perturb_cmd->add_option("--seed", perturb.seed, "Seed for --order random")->capture_default_str();
  perturb_cmd->add_option("--csv", perturb.csv, "Also write the curve as CSV");
  perturb_cmd->callback([&] { action = [&] { run_perturb(eval, perturb); }; });

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << deepest_selected(app)->help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << deepest_selected(app)->help();
    return kExitValidation;
  }

  try {
    action();
    return kExitOk;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n\n" << deepest_selected(app)->help();
    return exit_code_for(e);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  }
}

int cli_main(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + std::min(argc, 1), argv + argc);
  return cli_main(args, std::cout, std::cerr);
}

}  // namespace raproscope
