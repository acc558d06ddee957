#include <gtest/gtest.h>

#include <fstream>

#include <json.hpp>

#include "raproscope/errors.hpp"
#include "raproscope/inference.hpp"
#include "raproscope/model.hpp"
#include "test_util.hpp"

using namespace raproscope;
using testutil::fixture;
using testutil::random_tensor;
namespace fs = std::filesystem;

namespace {

ModelError::Kind build_error(std::vector<LayerSpec> list, Shape input = {2}, std::size_t classes = 1,
                             std::string* node = nullptr) {
  try {
    ModelGraph::build(std::move(input), classes, std::move(list));
  } catch (const ModelError& e) {
    if (node) *node = e.node_id();
    return e.kind();
  }
  ADD_FAILURE() << "graph was accepted";
  return ModelError::Kind::kInvalidManifest;
}

Tensor w21() { return Tensor({2, 1}, std::vector<float>{1, 1}); }

// Copies a fixture model into a scratch directory so it can be corrupted.
fs::path copy_model(const std::string& name, const std::string& dir) {
  const fs::path out = testutil::scratch_dir(dir);
  fs::copy_file(fixture("models/" + name + ".json"), out / (name + ".json"));
  fs::copy_file(fixture("models/" + name + ".bin"), out / (name + ".bin"));
  return out / (name + ".json");
}

ModelError::Kind load_error(const fs::path& manifest, std::string* node = nullptr) {
  try {
    load_model(manifest);
  } catch (const ModelError& e) {
    if (node) *node = e.node_id();
    return e.kind();
  }
  ADD_FAILURE() << "model was accepted";
  return ModelError::Kind::kInvalidManifest;
}

}  // namespace

TEST(ModelGraph, BuildsLinearChainWithInputAndOutputNodes) {
  const ModelGraph g = ModelGraph::build({2}, 1, {layers::dense("fc", "input", w21())});
  ASSERT_EQ(g.size(), 3u);
  EXPECT_EQ(g.node(0).id, "input");
  EXPECT_EQ(g.node(g.output_index()).id, "output");
  EXPECT_EQ(g.node(g.sink_index()).id, "fc");
  EXPECT_EQ(g.output_shape(g.output_index()), Shape{1});
}

TEST(ModelGraph, DetectsCycleAndNamesNode) {
  std::string node;
  const auto kind = build_error({layers::relu("b", "a"), layers::relu("a", "b"), layers::dense("fc", "input", w21())},
                                {2}, 1, &node);
  EXPECT_EQ(kind, ModelError::Kind::kCyclicGraph);
  EXPECT_EQ(node, "a");
}

TEST(ModelGraph, RejectsStructuralProblems) {
  EXPECT_EQ(build_error({layers::dense("fc", "nowhere", w21())}), ModelError::Kind::kInvalidManifest);
  EXPECT_EQ(build_error({layers::relu("fc", "input"), layers::dense("fc", "input", w21())}),
            ModelError::Kind::kInvalidManifest);
  LayerSpec bad_add = layers::add("sum", "input", "input");
  bad_add.inputs.pop_back();
  EXPECT_EQ(build_error({bad_add, layers::dense("fc", "sum", w21())}), ModelError::Kind::kUnsupportedTopology);
  // Two sinks.
  EXPECT_EQ(build_error({layers::dense("fc", "input", w21()), layers::relu("r", "input")}),
            ModelError::Kind::kUnsupportedTopology);
  // Sink is not Dense.
  EXPECT_EQ(build_error({layers::dense("fc", "input", w21()), layers::relu("r", "fc")}),
            ModelError::Kind::kUnsupportedTopology);
}

TEST(ModelGraph, RejectsShapeMismatchNamingNode) {
  std::string node;
  const Tensor w({3, 1});
  EXPECT_EQ(build_error({layers::dense("fc", "input", w)}, {2}, 1, &node), ModelError::Kind::kShapeInconsistency);
  EXPECT_EQ(node, "fc");
  EXPECT_EQ(build_error({layers::dense("fc", "input", w21())}, {2}, 3), ModelError::Kind::kShapeInconsistency);
  EXPECT_THROW(ModelGraph::build({1, 6, 6}, 1,
                                 {layers::conv2d("c", "input", Tensor({1, 1, 3, 3}), Tensor(), 2, 0),
                                  layers::flatten("f", "c"), layers::dense("fc", "f", Tensor({4, 1}))}),
               ModelError);
}

TEST(ModelGraph, TopologicalOrderIgnoresListingOrder) {
  std::mt19937_64 rng(5);
  const Tensor wc = random_tensor({2, 1, 3, 3}, rng);
  const Tensor wd = random_tensor({32, 2}, rng);
  auto make = [&](bool reversed) {
    std::vector<LayerSpec> l = {layers::conv2d("a", "input", wc, Tensor(), 1, 1), layers::relu("b", "a"),
                                layers::conv2d("c", "input", wc, Tensor(), 1, 1), layers::add("d", "b", "c"),
                                layers::maxpool2d("e", "d", 2, 2), layers::flatten("f", "e"),
                                layers::dense("g", "f", wd)};
    if (reversed) std::reverse(l.begin(), l.end());
    return ModelGraph::build({1, 8, 8}, 2, l);
  };
  const ModelGraph g1 = make(false), g2 = make(true);
  std::vector<std::string> o1, o2;
  for (auto n : g1.topological_order()) o1.push_back(g1.node(n).id);
  for (auto n : g2.topological_order()) o2.push_back(g2.node(n).id);
  EXPECT_EQ(o1, o2);
  const Tensor x = random_tensor({1, 8, 8}, rng);
  EXPECT_EQ(predict(g1, x), predict(g2, x));
}

TEST(ModelIo, FixtureLogitsMatchExportingFramework) {
  for (const char* name : {"linear", "cnn_small", "toy_two_path", "glyph_cnn"}) {
    const ModelGraph g = load_model(fixture(std::string("models/") + name + ".json"));
    ASSERT_TRUE(g.reference_input && g.reference_logits) << name;
    const Tensor logits = predict(g, *g.reference_input);
    for (std::size_t i = 0; i < logits.size(); ++i) {
      EXPECT_NEAR(logits[i], (*g.reference_logits)[i], 1e-4) << name;
    }
  }
}

TEST(ModelIo, FoldedBatchNormMatchesUnfoldedForward) {
  const fs::path path = fixture("models/cnn_bn.json");
  const ModelGraph folded = load_model(path);
  const ModelGraph unfolded = load_model(path, {.fold_batchnorm = false});
  EXPECT_FALSE(folded.has_batchnorm());
  EXPECT_TRUE(unfolded.has_batchnorm());

  // Against the exporting framework's unfolded computation.
  const Tensor ref = predict(folded, *folded.reference_input);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(ref[i], (*folded.reference_logits)[i], 1e-5);

  std::mt19937_64 rng(9);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const Tensor x = random_tensor(folded.input_shape(), rng, 0.0f, 1.0f);
    const Tensor a = predict(folded, x), b = predict(unfolded, x);
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, double(std::fabs(a[i] - b[i])));
  }
  EXPECT_LE(worst, 1e-5);
}

TEST(ModelIo, SaveLoadRoundTrip) {
  const ModelGraph g = load_model(fixture("models/cnn_bn.json"), {.fold_batchnorm = false});
  const fs::path out = testutil::scratch_dir("roundtrip") / "copy.json";
  save_model(g, out);
  const ModelGraph h = load_model(out, {.fold_batchnorm = false});
  ASSERT_EQ(g.size(), h.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    EXPECT_EQ(g.node(i).id, h.node(i).id);
    EXPECT_EQ(g.node(i).kind, h.node(i).kind);
    EXPECT_EQ(g.node(i).weight, h.node(i).weight);
    EXPECT_EQ(g.node(i).gamma, h.node(i).gamma);
  }
  EXPECT_EQ(*g.reference_input, *h.reference_input);
  EXPECT_EQ(predict(g, *g.reference_input), predict(h, *h.reference_input));
}

TEST(ModelIo, TruncatedBlobReportsTensorName) {
  const fs::path m = copy_model("cnn_small", "truncated");
  const fs::path blob = m.parent_path() / "cnn_small.bin";
  fs::resize_file(blob, fs::file_size(blob) - 4);
  std::string node;
  EXPECT_EQ(load_error(m, &node), ModelError::Kind::kLengthMismatch);
  EXPECT_EQ(node, "fc.weight");
}

TEST(ModelIo, TrailingBytesAreALengthMismatch) {
  const fs::path m = copy_model("cnn_small", "trailing");
  std::ofstream(m.parent_path() / "cnn_small.bin", std::ios::app | std::ios::binary) << "pad!";
  EXPECT_EQ(load_error(m), ModelError::Kind::kLengthMismatch);
}

TEST(ModelIo, CorruptedBlobFailsChecksum) {
  const fs::path m = copy_model("cnn_small", "corrupt");
  std::fstream f(m.parent_path() / "cnn_small.bin", std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(10);
  f.put('\x7f');
  f.close();
  EXPECT_EQ(load_error(m), ModelError::Kind::kChecksumMismatch);
  EXPECT_NO_THROW(load_model(m, {.verify_checksum = false}));
}

TEST(ModelIo, MissingFilesAndBadJson) {
  EXPECT_EQ(load_error(fixture("models/does_not_exist.json")), ModelError::Kind::kMissingFile);
  const fs::path m = copy_model("linear", "missing_blob");
  fs::remove(m.parent_path() / "linear.bin");
  EXPECT_EQ(load_error(m), ModelError::Kind::kMissingFile);

  const fs::path bad = testutil::scratch_dir("bad_json") / "m.json";
  std::ofstream(bad) << "{ not json";
  EXPECT_EQ(load_error(bad), ModelError::Kind::kInvalidManifest);
}

TEST(ModelIo, ShapeMismatchInManifestNamesLayer) {
  const fs::path m = copy_model("cnn_small", "bad_shape");
  std::ifstream in(m);
  nlohmann::json j = nlohmann::json::parse(in);
  in.close();
  j["layers"][4]["in_features"] = 60;
  std::ofstream(m) << j.dump();
  std::string node;
  EXPECT_EQ(load_error(m, &node), ModelError::Kind::kShapeInconsistency);
  EXPECT_EQ(node, "fc");
}

TEST(ModelIo, BatchNormMustFollowAffineLayer) {
  const Tensor one({1}, std::vector<float>{1});
  const ModelGraph g = ModelGraph::build(
      {1, 2, 2}, 1,
      {layers::relu("r", "input"), layers::batchnorm("bn", "r", one, Tensor({1}), Tensor({1}), one, 1e-5f),
       layers::flatten("f", "bn"), layers::dense("fc", "f", Tensor({4, 1}))});
  EXPECT_THROW(fold_batchnorm(g), ModelError);
}
