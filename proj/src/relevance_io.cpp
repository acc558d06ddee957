#include <cstring>
#include <fstream>
#include <string>

#include "raproscope/attribution.hpp"
#include "raproscope/errors.hpp"

namespace raproscope {

namespace {
constexpr const char* kFormat = "raproscope-rel";
}

const Tensor* RelevanceFile::find(std::string_view name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

const Tensor& RelevanceFile::attribution() const {
  if (const Tensor* t = find(ModelGraph::kInputId)) return *t;
  throw IoError("relevance file has no input attribution");
}

void write_relevance(const std::filesystem::path& path, const ModelGraph& graph, const RelevanceMap& map,
                     const AttributionConfig& config) {
  std::vector<std::pair<std::string, const Tensor*>> blocks{{std::string(ModelGraph::kInputId), &map.input}};
  for (std::size_t i = 0; i < map.node_relevance.size(); ++i) {
    if (i == graph.input_index() || map.node_relevance[i].empty()) continue;
    blocks.emplace_back(graph.node(i).id, &map.node_relevance[i]);
  }

  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : blocks) {
    tensors.push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset}});
    offset += t->size() * sizeof(float);
  }
  nlohmann::json header = {
      {"format", kFormat},
      {"version", 1},
      {"method", std::string(to_string(map.method))},
      {"config", config.to_json()},
      {"target", map.target},
      {"logit", map.logit},
      {"initial_relevance", map.initial_relevance},
      {"attribution_sum", map.input.sum()},
      {"conservation_residual", map.conservation_residual()},
      {"tensors", std::move(tensors)},
  };

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << header.dump() << '\n';
  for (const auto& [name, t] : blocks) {
    out.write(reinterpret_cast<const char*>(t->data().data()), std::streamsize(t->size() * sizeof(float)));
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

RelevanceFile read_relevance(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw IoError("'" + path.string() + "' is empty");
  RelevanceFile file;
  try {
    file.header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("'" + path.string() + "' has a malformed header: " + e.what());
  }
  if (file.header.value("format", "") != kFormat) throw IoError("'" + path.string() + "' is not a .rel file");
  const std::vector<char> payload{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  try {
    for (const auto& tj : file.header.at("tensors")) {
      Shape shape = tj.at("shape").get<Shape>();
      const std::size_t offset = tj.at("offset").get<std::size_t>();
      const std::size_t bytes = shape_size(shape) * sizeof(float);
      if (offset + bytes > payload.size()) throw IoError("'" + path.string() + "' is truncated");
      std::vector<float> data(shape_size(shape));
      std::memcpy(data.data(), payload.data() + offset, bytes);
      file.tensors.emplace_back(tj.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("'" + path.string() + "' has a malformed tensor table: " + e.what());
  }
  return file;
}

}  // namespace raproscope
