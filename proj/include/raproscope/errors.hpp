#pragma once

#include <stdexcept>
#include <string>

namespace raproscope {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor dimensions (matmul inner dims, elementwise shapes, ...).
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A shape that cannot be realized, e.g. a non-integral convolution output.
class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ModelError : public Error {
 public:
  enum class Kind {
    kMissingFile,
    kInvalidManifest,
    kLengthMismatch,
    kChecksumMismatch,
    kShapeInconsistency,
    kCyclicGraph,
    kUnsupportedTopology,
  };

  ModelError(Kind kind, std::string node_id, const std::string& message)
      : Error(message), kind_(kind), node_id_(std::move(node_id)) {}

  Kind kind() const noexcept { return kind_; }
  // Offending node (or tensor) id; empty when the error is not tied to one.
  const std::string& node_id() const noexcept { return node_id_; }

 private:
  Kind kind_;
  std::string node_id_;
};

class UnsupportedLayerError : public Error {
 public:
  UnsupportedLayerError(std::string node_id, std::string method)
      : Error("node '" + node_id + "' is not supported by method '" + method + "'"),
        node_id_(std::move(node_id)),
        method_(std::move(method)) {}

  const std::string& node_id() const noexcept { return node_id_; }
  const std::string& method() const noexcept { return method_; }

 private:
  std::string node_id_;
  std::string method_;
};

// Relevance cannot be distributed: zero target logit, or a layer with no
// activated neuron that still receives relevance.
class DegenerateError : public Error {
 public:
  using Error::Error;
};

class MetricError : public Error {
 public:
  enum class Kind { kUndefinedRatio, kDegenerateBox, kInvalidInput };

  MetricError(Kind kind, const std::string& message) : Error(message), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace raproscope
