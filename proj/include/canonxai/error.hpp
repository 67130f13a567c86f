#pragma once

#include <stdexcept>
#include <string>

namespace canonxai {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes of two operands do not conform.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Numeric parameters outside their valid domain (e.g. sigma + eps <= 0).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// A BatchNorm channel whose scale is too close to zero for the requested rewrite.
class DegenerateChannelError : public ParameterError {
 public:
  DegenerateChannelError(const std::string& what, std::size_t channel)
      : ParameterError(what), channel_(channel) {}
  std::size_t channel() const { return channel_; }

 private:
  std::size_t channel_;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

// Errors tied to a particular graph node carry its id.
class NodeError : public Error {
 public:
  NodeError(const std::string& what, std::string node_id)
      : Error(what), node_id_(std::move(node_id)) {}
  const std::string& node_id() const { return node_id_; }

 private:
  std::string node_id_;
};

class DanglingReferenceError : public NodeError {
 public:
  using NodeError::NodeError;
};

class BlobRangeError : public NodeError {
 public:
  using NodeError::NodeError;
};

class CycleError : public NodeError {
 public:
  using NodeError::NodeError;
};

class InvalidGraphError : public NodeError {
 public:
  using NodeError::NodeError;
};

}  // namespace canonxai
