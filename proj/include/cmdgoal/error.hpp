#pragma once

#include <stdexcept>
#include <string>

namespace cmdgoal {

/// Base class of every error raised by the library. `kind()` is a short
/// machine-parseable tag that the CLI prints before the message.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what) : Error("invalid-argument", what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io", what) {}
};

class SchemaError : public Error {
 public:
  explicit SchemaError(const std::string& what) : Error("schema", what) {}
};

class CorruptCheckpoint : public Error {
 public:
  explicit CorruptCheckpoint(const std::string& what) : Error("corrupt-checkpoint", what) {}
};

class VersionMismatch : public Error {
 public:
  explicit VersionMismatch(const std::string& what) : Error("version-mismatch", what) {}
};

class ShapeMismatch : public Error {
 public:
  explicit ShapeMismatch(const std::string& what) : Error("shape-mismatch", what) {}
};

class TrainingDiverged : public Error {
 public:
  explicit TrainingDiverged(const std::string& what) : Error("diverged", what) {}
};

#define CMDGOAL_REQUIRE(cond, msg)                   \
  do {                                               \
    if (!(cond)) throw ::cmdgoal::InvalidArgument(msg); \
  } while (0)

}  // namespace cmdgoal
