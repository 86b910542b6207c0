#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ambient {

/// Base for every error raised by the library. Callers that only care about
/// "something failed" catch this; the subclasses carry the category.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, zero weight sums and similar numeric contract breaks.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class KeyError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint and CSV parsing failures. `offset` is the byte offset at which
/// decoding stopped, or -1 when not applicable.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::int64_t offset = -1)
      : Error(what), offset_(offset) {}
  std::int64_t offset() const noexcept { return offset_; }

 private:
  std::int64_t offset_;
};

class TrainingDiverged : public Error {
 public:
  explicit TrainingDiverged(std::int64_t step)
      : Error("training diverged: non-finite loss at step " + std::to_string(step)),
        step_(step) {}
  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

}  // namespace ambient
