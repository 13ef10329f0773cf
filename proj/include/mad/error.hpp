#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mad {

/// Base for every error raised by the library. `what()` carries the detail.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Architecture descriptor does not compose (shape mismatch, bad sizes).
class DescriptorError : public Error {
 public:
  using Error::Error;
};

/// Caller passed data of the wrong shape or an empty batch.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Requested size exceeds what is available (dense cap, split sizes).
class CapacityError : public Error {
 public:
  using Error::Error;
};

/// Invalid numeric parameter (k too large, negative epsilon, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary file; `offset()` is the byte where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& msg, std::uint64_t offset)
      : Error(msg + " (byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Training produced a non-finite loss.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& msg, int epoch)
      : Error(msg + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

/// SGLD parameter vector became non-finite.
class ChainDivergence : public Error {
 public:
  ChainDivergence(const std::string& msg, long step)
      : Error(msg + " (step " + std::to_string(step) + ")"), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

/// A trace has (numerically) zero variance, so correlations are undefined.
class DegenerateTrace : public Error {
 public:
  using Error::Error;
};

/// A gradient has (numerically) zero norm, so its energy profile is undefined.
class DegenerateGradient : public Error {
 public:
  using Error::Error;
};

}  // namespace mad
