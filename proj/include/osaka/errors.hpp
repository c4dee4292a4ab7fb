#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace osaka {

/// Base of every error raised by the library. Each subclass names the
/// failing contract so callers can map it to an exit code or a trace marker.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

/// Precondition violated by the caller (wrong mode, non-scalar loss, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A tensor handle refers to a tape generation that has since been cleared.
class GenerationError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class AdaptationError : public Error {
 public:
  AdaptationError(std::size_t step, const std::string& what)
      : Error("inner adaptation step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

class TrainingError : public Error {
 public:
  TrainingError(std::size_t epoch, const std::string& what)
      : Error("meta-training epoch " + std::to_string(epoch) + ": " + what), epoch_(epoch) {}
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

/// Optimizer step rejected (non-finite gradients or expectations).
class StepError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class MetricError : public Error {
 public:
  using Error::Error;
};

class AggregationError : public Error {
 public:
  using Error::Error;
};

class ReportError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace osaka
