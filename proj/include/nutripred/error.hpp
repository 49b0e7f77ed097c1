#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace nutripred {

/// Failure categories. The CLI maps these onto its exit codes.
enum class ErrorKind {
  format,       // malformed manifest header / container layout
  row,          // bad manifest row
  duplicate,    // duplicate image reference
  decode,       // unreadable or undecodable image
  argument,     // invalid function argument
  empty_split,  // split has no samples
  config,       // invalid model / training configuration
  shape,        // tensor shape mismatch
  load,         // weight file does not match the architecture
  file,         // filesystem failure
  checkpoint,   // corrupt or incompatible checkpoint
  divergence,   // non-finite loss during training
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::format: return "format";
    case ErrorKind::row: return "row";
    case ErrorKind::duplicate: return "duplicate";
    case ErrorKind::decode: return "decode";
    case ErrorKind::argument: return "argument";
    case ErrorKind::empty_split: return "empty_split";
    case ErrorKind::config: return "config";
    case ErrorKind::shape: return "shape";
    case ErrorKind::load: return "load";
    case ErrorKind::file: return "file";
    case ErrorKind::checkpoint: return "checkpoint";
    case ErrorKind::divergence: return "divergence";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message) : std::runtime_error(message), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

template <ErrorKind K>
class KindedError : public Error {
 public:
  explicit KindedError(const std::string& message) : Error(K, message) {}
};

using FormatError = KindedError<ErrorKind::format>;
using RowError = KindedError<ErrorKind::row>;
using DuplicateError = KindedError<ErrorKind::duplicate>;
using DecodeError = KindedError<ErrorKind::decode>;
using ArgumentError = KindedError<ErrorKind::argument>;
using EmptySplitError = KindedError<ErrorKind::empty_split>;
using ConfigError = KindedError<ErrorKind::config>;
using ShapeError = KindedError<ErrorKind::shape>;
using LoadError = KindedError<ErrorKind::load>;
using FileError = KindedError<ErrorKind::file>;
using CheckpointError = KindedError<ErrorKind::checkpoint>;

/// Raised when the training loss stops being finite.
class DivergenceError : public Error {
 public:
  DivergenceError(int epoch, std::size_t step, const std::string& message)
      : Error(ErrorKind::divergence, message), epoch_(epoch), step_(step) {}
  int epoch() const noexcept { return epoch_; }
  std::size_t step() const noexcept { return step_; }

 private:
  int epoch_;
  std::size_t step_;
};

/// Throws the typed exception matching `kind` (divergence maps to a plain Error).
[[noreturn]] inline void raise(ErrorKind kind, const std::string& message) {
  switch (kind) {
    case ErrorKind::format: throw FormatError(message);
    case ErrorKind::row: throw RowError(message);
    case ErrorKind::duplicate: throw DuplicateError(message);
    case ErrorKind::decode: throw DecodeError(message);
    case ErrorKind::argument: throw ArgumentError(message);
    case ErrorKind::empty_split: throw EmptySplitError(message);
    case ErrorKind::config: throw ConfigError(message);
    case ErrorKind::shape: throw ShapeError(message);
    case ErrorKind::load: throw LoadError(message);
    case ErrorKind::file: throw FileError(message);
    case ErrorKind::checkpoint: throw CheckpointError(message);
    case ErrorKind::divergence: break;
  }
  throw Error(kind, message);
}

}  // namespace nutripred
