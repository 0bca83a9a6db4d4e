// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace ibke {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced, or an update that would introduce one.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Token or element index out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Malformed JSONL / JSON input. Carries the 1-based line number when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Tensor archive / checkpoint problems (corruption, version mismatch).
class ArchiveError : public Error {
 public:
  using Error::Error;
};

/// World generation could not satisfy its constraints.
class GenerationError : public Error {
 public:
  using Error::Error;
};

/// Training diverged or otherwise had to abort.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace ibke
