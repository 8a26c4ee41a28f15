// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace vitro {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or length mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// API misuse: backward on a non-scalar, optimizer step without gradients, ...
class ContractError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

class TokenizerError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

// Wraps a failure with the pipeline stage it came from ("stage1", "eval", ...).
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what) : Error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

}  // namespace vitro
