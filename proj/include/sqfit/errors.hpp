#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace sqfit {

/// Base of every error raised by the library. `exit_code()` is the CLI
/// status the error maps to (1 usage, 2 I/O, 3 numerical failure).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const { return 3; }
};

class UsageError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 1; }
};

class IoError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 2; }
};

class ParseError : public IoError {
 public:
  ParseError(const std::string& what, std::size_t line)
      : IoError("parse error at line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class VersionMismatch : public IoError {
 public:
  using IoError::IoError;
};

class NonTriangulatable : public IoError {
 public:
  using IoError::IoError;
};

class EmptyMesh : public IoError {
 public:
  using IoError::IoError;
};

class TaperSingular : public Error {
 public:
  using Error::Error;
};

class BendOutOfRange : public Error {
 public:
  using Error::Error;
};

class BehindCamera : public Error {
 public:
  explicit BehindCamera(std::vector<std::size_t> indices)
      : Error(describe(indices)), indices_(std::move(indices)) {}
  const std::vector<std::size_t>& indices() const { return indices_; }

 private:
  static std::string describe(const std::vector<std::size_t>& idx) {
    std::string s = "points behind camera:";
    for (std::size_t k = 0; k < idx.size() && k < 8; ++k) s += " " + std::to_string(idx[k]);
    if (idx.size() > 8) s += " ... (" + std::to_string(idx.size()) + " total)";
    return s;
  }
  std::vector<std::size_t> indices_;
};

class FlowBlowup : public Error {
 public:
  using Error::Error;
};

class EmptySet : public Error {
 public:
  using Error::Error;
};

class EmptySilhouette : public Error {
 public:
  using Error::Error;
};

class EmptyTarget : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

class NonFiniteLoss : public Error {
 public:
  using Error::Error;
};

class DegenerateUnion : public Error {
 public:
  using Error::Error;
};

}  // namespace sqfit
