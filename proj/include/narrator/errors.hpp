#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace narrator {

/// Root of every error the pipeline raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Interchange document errors.
class SchemaError : public Error {
 public:
  using Error::Error;
};

class AlignmentError : public Error {
 public:
  using Error::Error;
};

class ReferenceError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// A structured-text file failed validation; `line()` is 1-based, 0 when not line-oriented.
class ValidationError : public PreconditionError {
 public:
  ValidationError(std::size_t line, const std::string& what)
      : PreconditionError(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Backend errors.
class TransportError : public Error {
 public:
  using Error::Error;
};

class BudgetError : public Error {
 public:
  using Error::Error;
};

/// The backend rejected the request. For HTTP backends the message carries the response body verbatim.
class BackendRefusal : public Error {
 public:
  BackendRefusal(int status, const std::string& body) : Error(body), status_(status) {}
  explicit BackendRefusal(const std::string& body) : BackendRefusal(0, body) {}
  int status() const noexcept { return status_; }

 private:
  int status_;
};

class UnsupportedError : public Error {
 public:
  using Error::Error;
};

class JobFailed : public Error {
 public:
  using Error::Error;
};

// Scoring errors.
class InstanceTooLarge : public Error {
 public:
  using Error::Error;
};

class DivisionDomain : public Error {
 public:
  using Error::Error;
};

}  // namespace narrator
