#pragma once

#include <stdexcept>
#include <string>

namespace contactsense {

// Error categories map 1:1 onto the C API status codes.
enum class ErrorCode {
  invalid_argument = 1,
  io = 2,
  format = 3,
  not_found = 4,
  conflict = 5,
  state = 6,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class ParameterError : public Error {
 public:
  explicit ParameterError(const std::string& what) : Error(ErrorCode::invalid_argument, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCode::io, what) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(ErrorCode::format, what) {}
};

class NotFoundError : public Error {
 public:
  explicit NotFoundError(const std::string& what) : Error(ErrorCode::not_found, what) {}
};

class ConflictError : public Error {
 public:
  explicit ConflictError(const std::string& what) : Error(ErrorCode::conflict, what) {}
};

class StateError : public Error {
 public:
  explicit StateError(const std::string& what) : Error(ErrorCode::state, what) {}
};

}  // namespace contactsense
