// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace edora {

/// Base class for all errors raised by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Shape or extent mismatch between operands.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& msg) : Error(msg) {}
};

/// An extent that must be divisible by a part count is not.
class IndivisibleError : public DimensionError {
 public:
  IndivisibleError(const std::string& what, std::int64_t extent, std::int64_t parts)
      : DimensionError(what + ": extent " + std::to_string(extent) +
                       " is not divisible by " + std::to_string(parts)),
        extent(extent),
        parts(parts) {}

  std::int64_t extent;
  std::int64_t parts;
};

/// Invalid configuration or argument value.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& msg) : Error(msg) {}
};

/// Violation of an operation contract (e.g. non-scalar loss).
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& msg) : Error(msg) {}
};

/// Requested operation is not supported for the given inputs.
class UnsupportedError : public Error {
 public:
  explicit UnsupportedError(const std::string& msg) : Error(msg) {}
};

/// Malformed on-disk data. Carries the byte offset of the defect.
class ParseError : public Error {
 public:
  ParseError(const std::string& msg, std::uint64_t offset)
      : Error(msg + " (at byte " + std::to_string(offset) + ")"), offset(offset) {}

  std::uint64_t offset;
};

/// Filesystem failure. Carries the offending path in the message.
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace edora
