// Copyright 2026 The retarget Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace retarget {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes that cannot be combined.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid retargeting request (target width, gamma, ...).
class SpecError : public Error {
 public:
  using Error::Error;
};

/// Attention rows whose total is too small to normalize.
class DegeneracyError : public Error {
 public:
  using Error::Error;
};

/// An internal invariant (shift-map bounds, monotone mapping) failed.
class InvariantError : public Error {
 public:
  using Error::Error;
};

/// Bad magic, unsupported version or unsupported file flavour.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Truncated or incomplete serialized data.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace retarget
