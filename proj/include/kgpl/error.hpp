// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace kgpl {

enum class ErrorCode {
  ShapeMismatch,
  InvalidLabel,
  NonFinite,
  OutOfRange,
  MissingPlaceholder,
  EncoderFailure,
  IOFailure,
  KeyNotFound,
  ChecksumMismatch,
  BadConfig,
  ChannelMismatch,
  EmptyMask,
  EmptyForeground,
  BadSpec,
  UnsupportedFormat,
  BadRatios,
  Divergence,
  MissingAttributes,
  MismatchedClasses,
};

std::string_view to_string(ErrorCode code);

// Every recoverable failure in the library is reported through this type; the
// code is what callers and tests branch on, the message is for humans.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace kgpl
