#pragma once

#include <stdexcept>
#include <string>

namespace wmhseg {

/// Invalid configuration, flags, or argument combinations.
class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Tensor or raster shapes that do not agree.
class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Filesystem failures (missing, unreadable, unwritable).
class IoError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

enum class FormatErrorKind { BadMagic, UnsupportedVersion, Truncated, SizeMismatch, BadMetadata };

/// A data file exists but its bytes do not follow the expected layout.
class FormatError : public IoError {
public:
  FormatError(FormatErrorKind kind, const std::string& what) : IoError(what), kind_(kind) {}
  FormatErrorKind kind() const noexcept { return kind_; }

private:
  FormatErrorKind kind_;
};

/// Training produced a non-finite loss.
class NumericalError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

}  // namespace wmhseg
