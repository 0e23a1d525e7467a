#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace repavit {

/// Shape or length mismatch between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Index outside [0, extent).
struct BoundsError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

/// Operation not allowed in the object's current state (frozen/unfrozen BN,
/// already-reparameterized model, ...).
struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Invalid configuration or argument value.
struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A train step was asked to estimate statistics from a single row.
struct DegenerateBatchError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Requested configuration is valid but not supported by this code path.
struct UnsupportedError : std::logic_error {
  using std::logic_error::logic_error;
};

// Weight-file errors.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct VersionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CorruptionError : std::runtime_error {
  CorruptionError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace repavit
