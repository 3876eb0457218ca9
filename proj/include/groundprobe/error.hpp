#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace groundprobe {

/// Base for every error raised by the library. The CLI maps these to exit code 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A caller broke a documented precondition (empty input, out-of-range layer, ...).
class PreconditionError : public Error {
public:
    using Error::Error;
};

/// Shapes that must agree do not.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Input values are unusable (non-finite numbers, missing labels, ...).
class DataError : public Error {
public:
    using Error::Error;
};

/// Unrecognized magic bytes, header, or version.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Truncated or checksum-mismatched file.
class CorruptionError : public Error {
public:
    CorruptionError(const std::string& what, std::uint64_t offset)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Visual and FullInfo traces that cannot be paired.
class PairingError : public Error {
public:
    using Error::Error;
};

/// An LM/VLM client call failed; callers may retry.
class ClientError : public Error {
public:
    using Error::Error;
};

}  // namespace groundprobe
