#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "gpr/common.hpp"
#include "gpr/recording.hpp"

namespace gpr
{

  enum class FormatErrorCode : uint8_t
  {
    BadMagic,
    UnsupportedVersion,
    Truncated,
    UnknownTag,
    BadField,
    TrailingBytes,
    BadChecksum,
    BadPayload,
    BadReference,
  };

  std::string_view toString(FormatErrorCode c);

  /// Structured decode failure; offset is the byte position in the file.
  class FormatError : public Error
  {
  public:
    FormatError(FormatErrorCode code, size_t offset, const std::string& detail);
    FormatErrorCode code() const { return code_; }
    size_t offset() const { return offset_; }

  private:
    FormatErrorCode code_;
    size_t offset_;
  };

  /// Deterministic little-endian serialization with SHA-256 trailer.
  Bytes encode(const Recording& rec);

  /// Inverse of encode. Throws FormatError only.
  Recording decode(std::span<const uint8_t> bytes);

  /// Raw DEFLATE (RFC 1951), best compression.
  Bytes deflateRaw(std::span<const uint8_t> raw);
  /// Throws FormatError(BadPayload) unless the stream inflates to exactly
  /// @p rawLen bytes.
  Bytes inflateRaw(std::span<const uint8_t> payload, uint32_t rawLen);

  Bytes readFile(const std::string& path);
  void writeFile(const std::string& path, std::span<const uint8_t> bytes);

  /// SOURCE_DATE_EPOCH when set, else 0, so builds are reproducible.
  uint64_t defaultCreatedUnix();

}
