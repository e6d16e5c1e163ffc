#include "gpr/common.hpp"

#include <openssl/evp.h>

#include <cstdio>

namespace gpr
{

  Digest sha256(std::span<const uint8_t> data)
  {
    Digest out{};
    unsigned int len = 0;
    if (!EVP_Digest(data.data(), data.size(), out.data(), &len, EVP_sha256(), nullptr) || len != out.size())
      throw Error("sha256 failed");
    return out;
  }

  std::string hex32(uint32_t v)
  {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", v);
    return buf;
  }

  std::string hexDigest(const Digest& d)
  {
    static const char* digits = "0123456789abcdef";
    std::string s;
    s.reserve(64);
    for (uint8_t b : d)
    {
      s.push_back(digits[b >> 4]);
      s.push_back(digits[b & 15]);
    }
    return s;
  }

  Bytes packI32(std::span<const int32_t> values)
  {
    Bytes out(values.size() * 4);
    for (size_t i = 0; i < values.size(); ++i)
      storeLe32(out.data() + 4 * i, uint32_t(values[i]));
    return out;
  }

  std::vector<int32_t> unpackI32(std::span<const uint8_t> bytes)
  {
    if (bytes.size() % 4)
      throw Error("element buffer length " + std::to_string(bytes.size()) + " is not a multiple of 4");
    std::vector<int32_t> out(bytes.size() / 4);
    for (size_t i = 0; i < out.size(); ++i)
      out[i] = int32_t(loadLe32(bytes.data() + 4 * i));
    return out;
  }

}
