#include "gpr/recfmt.hpp"

#include <zlib.h>

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iterator>

namespace gpr
{

  namespace
  {
    constexpr uint8_t kMagic[4] = {'G', 'P', 'R', 'R'};
    constexpr size_t kChecksumBytes = 32;
    constexpr size_t kMaxLabel = 64;

    class Writer
    {
    public:
      void u8(uint8_t v) { out.push_back(v); }
      void u16(uint16_t v) { u8(uint8_t(v)); u8(uint8_t(v >> 8)); }
      void u32(uint32_t v) { for (int i = 0; i < 4; ++i) u8(uint8_t(v >> (8 * i))); }
      void u64(uint64_t v) { for (int i = 0; i < 8; ++i) u8(uint8_t(v >> (8 * i))); }
      void bytes(std::span<const uint8_t> b) { out.insert(out.end(), b.begin(), b.end()); }
      void str(const std::string& s)
      {
        if (s.size() > 255)
          throw Error("string field longer than 255 bytes");
        u8(uint8_t(s.size()));
        bytes({reinterpret_cast<const uint8_t*>(s.data()), s.size()});
      }
      Bytes out;
    };

    class Reader
    {
    public:
      Reader(std::span<const uint8_t> b, size_t end) : b_(b), end_(end) {}

      size_t pos() const { return pos_; }
      size_t left() const { return end_ - pos_; }

      void need(size_t n, const char* what)
      {
        if (left() < n)
          throw FormatError(FormatErrorCode::Truncated, pos_, std::string("truncated ") + what);
      }
      uint8_t u8(const char* what = "u8")
      {
        need(1, what);
        return b_[pos_++];
      }
      uint16_t u16(const char* what = "u16")
      {
        need(2, what);
        uint16_t v = uint16_t(b_[pos_] | b_[pos_ + 1] << 8);
        pos_ += 2;
        return v;
      }
      uint32_t u32(const char* what = "u32")
      {
        need(4, what);
        uint32_t v = loadLe32(b_.data() + pos_);
        pos_ += 4;
        return v;
      }
      uint64_t u64(const char* what = "u64")
      {
        uint64_t lo = u32(what);
        return lo | uint64_t(u32(what)) << 32;
      }
      std::span<const uint8_t> bytes(size_t n, const char* what)
      {
        need(n, what);
        auto s = b_.subspan(pos_, n);
        pos_ += n;
        return s;
      }
      std::string str(const char* what)
      {
        uint8_t n = u8(what);
        auto s = bytes(n, what);
        return std::string(s.begin(), s.end());
      }

    private:
      std::span<const uint8_t> b_;
      size_t end_;
      size_t pos_ = 0;
    };

    void encodeAction(Writer& w, const ReplayAction& a)
    {
      w.u8(uint8_t(a.kind()));
      w.u64(a.minIntervalNs);
      w.u64(a.observedIntervalNs);
      std::visit(
          [&](const auto& b) {
            using T = std::decay_t<decltype(b)>;
            if constexpr (std::is_same_v<T, RegWrite>)
            {
              w.str(b.reg);
              w.u32(b.value);
            }
            else if constexpr (std::is_same_v<T, RegRead>)
            {
              w.str(b.reg);
              w.u32(b.expect);
              w.u8(uint8_t(b.cls));
            }
            else if constexpr (std::is_same_v<T, RegReadWait>)
            {
              w.str(b.reg);
              w.u32(b.mask);
              w.u32(b.expect);
              w.u32(b.maxPolls);
            }
            else if constexpr (std::is_same_v<T, WaitIrq>)
              w.u32(b.expectRawstat);
            else if constexpr (std::is_same_v<T, MapGpuMem>)
            {
              w.u32(b.va);
              w.u32(b.len);
              w.u8(b.perm);
            }
            else if constexpr (std::is_same_v<T, UnmapGpuMem>)
            {
              w.u32(b.va);
              w.u32(b.len);
            }
            else if constexpr (std::is_same_v<T, LoadMemDump>)
            {
              w.u32(b.dumpId);
              w.u32(b.va);
            }
          },
          a.body);
    }

    ReplayAction decodeAction(Reader& r)
    {
      size_t at = r.pos();
      uint8_t tag = r.u8("action tag");
      if (tag < 1 || tag > 7)
        throw FormatError(FormatErrorCode::UnknownTag, at, "unknown action tag " + std::to_string(tag));
      ReplayAction a;
      a.minIntervalNs = r.u64("min interval");
      a.observedIntervalNs = r.u64("observed interval");
      switch (ActionKind(tag))
      {
        case ActionKind::RegWrite:
        {
          RegWrite b;
          b.reg = r.str("register name");
          b.value = r.u32("value");
          a.body = std::move(b);
          break;
        }
        case ActionKind::RegRead:
        {
          RegRead b;
          b.reg = r.str("register name");
          b.expect = r.u32("expect");
          size_t cp = r.pos();
          uint8_t c = r.u8("state class");
          if (c > 2)
            throw FormatError(FormatErrorCode::BadField, cp, "bad state class " + std::to_string(c));
          b.cls = StateClass(c);
          a.body = std::move(b);
          break;
        }
        case ActionKind::RegReadWait:
        {
          RegReadWait b;
          b.reg = r.str("register name");
          b.mask = r.u32("mask");
          b.expect = r.u32("expect");
          b.maxPolls = r.u32("max polls");
          a.body = std::move(b);
          break;
        }
        case ActionKind::WaitIrq:
          a.body = WaitIrq{r.u32("rawstat")};
          break;
        case ActionKind::MapGpuMem:
        {
          MapGpuMem b;
          b.va = r.u32("va");
          b.len = r.u32("len");
          size_t pp = r.pos();
          b.perm = r.u8("perm");
          if (b.perm > 0xf)
            throw FormatError(FormatErrorCode::BadField, pp, "perm bits above nibble");
          a.body = b;
          break;
        }
        case ActionKind::UnmapGpuMem:
        {
          UnmapGpuMem b;
          b.va = r.u32("va");
          b.len = r.u32("len");
          a.body = b;
          break;
        }
        case ActionKind::LoadMemDump:
        {
          LoadMemDump b;
          b.dumpId = r.u32("dump id");
          b.va = r.u32("va");
          a.body = b;
          break;
        }
      }
      return a;
    }
  }

  std::string_view toString(FormatErrorCode c)
  {
    switch (c)
    {
      case FormatErrorCode::BadMagic: return "BadMagic";
      case FormatErrorCode::UnsupportedVersion: return "UnsupportedVersion";
      case FormatErrorCode::Truncated: return "Truncated";
      case FormatErrorCode::UnknownTag: return "UnknownTag";
      case FormatErrorCode::BadField: return "BadField";
      case FormatErrorCode::TrailingBytes: return "TrailingBytes";
      case FormatErrorCode::BadChecksum: return "BadChecksum";
      case FormatErrorCode::BadPayload: return "BadPayload";
      case FormatErrorCode::BadReference: return "BadReference";
    }
    return "?";
  }

  FormatError::FormatError(FormatErrorCode code, size_t offset, const std::string& detail)
      : Error(std::string(toString(code)) + " at offset " + std::to_string(offset) + ": " + detail),
        code_(code), offset_(offset)
  {
  }

  Bytes deflateRaw(std::span<const uint8_t> raw)
  {
    z_stream z{};
    if (deflateInit2(&z, Z_BEST_COMPRESSION, Z_DEFLATED, -15, 9, Z_DEFAULT_STRATEGY) != Z_OK)
      throw Error("deflateInit2 failed");
    Bytes out(deflateBound(&z, uLong(raw.size())));
    z.next_in = const_cast<Bytef*>(raw.data());
    z.avail_in = uInt(raw.size());
    z.next_out = out.data();
    z.avail_out = uInt(out.size());
    int rc = deflate(&z, Z_FINISH);
    deflateEnd(&z);
    if (rc != Z_STREAM_END)
      throw Error("deflate failed");
    out.resize(z.total_out);
    return out;
  }

  Bytes inflateRaw(std::span<const uint8_t> payload, uint32_t rawLen)
  {
    z_stream z{};
    if (inflateInit2(&z, -15) != Z_OK)
      throw Error("inflateInit2 failed");
    Bytes out(size_t(rawLen) + 1);
    z.next_in = const_cast<Bytef*>(payload.data());
    z.avail_in = uInt(payload.size());
    z.next_out = out.data();
    z.avail_out = uInt(out.size());
    int rc = inflate(&z, Z_FINISH);
    size_t produced = z.total_out;
    inflateEnd(&z);
    if (rc != Z_STREAM_END || produced != rawLen)
      throw FormatError(FormatErrorCode::BadPayload, 0,
                        "payload does not inflate to " + std::to_string(rawLen) + " bytes");
    out.resize(rawLen);
    return out;
  }

  Bytes encode(const Recording& rec)
  {
    const auto& h = rec.header;
    if (h.label.size() > kMaxLabel)
      throw Error("label longer than 64 bytes");
    Writer w;
    w.bytes(kMagic);
    w.u16(h.version);
    w.u8(uint8_t(h.granularity));
    w.u8(0);
    w.u32(h.skuId);
    w.bytes(h.registerMapHash);
    w.u64(h.createdUnix);
    w.str(h.label);

    w.u32(uint32_t(rec.actions.size()));
    for (const auto& a : rec.actions)
      encodeAction(w, a);

    w.u32(uint32_t(rec.dumps.size()));
    for (const auto& d : rec.dumps)
    {
      w.u32(d.id);
      w.u32(d.va);
      w.u32(d.rawLen);
      w.u8(uint8_t(d.origin));
      w.u32(uint32_t(d.payload.size()));
      w.bytes(d.payload);
    }

    w.u32(uint32_t(rec.io.size()));
    for (const auto& io : rec.io)
    {
      w.u8(uint8_t(io.role));
      w.u32(io.va);
      w.u32(io.len);
      w.u8(uint8_t(io.mode));
    }

    Digest sum = sha256(w.out);
    w.bytes(sum);
    return std::move(w.out);
  }

  Recording decode(std::span<const uint8_t> bytes)
  {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
      throw FormatError(FormatErrorCode::BadMagic, 0, "not a recording file");
    if (bytes.size() < 6)
      throw FormatError(FormatErrorCode::Truncated, 4, "truncated version");
    uint16_t version = uint16_t(bytes[4] | bytes[5] << 8);
    if (version != RecordingHeader::kVersion)
      throw FormatError(FormatErrorCode::UnsupportedVersion, 4, "version " + std::to_string(version));

    size_t body = bytes.size() >= kChecksumBytes ? bytes.size() - kChecksumBytes : 0;
    // Parse against the full buffer so truncation offsets are reported
    // where the data actually stops; the trailer is checked afterwards.
    Reader r(bytes, bytes.size());
    Recording rec;
    auto& h = rec.header;
    r.bytes(4, "magic");
    h.version = r.u16("version");
    size_t gp = r.pos();
    uint8_t gran = r.u8("granularity");
    if (gran > 1)
      throw FormatError(FormatErrorCode::BadField, gp, "bad granularity " + std::to_string(gran));
    h.granularity = Granularity(gran);
    size_t rp = r.pos();
    if (r.u8("reserved") != 0)
      throw FormatError(FormatErrorCode::BadField, rp, "reserved byte not zero");
    h.skuId = r.u32("sku id");
    auto mh = r.bytes(32, "register map hash");
    std::copy(mh.begin(), mh.end(), h.registerMapHash.begin());
    h.createdUnix = r.u64("created");
    size_t lp = r.pos();
    h.label = r.str("label");
    if (h.label.size() > kMaxLabel)
      throw FormatError(FormatErrorCode::BadField, lp, "label longer than 64 bytes");

    uint32_t nActions = r.u32("action count");
    // Each action needs at least 21 bytes; reject absurd counts early.
    if (uint64_t(nActions) * 21 > r.left())
      throw FormatError(FormatErrorCode::Truncated, r.pos(), "action count exceeds file size");
    rec.actions.reserve(nActions);
    for (uint32_t i = 0; i < nActions; ++i)
      rec.actions.push_back(decodeAction(r));

    uint32_t nDumps = r.u32("dump count");
    if (uint64_t(nDumps) * 17 > r.left())
      throw FormatError(FormatErrorCode::Truncated, r.pos(), "dump count exceeds file size");
    std::vector<size_t> payloadAt;
    for (uint32_t i = 0; i < nDumps; ++i)
    {
      MemDump d;
      d.id = r.u32("dump id");
      d.va = r.u32("dump va");
      d.rawLen = r.u32("dump raw length");
      size_t op = r.pos();
      uint8_t origin = r.u8("dump origin");
      if (origin > 1)
        throw FormatError(FormatErrorCode::BadField, op, "bad dump origin " + std::to_string(origin));
      d.origin = DumpOrigin(origin);
      uint32_t plen = r.u32("payload length");
      payloadAt.push_back(r.pos());
      auto p = r.bytes(plen, "dump payload");
      d.payload.assign(p.begin(), p.end());
      rec.dumps.push_back(std::move(d));
    }

    uint32_t nIo = r.u32("io count");
    if (uint64_t(nIo) * 10 > r.left())
      throw FormatError(FormatErrorCode::Truncated, r.pos(), "io count exceeds file size");
    for (uint32_t i = 0; i < nIo; ++i)
    {
      IoDescriptor io;
      size_t p = r.pos();
      uint8_t role = r.u8("io role");
      if (role > 1)
        throw FormatError(FormatErrorCode::BadField, p, "bad io role");
      io.role = IoRole(role);
      io.va = r.u32("io va");
      io.len = r.u32("io len");
      p = r.pos();
      uint8_t mode = r.u8("io mode");
      if (mode > 2)
        throw FormatError(FormatErrorCode::BadField, p, "bad io mode");
      io.mode = IoMode(mode);
      rec.io.push_back(io);
    }

    if (r.left() < kChecksumBytes)
      throw FormatError(FormatErrorCode::Truncated, r.pos(), "truncated checksum");
    if (r.left() > kChecksumBytes)
      throw FormatError(FormatErrorCode::TrailingBytes, r.pos(), "unexpected bytes before checksum");
    Digest sum = sha256(bytes.first(body));
    if (!std::equal(sum.begin(), sum.end(), bytes.begin() + body))
      throw FormatError(FormatErrorCode::BadChecksum, body, "checksum mismatch");

    for (size_t i = 0; i < rec.dumps.size(); ++i)
    {
      const auto& d = rec.dumps[i];
      if (d.va & (kPageSize - 1))
        throw FormatError(FormatErrorCode::BadField, payloadAt[i], "dump va not page aligned");
      try
      {
        (void)inflateRaw(d.payload, d.rawLen);
      }
      catch (const FormatError& e)
      {
        throw FormatError(FormatErrorCode::BadPayload, payloadAt[i], "dump " + std::to_string(d.id) + " payload corrupt");
      }
      for (size_t j = 0; j < i; ++j)
        if (rec.dumps[j].id == d.id)
          throw FormatError(FormatErrorCode::BadReference, payloadAt[i], "duplicate dump id " + std::to_string(d.id));
    }
    for (const auto& a : rec.actions)
      if (auto* l = a.as<LoadMemDump>(); l && !rec.findDump(l->dumpId))
        throw FormatError(FormatErrorCode::BadReference, body, "LoadMemDump references missing dump " + std::to_string(l->dumpId));
    return rec;
  }

  Bytes readFile(const std::string& path)
  {
    std::ifstream f(path, std::ios::binary);
    if (!f)
      throw Error("cannot open " + path);
    return Bytes(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  }

  void writeFile(const std::string& path, std::span<const uint8_t> bytes)
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f)
      throw Error("cannot write " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!f)
      throw Error("short write to " + path);
  }

  uint64_t defaultCreatedUnix()
  {
    if (const char* s = std::getenv("SOURCE_DATE_EPOCH"))
    {
      char* end = nullptr;
      unsigned long long v = std::strtoull(s, &end, 10);
      if (end && *end == 0 && end != s)
        return v;
    }
    return 0;
  }

}
