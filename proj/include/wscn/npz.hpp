#pragma once

// NPY arrays and NPZ (zip) archives, plus the wafer dataset archive built
// on them. Readers are fail-closed: any structural problem raises
// ParseError with the byte offset where it was detected.

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "wscn/data.hpp"

namespace wscn {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Bytes = std::vector<std::uint8_t>;

inline Bytes read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  in.seekg(0, std::ios::end);
  const auto size = in.tellg();
  in.seekg(0);
  Bytes b(static_cast<std::size_t>(size));
  if (size > 0 && !in.read(reinterpret_cast<char*>(b.data()), size))
    throw IoError("failed reading '" + path + "'");
  return b;
}

inline void write_file(const std::string& path, const Bytes& b) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

namespace le {
inline void put(Bytes& b, std::uint64_t v, int n) {
  for (int i = 0; i < n; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void u16(Bytes& b, std::uint16_t v) { put(b, v, 2); }
inline void u32(Bytes& b, std::uint32_t v) { put(b, v, 4); }
inline void u64(Bytes& b, std::uint64_t v) { put(b, v, 8); }
}  // namespace le

/// Bounds-checked little-endian reader over a byte span.
class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size, std::uint64_t base = 0)
      : p_(data), n_(size), base_(base) {}
  explicit ByteReader(const Bytes& b) : ByteReader(b.data(), b.size()) {}

  std::size_t pos() const { return pos_; }
  std::uint64_t offset() const { return base_ + pos_; }
  std::size_t remaining() const { return n_ - pos_; }
  void seek(std::size_t p) {
    if (p > n_) throw ParseError("seek past end of data", base_ + n_);
    pos_ = p;
  }
  void need(std::size_t k, const char* what) const {
    if (k > n_ - pos_)
      throw ParseError(std::string("truncated ") + what + ": need " + std::to_string(k) +
                           " bytes, " + std::to_string(n_ - pos_) + " left",
                       base_ + pos_);
  }
  std::uint64_t uint(int k, const char* what) {
    need(static_cast<std::size_t>(k), what);
    std::uint64_t v = 0;
    for (int i = 0; i < k; ++i) v |= std::uint64_t(p_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += static_cast<std::size_t>(k);
    return v;
  }
  std::uint8_t u8(const char* w) { return static_cast<std::uint8_t>(uint(1, w)); }
  std::uint16_t u16(const char* w) { return static_cast<std::uint16_t>(uint(2, w)); }
  std::uint32_t u32(const char* w) { return static_cast<std::uint32_t>(uint(4, w)); }
  std::uint64_t u64(const char* w) { return uint(8, w); }
  const std::uint8_t* take(std::size_t k, const char* what) {
    need(k, what);
    const auto* q = p_ + pos_;
    pos_ += k;
    return q;
  }
  std::string str(std::size_t k, const char* what) {
    const auto* q = take(k, what);
    return std::string(reinterpret_cast<const char*>(q), k);
  }

 private:
  const std::uint8_t* p_;
  std::size_t n_, pos_ = 0;
  std::uint64_t base_;
};

// NPY.

struct NpyArray {
  std::string descr;  // e.g. "|u1", "<i4", "<f4"
  std::vector<std::size_t> shape;
  Bytes data;         // C order, as stored

  std::size_t count() const {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
};

/// Element size for the little-endian / byte-order-free numeric descriptors
/// this library handles; 0 for anything else.
inline std::size_t npy_itemsize(std::string_view d) {
  static const std::map<std::string_view, std::size_t> known{
      {"|u1", 1}, {"|i1", 1}, {"|b1", 1}, {"<u1", 1}, {"<i1", 1},
      {"<u2", 2}, {"<i2", 2}, {"<u4", 4}, {"<i4", 4}, {"<u8", 8},
      {"<i8", 8}, {"<f4", 4}, {"<f8", 8}};
  auto it = known.find(d);
  return it == known.end() ? 0 : it->second;
}

namespace detail {

inline std::string header_value(const std::string& h, const std::string& key, std::uint64_t at) {
  const auto k = h.find("'" + key + "'");
  if (k == std::string::npos) throw ParseError("npy header lacks '" + key + "'", at);
  auto c = h.find(':', k);
  if (c == std::string::npos) throw ParseError("npy header malformed near '" + key + "'", at);
  ++c;
  while (c < h.size() && h[c] == ' ') ++c;
  if (c >= h.size()) throw ParseError("npy header malformed near '" + key + "'", at);
  std::size_t e;
  if (h[c] == '\'') {
    e = h.find('\'', c + 1);
    if (e == std::string::npos) throw ParseError("unterminated string in npy header", at);
    return h.substr(c + 1, e - c - 1);
  }
  if (h[c] == '(') {
    e = h.find(')', c);
    if (e == std::string::npos) throw ParseError("unterminated shape tuple in npy header", at);
    return h.substr(c, e - c + 1);
  }
  e = h.find_first_of(",}", c);
  if (e == std::string::npos) throw ParseError("malformed npy header", at);
  auto v = h.substr(c, e - c);
  while (!v.empty() && v.back() == ' ') v.pop_back();
  return v;
}

inline std::vector<std::size_t> parse_shape(const std::string& t, std::uint64_t at) {
  std::vector<std::size_t> shape;
  std::size_t i = 1;
  while (i < t.size()) {
    while (i < t.size() && (t[i] == ' ' || t[i] == ',')) ++i;
    if (i >= t.size() || t[i] == ')') break;
    std::size_t j = i;
    while (j < t.size() && t[j] >= '0' && t[j] <= '9') ++j;
    if (j == i) throw ParseError("non-numeric extent in npy shape " + t, at);
    if (j - i > 15) throw ParseError("implausible extent in npy shape " + t, at);
    shape.push_back(std::stoull(t.substr(i, j - i)));
    i = j;
  }
  return shape;
}

}  // namespace detail

/// Parses an in-memory .npy file. `base` is added to reported offsets.
inline NpyArray parse_npy(const std::uint8_t* p, std::size_t n, std::uint64_t base = 0) {
  ByteReader r(p, n, base);
  static constexpr std::uint8_t magic[6] = {0x93, 'N', 'U', 'M', 'P', 'Y'};
  const auto* m = r.take(6, "npy magic");
  if (std::memcmp(m, magic, 6) != 0) throw ParseError("not an npy array (bad magic)", base);
  const std::uint8_t major = r.u8("npy version");
  r.u8("npy version");
  std::size_t hlen;
  if (major == 1) hlen = r.u16("npy header length");
  else if (major == 2 || major == 3) hlen = r.u32("npy header length");
  else throw ParseError("unsupported npy version " + std::to_string(major), base + 6);
  const std::uint64_t hat = r.offset();
  const std::string h = r.str(hlen, "npy header");
  NpyArray a;
  a.descr = detail::header_value(h, "descr", hat);
  if (detail::header_value(h, "fortran_order", hat) != "False")
    throw ParseError("fortran-ordered npy arrays are not supported", hat);
  a.shape = detail::parse_shape(detail::header_value(h, "shape", hat), hat);
  const std::size_t item = npy_itemsize(a.descr);
  if (!item) throw ParseError("unsupported npy dtype '" + a.descr + "'", hat);
  std::size_t count = 1;
  for (auto s : a.shape) {
    if (s && count > SIZE_MAX / s) throw ParseError("npy shape overflows", hat);
    count *= s;
  }
  if (count > SIZE_MAX / item) throw ParseError("npy shape overflows", hat);
  const std::size_t bytes = count * item;
  if (r.remaining() != bytes)
    throw ParseError("npy payload holds " + std::to_string(r.remaining()) + " bytes, shape " +
                         detail::header_value(h, "shape", hat) + " needs " + std::to_string(bytes),
                     r.offset());
  const auto* d = r.take(bytes, "npy payload");
  a.data.assign(d, d + bytes);
  return a;
}

inline NpyArray parse_npy(const Bytes& b) { return parse_npy(b.data(), b.size()); }

/// Version 1.0 .npy bytes with the header padded to a 64-byte boundary.
inline Bytes serialize_npy(const NpyArray& a) {
  if (!npy_itemsize(a.descr)) throw IoError("unsupported npy dtype '" + a.descr + "'");
  if (a.data.size() != a.count() * npy_itemsize(a.descr))
    throw IoError("npy payload size does not match shape");
  std::string h = "{'descr': '" + a.descr + "', 'fortran_order': False, 'shape': (";
  for (std::size_t i = 0; i < a.shape.size(); ++i) {
    h += std::to_string(a.shape[i]);
    if (a.shape.size() == 1 || i + 1 < a.shape.size()) h += ",";
    if (i + 1 < a.shape.size()) h += " ";
  }
  h += "), }";
  const std::size_t total = 10 + h.size() + 1;
  h.append((64 - total % 64) % 64, ' ');
  h += '\n';
  Bytes b{0x93, 'N', 'U', 'M', 'P', 'Y', 1, 0};
  le::u16(b, static_cast<std::uint16_t>(h.size()));
  b.insert(b.end(), h.begin(), h.end());
  b.insert(b.end(), a.data.begin(), a.data.end());
  return b;
}

/// Integer element i of an integer array, widened.
inline std::int64_t npy_int(const NpyArray& a, std::size_t i) {
  const std::uint8_t* p = a.data.data();
  const std::string_view d = a.descr;
  auto rd = [&](std::size_t k) {
    std::uint64_t v = 0;
    for (std::size_t b = 0; b < k; ++b) v |= std::uint64_t(p[i * k + b]) << (8 * b);
    return v;
  };
  if (d == "|u1" || d == "<u1" || d == "|b1") return p[i];
  if (d == "|i1" || d == "<i1") return static_cast<std::int8_t>(p[i]);
  if (d == "<u2") return static_cast<std::int64_t>(rd(2));
  if (d == "<i2") return static_cast<std::int16_t>(rd(2));
  if (d == "<u4") return static_cast<std::int64_t>(rd(4));
  if (d == "<i4") return static_cast<std::int32_t>(rd(4));
  if (d == "<i8" || d == "<u8") return static_cast<std::int64_t>(rd(8));
  throw IoError("array of dtype '" + a.descr + "' is not an integer array");
}

inline bool npy_is_integer(const NpyArray& a) {
  return a.descr.size() == 3 && (a.descr[1] == 'u' || a.descr[1] == 'i' || a.descr[1] == 'b');
}

// ZIP container (stored or deflated members, zip64 sizes accepted).

namespace detail {

inline Bytes inflate_raw(const std::uint8_t* src, std::size_t n, std::size_t expected,
                         std::uint64_t at) {
  Bytes out(expected);
  z_stream zs{};
  if (inflateInit2(&zs, -MAX_WBITS) != Z_OK) throw ParseError("zlib init failed", at);
  zs.next_in = const_cast<Bytef*>(src);
  zs.avail_in = static_cast<uInt>(n);
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(expected);
  const int rc = inflate(&zs, Z_FINISH);
  const auto produced = zs.total_out;
  inflateEnd(&zs);
  if (rc != Z_STREAM_END || produced != expected)
    throw ParseError("corrupt deflate stream", at);
  return out;
}

inline std::uint32_t crc(const std::uint8_t* p, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(0L, p, static_cast<uInt>(n)));
}

}  // namespace detail

/// Member name -> uncompressed bytes. CRCs are verified.
inline std::map<std::string, Bytes> read_zip(const Bytes& z) {
  const std::size_t n = z.size();
  if (n < 22) throw ParseError("archive too short for a zip end record", n);
  std::size_t eocd = std::string::npos;
  for (std::size_t i = n - 22 + 1; i-- > 0 && n - i <= 22 + 65535;) {
    if (z[i] == 0x50 && z[i + 1] == 0x4b && z[i + 2] == 0x05 && z[i + 3] == 0x06) {
      eocd = i;
      break;
    }
  }
  if (eocd == std::string::npos) throw ParseError("zip end-of-central-directory record not found", n);
  ByteReader e(z.data() + eocd, n - eocd, eocd);
  e.u32("eocd");
  e.u16("eocd");
  e.u16("eocd");
  e.u16("eocd");
  std::uint64_t entries = e.u16("eocd entry count");
  std::uint64_t cd_size = e.u32("eocd directory size");
  std::uint64_t cd_off = e.u32("eocd directory offset");
  if ((entries == 0xFFFF || cd_off == 0xFFFFFFFF || cd_size == 0xFFFFFFFF) && eocd >= 20) {
    ByteReader loc(z.data() + eocd - 20, 20, eocd - 20);
    if (loc.u32("zip64 locator") == 0x07064b50) {
      loc.u32("zip64 locator");
      const std::uint64_t rec = loc.u64("zip64 locator");
      if (rec >= n) throw ParseError("zip64 end record offset out of range", eocd - 20);
      ByteReader r64(z.data() + rec, n - rec, rec);
      if (r64.u32("zip64 end record") != 0x06064b50) throw ParseError("bad zip64 end record", rec);
      r64.u64("zip64 end record");
      r64.u16("zip64 end record");
      r64.u16("zip64 end record");
      r64.u32("zip64 end record");
      r64.u32("zip64 end record");
      r64.u64("zip64 end record");
      entries = r64.u64("zip64 entry count");
      cd_size = r64.u64("zip64 directory size");
      cd_off = r64.u64("zip64 directory offset");
    }
  }
  if (cd_off > n || cd_size > n - cd_off) throw ParseError("zip central directory out of range", eocd);

  std::map<std::string, Bytes> out;
  ByteReader cd(z.data() + cd_off, static_cast<std::size_t>(cd_size), cd_off);
  for (std::uint64_t k = 0; k < entries; ++k) {
    const std::uint64_t at = cd.offset();
    if (cd.u32("central directory entry") != 0x02014b50) throw ParseError("bad central directory signature", at);
    cd.u16("cd");
    cd.u16("cd");
    const std::uint16_t flags = cd.u16("cd flags");
    const std::uint16_t method = cd.u16("cd method");
    cd.u16("cd");
    cd.u16("cd");
    const std::uint32_t crc = cd.u32("cd crc");
    std::uint64_t csize = cd.u32("cd compressed size");
    std::uint64_t usize = cd.u32("cd size");
    const std::uint16_t name_len = cd.u16("cd"), extra_len = cd.u16("cd"), comment_len = cd.u16("cd");
    cd.u16("cd");
    cd.u16("cd");
    cd.u32("cd");
    std::uint64_t local = cd.u32("cd local offset");
    const std::string name = cd.str(name_len, "member name");
    ByteReader ex(cd.take(extra_len, "extra field"), extra_len, cd.offset() - extra_len);
    while (ex.remaining() >= 4) {
      const std::uint16_t id = ex.u16("extra"), len = ex.u16("extra");
      ByteReader f(ex.take(len, "extra field body"), len, ex.offset() - len);
      if (id == 0x0001) {
        if (usize == 0xFFFFFFFF) usize = f.u64("zip64 size");
        if (csize == 0xFFFFFFFF) csize = f.u64("zip64 compressed size");
        if (local == 0xFFFFFFFF) local = f.u64("zip64 offset");
      }
    }
    cd.take(comment_len, "member comment");
    if (flags & 1) throw ParseError("encrypted zip member '" + name + "'", at);
    if (method != 0 && method != 8)
      throw ParseError("zip member '" + name + "' uses unsupported method " + std::to_string(method), at);
    if (local > n) throw ParseError("local header offset out of range", at);
    ByteReader lh(z.data() + local, n - local, local);
    if (lh.u32("local header") != 0x04034b50) throw ParseError("bad local header signature", local);
    lh.take(22, "local header");
    const std::uint16_t ln = lh.u16("local header"), le_ = lh.u16("local header");
    lh.take(ln, "local name");
    lh.take(le_, "local extra");
    const std::uint64_t data_at = lh.offset();
    const auto* payload = lh.take(static_cast<std::size_t>(csize), "member data");
    if (usize > (std::uint64_t{1} << 40)) throw ParseError("implausible member size", at);
    Bytes data = method == 0 ? Bytes(payload, payload + csize)
                             : detail::inflate_raw(payload, static_cast<std::size_t>(csize),
                                                   static_cast<std::size_t>(usize), data_at);
    if (data.size() != usize) throw ParseError("zip member '" + name + "' size mismatch", data_at);
    if (detail::crc(data.data(), data.size()) != crc)
      throw ParseError("crc mismatch in zip member '" + name + "'", data_at);
    out[name] = std::move(data);
  }
  return out;
}

/// Stored (uncompressed) zip with fixed timestamps, so identical members give
/// identical bytes. Members are written in map order.
inline Bytes write_zip(const std::map<std::string, Bytes>& members) {
  Bytes out, cd;
  for (const auto& [name, data] : members) {
    if (data.size() >= 0xFFFFFFFFull || out.size() >= 0xFFFFFFFFull)
      throw IoError("zip member '" + name + "' too large for this writer");
    const std::uint32_t crc = detail::crc(data.data(), data.size());
    const auto off = static_cast<std::uint32_t>(out.size());
    le::u32(out, 0x04034b50);
    le::u16(out, 20);
    le::u16(out, 0);
    le::u16(out, 0);
    le::u16(out, 0);
    le::u16(out, 0x21);  // 1980-01-01
    le::u32(out, crc);
    le::u32(out, static_cast<std::uint32_t>(data.size()));
    le::u32(out, static_cast<std::uint32_t>(data.size()));
    le::u16(out, static_cast<std::uint16_t>(name.size()));
    le::u16(out, 0);
    out.insert(out.end(), name.begin(), name.end());
    out.insert(out.end(), data.begin(), data.end());

    le::u32(cd, 0x02014b50);
    le::u16(cd, 20);
    le::u16(cd, 20);
    le::u16(cd, 0);
    le::u16(cd, 0);
    le::u16(cd, 0);
    le::u16(cd, 0x21);
    le::u32(cd, crc);
    le::u32(cd, static_cast<std::uint32_t>(data.size()));
    le::u32(cd, static_cast<std::uint32_t>(data.size()));
    le::u16(cd, static_cast<std::uint16_t>(name.size()));
    le::u16(cd, 0);
    le::u16(cd, 0);
    le::u16(cd, 0);
    le::u16(cd, 0);
    le::u32(cd, 0);
    le::u32(cd, off);
    cd.insert(cd.end(), name.begin(), name.end());
  }
  const auto cd_off = static_cast<std::uint32_t>(out.size());
  out.insert(out.end(), cd.begin(), cd.end());
  le::u32(out, 0x06054b50);
  le::u16(out, 0);
  le::u16(out, 0);
  le::u16(out, static_cast<std::uint16_t>(members.size()));
  le::u16(out, static_cast<std::uint16_t>(members.size()));
  le::u32(out, static_cast<std::uint32_t>(cd.size()));
  le::u32(out, cd_off);
  le::u16(out, 0);
  return out;
}

// Wafer dataset archive: member arr_0 holds N x 52 x 52 die states, arr_1
// holds N x 38 one-hot labels. Label arrays N x 8 of per-defect flags are
// also accepted and mapped through the class table.

namespace detail {
inline const NpyArray& member(const std::map<std::string, NpyArray>& arrays, std::size_t k) {
  auto it = arrays.begin();
  std::advance(it, static_cast<std::ptrdiff_t>(k));
  return it->second;
}
}  // namespace detail

inline Dataset parse_dataset_archive(const Bytes& z) {
  std::map<std::string, NpyArray> arrays;
  std::uint64_t at = 0;
  {
    auto members = read_zip(z);
    for (auto& [name, bytes] : members) {
      try {
        arrays[name] = parse_npy(bytes);
      } catch (const ParseError& e) {
        throw ParseError("member '" + name + "': " + e.what(), e.offset());
      }
    }
  }
  if (arrays.size() < 2)
    throw ParseError("dataset archive needs two arrays, found " + std::to_string(arrays.size()), at);
  const NpyArray* maps = arrays.count("arr_0.npy") ? &arrays["arr_0.npy"] : &detail::member(arrays, 0);
  const NpyArray* labels = arrays.count("arr_1.npy") ? &arrays["arr_1.npy"] : &detail::member(arrays, 1);
  if (!npy_is_integer(*maps) || !npy_is_integer(*labels))
    throw DataError("dataset arrays must have integer dtypes");
  if (maps->shape.size() != 3 || maps->shape[1] != kGrid || maps->shape[2] != kGrid)
    throw DataError("wafer array must be N x 52 x 52");
  const std::size_t n = maps->shape[0];
  if (labels->shape.size() != 2 || labels->shape[0] != n)
    throw DataError("label array must be N x 38 with N = " + std::to_string(n));
  const std::size_t w = labels->shape[1];
  if (w != kNumClasses && w != kNumPrimitives)
    throw DataError("label array width " + std::to_string(w) + " is neither 38 nor 8");
  Dataset d;
  d.maps.resize(n);
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < kGrid * kGrid; ++k) {
      const auto v = npy_int(*maps, i * kGrid * kGrid + k);
      if (v < 0 || v > 2)
        throw DataError("sample " + std::to_string(i) + ": die state " + std::to_string(v) +
                        " outside {0,1,2}");
      d.maps[i].grid[k] = static_cast<std::uint8_t>(v);
    }
    if (w == kNumClasses) {
      std::size_t ones = 0, hot = 0;
      for (std::size_t c = 0; c < w; ++c) {
        const auto v = npy_int(*labels, i * w + c);
        if (v != 0 && v != 1) { ones = 2; break; }
        if (v == 1) ++ones, hot = c;
      }
      if (ones != 1) throw DataError("label row " + std::to_string(i) + " is not one-hot");
      d.labels[i] = hot;
    } else {
      DefectSpec spec;
      for (std::size_t c = 0; c < w; ++c) {
        const auto v = npy_int(*labels, i * w + c);
        if (v != 0 && v != 1)
          throw DataError("label row " + std::to_string(i) + " has a non-binary defect flag");
        if (v) spec.push_back(static_cast<Primitive>(c));
      }
      try {
        d.labels[i] = class_index(spec);
      } catch (const DataError&) {
        throw DataError("label row " + std::to_string(i) + " is not one of the 38 classes");
      }
    }
  }
  return d;
}

inline Dataset load_dataset_archive(const std::string& path) {
  return parse_dataset_archive(read_file(path));
}

inline Bytes serialize_dataset_archive(const Dataset& d) {
  NpyArray maps{"|u1", {d.size(), kGrid, kGrid}, {}};
  maps.data.reserve(d.size() * kGrid * kGrid);
  for (const auto& m : d.maps) maps.data.insert(maps.data.end(), m.grid.begin(), m.grid.end());
  NpyArray labels{"|u1", {d.size(), kNumClasses}, Bytes(d.size() * kNumClasses, 0)};
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.labels[i] >= kNumClasses) throw DataError("label " + std::to_string(d.labels[i]) + " out of range");
    labels.data[i * kNumClasses + d.labels[i]] = 1;
  }
  return write_zip({{"arr_0.npy", serialize_npy(maps)}, {"arr_1.npy", serialize_npy(labels)}});
}

inline void save_dataset_archive(const Dataset& d, const std::string& path) {
  write_file(path, serialize_dataset_archive(d));
}

/// Reads one wafer map from a .npy file holding a 52 x 52 integer grid.
inline WaferMap load_wafer_npy(const std::string& path) {
  const NpyArray a = parse_npy(read_file(path));
  if (!npy_is_integer(a) || a.shape.size() != 2 || a.shape[0] != kGrid || a.shape[1] != kGrid)
    throw DataError("'" + path + "' must hold a 52 x 52 integer array");
  WaferMap m;
  for (std::size_t k = 0; k < kGrid * kGrid; ++k) {
    const auto v = npy_int(a, k);
    if (v < 0 || v > 2) throw DataError("'" + path + "': die state " + std::to_string(v) + " outside {0,1,2}");
    m.grid[k] = static_cast<std::uint8_t>(v);
  }
  return m;
}

inline void save_wafer_npy(const WaferMap& m, const std::string& path) {
  write_file(path, serialize_npy({"|u1", {kGrid, kGrid}, Bytes(m.grid.begin(), m.grid.end())}));
}

}  // namespace wscn
