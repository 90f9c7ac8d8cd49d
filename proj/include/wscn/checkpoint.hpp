#pragma once

// Binary checkpoint container.
//
//   "WSCN" | u32 version
//   u32 n | config text (key=value lines)
//   u32 count | per tensor: u16 n, name, u8 dtype, u8 rank, u32 extents[rank], payload
//   u32 n | metadata text (key=value lines)
//   u32 count | per quant site: u16 n, name, f64 scale, i32 zero_point, f64 min, f64 max
//   u32 crc32 of all preceding bytes
//
// All integers and payloads are little-endian.

#include <cstring>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "wscn/model.hpp"
#include "wscn/npz.hpp"
#include "wscn/optim.hpp"

namespace wscn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class StoredType : std::uint8_t { F32 = 1, F64 = 2, I8 = 3, I32 = 4 };

inline std::size_t stored_size(StoredType t) {
  switch (t) {
    case StoredType::F32: return 4;
    case StoredType::F64: return 8;
    case StoredType::I8: return 1;
    case StoredType::I32: return 4;
  }
  return 0;
}

struct TensorRecord {
  std::string name;
  StoredType type = StoredType::F32;
  Shape shape;
  Bytes payload;
  bool operator==(const TensorRecord&) const = default;
};

struct QuantParams {
  double scale = 1;
  std::int32_t zero_point = 0;
  double min = 0, max = 0;
  bool operator==(const QuantParams&) const = default;
};

struct QuantEntry {
  std::string site;
  QuantParams params;
  bool operator==(const QuantEntry&) const = default;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string config;
  std::vector<TensorRecord> tensors;
  std::string meta;
  std::vector<QuantEntry> quant;

  const TensorRecord* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

template <class T>
TensorRecord to_record(const std::string& name, StoredType type, const Shape& shape,
                       const T* values) {
  static_assert(std::endian::native == std::endian::little, "payloads are stored little-endian");
  TensorRecord r{name, type, shape, {}};
  const std::size_t n = numel(shape);
  if (stored_size(type) != sizeof(T)) throw CheckpointError("record element size mismatch");
  r.payload.resize(n * sizeof(T));
  if (n) std::memcpy(r.payload.data(), values, n * sizeof(T));
  return r;
}

template <class T>
std::vector<T> record_values(const TensorRecord& r) {
  if (stored_size(r.type) != sizeof(T))
    throw CheckpointError("tensor '" + r.name + "' has an unexpected element type");
  std::vector<T> v(r.payload.size() / sizeof(T));
  if (!v.empty()) std::memcpy(v.data(), r.payload.data(), r.payload.size());
  return v;
}

inline Bytes serialize_checkpoint(const Checkpoint& c) {
  Bytes b{'W', 'S', 'C', 'N'};
  le::u32(b, c.version);
  auto text = [&](const std::string& s) {
    le::u32(b, static_cast<std::uint32_t>(s.size()));
    b.insert(b.end(), s.begin(), s.end());
  };
  text(c.config);
  le::u32(b, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    if (t.payload.size() != numel(t.shape) * stored_size(t.type))
      throw CheckpointError("tensor '" + t.name + "' payload does not match its shape");
    le::u16(b, static_cast<std::uint16_t>(t.name.size()));
    b.insert(b.end(), t.name.begin(), t.name.end());
    b.push_back(static_cast<std::uint8_t>(t.type));
    b.push_back(static_cast<std::uint8_t>(t.shape.size()));
    for (auto e : t.shape) le::u32(b, static_cast<std::uint32_t>(e));
    b.insert(b.end(), t.payload.begin(), t.payload.end());
  }
  text(c.meta);
  le::u32(b, static_cast<std::uint32_t>(c.quant.size()));
  for (const auto& q : c.quant) {
    le::u16(b, static_cast<std::uint16_t>(q.site.size()));
    b.insert(b.end(), q.site.begin(), q.site.end());
    std::uint64_t bits;
    std::memcpy(&bits, &q.params.scale, 8);
    le::u64(b, bits);
    le::u32(b, static_cast<std::uint32_t>(q.params.zero_point));
    std::memcpy(&bits, &q.params.min, 8);
    le::u64(b, bits);
    std::memcpy(&bits, &q.params.max, 8);
    le::u64(b, bits);
  }
  le::u32(b, detail::crc(b.data(), b.size()));
  return b;
}

inline Checkpoint parse_checkpoint(const Bytes& b) {
  ByteReader r(b);
  if (b.size() < 4 || std::memcmp(r.take(4, "magic"), "WSCN", 4) != 0)
    throw ParseError("not a checkpoint (bad magic)", 0);
  Checkpoint c;
  c.version = r.u32("version");
  if (c.version != kCheckpointVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(c.version) +
                         " (expected " + std::to_string(kCheckpointVersion) + ")",
                     4);
  if (b.size() < 12) throw ParseError("truncated checkpoint", b.size());
  const std::uint32_t stored_crc = static_cast<std::uint32_t>(b[b.size() - 4]) |
                                   static_cast<std::uint32_t>(b[b.size() - 3]) << 8 |
                                   static_cast<std::uint32_t>(b[b.size() - 2]) << 16 |
                                   static_cast<std::uint32_t>(b[b.size() - 1]) << 24;
  ByteReader body(b.data(), b.size() - 4);
  body.seek(8);
  auto text = [&](const char* what) { return body.str(body.u32(what), what); };
  c.config = text("config");
  const std::uint32_t nt = body.u32("tensor count");
  for (std::uint32_t k = 0; k < nt; ++k) {
    const std::uint64_t at = body.offset();
    TensorRecord t;
    t.name = body.str(body.u16("name length"), "tensor name");
    const std::uint8_t type = body.u8("dtype");
    if (type < 1 || type > 4) throw ParseError("tensor '" + t.name + "' has unknown dtype tag " + std::to_string(type), at);
    t.type = static_cast<StoredType>(type);
    const std::uint8_t rank = body.u8("rank");
    std::size_t count = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      t.shape.push_back(body.u32("extent"));
      count *= t.shape.back();
      if (count > b.size()) throw ParseError("tensor '" + t.name + "' larger than the file", at);
    }
    const auto* p = body.take(count * stored_size(t.type), "tensor payload");
    t.payload.assign(p, p + count * stored_size(t.type));
    c.tensors.push_back(std::move(t));
  }
  c.meta = text("metadata");
  const std::uint32_t nq = body.u32("quant count");
  for (std::uint32_t k = 0; k < nq; ++k) {
    QuantEntry q;
    q.site = body.str(body.u16("site length"), "site name");
    std::uint64_t bits = body.u64("scale");
    std::memcpy(&q.params.scale, &bits, 8);
    q.params.zero_point = static_cast<std::int32_t>(body.u32("zero point"));
    bits = body.u64("min");
    std::memcpy(&q.params.min, &bits, 8);
    bits = body.u64("max");
    std::memcpy(&q.params.max, &bits, 8);
    c.quant.push_back(std::move(q));
  }
  if (body.remaining()) throw ParseError("trailing bytes after checkpoint body", body.offset());
  if (detail::crc(b.data(), b.size() - 4) != stored_crc)
    throw ParseError("checkpoint checksum mismatch", b.size() - 4);
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  write_file(path, serialize_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return parse_checkpoint(read_file(path));
}

// key=value text.

using KeyValues = std::map<std::string, std::string>;

inline std::string format_kv(const KeyValues& kv) {
  std::string s;
  for (const auto& [k, v] : kv) s += k + "=" + v + "\n";
  return s;
}

inline KeyValues parse_kv(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("malformed key=value line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

namespace detail {
inline std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}
inline std::vector<std::size_t> split_sizes(const std::string& s) {
  std::vector<std::size_t> v;
  std::istringstream in(s);
  std::string tok;
  while (std::getline(in, tok, ',')) v.push_back(std::stoull(tok));
  return v;
}
inline std::string exact(double d) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", d);
  return buf;
}
}  // namespace detail

inline std::string config_text(const WscnConfig& c) {
  return format_kv({{"encoder_filters", detail::join(c.encoder_filters)},
                    {"decoder_filters", detail::join(c.decoder_filters)},
                    {"input_size", std::to_string(c.input_size)},
                    {"num_classes", std::to_string(c.num_classes)},
                    {"classifier_hidden", std::to_string(c.classifier_hidden)},
                    {"embedding_dim", std::to_string(c.embedding_dim)},
                    {"dropout_rate", detail::exact(c.dropout_rate)},
                    {"bn_momentum", detail::exact(c.bn_momentum)}});
}

inline WscnConfig config_from_text(const std::string& text) {
  const auto kv = parse_kv(text);
  auto get = [&](const char* k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw CheckpointError(std::string("checkpoint config lacks '") + k + "'");
    return it->second;
  };
  WscnConfig c;
  try {
    c.encoder_filters = detail::split_sizes(get("encoder_filters"));
    c.decoder_filters = detail::split_sizes(get("decoder_filters"));
    c.input_size = std::stoull(get("input_size"));
    c.num_classes = std::stoull(get("num_classes"));
    c.classifier_hidden = std::stoull(get("classifier_hidden"));
    c.embedding_dim = std::stoull(get("embedding_dim"));
    c.dropout_rate = std::stod(get("dropout_rate"));
    c.bn_momentum = std::stod(get("bn_momentum"));
  } catch (const std::logic_error& e) {
    if (dynamic_cast<const CheckpointError*>(&e)) throw;
    throw CheckpointError(std::string("malformed checkpoint config: ") + e.what());
  }
  c.validate();
  return c;
}

/// Model tensors (parameters and running statistics) as f32 records, plus
/// optional Adam moments as f64 records under "adam.m/" and "adam.v/".
inline Checkpoint make_checkpoint(const WscnModel<float>& model, const Adam<float>* opt = nullptr,
                                  const KeyValues& meta = {}) {
  Checkpoint c;
  c.config = config_text(model.config());
  for (const auto& nt : model.tensors())
    c.tensors.push_back(to_record(nt.name, StoredType::F32, nt.tensor.shape(), nt.tensor.ptr()));
  KeyValues m = meta;
  m["frozen_encoder"] = model.encoder_frozen() ? "1" : "0";
  if (opt) {
    m["adam_steps"] = std::to_string(opt->steps());
    for (std::size_t k = 0; k < opt->params().size(); ++k) {
      const auto& p = opt->params()[k];
      c.tensors.push_back(to_record("adam.m/" + p.name(), StoredType::F64, p.shape(), opt->first_moments()[k].data()));
      c.tensors.push_back(to_record("adam.v/" + p.name(), StoredType::F64, p.shape(), opt->second_moments()[k].data()));
    }
  }
  c.meta = format_kv(m);
  return c;
}

/// Rebuilds a float model from a checkpoint. Every model tensor must be
/// present with a matching shape.
inline WscnModel<float> model_from_checkpoint(const Checkpoint& c) {
  auto model = WscnModel<float>::build(config_from_text(c.config), 0);
  for (const auto& nt : model.tensors()) {
    const auto* r = c.find(nt.name);
    if (!r) throw CheckpointError("checkpoint lacks tensor '" + nt.name + "'");
    if (r->type != StoredType::F32 || r->shape != nt.tensor.shape())
      throw CheckpointError("checkpoint tensor '" + nt.name + "' has shape " + to_string(r->shape) +
                            ", model expects " + to_string(nt.tensor.shape()));
    auto v = record_values<float>(*r);
    auto dst = nt.tensor;
    std::copy(v.begin(), v.end(), dst.ptr());
  }
  const auto kv = parse_kv(c.meta);
  if (auto it = kv.find("frozen_encoder"); it != kv.end() && it->second == "1") model.freeze_encoder();
  return model;
}

/// Restores Adam moments saved by make_checkpoint into an optimizer built
/// over the same parameters.
inline void restore_optimizer(const Checkpoint& c, Adam<float>& opt) {
  const auto kv = parse_kv(c.meta);
  auto it = kv.find("adam_steps");
  if (it == kv.end()) throw CheckpointError("checkpoint carries no optimizer state");
  for (std::size_t k = 0; k < opt.params().size(); ++k) {
    const auto& p = opt.params()[k];
    const auto* m = c.find("adam.m/" + p.name());
    const auto* v = c.find("adam.v/" + p.name());
    if (!m || !v || m->shape != p.shape() || v->shape != p.shape())
      throw CheckpointError("optimizer state for '" + p.name() + "' missing or misshapen");
    opt.first_moments()[k] = record_values<double>(*m);
    opt.second_moments()[k] = record_values<double>(*v);
  }
  opt.set_steps(std::stoull(it->second));
}

/// Bytes of model weight payload (optimizer state excluded).
inline std::size_t weight_payload_bytes(const Checkpoint& c) {
  std::size_t n = 0;
  for (const auto& t : c.tensors)
    if (t.name.rfind("adam.", 0) != 0) n += t.payload.size();
  return n;
}

}  // namespace wscn
