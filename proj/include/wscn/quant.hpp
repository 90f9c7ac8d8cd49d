#pragma once

// Post-training INT8 quantization: batch-norm folding, per-tensor affine
// int8 weights, min-max activation calibration, fake-quantized inference
// and export in the checkpoint container.

#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "wscn/checkpoint.hpp"
#include "wscn/data.hpp"
#include "wscn/model.hpp"

namespace wscn {

class QuantError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kDegenerateWidening = 1e-3;

/// scale = (max - min) / 255, zero_point = round(-128 - min / scale) clamped
/// to int8. The range is first extended to contain 0 so that zero (padding,
/// ReLU floor) is exactly representable; a degenerate range is widened by
/// 1e-3 on each side.
inline QuantParams choose_params(double lo, double hi) {
  if (!(std::isfinite(lo) && std::isfinite(hi)) || lo > hi)
    throw QuantError("invalid calibration range [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  QuantParams q;
  q.min = lo;
  q.max = hi;
  if (hi - lo == 0) {
    lo -= kDegenerateWidening;
    hi += kDegenerateWidening;
  }
  lo = std::min(lo, 0.0);
  hi = std::max(hi, 0.0);
  q.scale = (hi - lo) / 255.0;
  q.zero_point = static_cast<std::int32_t>(std::clamp(std::round(-128.0 - lo / q.scale), -128.0, 127.0));
  return q;
}

inline std::int8_t quantize_value(double x, const QuantParams& q) {
  const double v = std::round(x / q.scale) + q.zero_point;
  return static_cast<std::int8_t>(std::clamp(v, -128.0, 127.0));
}

inline double dequantize_value(std::int8_t v, const QuantParams& q) {
  return (static_cast<double>(v) - q.zero_point) * q.scale;
}

template <class T>
std::vector<std::int8_t> quantize_tensor(const Tensor<T>& t, const QuantParams& q) {
  std::vector<std::int8_t> out(t.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = quantize_value(t[i], q);
  return out;
}

inline Tensor<float> dequantize(const std::vector<std::int8_t>& v, const Shape& shape,
                                const QuantParams& q) {
  Tensor<float> t(shape);
  if (t.numel() != v.size()) throw ShapeError("dequantize: payload does not match shape " + to_string(shape));
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<float>(dequantize_value(v[i], q));
  return t;
}

/// Round trip through int8 in place.
inline void fake_quantize(Tensor<float>& t, const QuantParams& q) {
  auto d = t.data();
  const float inv = static_cast<float>(1.0 / q.scale), s = static_cast<float>(q.scale);
  const float zp = static_cast<float>(q.zero_point);
  for (auto& x : d) {
    const float v = std::clamp(std::nearbyint(x * inv) + zp, -128.0f, 127.0f);
    x = (v - zp) * s;
  }
}

// Folded network: every batch norm merged into the convolution before it.

struct FoldedLayer {
  std::string name;
  Tensor<float> weight, bias;
};

struct FoldedNetwork {
  WscnConfig config;
  std::map<std::string, FoldedLayer> layers;

  const FoldedLayer& at(const std::string& n) const {
    auto it = layers.find(n);
    if (it == layers.end()) throw QuantError("folded network lacks layer '" + n + "'");
    return it->second;
  }
};

namespace detail {

/// y = gamma (x - mean) / sqrt(var + eps) + beta folded into conv weight
/// rows (output channel = leading axis, or axis 1 for transpose kernels).
inline void fold_bn(Tensor<float>& w, Tensor<float>& b, const BatchNormParams<float>& bn,
                    bool out_axis_one, double eps = 1e-3) {
  const std::size_t oc = bn.gamma.numel();
  std::vector<double> s(oc);
  for (std::size_t c = 0; c < oc; ++c)
    s[c] = bn.gamma[c] / std::sqrt(static_cast<double>(bn.running_var[c]) + eps);
  if (!out_axis_one) {
    const std::size_t per = w.numel() / oc;
    for (std::size_t c = 0; c < oc; ++c)
      for (std::size_t i = 0; i < per; ++i) w[c * per + i] = static_cast<float>(w[c * per + i] * s[c]);
  } else {
    const std::size_t ic = w.dim(0), per = w.numel() / (ic * oc);
    for (std::size_t i = 0; i < ic; ++i)
      for (std::size_t c = 0; c < oc; ++c)
        for (std::size_t k = 0; k < per; ++k) {
          auto& v = w[(i * oc + c) * per + k];
          v = static_cast<float>(v * s[c]);
        }
  }
  for (std::size_t c = 0; c < oc; ++c)
    b[c] = static_cast<float>((b[c] - bn.running_mean[c]) * s[c] + bn.beta[c]);
}

inline Tensor<float> detached(const Tensor<float>& t) {
  Tensor<float> c = t.clone();
  c.set_requires_grad(false);
  return c;
}

}  // namespace detail

inline FoldedNetwork fold_batch_norm(const WscnModel<float>& m) {
  FoldedNetwork f;
  f.config = m.config();
  for (std::size_t b = 0; b < 5; ++b) {
    const auto& blk = m.encoder_blocks()[b];
    const std::string p = "enc" + std::to_string(b + 1);
    FoldedLayer conv{p + ".conv", detail::detached(blk.conv.weight), detail::detached(blk.conv.bias)};
    detail::fold_bn(conv.weight, conv.bias, blk.bn1, false);
    FoldedLayer dw{p + ".depthwise", detail::detached(blk.sep.depthwise), {}};
    FoldedLayer pw{p + ".pointwise", detail::detached(blk.sep.pointwise), detail::detached(blk.sep.bias)};
    detail::fold_bn(pw.weight, pw.bias, blk.bn2, false);
    f.layers[conv.name] = conv;
    f.layers[dw.name] = dw;
    f.layers[pw.name] = pw;
  }
  for (std::size_t k = 0; k < 4; ++k) {
    const auto& up = m.decoder_blocks()[k];
    FoldedLayer t{"dec" + std::to_string(k + 1) + ".tconv", detail::detached(up.tconv.weight),
                  detail::detached(up.tconv.bias)};
    detail::fold_bn(t.weight, t.bias, up.bn, true);
    f.layers[t.name] = t;
  }
  f.layers["head"] = {"head", detail::detached(m.mask_head().weight), detail::detached(m.mask_head().bias)};
  f.layers["cls.hidden"] = {"cls.hidden", detail::detached(m.classifier_hidden().weight),
                            detail::detached(m.classifier_hidden().bias)};
  f.layers["cls.out"] = {"cls.out", detail::detached(m.classifier_out().weight),
                         detail::detached(m.classifier_out().bias)};
  f.layers["proj"] = {"proj", detail::detached(m.projection().weight), detail::detached(m.projection().bias)};
  return f;
}

using SiteHook = std::function<void(const std::string&, Tensor<float>&)>;

/// Inference through a folded network. `hook` sees (and may rewrite) every
/// activation site in order.
inline ForwardOutput<float> folded_forward(const FoldedNetwork& f, const Tensor<float>& input,
                                           const SiteHook& hook = {}) {
  const std::size_t s = f.config.input_size;
  if (input.rank() != 4 || input.dim(1) != 1 || input.dim(2) != s || input.dim(3) != s)
    throw ShapeError("model input must be [N,1," + std::to_string(s) + "," + std::to_string(s) +
                     "], got " + to_string(input.shape()));
  auto site = [&](const std::string& n, Tensor<float>& t) {
    if (hook) hook(n, t);
  };
  Tensor<float> x = input.clone();
  site("input", x);
  std::array<Tensor<float>, 5> skips;
  Tensor<float> h = x;
  for (std::size_t b = 0; b < 5; ++b) {
    const std::string p = "enc" + std::to_string(b + 1);
    const auto& c = f.at(p + ".conv");
    h = relu<float>(nullptr, conv2d<float>(nullptr, h, c.weight, c.bias));
    site(p + ".conv", h);
    h = depthwise_conv2d<float>(nullptr, h, f.at(p + ".depthwise").weight);
    site(p + ".depthwise", h);
    const auto& pw = f.at(p + ".pointwise");
    h = relu<float>(nullptr, conv2d<float>(nullptr, h, pw.weight, pw.bias, 1, 0));
    site(p + ".out", h);
    skips[b] = h;
    if (b < 4) h = pool2d<float>(nullptr, h, PoolMode::Max);
  }
  ForwardOutput<float> out;
  Tensor<float> g = global_avg_pool<float>(nullptr, skips[4]);
  site("gap", g);
  {
    const auto& hid = f.at("cls.hidden");
    Tensor<float> c = relu<float>(nullptr, dense<float>(nullptr, g, hid.weight, hid.bias));
    site("cls.hidden", c);
    const auto& o = f.at("cls.out");
    Tensor<float> logits = dense<float>(nullptr, c, o.weight, o.bias);
    site("cls.logits", logits);
    out.class_probs = softmax<float>(nullptr, logits);
    site("cls.probs", out.class_probs);
  }
  {
    const auto& pj = f.at("proj");
    Tensor<float> z = dense<float>(nullptr, g, pj.weight, pj.bias);
    site("proj", z);
    out.embedding = l2_normalize<float>(nullptr, z);
    site("embedding", out.embedding);
  }
  h = skips[4];
  for (std::size_t k = 0; k < 4; ++k) {
    const std::string p = "dec" + std::to_string(k + 1);
    const auto& t = f.at(p + ".tconv");
    h = relu<float>(nullptr, transpose_conv2d<float>(nullptr, h, t.weight, t.bias));
    site(p + ".up", h);
    h = concat_channels<float>(nullptr, h, skips[3 - k]);
  }
  const auto& hd = f.at("head");
  Tensor<float> logits = conv2d<float>(nullptr, h, hd.weight, hd.bias, 1, 0);
  site("head.logits", logits);
  out.mask = sigmoid<float>(nullptr, logits);
  site("mask", out.mask);
  return out;
}

// Calibration.

struct Range {
  double min = std::numeric_limits<double>::infinity();
  double max = -std::numeric_limits<double>::infinity();
  void add(const Tensor<float>& t) {
    for (float v : t.data()) {
      min = std::min(min, static_cast<double>(v));
      max = std::max(max, static_cast<double>(v));
    }
  }
};

/// Observed per-site ranges over `images` [N,1,S,S] in chunks of `batch`.
inline std::map<std::string, Range> observe_ranges(const FoldedNetwork& f, const Tensor<float>& images,
                                                   std::size_t batch = 16) {
  std::map<std::string, Range> ranges;
  const std::size_t n = images.dim(0), plane = images.numel() / std::max<std::size_t>(n, 1);
  for (std::size_t s = 0; s < n; s += batch) {
    const std::size_t b = std::min(batch, n - s);
    Shape shp = images.shape();
    shp[0] = b;
    Tensor<float> chunk(shp, std::vector<float>(images.ptr() + s * plane, images.ptr() + (s + b) * plane));
    folded_forward(f, chunk, [&](const std::string& site, Tensor<float>& t) { ranges[site].add(t); });
  }
  return ranges;
}

struct QuantizedLayer {
  Shape weight_shape, bias_shape;
  std::vector<std::int8_t> weight;
  QuantParams weight_q;
  std::vector<std::int32_t> bias;  // symmetric, zero point 0
  QuantParams bias_q;
};

/// Int8 weights plus activation quantization parameters for every site.
struct QuantModel {
  WscnConfig config;
  std::map<std::string, QuantizedLayer> layers;
  std::map<std::string, QuantParams> activations;
  std::vector<std::string> float_fallback;  // sites left in float; empty when fully integer

  /// Folded network holding the dequantized weights.
  FoldedNetwork dequantized() const {
    FoldedNetwork f;
    f.config = config;
    for (const auto& [name, l] : layers) {
      FoldedLayer fl{name, dequantize(l.weight, l.weight_shape, l.weight_q), {}};
      if (!l.bias_shape.empty()) {
        fl.bias = Tensor<float>(l.bias_shape);
        for (std::size_t i = 0; i < l.bias.size(); ++i)
          fl.bias[i] = static_cast<float>(l.bias[i] * l.bias_q.scale);
      }
      f.layers[name] = std::move(fl);
    }
    return f;
  }
};

/// Calibrates activation ranges on the representative images [N,1,S,S] and
/// quantizes the batch-norm-folded weights.
inline QuantModel calibrate(const WscnModel<float>& model, const Tensor<float>& representative,
                            std::size_t batch = 16) {
  if (representative.rank() != 4 || representative.dim(0) == 0)
    throw QuantError("calibration needs at least one representative sample");
  const FoldedNetwork folded = fold_batch_norm(model);
  QuantModel q;
  q.config = model.config();
  for (const auto& [name, l] : folded.layers) {
    QuantizedLayer ql;
    ql.weight_shape = l.weight.shape();
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (float v : l.weight.data()) lo = std::min(lo, double(v)), hi = std::max(hi, double(v));
    ql.weight_q = choose_params(lo, hi);
    ql.weight = quantize_tensor(l.weight, ql.weight_q);
    if (l.bias.defined()) {
      ql.bias_shape = l.bias.shape();
      double m = 0;
      for (float v : l.bias.data()) m = std::max(m, std::abs(double(v)));
      ql.bias_q.scale = m > 0 ? m / 2147483647.0 : 1.0;
      ql.bias_q.min = -m;
      ql.bias_q.max = m;
      for (float v : l.bias.data())
        ql.bias.push_back(static_cast<std::int32_t>(std::llround(v / ql.bias_q.scale)));
    }
    q.layers[name] = std::move(ql);
  }
  // Activation ranges come from the network as it will actually run: with
  // int8 weights.
  const auto ranges = observe_ranges(q.dequantized(), representative, batch);
  for (const auto& [site, r] : ranges) q.activations[site] = choose_params(r.min, r.max);
  return q;
}

/// Dequantized-int8 weights with every activation site fake-quantized.
inline ForwardOutput<float> quantized_forward(const QuantModel& q, const Tensor<float>& x) {
  const FoldedNetwork f = q.dequantized();
  return folded_forward(f, x, [&](const std::string& site, Tensor<float>& t) {
    auto it = q.activations.find(site);
    if (it == q.activations.end()) throw QuantError("no quantization parameters for site '" + site + "'");
    fake_quantize(t, it->second);
  });
}

// Export.

inline Checkpoint int8_checkpoint(const QuantModel& q) {
  Checkpoint c;
  c.config = config_text(q.config);
  for (const auto& [name, l] : q.layers) {
    c.tensors.push_back(to_record(name + ".weight", StoredType::I8, l.weight_shape, l.weight.data()));
    c.quant.push_back({"w:" + name + ".weight", l.weight_q});
    if (!l.bias_shape.empty()) {
      c.tensors.push_back(to_record(name + ".bias", StoredType::I32, l.bias_shape, l.bias.data()));
      c.quant.push_back({"w:" + name + ".bias", l.bias_q});
    }
  }
  for (const auto& [site, p] : q.activations) c.quant.push_back({"a:" + site, p});
  c.meta = format_kv({{"format", "int8"}});
  return c;
}

inline QuantModel quant_model_from_checkpoint(const Checkpoint& c) {
  if (parse_kv(c.meta).count("format") == 0 || parse_kv(c.meta).at("format") != "int8")
    throw CheckpointError("checkpoint is not an int8 export");
  QuantModel q;
  q.config = config_from_text(c.config);
  std::map<std::string, QuantParams> params;
  for (const auto& e : c.quant) {
    if (e.site.rfind("a:", 0) == 0) q.activations[e.site.substr(2)] = e.params;
    else if (e.site.rfind("w:", 0) == 0) params[e.site.substr(2)] = e.params;
    else throw CheckpointError("unknown quantization entry '" + e.site + "'");
  }
  auto need = [&](const std::string& n) {
    auto it = params.find(n);
    if (it == params.end()) throw CheckpointError("int8 export lacks parameters for '" + n + "'");
    return it->second;
  };
  for (const auto& t : c.tensors) {
    const auto dot = t.name.rfind('.');
    const std::string layer = t.name.substr(0, dot), kind = t.name.substr(dot + 1);
    auto& l = q.layers[layer];
    if (kind == "weight" && t.type == StoredType::I8) {
      l.weight_shape = t.shape;
      l.weight = record_values<std::int8_t>(t);
      l.weight_q = need(t.name);
    } else if (kind == "bias" && t.type == StoredType::I32) {
      l.bias_shape = t.shape;
      l.bias = record_values<std::int32_t>(t);
      l.bias_q = need(t.name);
    } else {
      throw CheckpointError("unexpected tensor '" + t.name + "' in int8 export");
    }
  }
  return q;
}

}  // namespace wscn
