#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "wscn/ops.hpp"

namespace wscn {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct WscnConfig {
  std::vector<std::size_t> encoder_filters{8, 16, 16, 32, 64};
  std::vector<std::size_t> decoder_filters{32, 16, 16, 8};
  std::size_t input_size = 224;
  std::size_t num_classes = 38;
  std::size_t classifier_hidden = 64;
  std::size_t embedding_dim = 128;
  double dropout_rate = 0.2;
  double bn_momentum = 0.9;

  void validate() const {
    if (encoder_filters.size() != 5)
      throw ConfigError("encoder filter schedule must have 5 entries");
    if (decoder_filters.size() != 4)
      throw ConfigError("decoder filter schedule must have 4 entries");
    for (auto f : encoder_filters)
      if (f == 0) throw ConfigError("encoder filters must be positive");
    for (auto f : decoder_filters)
      if (f == 0) throw ConfigError("decoder filters must be positive");
    if (input_size == 0 || input_size % 16)
      throw ConfigError("input size must be a positive multiple of 16, got " +
                        std::to_string(input_size));
    if (num_classes < 2) throw ConfigError("need at least two classes");
    if (embedding_dim == 0 || classifier_hidden == 0)
      throw ConfigError("head widths must be positive");
    if (!(dropout_rate >= 0 && dropout_rate < 1))
      throw ConfigError("dropout rate must lie in [0,1)");
    if (!(bn_momentum > 0 && bn_momentum < 1))
      throw ConfigError("batch-norm momentum must lie in (0,1)");
  }
};

enum class ParamGroup { Encoder, Projection, Decoder, Classifier };

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  ParamGroup group;
  bool is_buffer;  // batch-norm running statistics; never trained
};

template <class T>
struct ForwardOutput {
  Tensor<T> class_probs;  // [N, num_classes]
  Tensor<T> mask;         // [N, 1, S, S]
  Tensor<T> embedding;    // [N, embedding_dim]
};

/// Called with (site name, activation) at every quantizable activation.
template <class T>
using ActivationObserver = std::function<void(const std::string&, const Tensor<T>&)>;

template <class T>
struct ConvParams {
  Tensor<T> weight, bias;
};

template <class T>
struct BatchNormParams {
  Tensor<T> gamma, beta, running_mean, running_var;
};

template <class T>
struct SeparableParams {
  Tensor<T> depthwise, pointwise, bias;
};

/// conv3x3 -> BN -> ReLU -> dropout -> separable3x3 -> BN -> ReLU
template <class T>
struct ConvBlock {
  ConvParams<T> conv;
  BatchNormParams<T> bn1;
  SeparableParams<T> sep;
  BatchNormParams<T> bn2;
};

/// transpose-conv3x3 (stride 2) -> BN -> ReLU, then concatenated with a skip.
template <class T>
struct UpBlock {
  ConvParams<T> tconv;
  BatchNormParams<T> bn;
};

template <class T>
struct DenseParams {
  Tensor<T> weight, bias;
};

template <class T>
class WscnModel {
 public:
  static WscnModel build(const WscnConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    WscnModel m;
    m.cfg_ = cfg;
    m.dropout_rng_ = Rng(derive_seed(seed, 0xd40f));
    Rng init(derive_seed(seed, 0x1417));

    std::size_t in_c = 1;
    for (std::size_t b = 0; b < 5; ++b) {
      const std::size_t f = cfg.encoder_filters[b];
      const std::string p = "enc" + std::to_string(b + 1);
      auto& blk = m.enc_[b];
      blk.conv = m.make_conv(p + ".conv", f, in_c, 3, ParamGroup::Encoder, init);
      blk.bn1 = m.make_bn(p + ".bn1", f, ParamGroup::Encoder);
      blk.sep.depthwise = m.make_param(p + ".sep.depthwise", {f, 1, 3, 3}, ParamGroup::Encoder);
      he_uniform(blk.sep.depthwise, init, 9);
      blk.sep.pointwise = m.make_param(p + ".sep.pointwise", {f, f, 1, 1}, ParamGroup::Encoder);
      he_uniform(blk.sep.pointwise, init, f);
      blk.sep.bias = m.make_param(p + ".sep.bias", {f}, ParamGroup::Encoder);
      blk.bn2 = m.make_bn(p + ".bn2", f, ParamGroup::Encoder);
      in_c = f;
    }
    // Up block k consumes the previous concat and pairs with the encoder
    // block of matching resolution (enc4, enc3, enc2, enc1).
    for (std::size_t k = 0; k < 4; ++k) {
      const std::size_t f = cfg.decoder_filters[k];
      const std::string p = "dec" + std::to_string(k + 1);
      auto& up = m.dec_[k];
      up.tconv.weight = m.make_param(p + ".tconv.weight", {in_c, f, 3, 3}, ParamGroup::Decoder);
      he_uniform(up.tconv.weight, init, in_c * 9);
      up.tconv.bias = m.make_param(p + ".tconv.bias", {f}, ParamGroup::Decoder);
      up.bn = m.make_bn(p + ".bn", f, ParamGroup::Decoder);
      in_c = f + cfg.encoder_filters[3 - k];
    }
    m.head_ = m.make_conv("head", 1, in_c, 1, ParamGroup::Decoder, init);

    const std::size_t feat = cfg.encoder_filters[4];
    m.cls_hidden_ = m.make_dense("cls.hidden", feat, cfg.classifier_hidden, ParamGroup::Classifier, init);
    m.cls_out_ = m.make_dense("cls.out", cfg.classifier_hidden, cfg.num_classes, ParamGroup::Classifier, init);
    m.proj_ = m.make_dense("proj", feat, cfg.embedding_dim, ParamGroup::Projection, init);
    return m;
  }

  WscnModel(WscnModel&&) noexcept = default;
  WscnModel& operator=(WscnModel&&) noexcept = default;
  // Copies would alias parameter storage; use clone().
  WscnModel(const WscnModel&) = delete;
  WscnModel& operator=(const WscnModel&) = delete;

  /// Deep copy of all tensors, trainability, freeze state and dropout stream.
  WscnModel clone() const {
    WscnModel m = build(cfg_, 0);
    m.copy_values_from(*this);
    m.dropout_rng_ = dropout_rng_;
    return m;
  }

  /// Copies every tensor value and trainability flag from a model built with
  /// the same configuration.
  void copy_values_from(const WscnModel& other) {
    if (other.registry_.size() != registry_.size())
      throw ConfigError("cannot copy between models of different topology");
    for (std::size_t i = 0; i < registry_.size(); ++i) {
      auto& dst = registry_[i].tensor;
      const auto& src = other.registry_[i].tensor;
      if (dst.shape() != src.shape())
        throw ShapeError("tensor " + registry_[i].name + " shape mismatch");
      std::copy(src.data().begin(), src.data().end(), dst.data().begin());
      dst.set_requires_grad(src.requires_grad());
    }
    encoder_frozen_ = other.encoder_frozen_;
  }

  const WscnConfig& config() const { return cfg_; }

  /// Every parameter and buffer, in a fixed order. Handles alias the model.
  const std::vector<NamedTensor<T>>& tensors() const { return registry_; }

  std::vector<Tensor<T>> trainable_parameters() const {
    std::vector<Tensor<T>> out;
    for (const auto& nt : registry_)
      if (!nt.is_buffer && nt.tensor.requires_grad()) out.push_back(nt.tensor);
    return out;
  }

  Tensor<T> find(const std::string& name) const {
    for (const auto& nt : registry_)
      if (nt.name == name) return nt.tensor;
    throw std::out_of_range("no tensor named '" + name + "'");
  }

  /// Marks encoder and projection head non-trainable. While frozen the
  /// encoder runs with running batch-norm statistics and without dropout.
  void freeze_encoder() { set_encoder_trainable(false); }
  void unfreeze_encoder() { set_encoder_trainable(true); }
  bool encoder_frozen() const { return encoder_frozen_; }

  void set_dropout_seed(std::uint64_t seed) { dropout_rng_ = Rng(seed); }

  /// Replaces running batch-norm statistics with the plain mean of the batch
  /// statistics over `count` inputs, computed with dropout off. Dropout ahead
  /// of a normalization inflates the variance it sees during training, so
  /// the training-time estimates shrink every eval-mode activation.
  /// Statistics of a frozen encoder are left as they are.
  void recalibrate_batch_norm(std::size_t count,
                              const std::function<Tensor<T>(std::size_t)>& input,
                              bool encoder_only = false) {
    const WscnConfig saved = cfg_;
    struct Restore {
      WscnConfig& cfg;
      const WscnConfig& saved;
      ~Restore() { cfg = saved; }
    } restore{cfg_, saved};
    cfg_.dropout_rate = 0;
    for (std::size_t k = 0; k < count; ++k) {
      cfg_.bn_momentum = static_cast<double>(k) / static_cast<double>(k + 1);
      const Tensor<T> x = input(k);
      auto enc = run_encoder(x, Mode::Train, nullptr);
      if (!encoder_only) decode_mask(enc, Mode::Train, nullptr);
    }
  }

  struct EncoderOutput {
    std::array<Tensor<T>, 5> blocks;  // pre-pool outputs of blocks 1..5
  };

  EncoderOutput run_encoder(const Tensor<T>& x, Mode mode, Tape<T>* tape,
                            const ActivationObserver<T>* obs = nullptr) {
    check_input(x);
    const Mode m = encoder_frozen_ ? Mode::Eval : mode;
    note(obs, "input", x);
    EncoderOutput out;
    Tensor<T> h = x;
    for (std::size_t b = 0; b < 5; ++b) {
      const std::string p = "enc" + std::to_string(b + 1);
      auto& blk = enc_[b];
      h = conv2d(tape, h, blk.conv.weight, blk.conv.bias);
      h = relu(tape, norm(tape, h, blk.bn1, m));
      note(obs, p + ".conv", h);
      h = dropout(tape, h, cfg_.dropout_rate, m, dropout_rng_);
      h = depthwise_conv2d(tape, h, blk.sep.depthwise);
      note(obs, p + ".depthwise", h);
      h = conv2d(tape, h, blk.sep.pointwise, blk.sep.bias, 1, 0);
      h = relu(tape, norm(tape, h, blk.bn2, m));
      note(obs, p + ".out", h);
      out.blocks[b] = h;
      if (b < 4) h = pool2d(tape, h, PoolMode::Max);
    }
    return out;
  }

  /// Contrastive projection: GAP -> dense -> L2 normalize.
  Tensor<T> project(const Tensor<T>& bottleneck, Tape<T>* tape,
                    const ActivationObserver<T>* obs = nullptr) {
    Tensor<T> g = global_avg_pool(tape, bottleneck);
    note(obs, "gap", g);
    Tensor<T> z = dense(tape, g, proj_.weight, proj_.bias);
    note(obs, "proj", z);
    z = l2_normalize(tape, z);
    note(obs, "embedding", z);
    return z;
  }

  /// Segmentation branch: four up blocks with skip concatenation, then a
  /// 1x1 convolution and sigmoid.
  Tensor<T> decode_mask(const EncoderOutput& enc, Mode mode, Tape<T>* tape,
                        const ActivationObserver<T>* obs = nullptr) {
    Tensor<T> h = enc.blocks[4];
    for (std::size_t k = 0; k < 4; ++k) {
      auto& up = dec_[k];
      h = transpose_conv2d(tape, h, up.tconv.weight, up.tconv.bias);
      h = relu(tape, norm(tape, h, up.bn, mode));
      note(obs, "dec" + std::to_string(k + 1) + ".up", h);
      h = concat_channels(tape, h, enc.blocks[3 - k]);
    }
    Tensor<T> logits = conv2d(tape, h, head_.weight, head_.bias, 1, 0);
    note(obs, "head.logits", logits);
    Tensor<T> mask = sigmoid(tape, logits);
    note(obs, "mask", mask);
    return mask;
  }

  /// Classification branch: GAP -> dense(hidden) -> ReLU -> dense -> softmax.
  Tensor<T> classify(const Tensor<T>& bottleneck, Tape<T>* tape,
                     const ActivationObserver<T>* obs = nullptr) {
    Tensor<T> g = global_avg_pool(tape, bottleneck);
    note(obs, "gap", g);
    Tensor<T> h = relu(tape, dense(tape, g, cls_hidden_.weight, cls_hidden_.bias));
    note(obs, "cls.hidden", h);
    Tensor<T> logits = dense(tape, h, cls_out_.weight, cls_out_.bias);
    note(obs, "cls.logits", logits);
    Tensor<T> probs = softmax(tape, logits);
    note(obs, "cls.probs", probs);
    return probs;
  }

  /// One shared encoder pass feeding both decoder branches and the
  /// projection head.
  ForwardOutput<T> forward(const Tensor<T>& x, Mode mode, Tape<T>* tape = nullptr,
                           const ActivationObserver<T>* obs = nullptr) {
    auto enc = run_encoder(x, mode, tape, obs);
    ForwardOutput<T> out;
    out.class_probs = classify(enc.blocks[4], tape, obs);
    out.mask = decode_mask(enc, mode, tape, obs);
    out.embedding = project(enc.blocks[4], tape, obs);
    return out;
  }

  Tensor<T> encode(const Tensor<T>& x, Mode mode, Tape<T>* tape = nullptr) {
    auto enc = run_encoder(x, mode, tape);
    return project(enc.blocks[4], tape);
  }

  // Layer accessors for BN folding and quantization.
  const std::array<ConvBlock<T>, 5>& encoder_blocks() const { return enc_; }
  const std::array<UpBlock<T>, 4>& decoder_blocks() const { return dec_; }
  const ConvParams<T>& mask_head() const { return head_; }
  const DenseParams<T>& classifier_hidden() const { return cls_hidden_; }
  const DenseParams<T>& classifier_out() const { return cls_out_; }
  const DenseParams<T>& projection() const { return proj_; }

 private:
  WscnModel() = default;

  Tensor<T> make_param(const std::string& name, Shape shape, ParamGroup group,
                  bool buffer = false, T fill = T{0}) {
    Tensor<T> t(std::move(shape), fill);
    t.set_name(name);
    t.set_requires_grad(!buffer);
    registry_.push_back({name, t, group, buffer});
    return t;
  }

  ConvParams<T> make_conv(const std::string& name, std::size_t out_c,
                     std::size_t in_c, std::size_t k, ParamGroup group,
                     Rng& init) {
    ConvParams<T> c;
    c.weight = make_param(name + ".weight", {out_c, in_c, k, k}, group);
    he_uniform(c.weight, init, in_c * k * k);
    c.bias = make_param(name + ".bias", {out_c}, group);
    return c;
  }

  BatchNormParams<T> make_bn(const std::string& name, std::size_t c,
                        ParamGroup group) {
    BatchNormParams<T> b;
    b.gamma = make_param(name + ".gamma", {c}, group, false, T{1});
    b.beta = make_param(name + ".beta", {c}, group);
    b.running_mean = make_param(name + ".running_mean", {c}, group, true);
    b.running_var = make_param(name + ".running_var", {c}, group, true, T{1});
    return b;
  }

  DenseParams<T> make_dense(const std::string& name, std::size_t in,
                       std::size_t out, ParamGroup group, Rng& init) {
    DenseParams<T> d;
    d.weight = make_param(name + ".weight", {in, out}, group);
    glorot_uniform(d.weight, init, in, out);
    d.bias = make_param(name + ".bias", {out}, group);
    return d;
  }

  Tensor<T> norm(Tape<T>* tape, const Tensor<T>& x, BatchNormParams<T>& p,
                 Mode mode) {
    return batch_norm(tape, x, p.gamma, p.beta, p.running_mean, p.running_var,
                      mode, static_cast<T>(cfg_.bn_momentum));
  }

  void check_input(const Tensor<T>& x) const {
    const auto s = cfg_.input_size;
    if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != s || x.dim(3) != s)
      throw ShapeError("model input must be [N,1," + std::to_string(s) + "," +
                       std::to_string(s) + "], got " + to_string(x.shape()));
  }

  static void note(const ActivationObserver<T>* obs, const std::string& site,
                   const Tensor<T>& t) {
    if (obs && *obs) (*obs)(site, t);
  }

  void set_encoder_trainable(bool on) {
    for (auto& nt : registry_)
      if (!nt.is_buffer && (nt.group == ParamGroup::Encoder ||
                            nt.group == ParamGroup::Projection))
        nt.tensor.set_requires_grad(on);
    encoder_frozen_ = !on;
  }

  WscnConfig cfg_;
  std::array<ConvBlock<T>, 5> enc_;
  std::array<UpBlock<T>, 4> dec_;
  ConvParams<T> head_;
  DenseParams<T> cls_hidden_, cls_out_, proj_;
  std::vector<NamedTensor<T>> registry_;
  Rng dropout_rng_;
  bool encoder_frozen_ = false;
};

/// Number of learnable scalars (batch-norm running statistics excluded),
/// independent of freezing.
template <class T>
std::size_t count_params(const WscnModel<T>& m) {
  std::size_t n = 0;
  for (const auto& nt : m.tensors())
    if (!nt.is_buffer) n += nt.tensor.numel();
  return n;
}

/// Multiply-accumulates of one forward pass on a single S x S image:
///   conv k x k:     OC * C * k^2 * H * W
///   depthwise:      C * 9 * H * W
///   transpose conv: C * OC * 9 * H_in * W_in
///   dense:          in * out
/// Normalization, pooling and activations are not counted.
inline std::uint64_t count_flops(const WscnConfig& cfg) {
  std::uint64_t macs = 0;
  std::uint64_t s = cfg.input_size, in_c = 1;
  for (std::size_t b = 0; b < 5; ++b) {
    const std::uint64_t f = cfg.encoder_filters[b], hw = s * s;
    macs += f * in_c * 9 * hw + f * 9 * hw + f * f * hw;
    in_c = f;
    if (b < 4) s /= 2;
  }
  for (std::size_t k = 0; k < 4; ++k) {
    const std::uint64_t f = cfg.decoder_filters[k];
    macs += in_c * f * 9 * s * s;
    s *= 2;
    in_c = f + cfg.encoder_filters[3 - k];
  }
  macs += in_c * s * s;  // 1x1 head
  const std::uint64_t feat = cfg.encoder_filters[4];
  macs += feat * cfg.classifier_hidden + cfg.classifier_hidden * cfg.num_classes +
          feat * cfg.embedding_dim;
  return macs;
}

template <class T>
std::uint64_t count_flops(const WscnModel<T>& m) {
  return count_flops(m.config());
}

}  // namespace wscn
