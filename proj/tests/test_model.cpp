#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "wscn/gradcheck.hpp"
#include "wscn/losses.hpp"
#include "wscn/model.hpp"
#include "wscn/optim.hpp"

using namespace wscn;

namespace {

WscnConfig tiny_config() {
  WscnConfig c;
  c.encoder_filters = {2, 3, 2, 3, 4};
  c.decoder_filters = {3, 2, 2, 2};
  c.input_size = 16;
  c.num_classes = 3;
  c.classifier_hidden = 5;
  c.embedding_dim = 4;
  c.dropout_rate = 0;
  return c;
}

template <class T>
Tensor<T> random_input(std::size_t n, std::size_t s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> x({n, 1, s, s});
  for (auto& v : x.data()) v = static_cast<T>(rng.range(0, 2)) / T{2};
  return x;
}

template <class T>
Tensor<T> one_hot_rows(const std::vector<int>& labels, std::size_t classes) {
  Tensor<T> t({labels.size(), classes}, T{0});
  for (std::size_t i = 0; i < labels.size(); ++i) t[i * classes + labels[i]] = 1;
  return t;
}

// Layer-by-layer closed form, written independently of the model code.
std::size_t closed_form_params(const WscnConfig& c) {
  std::size_t n = 0, in = 1;
  for (auto f : c.encoder_filters) {
    n += 9 * in * f + f;  // conv
    n += 2 * f;           // bn1
    n += 9 * f;           // depthwise
    n += f * f + f;       // pointwise + bias
    n += 2 * f;           // bn2
    in = f;
  }
  for (std::size_t k = 0; k < 4; ++k) {
    const auto f = c.decoder_filters[k];
    n += 9 * in * f + f + 2 * f;
    in = f + c.encoder_filters[3 - k];
  }
  n += in + 1;
  const auto feat = c.encoder_filters[4];
  n += feat * c.classifier_hidden + c.classifier_hidden;
  n += c.classifier_hidden * c.num_classes + c.num_classes;
  n += feat * c.embedding_dim + c.embedding_dim;
  return n;
}

}  // namespace

TEST(Config, InvalidSchedulesRejected) {
  WscnConfig c;
  c.encoder_filters = {8, 16, 16, 32};
  EXPECT_THROW(WscnModel<float>::build(c, 1), ConfigError);
  c = WscnConfig{};
  c.decoder_filters = {32, 16, 16, 8, 4};
  EXPECT_THROW(WscnModel<float>::build(c, 1), ConfigError);
  c = WscnConfig{};
  c.input_size = 100;
  EXPECT_THROW(WscnModel<float>::build(c, 1), ConfigError);
}

TEST(Params, SingleLayerCounts) {
  auto m = WscnModel<float>::build({}, 1);
  EXPECT_EQ(m.find("enc1.conv.weight").numel() + m.find("enc1.conv.bias").numel(), 80u);
  EXPECT_EQ(m.find("cls.out.weight").numel() + m.find("cls.out.bias").numel(), 2470u);
}

TEST(Params, DefaultModelMatchesClosedForm) {
  auto m = WscnModel<float>::build({}, 1);
  const auto n = count_params(m);
  EXPECT_EQ(n, closed_form_params(WscnConfig{}));
  EXPECT_GE(n, 70000u);
  EXPECT_LE(n, 100000u);
  EXPECT_EQ(count_params(WscnModel<float>::build(tiny_config(), 1)), closed_form_params(tiny_config()));
}

TEST(Params, Fp32PayloadUnderBudget) {
  auto m = WscnModel<float>::build({}, 1);
  std::size_t bytes = 0;
  for (const auto& nt : m.tensors()) bytes += nt.tensor.numel() * sizeof(float);
  EXPECT_LE(bytes, 600000u);
}

TEST(Params, FreezingDoesNotChangeCount) {
  auto m = WscnModel<float>::build({}, 1);
  const auto n = count_params(m);
  m.freeze_encoder();
  EXPECT_EQ(count_params(m), n);
  EXPECT_LT(m.trainable_parameters().size(), m.tensors().size());
}

TEST(Flops, HandCountOfFirstLayer) {
  // The first block alone: 8*1*9*224^2 + 8*9*224^2 + 8*8*224^2.
  WscnConfig c;
  const std::uint64_t hw = 224 * 224;
  const std::uint64_t first = 8 * 9 * hw + 8 * 9 * hw + 64 * hw;
  EXPECT_GT(count_flops(c), first);
  EXPECT_EQ(first, 10436608u);
}

TEST(Build, SameSeedBitIdentical) {
  auto a = WscnModel<float>::build({}, 5), b = WscnModel<float>::build({}, 5);
  auto c = WscnModel<float>::build({}, 6);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.tensors().size(); ++i) {
    const auto& ta = a.tensors()[i].tensor;
    const auto& tb = b.tensors()[i].tensor;
    EXPECT_TRUE(std::equal(ta.data().begin(), ta.data().end(), tb.data().begin())) << a.tensors()[i].name;
    const auto& tc = c.tensors()[i].tensor;
    any_diff |= !std::equal(ta.data().begin(), ta.data().end(), tc.data().begin());
  }
  EXPECT_TRUE(any_diff);
}

TEST(Forward, ShapeLadderAtFullSize) {
  auto m = WscnModel<float>::build({}, 2);
  std::map<std::string, Shape> seen;
  ActivationObserver<float> obs = [&](const std::string& site, const Tensor<float>& t) { seen[site] = t.shape(); };
  const auto out = m.forward(random_input<float>(1, 224, 3), Mode::Eval, nullptr, &obs);
  const std::size_t sizes[] = {224, 112, 56, 28, 14}, chans[] = {8, 16, 16, 32, 64};
  for (std::size_t b = 0; b < 5; ++b)
    EXPECT_EQ(seen["enc" + std::to_string(b + 1) + ".out"], (Shape{1, chans[b], sizes[b], sizes[b]}));
  const std::size_t up[] = {28, 56, 112, 224}, dchans[] = {32, 16, 16, 8};
  for (std::size_t k = 0; k < 4; ++k)
    EXPECT_EQ(seen["dec" + std::to_string(k + 1) + ".up"], (Shape{1, dchans[k], up[k], up[k]}));
  EXPECT_EQ(out.class_probs.shape(), (Shape{1, 38}));
  EXPECT_EQ(out.mask.shape(), (Shape{1, 1, 224, 224}));
  EXPECT_EQ(out.embedding.shape(), (Shape{1, 128}));
}

TEST(Forward, OutputInvariants) {
  auto m = WscnModel<float>::build({}, 3);
  const auto out = m.forward(random_input<float>(2, 224, 4), Mode::Train);
  for (std::size_t r = 0; r < 2; ++r) {
    double s = 0, e = 0;
    for (std::size_t c = 0; c < 38; ++c) s += out.class_probs[r * 38 + c];
    for (std::size_t d = 0; d < 128; ++d) e += double(out.embedding[r * 128 + d]) * out.embedding[r * 128 + d];
    EXPECT_NEAR(s, 1.0, 1e-5);
    EXPECT_NEAR(std::sqrt(e), 1.0, 1e-5);
  }
  for (float v : out.mask.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Forward, WrongInputSizeRejected) {
  auto m = WscnModel<float>::build({}, 1);
  EXPECT_THROW(m.forward(Tensor<float>({1, 1, 112, 112}, 0.0f), Mode::Eval), ShapeError);
  EXPECT_THROW(m.forward(Tensor<float>({1, 2, 224, 224}, 0.0f), Mode::Eval), ShapeError);
}

TEST(Forward, ZeroInputGivesConstantMask) {
  auto m = WscnModel<float>::build({}, 7);
  const auto out = m.forward(Tensor<float>({1, 1, 224, 224}, 0.0f), Mode::Eval);
  for (float v : out.mask.data()) {
    ASSERT_TRUE(std::isfinite(v));
    ASSERT_EQ(v, out.mask[0]);
  }
}

TEST(Forward, EvalBatchIndependence) {
  auto m = WscnModel<float>::build(tiny_config(), 8);
  const auto x = random_input<float>(2, 16, 9);
  const auto both = m.forward(x, Mode::Eval);
  for (std::size_t i = 0; i < 2; ++i) {
    Tensor<float> xi({1, 1, 16, 16});
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(i * 256), 256, xi.data().begin());
    const auto one = m.forward(xi, Mode::Eval);
    for (std::size_t k = 0; k < 256; ++k) EXPECT_FLOAT_EQ(one.mask[k], both.mask[i * 256 + k]);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_FLOAT_EQ(one.class_probs[c], both.class_probs[i * 3 + c]);
  }
}

TEST(Forward, EvalIsPure) {
  auto m = WscnModel<float>::build(WscnConfig{}, 10);
  const auto x = random_input<float>(1, 224, 11);
  const auto a = m.forward(x, Mode::Eval), b = m.forward(x, Mode::Eval);
  EXPECT_TRUE(std::equal(a.mask.data().begin(), a.mask.data().end(), b.mask.data().begin()));
  EXPECT_TRUE(std::equal(a.embedding.data().begin(), a.embedding.data().end(), b.embedding.data().begin()));
}

TEST(Encode, UnitNormAndMatchesForward) {
  auto m = WscnModel<float>::build({}, 12);
  const auto x = random_input<float>(1, 224, 13);
  const auto z = m.encode(x, Mode::Eval);
  const auto out = m.forward(x, Mode::Eval);
  double e = 0;
  for (std::size_t d = 0; d < 128; ++d) {
    e += double(z[d]) * z[d];
    EXPECT_EQ(z[d], out.embedding[d]);
  }
  EXPECT_NEAR(std::sqrt(e), 1.0, 1e-5);
}

TEST(Gradients, FullModelFloat64) {
  WscnConfig c = tiny_config();
  c.encoder_filters = {3, 4, 4, 5, 6};
  c.input_size = 32;
  auto m = WscnModel<double>::build(c, 14);
  // Continuous inputs keep max-pool windows free of ties.
  Rng rng(15);
  Tensor<double> x({4, 1, 32, 32});
  for (auto& v : x.data()) v = rng.uniform();
  const std::vector<int> labels{0, 1, 0, 1};
  const auto y = one_hot_rows<double>(labels, 3);
  Tensor<double> target({4, 1, 32, 32});
  for (auto& v : target.data()) v = rng.bernoulli(0.3) ? 1.0 : 0.0;
  auto loss = [&](Tape<double>& t) {
    const auto out = m.forward(x, Mode::Train, &t);
    auto l = add(&t, bce_dice(&t, out.mask, target), categorical_ce(&t, out.class_probs, y));
    return add(&t, l, npair_contrastive(&t, out.embedding, labels));
  };
  // A bias feeding straight into a train-mode batch norm is cancelled by the
  // mean subtraction, so its exact gradient is zero and relative error is
  // meaningless there; check it in absolute terms instead.
  std::vector<Tensor<double>> checked, cancelled;
  for (const auto& nt : m.tensors()) {
    if (nt.is_buffer) continue;
    const bool pre_bn = nt.name.ends_with(".conv.bias") || nt.name.ends_with(".sep.bias") ||
                        nt.name.ends_with(".tconv.bias");
    (pre_bn ? cancelled : checked).push_back(nt.tensor);
  }
  auto rep = check_gradients(loss, checked, {.seed = 1, .max_entries_per_tensor = 6});
  EXPECT_TRUE(rep.passed) << rep.failure << " max " << rep.max_rel_error();

  Tape<double> t;
  backward(t, loss(t));
  for (auto& b : cancelled)
    for (double g : b.grad()) EXPECT_NEAR(g, 0.0, 1e-9) << b.name();
}

TEST(Gradients, EveryTrainableParameterReached) {
  auto m = WscnModel<double>::build(tiny_config(), 17);
  const auto x = random_input<double>(4, 16, 18);
  const std::vector<int> labels{2, 1, 2, 1};
  Tensor<double> target({4, 1, 16, 16}, 0.0);
  for (std::size_t i = 0; i < target.numel(); i += 3) target[i] = 1;
  Tape<double> t;
  const auto out = m.forward(x, Mode::Train, &t);
  auto l = add(&t, bce_dice(&t, out.mask, target), categorical_ce(&t, out.class_probs, one_hot_rows<double>(labels, 3)));
  l = add(&t, l, npair_contrastive(&t, out.embedding, labels));
  backward(t, l);
  for (const auto& nt : m.tensors()) {
    if (nt.is_buffer) continue;
    ASSERT_TRUE(nt.tensor.has_grad()) << nt.name;
    double mag = 0;
    for (double g : nt.tensor.grad()) mag += std::abs(g);
    EXPECT_GT(mag, 0.0) << nt.name;
  }
}

TEST(Freeze, EncoderBitIdenticalAfterSteps) {
  auto m = WscnModel<float>::build(tiny_config(), 19);
  m.freeze_encoder();
  EXPECT_TRUE(m.encoder_frozen());
  std::map<std::string, std::vector<float>> before;
  for (const auto& nt : m.tensors()) before[nt.name].assign(nt.tensor.data().begin(), nt.tensor.data().end());
  Adam<float> opt(m.trainable_parameters());
  const auto x = random_input<float>(4, 16, 20);
  const auto y = one_hot_rows<float>({0, 1, 2, 0}, 3);
  Tensor<float> target({4, 1, 16, 16}, 1.0f);
  for (int s = 0; s < 10; ++s) {
    Tape<float> t;
    const auto out = m.forward(x, Mode::Train, &t);
    backward(t, add(&t, bce_dice(&t, out.mask, target), categorical_ce(&t, out.class_probs, y)));
    opt.step(1e-2);
    opt.zero_grad();
  }
  for (const auto& nt : m.tensors()) {
    const bool same = std::equal(nt.tensor.data().begin(), nt.tensor.data().end(), before[nt.name].begin());
    if (nt.group == ParamGroup::Encoder || nt.group == ParamGroup::Projection) EXPECT_TRUE(same) << nt.name;
    else if (!nt.is_buffer) EXPECT_FALSE(same) << nt.name;
  }
  m.unfreeze_encoder();
  EXPECT_FALSE(m.encoder_frozen());
  EXPECT_TRUE(m.find("enc1.conv.weight").requires_grad());
  EXPECT_EQ(m.trainable_parameters().size(),
            static_cast<std::size_t>(std::count_if(m.tensors().begin(), m.tensors().end(),
                                                   [](const auto& nt) { return !nt.is_buffer; })));
}

TEST(Clone, IndependentStorage) {
  auto m = WscnModel<float>::build(tiny_config(), 21);
  auto c = m.clone();
  c.find("head.bias")[0] += 1;
  EXPECT_NE(c.find("head.bias")[0], m.find("head.bias")[0]);
  EXPECT_EQ(c.find("enc1.conv.weight")[3], m.find("enc1.conv.weight")[3]);
}

TEST(BatchNormRefresh, StatisticsMatchBatchMoments) {
  // With one input the refreshed running mean equals that batch's mean.
  auto m = WscnModel<double>::build(tiny_config(), 22);
  const auto x = random_input<double>(3, 16, 23);
  m.recalibrate_batch_norm(1, [&](std::size_t) { return x; }, true);
  const auto& blk = m.encoder_blocks()[0];
  const auto h = conv2d<double>(nullptr, x, blk.conv.weight, blk.conv.bias);
  const std::size_t c = h.dim(1), hw = h.dim(2) * h.dim(3);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean = 0;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t k = 0; k < hw; ++k) mean += h[(n * c + ch) * hw + k];
    mean /= double(3 * hw);
    EXPECT_NEAR(blk.bn1.running_mean[ch], mean, 1e-12);
  }
}
