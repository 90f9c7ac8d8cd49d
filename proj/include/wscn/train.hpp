#pragma once

// Two-phase training: contrastive encoder pretraining, then joint decoder
// training on a frozen encoder.

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "wscn/data.hpp"
#include "wscn/losses.hpp"
#include "wscn/metrics.hpp"
#include "wscn/model.hpp"
#include "wscn/optim.hpp"

namespace wscn {

/// Keeps large activation buffers out of mmap so repeated batches reuse
/// heap pages instead of faulting fresh ones. glibc only; no-op elsewhere.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double lr = 1e-3;
  std::optional<double> phase2_lr;  // joint phase; falls back to lr
  double decay_factor = 0.1;
  std::size_t patience = 10;
  std::size_t batch_size = 64;
  std::size_t phase1_epochs = 100;
  std::size_t phase2_epochs = 50;
  AdamConfig adam;
  double temperature = 0.1;
  std::uint64_t seed = 0;
  std::size_t eval_batch = 32;

  void validate() const {
    if (!(lr >= 0) || !(effective_phase2_lr() >= 0))
      throw ConfigError("learning rate must be non-negative");
    if (!(decay_factor > 0 && decay_factor <= 1)) throw ConfigError("decay factor must lie in (0,1]");
    if (patience == 0) throw ConfigError("patience must be at least 1");
    if (batch_size < 2) throw ConfigError("batch size must be at least 2");
    if (eval_batch == 0) throw ConfigError("evaluation batch must be positive");
    if (!(temperature > 0)) throw ConfigError("temperature must be positive");
  }
  double effective_phase2_lr() const { return phase2_lr.value_or(lr); }
  PlateauConfig plateau() const { return {decay_factor, patience, 1e-6}; }
};

struct EpochRecord {
  int phase = 0;
  std::size_t epoch = 0;  // counted across both phases, from 1
  double lr = 0;
  double train_loss = 0, val_loss = 0;
  std::optional<double> val_acc, val_dice;
  double seconds = 0;
};

struct History {
  std::vector<EpochRecord> epochs;

  void write_csv(std::ostream& os) const {
    os << "epoch,lr,train_loss,val_loss,val_acc,val_dice\n";
    os.precision(9);
    for (const auto& e : epochs) {
      os << e.epoch << ',' << e.lr << ',' << e.train_loss << ',' << e.val_loss << ',';
      if (e.val_acc) os << *e.val_acc;
      os << ',';
      if (e.val_dice) os << *e.val_dice;
      os << '\n';
    }
  }
};

using EpochCallback = std::function<void(const EpochRecord&)>;
using StopPredicate = std::function<bool(const EpochRecord&)>;

// Batching.

/// Class-balanced epoch plan: each class's shuffled members are cut into
/// groups of two (a trailing odd member joins the last group), groups are
/// shuffled and packed into batches of at most `batch` samples. Every batch
/// holds at least two samples of each class it contains. Members of
/// singleton classes cannot form a positive pair and are left out.
inline std::vector<std::vector<std::size_t>> balanced_batches(
    const std::vector<std::size_t>& labels, std::size_t batch, Rng& rng) {
  if (batch < 2) throw TrainError("balanced batches need room for a pair");
  std::map<std::size_t, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);
  std::vector<std::vector<std::size_t>> groups;
  for (auto& [c, idx] : members) {
    if (idx.size() < 2) continue;
    rng.shuffle(idx.begin(), idx.end());
    for (std::size_t k = 0; k + 1 < idx.size(); k += 2) {
      groups.push_back({idx[k], idx[k + 1]});
      if (idx.size() % 2 && k + 3 == idx.size()) groups.back().push_back(idx[k + 2]);
    }
  }
  rng.shuffle(groups.begin(), groups.end());
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> cur;
  for (auto& g : groups) {
    if (!cur.empty() && cur.size() + g.size() > batch) {
      out.push_back(std::move(cur));
      cur.clear();
    }
    cur.insert(cur.end(), g.begin(), g.end());
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

/// Shuffled consecutive chunks covering every sample once.
inline std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t n, std::size_t batch,
                                                              Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  rng.shuffle(idx.begin(), idx.end());
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += batch)
    out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(s),
                     idx.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + batch)));
  return out;
}

inline std::vector<int> int_labels(const std::vector<std::size_t>& c) {
  return std::vector<int>(c.begin(), c.end());
}

inline Tensor<float> flat_labels(const Tensor<float>& l) {
  return l.reshaped({l.dim(0), l.dim(2)});
}

// Evaluation.

struct EvalResult {
  Evaluation metrics;
  double loss = 0;  // mean joint loss per sample
};

/// Joint loss and all metrics over a dataset for any batch forward function
/// mapping images [B,1,S,S] to a ForwardOutput.
template <class Forward>
EvalResult evaluate_with(const Forward& forward, const WscnConfig& cfg, const Dataset& data,
                         std::size_t batch = 32) {
  if (data.size() == 0) throw TrainError("evaluation set is empty");
  EvalResult r;
  auto& e = r.metrics;
  double loss = 0, dice = 0, iou_sum = 0;
  const std::size_t classes = cfg.num_classes, s = cfg.input_size;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch); ++i) idx.push_back(i);
    const Batch b = make_batch(data, idx, s);
    auto out = forward(b.images);
    const Tensor<float> labels = flat_labels(b.labels);
    const double l = bce_dice<float>(nullptr, out.mask, b.masks).item() +
                     categorical_ce<float>(nullptr, out.class_probs, labels).item();
    loss += l * static_cast<double>(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const float* p = out.class_probs.ptr() + i * classes;
      e.scores.insert(e.scores.end(), p, p + classes);
      e.pred.push_back(static_cast<std::size_t>(std::max_element(p, p + classes) - p));
      e.truth.push_back(b.classes[i]);
      const auto ov = mask_overlap(out.mask.ptr() + i * s * s, b.masks.ptr() + i * s * s, s * s);
      dice += ov.dice;
      iou_sum += ov.iou;
    }
  }
  const double n = static_cast<double>(data.size());
  r.loss = loss / n;
  e.dice = dice / n;
  e.iou = iou_sum / n;
  e.classes = class_metrics(e.pred, e.truth, classes);
  e.auc = roc_auc(e.scores, classes, e.truth);
  return r;
}

/// Eval-mode pass of a float model.
inline EvalResult evaluate(WscnModel<float>& model, const Dataset& data, std::size_t batch = 32) {
  return evaluate_with([&](const Tensor<float>& x) { return model.forward(x, Mode::Eval); },
                       model.config(), data, batch);
}

/// Eval-mode embeddings [N, D] for a dataset.
inline Tensor<float> embed(WscnModel<float>& model, const Dataset& data, std::size_t batch = 32) {
  const std::size_t d = model.config().embedding_dim;
  Tensor<float> out({data.size(), d});
  for (std::size_t start = 0; start < data.size(); start += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch); ++i) idx.push_back(i);
    const Batch b = make_batch(data, idx, model.config().input_size);
    const Tensor<float> z = model.encode(b.images, Mode::Eval);
    std::copy(z.data().begin(), z.data().end(), out.ptr() + start * d);
  }
  return out;
}

struct CosineSeparation {
  double intra = 0, inter = 0;
  double gap() const { return intra - inter; }
};

/// Mean cosine similarity over same-class and different-class pairs of
/// unit-norm embeddings.
inline CosineSeparation cosine_separation(const Tensor<float>& emb,
                                          const std::vector<std::size_t>& labels) {
  const std::size_t n = emb.dim(0), d = emb.dim(1);
  double si = 0, so = 0;
  std::size_t ni = 0, no = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double c = 0;
      for (std::size_t k = 0; k < d; ++k) c += double(emb[i * d + k]) * emb[j * d + k];
      if (labels[i] == labels[j]) si += c, ++ni;
      else so += c, ++no;
    }
  return {ni ? si / double(ni) : 0.0, no ? so / double(no) : 0.0};
}

/// Contrastive loss over samples whose class has at least two members;
/// nullopt when no such class exists.
inline std::optional<double> contrastive_eval_loss(const Tensor<float>& emb,
                                                   const std::vector<std::size_t>& labels,
                                                   double temperature) {
  std::map<std::size_t, std::size_t> count;
  for (auto l : labels) ++count[l];
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (count[labels[i]] >= 2) keep.push_back(i);
  if (keep.size() < 2) return std::nullopt;
  const std::size_t d = emb.dim(1);
  Tensor<float> sub({keep.size(), d});
  std::vector<int> lab;
  for (std::size_t k = 0; k < keep.size(); ++k) {
    std::copy(emb.ptr() + keep[k] * d, emb.ptr() + (keep[k] + 1) * d, sub.ptr() + k * d);
    lab.push_back(static_cast<int>(labels[keep[k]]));
  }
  return npair_contrastive<float>(nullptr, sub, lab, {temperature}).item();
}

/// Re-estimates running batch-norm statistics without dropout on up to
/// `limit` evenly spaced training samples.
inline void refresh_batch_norm(WscnModel<float>& model, const Dataset& data, std::size_t batch,
                               bool encoder_only, std::size_t limit = 256) {
  const std::size_t n = std::min(limit, data.size());
  if (n == 0) return;
  std::vector<std::size_t> pick;
  for (std::size_t k = 0; k < n; ++k) pick.push_back(k * data.size() / n);
  const std::size_t count = (n + batch - 1) / batch;
  model.recalibrate_batch_norm(
      count,
      [&](std::size_t k) {
        std::vector<std::size_t> idx(pick.begin() + static_cast<std::ptrdiff_t>(k * batch),
                                     pick.begin() + static_cast<std::ptrdiff_t>(std::min(n, (k + 1) * batch)));
        return make_batch(data, idx, model.config().input_size).images;
      },
      encoder_only);
}

// Phases.

namespace detail {
inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}
}  // namespace detail

/// Phase 1: trains encoder and projection with the supervised N-pair loss on
/// class-balanced batches. The validation set (falling back to the training
/// set when it has no class with two members) drives the plateau schedule.
/// Returns the per-epoch mean training loss.
inline std::vector<double> pretrain_encoder(WscnModel<float>& model, const Dataset& train,
                                            const Dataset& val, const TrainConfig& cfg,
                                            History* history = nullptr,
                                            const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train.size() == 0) throw TrainError("training set is empty");
  model.unfreeze_encoder();
  std::vector<Tensor<float>> params;
  for (const auto& nt : model.tensors())
    if (!nt.is_buffer && (nt.group == ParamGroup::Encoder || nt.group == ParamGroup::Projection))
      params.push_back(nt.tensor);
  Adam<float> opt(params, cfg.adam);
  PlateauSchedule sched(cfg.lr, cfg.plateau());
  Rng rng(derive_seed(cfg.seed, 0xe1));
  model.set_dropout_seed(derive_seed(cfg.seed, 0xd1));
  const std::size_t s = model.config().input_size;
  const ContrastiveConfig ccfg{cfg.temperature};
  std::vector<double> curve;
  for (std::size_t ep = 0; ep < cfg.phase1_epochs; ++ep) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = sched.lr();
    const auto plan = balanced_batches(train.labels, cfg.batch_size, rng);
    if (plan.empty()) throw TrainError("no class has two training samples; contrastive pretraining impossible");
    double total = 0;
    std::size_t seen = 0;
    for (const auto& idx : plan) {
      const Batch b = make_batch(train, idx, s);
      Tape<float> tape;
      const Tensor<float> z = model.encode(b.images, Mode::Train, &tape);
      const Tensor<float> loss = npair_contrastive(&tape, z, int_labels(b.classes), ccfg);
      backward(tape, loss);
      opt.step(lr);
      opt.zero_grad();
      total += loss.item() * static_cast<double>(idx.size());
      seen += idx.size();
    }
    const double train_loss = total / static_cast<double>(seen);
    curve.push_back(train_loss);
    refresh_batch_norm(model, train, cfg.batch_size, true);
    std::optional<double> vl;
    if (val.size() >= 2) vl = contrastive_eval_loss(embed(model, val, cfg.eval_batch), val.labels, cfg.temperature);
    const double monitored = vl.value_or(train_loss);
    sched.observe(monitored);
    EpochRecord rec{1, ep + 1, lr, train_loss, monitored, std::nullopt, std::nullopt,
                    detail::seconds_since(t0)};
    if (history) history->epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return curve;
}

struct JointResult {
  std::optional<WscnModel<float>> best;  // weights at the lowest validation loss
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
};

/// Phase 2: per-step loss = BCE-Dice on the mask + categorical cross-entropy
/// on the class. Only trainable tensors update, so a frozen encoder stays
/// bit-identical. An empty validation set falls back to the training set.
/// Training ends early once `stop` returns true for a finished epoch.
inline JointResult train_joint(WscnModel<float>& model, const Dataset& train, const Dataset& val,
                               const TrainConfig& cfg, History* history = nullptr,
                               const EpochCallback& on_epoch = {}, const StopPredicate& stop = {}) {
  cfg.validate();
  if (train.size() == 0) throw TrainError("training set is empty");
  const Dataset& monitor = val.size() ? val : train;
  Adam<float> opt(model.trainable_parameters(), cfg.adam);
  PlateauSchedule sched(cfg.effective_phase2_lr(), cfg.plateau());
  Rng rng(derive_seed(cfg.seed, 0xe2));
  model.set_dropout_seed(derive_seed(cfg.seed, 0xd2));
  const std::size_t s = model.config().input_size;
  const std::size_t offset = history ? history->epochs.size() : 0;
  JointResult result;
  for (std::size_t ep = 0; ep < cfg.phase2_epochs; ++ep) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = sched.lr();
    double total = 0;
    for (const auto& idx : shuffled_batches(train.size(), cfg.batch_size, rng)) {
      const Batch b = make_batch(train, idx, s);
      Tape<float> tape;
      auto out = model.forward(b.images, Mode::Train, &tape);
      const Tensor<float> loss =
          add(&tape, bce_dice(&tape, out.mask, b.masks),
              categorical_ce(&tape, out.class_probs, flat_labels(b.labels)));
      if (!std::isfinite(loss.item())) throw TrainError("non-finite training loss");
      backward(tape, loss);
      opt.step(lr);
      opt.zero_grad();
      total += loss.item() * static_cast<double>(idx.size());
    }
    if (!model.encoder_frozen() && model.config().dropout_rate > 0)
      refresh_batch_norm(model, train, cfg.batch_size, false);
    const auto ev = evaluate(model, monitor, cfg.eval_batch);
    sched.observe(ev.loss);
    if (ev.loss < result.best_val_loss) {
      result.best_val_loss = ev.loss;
      result.best_epoch = offset + ep + 1;
      if (result.best) result.best->copy_values_from(model);
      else result.best = model.clone();
    }
    EpochRecord rec{2, offset + ep + 1, lr, total / static_cast<double>(train.size()), ev.loss,
                    ev.metrics.classes.overall_accuracy, ev.metrics.dice,
                    detail::seconds_since(t0)};
    if (history) history->epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (stop && stop(rec)) break;
  }
  return result;
}

}  // namespace wscn
