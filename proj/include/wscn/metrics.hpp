#pragma once

// Classification and segmentation metrics plus the per-class report.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "wscn/data.hpp"

namespace wscn {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ConfusionCounts {
  std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;
  std::uint64_t total() const { return tp + tn + fp + fn; }
  bool operator==(const ConfusionCounts&) const = default;
};

namespace detail {
inline void check_labels(const std::vector<std::size_t>& v, std::size_t classes) {
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i] >= classes)
      throw MetricError("label " + std::to_string(v[i]) + " at position " + std::to_string(i) +
                        " outside [0," + std::to_string(classes) + ")");
}
}  // namespace detail

/// One-vs-rest tallies for class c.
inline ConfusionCounts confusion(const std::vector<std::size_t>& pred,
                                 const std::vector<std::size_t>& truth, std::size_t c,
                                 std::size_t classes = kNumClasses) {
  if (pred.size() != truth.size())
    throw MetricError("confusion: " + std::to_string(pred.size()) + " predictions vs " +
                      std::to_string(truth.size()) + " labels");
  if (c >= classes) throw MetricError("confusion: class " + std::to_string(c) + " out of range");
  detail::check_labels(pred, classes);
  detail::check_labels(truth, classes);
  ConfusionCounts cc;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == c, t = truth[i] == c;
    if (p && t) ++cc.tp;
    else if (p) ++cc.fp;
    else if (t) ++cc.fn;
    else ++cc.tn;
  }
  return cc;
}

/// Matthews correlation; 0 when any marginal is empty.
inline double mcc(const ConfusionCounts& c) {
  const double tp = static_cast<double>(c.tp), tn = static_cast<double>(c.tn);
  const double fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
  const double den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  if (den == 0) return 0.0;
  return (tp * tn - fp * fn) / std::sqrt(den);
}

struct ClassScores {
  double accuracy = 0, precision = 0, recall = 0;
};

struct GroupAverage {
  std::string name;
  std::vector<std::size_t> members;
  ClassScores scores;
};

struct ClassReport {
  std::vector<ClassScores> per_class;
  std::vector<ConfusionCounts> counts;
  std::vector<GroupAverage> groups;  // Avg(1Defect) .. Avg(All38)
  double overall_accuracy = 0;
  double macro_precision = 0, macro_recall = 0;
  double macro_mcc = 0;  // over classes that occur among the labels
};

/// Table grouping by number of mixed defects; single-defect average leaves
/// out the defect-free class.
inline std::vector<GroupAverage> table_groups() {
  std::vector<GroupAverage> g{{"Avg(1Defect)", {}, {}},
                              {"Avg(2Defects)", {}, {}},
                              {"Avg(3Defects)", {}, {}},
                              {"Avg(4Defects)", {}, {}},
                              {"Avg(All38)", {}, {}}};
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const auto k = defect_count(c);
    if (k >= 1) g[k - 1].members.push_back(c);
    g[4].members.push_back(c);
  }
  return g;
}

inline ClassReport class_metrics(const std::vector<std::size_t>& pred,
                                 const std::vector<std::size_t>& truth,
                                 std::size_t classes = kNumClasses) {
  if (pred.empty()) throw MetricError("class_metrics: no samples");
  ClassReport r;
  std::size_t correct = 0, present = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == truth.at(i);
  r.overall_accuracy = static_cast<double>(correct) / static_cast<double>(pred.size());
  for (std::size_t c = 0; c < classes; ++c) {
    const auto cc = confusion(pred, truth, c, classes);
    ClassScores s;
    s.accuracy = static_cast<double>(cc.tp + cc.tn) / static_cast<double>(cc.total());
    s.precision = cc.tp + cc.fp ? static_cast<double>(cc.tp) / static_cast<double>(cc.tp + cc.fp) : 0.0;
    s.recall = cc.tp + cc.fn ? static_cast<double>(cc.tp) / static_cast<double>(cc.tp + cc.fn) : 0.0;
    r.per_class.push_back(s);
    r.counts.push_back(cc);
    r.macro_precision += s.precision;
    r.macro_recall += s.recall;
    if (cc.tp + cc.fn) {
      r.macro_mcc += mcc(cc);
      ++present;
    }
  }
  r.macro_precision /= static_cast<double>(classes);
  r.macro_recall /= static_cast<double>(classes);
  r.macro_mcc = present ? r.macro_mcc / static_cast<double>(present) : 0.0;
  if (classes == kNumClasses) {
    r.groups = table_groups();
    for (auto& g : r.groups) {
      for (auto c : g.members) {
        g.scores.accuracy += r.per_class[c].accuracy;
        g.scores.precision += r.per_class[c].precision;
        g.scores.recall += r.per_class[c].recall;
      }
      const double n = static_cast<double>(g.members.size());
      g.scores.accuracy /= n;
      g.scores.precision /= n;
      g.scores.recall /= n;
    }
  }
  return r;
}

struct AucResult {
  std::vector<double> per_class;    // NaN where degenerate
  std::vector<bool> degenerate;     // no positives or no negatives
  double macro = 0;                 // mean over non-degenerate classes
  std::size_t evaluated = 0;
};

/// One-vs-rest AUC from the Mann-Whitney rank statistic; ties count 1/2.
inline AucResult roc_auc(const std::vector<float>& scores, std::size_t classes,
                         const std::vector<std::size_t>& truth) {
  const std::size_t n = truth.size();
  if (scores.size() != n * classes)
    throw MetricError("roc_auc: " + std::to_string(scores.size()) + " scores for " +
                      std::to_string(n) + " samples x " + std::to_string(classes) + " classes");
  detail::check_labels(truth, classes);
  AucResult r;
  std::vector<std::size_t> order(n);
  std::vector<double> ranks(n);
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t pos = 0;
    for (auto t : truth) pos += t == c;
    const std::size_t neg = n - pos;
    if (pos == 0 || neg == 0) {
      r.per_class.push_back(std::nan(""));
      r.degenerate.push_back(true);
      continue;
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return scores[a * classes + c] < scores[b * classes + c];
    });
    // Midranks for tied groups.
    for (std::size_t i = 0; i < n;) {
      std::size_t j = i;
      while (j + 1 < n && scores[order[j + 1] * classes + c] == scores[order[i] * classes + c]) ++j;
      const double mid = (static_cast<double>(i + j) + 2.0) / 2.0;
      for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mid;
      i = j + 1;
    }
    double rank_sum = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (truth[i] == c) rank_sum += ranks[i];
    const double p = static_cast<double>(pos), q = static_cast<double>(neg);
    const double auc = (rank_sum - p * (p + 1) / 2) / (p * q);
    r.per_class.push_back(auc);
    r.degenerate.push_back(false);
    r.macro += auc;
    ++r.evaluated;
  }
  r.macro = r.evaluated ? r.macro / static_cast<double>(r.evaluated) : std::nan("");
  return r;
}

struct MaskScores {
  double dice = 0, iou = 0;
};

/// Overlap of two masks binarized at 0.5; both empty scores 1.
template <class A, class B>
MaskScores mask_overlap(const A* pred, const B* truth, std::size_t n) {
  std::uint64_t inter = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool a = pred[i] >= A(0.5), b = truth[i] >= B(0.5);
    inter += a && b;
    sa += a;
    sb += b;
  }
  if (sa + sb == 0) return {1.0, 1.0};
  const double i = static_cast<double>(inter);
  return {2 * i / static_cast<double>(sa + sb), i / static_cast<double>(sa + sb - inter)};
}

template <class T>
MaskScores mask_overlap(const Tensor<T>& pred, const Tensor<T>& truth) {
  if (pred.shape() != truth.shape())
    throw ShapeError("mask shapes differ: " + to_string(pred.shape()) + " vs " +
                     to_string(truth.shape()));
  return mask_overlap(pred.ptr(), truth.ptr(), pred.numel());
}

template <class T>
double dice_coefficient(const Tensor<T>& pred, const Tensor<T>& truth) {
  return mask_overlap(pred, truth).dice;
}

template <class T>
double iou(const Tensor<T>& pred, const Tensor<T>& truth) {
  return mask_overlap(pred, truth).iou;
}

/// Everything an evaluation run produces.
struct Evaluation {
  std::vector<std::size_t> truth, pred;
  std::vector<float> scores;  // [N, classes] softmax outputs
  ClassReport classes;
  AucResult auc;
  double dice = 0, iou = 0;  // mean per-image overlap
};

inline void write_class_csv(std::ostream& os, const ClassReport& r) {
  os << "class,name,accuracy,precision,recall\n" << std::fixed << std::setprecision(6);
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& s = r.per_class[c];
    os << c << ',' << (r.per_class.size() == kNumClasses ? class_name(c) : std::to_string(c))
       << ',' << s.accuracy << ',' << s.precision << ',' << s.recall << '\n';
  }
  for (const auto& g : r.groups)
    os << ',' << g.name << ',' << g.scores.accuracy << ',' << g.scores.precision << ','
       << g.scores.recall << '\n';
}

inline void write_summary(std::ostream& os, const Evaluation& e) {
  os << std::fixed << std::setprecision(6);
  os << "samples " << e.truth.size() << '\n'
     << "accuracy " << e.classes.overall_accuracy << '\n'
     << "mcc " << e.classes.macro_mcc << '\n'
     << "macro_auc " << e.auc.macro << '\n'
     << "auc_classes_evaluated " << e.auc.evaluated << '\n'
     << "dice " << e.dice << '\n'
     << "iou " << e.iou << '\n';
}

}  // namespace wscn
