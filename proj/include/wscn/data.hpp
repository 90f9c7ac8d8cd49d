#pragma once

// Wafer maps, the 38-class taxonomy, a procedural generator, preprocessing to
// network tensors, and stratified splitting.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "wscn/rng.hpp"
#include "wscn/tensor.hpp"

namespace wscn {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kGrid = 52;
inline constexpr std::size_t kNumClasses = 38;
inline constexpr std::size_t kNetworkSize = 224;

enum class DieState : std::uint8_t { Off = 0, Pass = 1, Fail = 2 };

/// One die grid. Cell (y, x) is on the wafer iff its centre lies inside the
/// inscribed disc.
struct WaferMap {
  std::array<std::uint8_t, kGrid * kGrid> grid{};

  std::uint8_t& at(std::size_t y, std::size_t x) { return grid[y * kGrid + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return grid[y * kGrid + x]; }
  bool operator==(const WaferMap&) const = default;
};

inline constexpr double kRadius = kGrid / 2.0;

/// Distance of cell (y, x)'s centre from the wafer centre, in dies.
inline double radial(std::size_t y, std::size_t x) {
  const double dy = static_cast<double>(y) + 0.5 - kRadius;
  const double dx = static_cast<double>(x) + 0.5 - kRadius;
  return std::sqrt(dy * dy + dx * dx);
}

/// Angle of cell (y, x)'s centre in [0, 2pi).
inline double angular(std::size_t y, std::size_t x) {
  const double a = std::atan2(static_cast<double>(y) + 0.5 - kRadius,
                              static_cast<double>(x) + 0.5 - kRadius);
  return a < 0 ? a + 2 * std::numbers::pi : a;
}

inline bool on_wafer(std::size_t y, std::size_t x) { return radial(y, x) <= kRadius; }

/// Map with every on-wafer die passing.
inline WaferMap blank_wafer() {
  WaferMap m;
  for (std::size_t y = 0; y < kGrid; ++y)
    for (std::size_t x = 0; x < kGrid; ++x)
      m.at(y, x) = on_wafer(y, x) ? std::uint8_t(DieState::Pass) : std::uint8_t(DieState::Off);
  return m;
}

// Taxonomy.

enum class Primitive : std::uint8_t { C, D, EL, ER, L, NF, S, R };
inline constexpr std::size_t kNumPrimitives = 8;

inline constexpr std::array<std::string_view, kNumPrimitives> kPrimitiveCodes{
    "C", "D", "EL", "ER", "L", "NF", "S", "R"};
inline constexpr std::array<std::string_view, kNumPrimitives> kPrimitiveNames{
    "Center", "Donut", "Edge-Loc", "Edge-Ring", "Loc", "Near-full", "Scratch", "Random"};

using DefectSpec = std::vector<Primitive>;  // empty = Normal

namespace detail {
using P = Primitive;
inline const std::array<DefectSpec, kNumClasses>& class_table() {
  static const std::array<DefectSpec, kNumClasses> table{{
      {},
      {P::C}, {P::D}, {P::EL}, {P::ER}, {P::L}, {P::NF}, {P::S}, {P::R},
      {P::C, P::EL}, {P::C, P::ER}, {P::C, P::L}, {P::C, P::S},
      {P::D, P::EL}, {P::D, P::L}, {P::ER, P::L}, {P::EL, P::S},
      {P::ER, P::S}, {P::L, P::S}, {P::D, P::ER}, {P::D, P::S}, {P::EL, P::L},
      {P::C, P::EL, P::L}, {P::C, P::EL, P::S}, {P::C, P::ER, P::L},
      {P::C, P::ER, P::S}, {P::C, P::L, P::S}, {P::D, P::EL, P::L},
      {P::D, P::EL, P::S}, {P::D, P::L, P::S}, {P::D, P::ER, P::L},
      {P::D, P::ER, P::S}, {P::EL, P::L, P::S}, {P::ER, P::L, P::S},
      {P::C, P::L, P::EL, P::S}, {P::C, P::L, P::ER, P::S},
      {P::D, P::L, P::EL, P::S}, {P::D, P::L, P::ER, P::S},
  }};
  return table;
}

inline std::uint32_t primitive_bits(const DefectSpec& s) {
  std::uint32_t b = 0;
  for (auto p : s) b |= 1u << static_cast<unsigned>(p);
  return b;
}
}  // namespace detail

inline const DefectSpec& class_spec(std::size_t index) {
  if (index >= kNumClasses)
    throw DataError("class index " + std::to_string(index) + " outside [0,38)");
  return detail::class_table()[index];
}

/// Table position of a primitive combination (order-insensitive).
inline std::size_t class_index(const DefectSpec& spec) {
  const auto bits = detail::primitive_bits(spec);
  if (std::popcount(bits) != static_cast<int>(spec.size()))
    throw DataError("defect spec repeats a primitive");
  for (std::size_t i = 0; i < kNumClasses; ++i)
    if (detail::primitive_bits(detail::class_table()[i]) == bits) return i;
  throw DataError("defect combination is not one of the 38 classes");
}

/// Short label such as "Normal", "C" or "C+EL+S".
inline std::string class_name(std::size_t index) {
  const auto& s = class_spec(index);
  if (s.empty()) return "Normal";
  std::string out;
  for (auto p : s) {
    if (!out.empty()) out += "+";
    out += kPrimitiveCodes[static_cast<std::size_t>(p)];
  }
  return out;
}

/// Readable label: single defects get their full name.
inline std::string class_display_name(std::size_t index) {
  const auto& s = class_spec(index);
  if (s.size() == 1) return std::string(kPrimitiveNames[static_cast<std::size_t>(s[0])]);
  return class_name(index);
}

/// Number of single defects mixed in a class (0 for Normal).
inline std::size_t defect_count(std::size_t index) { return class_spec(index).size(); }

// Generator.

using Footprint = std::array<std::uint8_t, kGrid * kGrid>;

struct GeneratorOptions {
  double noise_rate = 0.005;  // fail probability for any on-wafer die
};

namespace detail {

inline void mark_if(Footprint& f, Rng& rng, double density, auto&& inside) {
  for (std::size_t y = 0; y < kGrid; ++y)
    for (std::size_t x = 0; x < kGrid; ++x) {
      if (!on_wafer(y, x)) continue;
      // draw for every on-wafer die so the stream does not depend on shape
      const bool hit = rng.uniform() < density;
      if (inside(y, x) && hit) f[y * kGrid + x] = 1;
    }
}

inline double angle_diff(double a, double b) {
  double d = std::fmod(a - b, 2 * std::numbers::pi);
  if (d < 0) d += 2 * std::numbers::pi;
  return d;
}

inline void render_loc(Footprint& f, Rng& rng) {
  const double pi = std::numbers::pi;
  const std::size_t target = static_cast<std::size_t>(rng.range(8, 40));
  const double r0 = rng.uniform(0.35, 0.65) * kRadius, a0 = rng.uniform(0, 2 * pi);
  const auto cy = static_cast<std::size_t>(kRadius + r0 * std::sin(a0));
  const auto cx = static_cast<std::size_t>(kRadius + r0 * std::cos(a0));
  auto allowed = [](std::size_t y, std::size_t x) {
    const double r = radial(y, x);
    return r >= 0.2 * kRadius && r <= kRadius - 4;
  };
  // Random region growth from the seed cell.
  std::vector<std::pair<std::size_t, std::size_t>> region{{cy, cx}}, frontier{{cy, cx}};
  f[cy * kGrid + cx] = 1;
  while (region.size() < target && !frontier.empty()) {
    const std::size_t k = rng.below(frontier.size());
    const auto [y, x] = frontier[k];
    static constexpr int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
    const int d = static_cast<int>(rng.below(4));
    const auto ny = static_cast<std::size_t>(static_cast<int>(y) + dy[d]);
    const auto nx = static_cast<std::size_t>(static_cast<int>(x) + dx[d]);
    if (ny >= kGrid || nx >= kGrid || !allowed(ny, nx) || f[ny * kGrid + nx]) {
      if (rng.uniform() < 0.25) frontier.erase(frontier.begin() + static_cast<std::ptrdiff_t>(k));
      continue;
    }
    f[ny * kGrid + nx] = 1;
    region.push_back({ny, nx});
    frontier.push_back({ny, nx});
  }
}

inline void render_scratch(Footprint& f, Rng& rng) {
  const double pi = std::numbers::pi;
  const double length = rng.uniform(0.4, 0.9) * 2 * kRadius;
  const double width = rng.range(1, 2);
  const double sr = rng.uniform(0, 0.6) * kRadius, sa = rng.uniform(0, 2 * pi);
  double py = kRadius + sr * std::sin(sa), px = kRadius + sr * std::cos(sa);
  double heading = rng.uniform(0, 2 * pi);
  const int segments = rng.range(1, 3);
  std::vector<std::array<double, 4>> segs;
  for (int s = 0; s < segments; ++s) {
    const double len = length / segments;
    double ny = py + len * std::sin(heading), nx = px + len * std::cos(heading);
    segs.push_back({py, px, ny, nx});
    py = ny;
    px = nx;
    heading += rng.uniform(-0.35, 0.35);
  }
  for (std::size_t y = 0; y < kGrid; ++y)
    for (std::size_t x = 0; x < kGrid; ++x) {
      if (!on_wafer(y, x)) continue;
      const double cy = static_cast<double>(y) + 0.5, cx = static_cast<double>(x) + 0.5;
      for (const auto& sg : segs) {
        const double vy = sg[2] - sg[0], vx = sg[3] - sg[1];
        const double l2 = vy * vy + vx * vx;
        double t = l2 > 0 ? ((cy - sg[0]) * vy + (cx - sg[1]) * vx) / l2 : 0;
        t = std::clamp(t, 0.0, 1.0);
        const double ey = sg[0] + t * vy - cy, ex = sg[1] + t * vx - cx;
        if (std::sqrt(ey * ey + ex * ex) <= width / 2 + 0.05) {
          f[y * kGrid + x] = 1;
          break;
        }
      }
    }
}

}  // namespace detail

/// Cells a single primitive marks as failing, drawn from its own stream.
inline Footprint primitive_footprint(Primitive p, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x100 + static_cast<std::uint64_t>(p)));
  Footprint f{};
  const double pi = std::numbers::pi, R = kRadius;
  switch (p) {
    case Primitive::C: {
      const double r = rng.uniform(0.15, 0.3) * R;
      detail::mark_if(f, rng, rng.uniform(0.8, 1.0),
                      [&](std::size_t y, std::size_t x) { return radial(y, x) <= r; });
      break;
    }
    case Primitive::D: {
      const double inner = rng.uniform(0.25, 0.32) * R, outer = rng.uniform(0.42, 0.5) * R;
      detail::mark_if(f, rng, rng.uniform(0.8, 1.0), [&](std::size_t y, std::size_t x) {
        const double r = radial(y, x);
        return r >= inner && r <= outer;
      });
      break;
    }
    case Primitive::EL: {
      const double width = rng.uniform(30, 70) * pi / 180, start = rng.uniform(0, 2 * pi);
      const double depth = rng.uniform(3, 7);
      detail::mark_if(f, rng, rng.uniform(0.75, 1.0), [&](std::size_t y, std::size_t x) {
        return radial(y, x) >= R - depth && detail::angle_diff(angular(y, x), start) <= width;
      });
      break;
    }
    case Primitive::ER: {
      const double thick = rng.range(2, 3);
      const bool full = rng.bernoulli(0.5);
      const double arc = full ? 2 * pi : rng.uniform(270, 360) * pi / 180;
      const double start = rng.uniform(0, 2 * pi);
      detail::mark_if(f, rng, rng.uniform(0.85, 1.0), [&](std::size_t y, std::size_t x) {
        return radial(y, x) > R - thick && detail::angle_diff(angular(y, x), start) <= arc;
      });
      break;
    }
    case Primitive::L: detail::render_loc(f, rng); break;
    case Primitive::NF: {
      const double rate = rng.uniform(0.6, 0.85);
      detail::mark_if(f, rng, rate, [](std::size_t, std::size_t) { return true; });
      break;
    }
    case Primitive::S: detail::render_scratch(f, rng); break;
    case Primitive::R: {
      const double rate = rng.uniform(0.08, 0.2);
      detail::mark_if(f, rng, rate, [](std::size_t, std::size_t) { return true; });
      break;
    }
  }
  return f;
}

/// Independent background failures over every on-wafer die.
inline Footprint noise_footprint(std::uint64_t seed, double rate) {
  Rng rng(derive_seed(seed, 0x200));
  Footprint f{};
  for (std::size_t i = 0; i < f.size(); ++i)
    if (rng.uniform() < rate && on_wafer(i / kGrid, i % kGrid)) f[i] = 1;
  return f;
}

/// Deterministic in (spec, seed): the union of each primitive's footprint
/// and background noise. Fails with DataError for combinations outside the
/// taxonomy.
inline WaferMap generate_wafer_map(const DefectSpec& spec, std::uint64_t seed,
                                   const GeneratorOptions& opts = {}) {
  (void)class_index(spec);
  WaferMap m = blank_wafer();
  auto apply = [&](const Footprint& f) {
    for (std::size_t i = 0; i < f.size(); ++i)
      if (f[i] && m.grid[i]) m.grid[i] = std::uint8_t(DieState::Fail);
  };
  for (auto p : spec) apply(primitive_footprint(p, seed));
  if (opts.noise_rate > 0) apply(noise_footprint(seed, opts.noise_rate));
  return m;
}

/// 1 where the die failed, 0 for pass dies, wafer edge and background.
inline Footprint derive_mask(const WaferMap& m) {
  Footprint f{};
  for (std::size_t i = 0; i < f.size(); ++i)
    f[i] = m.grid[i] == std::uint8_t(DieState::Fail);
  return f;
}

/// Checks the die-state domain and that off-wafer cells are background.
inline void validate_wafer_map(const WaferMap& m, std::size_t row = 0) {
  for (std::size_t i = 0; i < m.grid.size(); ++i)
    if (m.grid[i] > 2)
      throw DataError("sample " + std::to_string(row) + ": die state " +
                      std::to_string(m.grid[i]) + " outside {0,1,2}");
}

// Preprocessing.

/// Nearest-neighbour source index for destination index d of an n-wide grid.
inline std::size_t nearest_source(std::size_t d, std::size_t n) { return d * kGrid / n; }

/// Fills image[size*size] with state/2 and mask[size*size] with fail flags.
template <class T>
void rasterize(const WaferMap& m, std::size_t size, T* image, T* mask) {
  for (std::size_t y = 0; y < size; ++y) {
    const std::size_t sy = nearest_source(y, size);
    for (std::size_t x = 0; x < size; ++x) {
      const std::uint8_t s = m.at(sy, nearest_source(x, size));
      if (image) image[y * size + x] = static_cast<T>(s) / T{2};
      if (mask) mask[y * size + x] = s == std::uint8_t(DieState::Fail) ? T{1} : T{0};
    }
  }
}

struct WaferSample {
  Tensor<float> image;  // [1,S,S] in {0, 0.5, 1}
  Tensor<float> mask;   // [1,S,S] binary
  Tensor<float> label;  // [1,38] one-hot
  WaferMap raw;
  std::size_t class_index = 0;
};

inline Tensor<float> one_hot(std::size_t index, std::size_t classes = kNumClasses) {
  if (index >= classes)
    throw DataError("class index " + std::to_string(index) + " outside [0," +
                    std::to_string(classes) + ")");
  Tensor<float> t({1, classes}, 0.0f);
  t[index] = 1.0f;
  return t;
}

inline WaferSample preprocess(const WaferMap& m, std::size_t class_idx,
                              std::size_t size = kNetworkSize) {
  WaferSample s;
  s.image = Tensor<float>({1, size, size});
  s.mask = Tensor<float>({1, size, size});
  rasterize(m, size, s.image.ptr(), s.mask.ptr());
  s.label = one_hot(class_idx);
  s.raw = m;
  s.class_index = class_idx;
  return s;
}

// Datasets.

struct Dataset {
  std::vector<WaferMap> maps;
  std::vector<std::size_t> labels;

  std::size_t size() const { return maps.size(); }
  void push_back(const WaferMap& m, std::size_t label) {
    maps.push_back(m);
    labels.push_back(label);
  }
  Dataset subset(const std::vector<std::size_t>& idx) const {
    Dataset d;
    for (auto i : idx) d.push_back(maps.at(i), labels.at(i));
    return d;
  }
};

/// Seed of the i-th sample of class c; independent of how many samples the
/// other classes have.
inline std::uint64_t sample_seed(std::uint64_t root, std::size_t c, std::size_t i) {
  return derive_seed(root, (static_cast<std::uint64_t>(c) << 32) | i);
}

/// per_class samples of each listed class (all 38 by default), class-major.
inline Dataset generate_dataset(std::size_t per_class, std::uint64_t seed,
                                std::vector<std::size_t> classes = {},
                                const GeneratorOptions& opts = {}) {
  if (classes.empty())
    for (std::size_t c = 0; c < kNumClasses; ++c) classes.push_back(c);
  Dataset d;
  for (auto c : classes)
    for (std::size_t i = 0; i < per_class; ++i)
      d.push_back(generate_wafer_map(class_spec(c), sample_seed(seed, c, i), opts), c);
  return d;
}

/// Stratified shuffled split. The training share is round(fraction * N)
/// overall, distributed over classes by largest remainder; every class with
/// at least two members lands in both partitions. Partitions keep dataset
/// order.
inline std::pair<Dataset, Dataset> split(const Dataset& data, double fraction,
                                         std::uint64_t seed) {
  if (!(fraction > 0 && fraction < 1)) throw DataError("split fraction must lie in (0,1)");
  if (data.size() < 2) throw DataError("split needs at least two samples");
  std::size_t classes = 0;
  for (auto l : data.labels) classes = std::max(classes, l + 1);
  std::vector<std::vector<std::size_t>> members(classes);
  for (std::size_t i = 0; i < data.size(); ++i) members[data.labels[i]].push_back(i);

  const auto total = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(data.size())));
  std::vector<std::size_t> take(classes);
  std::vector<std::pair<double, std::size_t>> rema;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    const double exact = fraction * static_cast<double>(members[c].size());
    std::size_t t = static_cast<std::size_t>(std::floor(exact));
    if (members[c].size() >= 2) t = std::clamp<std::size_t>(t, 1, members[c].size() - 1);
    take[c] = t;
    assigned += t;
    rema.push_back({exact - std::floor(exact), c});
  }
  std::stable_sort(rema.begin(), rema.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < total && k < rema.size(); ++k) {
    const std::size_t c = rema[k].second;
    if (take[c] + (members[c].size() >= 2 ? 1 : 0) < members[c].size()) {
      ++take[c];
      ++assigned;
    }
  }

  Rng rng(derive_seed(seed, 0x5b11));
  std::vector<std::size_t> tr, va;
  for (std::size_t c = 0; c < classes; ++c) {
    auto idx = members[c];
    rng.shuffle(idx.begin(), idx.end());
    tr.insert(tr.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take[c]));
    va.insert(va.end(), idx.begin() + static_cast<std::ptrdiff_t>(take[c]), idx.end());
  }
  std::sort(tr.begin(), tr.end());
  std::sort(va.begin(), va.end());
  return {data.subset(tr), data.subset(va)};
}

/// Network tensors for the samples at `idx`.
struct Batch {
  Tensor<float> images;  // [B,1,S,S]
  Tensor<float> masks;   // [B,1,S,S]
  Tensor<float> labels;  // [B,1,38]
  std::vector<std::size_t> classes;
};

inline Batch make_batch(const Dataset& d, const std::vector<std::size_t>& idx,
                        std::size_t size = kNetworkSize) {
  const std::size_t b = idx.size(), plane = size * size;
  Batch out;
  out.images = Tensor<float>({b, 1, size, size});
  out.masks = Tensor<float>({b, 1, size, size});
  out.labels = Tensor<float>({b, 1, kNumClasses}, 0.0f);
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t k = idx[i];
    rasterize(d.maps.at(k), size, out.images.ptr() + i * plane, out.masks.ptr() + i * plane);
    out.labels[i * kNumClasses + d.labels.at(k)] = 1.0f;
    out.classes.push_back(d.labels[k]);
  }
  return out;
}

}  // namespace wscn
