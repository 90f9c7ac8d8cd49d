#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "wscn/data.hpp"
#include "wscn/npz.hpp"

using namespace wscn;

namespace {

const std::string kFixtures = WSCN_FIXTURE_DIR;

std::size_t fail_count(const WaferMap& m) {
  std::size_t n = 0;
  for (auto v : m.grid) n += v == 2;
  return n;
}

std::size_t on_wafer_count() {
  std::size_t n = 0;
  for (std::size_t y = 0; y < kGrid; ++y)
    for (std::size_t x = 0; x < kGrid; ++x) n += on_wafer(y, x);
  return n;
}

// The pattern written by fixtures/make_fixtures.py.
WaferMap fixture_map(std::size_t i) {
  WaferMap m;
  for (std::size_t y = 0; y < kGrid; ++y)
    for (std::size_t x = 0; x < kGrid; ++x) {
      const double dy = double(y) + 0.5 - 26, dx = double(x) + 0.5 - 26;
      const bool in = std::hypot(dy, dx) <= 26;
      m.at(y, x) = !in ? 0 : (y * 7 + x * 3 + i) % 11 == 0 ? 2 : 1;
    }
  return m;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("wscn_test_data_" + name);
}

}  // namespace

// Class table

TEST(ClassTable, GroupSizes) {
  std::size_t by_count[5] = {};
  for (std::size_t c = 0; c < kNumClasses; ++c) ++by_count[defect_count(c)];
  EXPECT_EQ(by_count[0], 1u);
  EXPECT_EQ(by_count[1], 8u);
  EXPECT_EQ(by_count[2], 13u);
  EXPECT_EQ(by_count[3], 12u);
  EXPECT_EQ(by_count[4], 4u);
}

TEST(ClassTable, IndexRoundTripAndOrderInsensitive) {
  for (std::size_t c = 0; c < kNumClasses; ++c) EXPECT_EQ(class_index(class_spec(c)), c);
  EXPECT_EQ(class_index({Primitive::S, Primitive::C}), 12u);
  EXPECT_EQ(class_name(12), "C+S");
  EXPECT_EQ(class_name(0), "Normal");
  EXPECT_EQ(class_name(37), "D+L+ER+S");
}

TEST(ClassTable, UnlistedCombinationRejected) {
  EXPECT_THROW(class_index({Primitive::C, Primitive::D}), DataError);
  EXPECT_THROW(class_index({Primitive::NF, Primitive::R}), DataError);
  EXPECT_THROW(generate_wafer_map({Primitive::C, Primitive::D}, 1), DataError);
  EXPECT_THROW(class_spec(38), DataError);
}

// Generator

TEST(Generator, Deterministic) {
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    EXPECT_EQ(generate_wafer_map(class_spec(c), 99), generate_wafer_map(class_spec(c), 99));
  }
  EXPECT_NE(generate_wafer_map(class_spec(1), 1), generate_wafer_map(class_spec(1), 2));
}

TEST(Generator, MapsSatisfyInvariants) {
  for (std::size_t c = 0; c < kNumClasses; ++c)
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto m = generate_wafer_map(class_spec(c), seed);
      EXPECT_NO_THROW(validate_wafer_map(m));
      std::size_t pass = 0;
      for (std::size_t y = 0; y < kGrid; ++y)
        for (std::size_t x = 0; x < kGrid; ++x) {
          if (!on_wafer(y, x)) EXPECT_EQ(m.at(y, x), 0);
          else EXPECT_NE(m.at(y, x), 0);
          pass += m.at(y, x) == 1;
        }
      EXPECT_GT(pass, 0u) << class_name(c);
    }
}

TEST(Generator, NormalFailFractionWithinBinomialBound) {
  const double dies = double(on_wafer_count());
  for (std::uint64_t seed = 0; seed < 200; ++seed)
    EXPECT_LE(fail_count(generate_wafer_map({}, seed)) / dies, 0.015) << "seed " << seed;
}

TEST(Generator, CenterStaysInsideThirtyPercentRadius) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto m = generate_wafer_map({Primitive::C}, seed, {.noise_rate = 0});
    EXPECT_GT(fail_count(m), 0u);
    for (std::size_t y = 0; y < kGrid; ++y)
      for (std::size_t x = 0; x < kGrid; ++x)
        if (m.at(y, x) == 2) EXPECT_LE(radial(y, x), 0.3 * kRadius);
  }
}

TEST(Generator, EdgeRingMaskInsideRimBandOrNoise) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto m = generate_wafer_map({Primitive::ER}, seed);
    const auto mask = derive_mask(m);
    const auto noise = noise_footprint(seed, GeneratorOptions{}.noise_rate);
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) EXPECT_TRUE(radial(i / kGrid, i % kGrid) > kRadius - 3 || noise[i]);
  }
}

TEST(Generator, MixedContainsBothFootprints) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto m = generate_wafer_map({Primitive::C, Primitive::S}, seed);
    for (auto p : {Primitive::C, Primitive::S}) {
      const auto f = primitive_footprint(p, seed);
      for (std::size_t i = 0; i < f.size(); ++i)
        if (f[i] && on_wafer(i / kGrid, i % kGrid)) EXPECT_EQ(m.grid[i], 2);
    }
  }
}

TEST(Generator, RemovingPrimitiveGivesSubsetMask) {
  for (std::size_t c = 9; c < kNumClasses; ++c) {
    const auto& spec = class_spec(c);
    const auto full = derive_mask(generate_wafer_map(spec, 17));
    for (std::size_t drop = 0; drop < spec.size(); ++drop) {
      DefectSpec less;
      for (std::size_t k = 0; k < spec.size(); ++k)
        if (k != drop) less.push_back(spec[k]);
      const auto part = derive_mask(generate_wafer_map(less, 17));
      for (std::size_t i = 0; i < part.size(); ++i)
        if (part[i]) ASSERT_TRUE(full[i]) << class_name(c) << " minus " << drop;
    }
  }
}

TEST(Generator, SingleDefectRatesInRange) {
  // Mean fail fractions over seeds sit inside the configured rate bands.
  const double dies = double(on_wafer_count());
  double nf = 0, r = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    nf += fail_count(generate_wafer_map({Primitive::NF}, seed, {.noise_rate = 0})) / dies;
    r += fail_count(generate_wafer_map({Primitive::R}, seed, {.noise_rate = 0})) / dies;
  }
  EXPECT_GT(nf / 40, 0.6);
  EXPECT_LT(nf / 40, 0.85);
  EXPECT_GT(r / 40, 0.08);
  EXPECT_LT(r / 40, 0.2);
}

// Masks and preprocessing

TEST(Mask, ZeroNoiseNormalIsEmpty) {
  const auto mask = derive_mask(generate_wafer_map({}, 3, {.noise_rate = 0}));
  EXPECT_EQ(std::count(mask.begin(), mask.end(), 1), 0);
}

TEST(Mask, SumEqualsFailCount) {
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const auto m = generate_wafer_map(class_spec(c), c);
    const auto mask = derive_mask(m);
    EXPECT_EQ(std::size_t(std::count(mask.begin(), mask.end(), 1)), fail_count(m));
  }
}

TEST(Preprocess, NearestSourceIndex) {
  EXPECT_EQ(nearest_source(0, 224), 0u);
  EXPECT_EQ(nearest_source(223, 224), 51u);
  EXPECT_EQ(nearest_source(5, 224), 1u);   // floor(260/224)
  EXPECT_EQ(nearest_source(100, 224), 23u);
}

TEST(Preprocess, ValueSetAndMaskAgreement) {
  const auto m = generate_wafer_map(class_spec(30), 5);
  const auto s = preprocess(m, 30);
  EXPECT_EQ(s.image.shape(), (Shape{1, 224, 224}));
  EXPECT_EQ(s.mask.shape(), (Shape{1, 224, 224}));
  std::set<float> values;
  for (std::size_t y = 0; y < 224; ++y)
    for (std::size_t x = 0; x < 224; ++x) {
      const float v = s.image[y * 224 + x];
      values.insert(v);
      EXPECT_EQ(v, m.at(y * 52 / 224, x * 52 / 224) / 2.0f);
      EXPECT_EQ(s.mask[y * 224 + x], v == 1.0f ? 1.0f : 0.0f);
    }
  EXPECT_EQ(values, (std::set<float>{0.0f, 0.5f, 1.0f}));
}

TEST(Preprocess, BlobMaskAreaScales) {
  const double ratio = (224.0 / 52) * (224.0 / 52);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto m = generate_wafer_map({Primitive::C}, seed, {.noise_rate = 0});
    const auto s = preprocess(m, 1);
    double big = 0;
    for (float v : s.mask.data()) big += v;
    EXPECT_NEAR(big / double(fail_count(m)), ratio, 0.15 * ratio);
  }
}

TEST(Preprocess, OneHotLabel) {
  const auto s = preprocess(blank_wafer(), 2);
  EXPECT_EQ(s.label.shape(), (Shape{1, 38}));
  for (std::size_t c = 0; c < 38; ++c) EXPECT_EQ(s.label[c], c == 2 ? 1.0f : 0.0f);
  EXPECT_THROW(one_hot(38), DataError);
}

TEST(Preprocess, BatchLabelShape) {
  const auto d = generate_dataset(1, 4, {3, 7, 11});
  const auto b = make_batch(d, {2, 0}, 32);
  EXPECT_EQ(b.images.shape(), (Shape{2, 1, 32, 32}));
  EXPECT_EQ(b.labels.shape(), (Shape{2, 1, 38}));
  EXPECT_EQ(b.labels[11], 1.0f);
  EXPECT_EQ(b.labels[38 + 3], 1.0f);
  EXPECT_EQ(b.classes, (std::vector<std::size_t>{11, 3}));
}

// Dataset generation and splitting

TEST(Dataset, SampleIndependentOfOtherClasses) {
  const auto a = generate_dataset(3, 8);
  const auto b = generate_dataset(3, 8, {12});
  EXPECT_EQ(b.maps[1], a.maps[12 * 3 + 1]);
}

TEST(Split, PaperSizes) {
  Dataset d;
  const WaferMap blank = blank_wafer();
  for (std::size_t i = 0; i < 38015; ++i) d.push_back(blank, i % 38);
  const auto [tr, va] = split(d, 0.8, 1);
  EXPECT_EQ(tr.size(), 30412u);
  EXPECT_EQ(va.size(), 7603u);
}

TEST(Split, TenSamples) {
  const auto d = generate_dataset(10, 3, {5});
  const auto [tr, va] = split(d, 0.8, 1);
  EXPECT_EQ(tr.size(), 8u);
  EXPECT_EQ(va.size(), 2u);
}

TEST(Split, PartitionStratifiedDeterministic) {
  Dataset d;
  for (std::size_t i = 0; i < 380; ++i) {
    WaferMap m = blank_wafer();
    m.grid[26 * kGrid + 10] = static_cast<std::uint8_t>(i % 3);  // tag so maps differ
    m.grid[0] = 0;
    m.grid[1 * kGrid + 26] = static_cast<std::uint8_t>((i / 3) % 3);
    d.push_back(m, i / 10);
  }
  // Identify samples by (label, order within class) through the tag pair.
  const auto [tr, va] = split(d, 0.8, 42);
  const auto [tr2, va2] = split(d, 0.8, 42);
  EXPECT_EQ(tr.maps, tr2.maps);
  EXPECT_EQ(va.labels, va2.labels);
  EXPECT_EQ(tr.size() + va.size(), 380u);
  std::vector<std::size_t> per_tr(38), per_va(38);
  for (auto l : tr.labels) ++per_tr[l];
  for (auto l : va.labels) ++per_va[l];
  for (std::size_t c = 0; c < 38; ++c) {
    EXPECT_EQ(per_tr[c], 8u);
    EXPECT_EQ(per_va[c], 2u);
  }
}

TEST(Split, UnionAndDisjointByIndex) {
  Dataset d;
  for (std::size_t i = 0; i < 57; ++i) {
    WaferMap m{};
    m.grid[0] = static_cast<std::uint8_t>(i % 3);
    m.grid[1] = static_cast<std::uint8_t>(i / 3 % 3);
    m.grid[2] = static_cast<std::uint8_t>(i / 9 % 3);
    m.grid[3] = static_cast<std::uint8_t>(i / 27 % 3);
    d.push_back(m, i % 4);
  }
  const auto [tr, va] = split(d, 0.8, 9);
  std::set<std::array<std::uint8_t, 4>> seen;
  for (const auto* part : {&tr, &va})
    for (const auto& m : part->maps) EXPECT_TRUE(seen.insert({m.grid[0], m.grid[1], m.grid[2], m.grid[3]}).second);
  EXPECT_EQ(seen.size(), 57u);
  EXPECT_EQ(tr.size(), 46u);  // round(45.6)
}

TEST(Split, RejectsDegenerateInput) {
  EXPECT_THROW(split(generate_dataset(1, 1, {0}), 0.8, 1), DataError);
  EXPECT_THROW(split(generate_dataset(4, 1, {0}), 1.0, 1), DataError);
}

// Archives

TEST(Archive, RoundTripBitIdentical) {
  const auto d = generate_dataset(2, 6);
  const auto bytes = serialize_dataset_archive(d);
  const auto back = parse_dataset_archive(bytes);
  EXPECT_EQ(back.maps, d.maps);
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(serialize_dataset_archive(back), bytes);
  const auto path = temp_path("rt.npz");
  save_dataset_archive(d, path.string());
  EXPECT_EQ(load_dataset_archive(path.string()).maps, d.maps);
  std::filesystem::remove(path);
}

TEST(Archive, NumpyWrittenFixtures) {
  for (const char* name : {"plain_u1.npz", "deflate_u1.npz", "deflate_i64.npz"}) {
    const auto d = load_dataset_archive(kFixtures + "/" + name);
    ASSERT_EQ(d.size(), 3u) << name;
    EXPECT_EQ(d.labels, (std::vector<std::size_t>{0, 12, 37})) << name;
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(d.maps[i], fixture_map(i)) << name;
  }
}

TEST(Archive, PerDefectFlagLabels) {
  const auto d = load_dataset_archive(kFixtures + "/flags_u1.npz");
  EXPECT_EQ(d.labels, (std::vector<std::size_t>{0, 12, 35}));
}

TEST(Archive, NonOneHotRowNamesRow) {
  try {
    load_dataset_archive(kFixtures + "/bad_label.npz");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos) << e.what();
  }
}

TEST(Archive, SingleNpyMap) {
  EXPECT_EQ(load_wafer_npy(kFixtures + "/single_i32.npy"), fixture_map(1));
  const auto path = temp_path("one.npy");
  save_wafer_npy(fixture_map(2), path.string());
  EXPECT_EQ(load_wafer_npy(path.string()), fixture_map(2));
  std::filesystem::remove(path);
}

TEST(Archive, TruncationFailsClosed) {
  const auto bytes = serialize_dataset_archive(generate_dataset(1, 2, {0, 1}));
  for (std::size_t keep : {std::size_t{0}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    Bytes cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(keep));
    EXPECT_THROW(parse_dataset_archive(cut), ParseError) << keep;
  }
}

TEST(Archive, CorruptPayloadDetected) {
  auto bytes = serialize_dataset_archive(generate_dataset(1, 2, {0, 1}));
  bytes[200] ^= 0x40;
  EXPECT_THROW(parse_dataset_archive(bytes), ParseError);
}

TEST(Npy, HeaderErrorsCarryOffsets) {
  const auto good = serialize_npy({"|u1", {2, 2}, Bytes{1, 2, 0, 1}});
  auto bad_magic = good;
  bad_magic[1] = 'X';
  try {
    parse_npy(bad_magic);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  auto bad_version = good;
  bad_version[6] = 9;
  try {
    parse_npy(bad_version);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 6u);
  }
  Bytes short_payload(good.begin(), good.end() - 1);
  EXPECT_THROW(parse_npy(short_payload), ParseError);
}

TEST(Npy, RoundTripAndAlignment) {
  const NpyArray a{"<i4", {3}, Bytes{1, 0, 0, 0, 2, 0, 0, 0, 255, 255, 255, 255}};
  const auto bytes = serialize_npy(a);
  EXPECT_EQ((bytes.size() - a.data.size()) % 64, 0u);
  const auto back = parse_npy(bytes);
  EXPECT_EQ(back.shape, a.shape);
  EXPECT_EQ(npy_int(back, 2), -1);
}

TEST(Npy, UnsupportedDtypeRejected) {
  auto bytes = serialize_npy({"|u1", {1}, Bytes{1}});
  const std::string text(bytes.begin(), bytes.end());
  const auto at = text.find("|u1");
  bytes[at] = '>';
  bytes[at + 1] = 'c';
  bytes[at + 2] = '8';
  EXPECT_THROW(parse_npy(bytes), ParseError);
}
