#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <random>

#include "danlab/data.hpp"
#include "danlab/metrics.hpp"
#include "test_util.hpp"

using namespace danlab;
using namespace danlab::testing;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("danlab_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

LabelVolume random_mask(std::mt19937_64& rng, Index max_side = 20, int classes = 3) {
  std::uniform_int_distribution<Index> side(1, max_side);
  LabelVolume l({side(rng), side(rng)}, classes);
  // Blobs rather than salt and pepper so boundaries have structure.
  std::uniform_int_distribution<int> pick(0, classes - 1);
  for (Index i = 0; i < l.size(); ++i) l[i] = static_cast<std::uint8_t>(pick(rng));
  return l;
}

LabelVolume square(Index n, Index top, Index left, Index side) {
  LabelVolume l({n, n}, 2);
  for (Index i = top; i < top + side; ++i)
    for (Index j = left; j < left + side; ++j) l[i * n + j] = 1;
  return l;
}

}  // namespace

TEST(Generate, DeterministicAndShaped) {
  SyntheticSpec spec;
  spec.count = 5;
  spec.seed = 11;
  const auto a = generate(spec);
  const auto b = generate(spec);
  ASSERT_EQ(a.size(), 5u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image.shape(), (Shape{1, 32, 32}));
    EXPECT_TRUE((a[i].image.data() == b[i].image.data()).all());
    EXPECT_EQ(a[i].labels, b[i].labels);
    EXPECT_NO_THROW(a[i].labels.validate());
  }
  spec.seed = 12;
  EXPECT_NE(generate(spec)[0].labels, a[0].labels);
}

TEST(Generate, NoDeformationIsAnalyticGeometry) {
  SyntheticSpec spec;
  spec.count = 4;
  spec.deformation = 0;
  spec.noise_sigma = 0;
  spec.bias_amplitude = 0;
  for (const auto& s : generate(spec)) {
    for (Index i = 0; i < 32; ++i)
      for (Index j = 0; j < 32; ++j) {
        const int want = phantom_class(s.geometry, {static_cast<double>(i), static_cast<double>(j)}, 3);
        EXPECT_EQ(s.labels[i * 32 + j], want);
        EXPECT_FLOAT_EQ(s.image.data()[i * 32 + j], static_cast<float>(kClassIntensity[want]));
      }
  }
}

TEST(Generate, CoreFrequencyAndContainment) {
  SyntheticSpec spec;
  spec.count = 100;
  spec.seed = 3;
  for (const auto& s : generate(spec)) {
    Index core = 0;
    for (Index i = 0; i < s.labels.size(); ++i) core += s.labels[i] == 2;
    const double frac = static_cast<double>(core) / static_cast<double>(s.labels.size());
    EXPECT_GE(frac, 0.02);
    EXPECT_LE(frac, 0.30);
    // The core never touches background directly.
    for (Index i = 0; i < 32; ++i)
      for (Index j = 0; j < 32; ++j) {
        if (s.labels[i * 32 + j] != 2) continue;
        for (auto [di, dj] : {std::pair{0, 1}, {1, 0}, {0, -1}, {-1, 0}}) {
          const Index a = i + di, b = j + dj;
          if (a >= 0 && a < 32 && b >= 0 && b < 32) EXPECT_NE(s.labels[a * 32 + b], 0);
        }
      }
  }
}

TEST(Generate, ThreeDimensionalAndTwoClass) {
  SyntheticSpec spec;
  spec.count = 2;
  spec.shape = {20, 20, 20};
  spec.classes = 2;
  const auto samples = generate(spec);
  EXPECT_EQ(samples[0].labels.shape(), (Shape{20, 20, 20}));
  EXPECT_EQ(samples[0].labels.classes(), 2);
  spec.shape = {16, 16};
  spec.classes = 3;
  for (const auto& s : generate(spec)) {
    Index core = 0;
    for (Index i = 0; i < s.labels.size(); ++i) core += s.labels[i] == 2;
    EXPECT_GT(core, 0);
  }
}

TEST(Generate, RejectsInvalidSpecs) {
  SyntheticSpec spec;
  spec.shape = {8, 8};
  EXPECT_THROW(generate(spec), ConfigError);
  spec = SyntheticSpec{};
  spec.shell_min = 1;
  EXPECT_THROW(generate(spec), ConfigError);
  spec = SyntheticSpec{};
  spec.classes = 5;
  EXPECT_THROW(generate(spec), ConfigError);
}

TEST(VolumeFile, RoundTripsBitExact) {
  std::mt19937_64 rng(1);
  const Tensor<float> img = random_tensor<float>({3, 4, 5}, rng);
  const auto decoded = std::get<Tensor<float>>(decode_volume(encode_volume(img)));
  EXPECT_EQ(decoded.shape(), img.shape());
  EXPECT_EQ(std::memcmp(decoded.data().data(), img.data().data(), sizeof(float) * 60), 0);
  const LabelVolume labels = random_labels({6, 7}, 3, rng);
  EXPECT_EQ(std::get<LabelVolume>(decode_volume(encode_volume(labels), 3)), labels);
  const auto dir = scratch_dir("vol");
  write_volume(dir / "a.vol", img);
  write_volume(dir / "b.vol", labels);
  EXPECT_EQ(read_intensity(dir / "a.vol").data().matrix(), img.data().matrix());
  EXPECT_EQ(read_labels(dir / "b.vol", 3), labels);
}

TEST(VolumeFile, LittleEndianLayout) {
  const LabelVolume labels({2, 3}, 3, std::vector<std::uint8_t>{0, 1, 2, 2, 1, 0});
  const std::string bytes = encode_volume(labels);
  ASSERT_EQ(bytes.size(), 8u + 4 + 4 + 8 + 6);
  EXPECT_EQ(bytes.substr(0, 8), std::string("DANVOL1\0", 8));
  const unsigned char want[] = {1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 0, 1, 2, 2, 1, 0};
  EXPECT_EQ(std::memcmp(bytes.data() + 8, want, sizeof(want)), 0);
}

TEST(VolumeFile, ErrorsCarryOffsets) {
  const std::string good = encode_volume(LabelVolume({4, 4}, 2));
  try {
    decode_volume(good.substr(0, good.size() - 3));
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), good.size() - 3);
  }
  try {
    decode_volume("XXXXXXXX" + good.substr(8));
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
  }
  std::string unknown = good;
  unknown[8] = 7;
  try {
    decode_volume(unknown);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 8u);
  }
  EXPECT_THROW(decode_volume(good + "x"), FormatError);
  EXPECT_THROW(decode_volume(good.substr(0, 5)), FormatError);
}

TEST(Dataset, DirectoryRoundTrip) {
  SyntheticSpec spec;
  spec.count = 3;
  const auto samples = generate(spec);
  const auto dir = scratch_dir("ds");
  write_dataset(dir, samples);
  EXPECT_TRUE(std::filesystem::exists(dir / "index.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "0002_img.vol"));
  const auto back = read_dataset(dir);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].labels, samples[i].labels);
    EXPECT_EQ(back[i].image.shape(), samples[i].image.shape());
    EXPECT_TRUE((back[i].image.data() == samples[i].image.data()).all());
  }
}

TEST(Dice, Examples) {
  const LabelVolume a = square(20, 0, 0, 10);
  EXPECT_EQ(dice(a, a, 1), 1.0);
  EXPECT_EQ(dice(a, square(20, 10, 10, 10), 1), 0.0);
  // |P| = |T| = 100 with 50 shared voxels.
  EXPECT_EQ(dice(a, square(20, 5, 0, 10), 1), 0.5);
  EXPECT_EQ(dice(LabelVolume({3, 3}, 2), LabelVolume({3, 3}, 2), 1), 1.0);
  EXPECT_EQ(dice(LabelVolume({3, 3}, 2), a.shape() == Shape{3, 3} ? a : square(3, 0, 0, 1), 1), 0.0);
  EXPECT_THROW(dice(a, a, 2), DomainError);
  EXPECT_THROW(dice(a, square(19, 0, 0, 2), 1), ShapeError);
}

TEST(Dice, SymmetricAndBounded) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const LabelVolume p = random_labels({7, 9}, 3, rng);
    const LabelVolume t = random_labels({7, 9}, 3, rng);
    for (int c = 0; c < 3; ++c) {
      const double d = dice(p, t, c);
      EXPECT_EQ(d, dice(t, p, c));
      EXPECT_GE(d, 0.0);
      EXPECT_LE(d, 1.0);
    }
  }
}

TEST(Boundary, Examples) {
  const auto full = boundary_voxels(LabelVolume({4, 5}, 2, 1), 1);
  EXPECT_EQ(full.size(), 14u);
  LabelVolume single({5, 5}, 2);
  single[12] = 1;
  EXPECT_EQ(boundary_voxels(single, 1), (std::vector<Coord>{{2, 2}}));
  EXPECT_EQ(boundary_voxels(square(9, 2, 2, 5), 1).size(), 16u);
}

TEST(Boundary, MatchesBruteForce) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const LabelVolume l = random_mask(rng);
    for (int c = 0; c < 3; ++c) EXPECT_EQ(boundary_voxels(l, c), brute_boundary(l, c));
  }
  const LabelVolume l3 = random_labels({4, 5, 6}, 2, rng);
  EXPECT_EQ(boundary_voxels(l3, 1), brute_boundary(l3, 1));
}

TEST(Distances, Examples) {
  const LabelVolume a = square(12, 2, 2, 5);
  EXPECT_EQ(*avg_boundary_distance(a, a, 1), 0.0);
  EXPECT_EQ(*hausdorff(a, a, 1), 0.0);
  // Two parallel unit-width lines three rows apart.
  LabelVolume p({10, 10}, 2), t({10, 10}, 2);
  for (Index j = 0; j < 10; ++j) {
    p[2 * 10 + j] = 1;
    t[5 * 10 + j] = 1;
  }
  EXPECT_EQ(*avg_boundary_distance(p, t, 1), 3.0);
  LabelVolume u({5, 5}, 2), v({5, 5}, 2);
  u[0] = 1;
  v[3 * 5 + 4] = 1;
  EXPECT_EQ(*hausdorff(u, v, 1), 5.0);
  EXPECT_FALSE(avg_boundary_distance(a, LabelVolume({12, 12}, 2), 1).has_value());
  EXPECT_FALSE(hausdorff(LabelVolume({12, 12}, 2), a, 1).has_value());
}

TEST(Distances, MatchBruteForceOracleExactly) {
  std::mt19937_64 rng(4);
  int compared = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const LabelVolume p = random_mask(rng);
    LabelVolume t = random_labels(p.shape(), 3, rng);
    for (int c = 1; c < 3; ++c) {
      const auto bp = brute_boundary(p, c);
      const auto bt = brute_boundary(t, c);
      if (bp.empty() || bt.empty()) {
        EXPECT_FALSE(avg_boundary_distance(p, t, c).has_value());
        EXPECT_FALSE(hausdorff(p, t, c).has_value());
        continue;
      }
      const auto dpt = nearest_distances(bp, bt);
      const auto dtp = nearest_distances(bt, bp);
      double spt = 0, stp = 0;
      for (double d : dpt) spt += d;
      for (double d : dtp) stp += d;
      const double adb = (spt / static_cast<double>(dpt.size()) + stp / static_cast<double>(dtp.size())) / 2;
      const double hd = std::max(*std::max_element(dpt.begin(), dpt.end()), *std::max_element(dtp.begin(), dtp.end()));
      EXPECT_EQ(*avg_boundary_distance(p, t, c), adb);
      EXPECT_EQ(*hausdorff(p, t, c), hd);
      EXPECT_EQ(*directed_hausdorff(p, t, c), *std::max_element(dpt.begin(), dpt.end()));
      ++compared;
    }
  }
  EXPECT_GT(compared, 150);
}

TEST(Distances, DistanceMapMatchesBruteForce3D) {
  std::mt19937_64 rng(5);
  const LabelVolume l = random_labels({5, 4, 6}, 2, rng);
  const auto boundary = brute_boundary(l, 1);
  const auto map = boundary_distance_map(l, 1);
  ASSERT_EQ(map.size(), static_cast<std::size_t>(l.size()));
  for (Index i = 0; i < l.size(); ++i) {
    EXPECT_EQ(map[static_cast<std::size_t>(i)], nearest_distances({unravel(i, l.shape())}, boundary)[0]);
  }
}

TEST(Distances, HausdorffPropertiesAndTriangleInequality) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 60; ++trial) {
    const Shape s{12, 12};
    const LabelVolume a = random_labels(s, 2, rng);
    const LabelVolume b = random_labels(s, 2, rng);
    const LabelVolume c = random_labels(s, 2, rng);
    const auto ab = hausdorff(a, b, 1);
    const auto bc = hausdorff(b, c, 1);
    const auto ac = hausdorff(a, c, 1);
    if (!ab || !bc || !ac) continue;
    EXPECT_EQ(*ab, *hausdorff(b, a, 1));
    EXPECT_GE(*ab, *directed_hausdorff(a, b, 1));
    EXPECT_GE(*directed_hausdorff(a, b, 1), 0.0);
    EXPECT_LE(*ac, *ab + *bc + 1e-12);
  }
}

TEST(Score, Examples) {
  const LabelVolume a = square(16, 3, 3, 6);
  const auto perfect = evaluate(a, a);
  EXPECT_EQ(*composite_score(perfect, volume_diagonal(a.shape())), 1.0);
  const std::vector<ClassMetrics> m{{1, 0.8, 0.1 * 10, 0.2 * 10}, {2, 0.8, 0.1 * 10, 0.2 * 10}};
  EXPECT_NEAR(*composite_score(m, 10.0), 0.65, 1e-15);
  std::vector<ClassMetrics> undefined = m;
  undefined[1].adb.reset();
  EXPECT_FALSE(composite_score(undefined, 10.0).has_value());
  EXPECT_FALSE(mean_adb(undefined).has_value());
  EXPECT_EQ(mean_dice(m), 0.8);
  EXPECT_NEAR(volume_diagonal({3, 4}), 5.0, 1e-15);
}

TEST(Score, MonotoneInEachMetric) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<ClassMetrics> m{{1, u(rng), u(rng) * 5, u(rng) * 9}, {2, u(rng), u(rng) * 5, u(rng) * 9}};
    const double base = *composite_score(m, 20.0);
    auto better_hdd = m;
    better_hdd[0].hdd = *m[0].hdd * 0.5;
    EXPECT_GT(*composite_score(better_hdd, 20.0), base);
    auto better_adb = m;
    better_adb[1].adb = *m[1].adb * 0.5;
    EXPECT_GT(*composite_score(better_adb, 20.0), base);
    auto better_dice = m;
    better_dice[0].dice = m[0].dice + 0.01;
    EXPECT_GT(*composite_score(better_dice, 20.0), base);
  }
}

TEST(Evaluate, ForegroundClassesOnly) {
  std::mt19937_64 rng(8);
  const LabelVolume p = random_labels({10, 10}, 3, rng);
  const LabelVolume t = random_labels({10, 10}, 3, rng);
  const auto rows = evaluate(p, t);
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.dice, dice(p, t, r.label));
    EXPECT_EQ(r.adb, avg_boundary_distance(p, t, r.label));
    EXPECT_EQ(r.hdd, hausdorff(p, t, r.label));
  }
}
