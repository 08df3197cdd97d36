// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <fstream>
#include <random>
#include <set>

#include "kgpl/data.hpp"
#include "testing.hpp"

using namespace kgpl;
using kgpl::testing::code_of;

namespace {

PhantomSpec small_spec(std::uint64_t seed = 7) {
  PhantomSpec s;
  s.size = 24;
  s.seed = seed;
  return s;
}

std::int64_t count_label(const LabelMap& m, int value) {
  std::int64_t n = 0;
  for (std::int64_t i = 0; i < m.size(); ++i) n += m.at(i) == value;
  return n;
}

// Generator that always returns the same value.
struct Pinned {
  using result_type = std::uint32_t;
  result_type value;
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return 0xFFFFFFFFu; }
  result_type operator()() { return value; }
};

}  // namespace

TEST_CASE("phantoms are deterministic in seed and attributes", "[data]") {
  const SubjectAttributes attrs{40, Sex::female, std::nullopt};
  const auto a = generate_phantom(small_spec(), attrs);
  const auto b = generate_phantom(small_spec(), attrs);
  CHECK(a.volume == b.volume);
  CHECK(a.tissue == b.tissue);
  CHECK(a.structure == b.structure);
  CHECK_FALSE(generate_phantom(small_spec(8), attrs).volume == a.volume);
  validate_pair(a.volume, a.tissue);
  validate_pair(a.volume, a.structure);
}

TEST_CASE("age moves the innermost boundary only when age_effect is set", "[data]") {
  auto spec = small_spec();
  spec.size = 32;
  const auto young = generate_phantom(spec, {20, Sex::male, std::nullopt});
  const auto old = generate_phantom(spec, {80, Sex::male, std::nullopt});
  CHECK(count_label(old.tissue, 1) > count_label(young.tissue, 1));

  spec.age_effect = 0.0;
  CHECK(generate_phantom(spec, {20, Sex::male, std::nullopt}).tissue ==
        generate_phantom(spec, {80, Sex::male, std::nullopt}).tissue);
}

TEST_CASE("structures refine tissues", "[data][property]") {
  const auto spec = small_spec();
  const auto table = structure_to_tissue_table(spec);
  CHECK(table.size() == 10);
  CHECK(table[0] == 0);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto s = spec;
    s.seed = seed;
    const auto p = generate_phantom(s, random_attributes(seed));
    CHECK(map_structures(p.structure, table, spec.tissue_classes()) == p.tissue);
    std::set<int> present;
    for (std::int64_t i = 0; i < p.structure.size(); ++i) present.insert(p.structure.at(i));
    CHECK(present.size() == 10);
  }
}

TEST_CASE("tissue intensities are well separated", "[data]") {
  const auto p = generate_phantom(small_spec(), {50, Sex::male, std::nullopt});
  std::array<double, 4> sum{}, count{};
  for (std::int64_t i = 0; i < p.tissue.size(); ++i) {
    const auto t = static_cast<std::size_t>(p.tissue.at(i));
    sum[t] += p.volume.data()[static_cast<std::size_t>(i)];
    count[t] += 1;
  }
  CHECK(sum[0] == 0.0);
  for (std::size_t t = 1; t < 3; ++t) CHECK(sum[t + 1] / count[t + 1] - sum[t] / count[t] >= 3 * 0.25);
}

TEST_CASE("phantom specs are validated", "[data]") {
  auto s = small_spec();
  s.num_structures = 10;
  CHECK(code_of([&] { s.validate(); }) == ErrorCode::BadSpec);
  s = small_spec();
  s.age_effect = 1.5;
  CHECK(code_of([&] { s.validate(); }) == ErrorCode::BadSpec);
  s = small_spec();
  s.size = 4;
  CHECK(code_of([&] { s.validate(); }) == ErrorCode::BadSpec);
  s = small_spec();
  s.noise_sigma = 0.5;
  CHECK(code_of([&] { s.validate(); }) == ErrorCode::BadSpec);
  CHECK(PhantomSpec::from_json(small_spec().to_json()).to_json() == small_spec().to_json());
}

TEST_CASE("boundary corruption touches only boundary voxels", "[data]") {
  const auto p = generate_phantom(small_spec(), {30, Sex::female, std::nullopt});
  const auto noisy = corrupt_boundary(p.tissue, 0.05, 3);
  CHECK(noisy == corrupt_boundary(p.tissue, 0.05, 3));
  CHECK(corrupt_boundary(p.tissue, 0.0, 3) == p.tissue);
  std::int64_t changed = 0;
  const auto d = p.tissue.dims();
  for (std::int64_t i = 0; i < d.x; ++i)
    for (std::int64_t j = 0; j < d.y; ++j)
      for (std::int64_t k = 0; k < d.z; ++k) {
        if (noisy.at(i, j, k) == p.tissue.at(i, j, k)) continue;
        ++changed;
        bool neighbour = false;
        for (auto [di, dj, dk] : {std::array{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}) {
          const auto a = i + di, b = j + dj, c = k + dk;
          if (a < 0 || b < 0 || c < 0 || a >= d.x || b >= d.y || c >= d.z) continue;
          neighbour |= p.tissue.at(a, b, c) == noisy.at(i, j, k);
        }
        REQUIRE(neighbour);
      }
  CHECK(changed > 0);
  CHECK(code_of([&] { (void)corrupt_boundary(p.tissue, 1.5, 0); }) == ErrorCode::OutOfRange);
}

TEST_CASE("volumes and labels round trip through both formats", "[data]") {
  testing::TempDir dir;
  const Geometry g{{5, 4, 3}, {1.0, 1.0, 2.0}, {-3.5, 0.25, 10.0}};
  std::vector<double> v(60);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sin(static_cast<double>(i)) * 1e3 + 1.0 / 3.0;
  const Volume vol(g, v);
  std::vector<int> lv(60);
  for (std::size_t i = 0; i < lv.size(); ++i) lv[i] = static_cast<int>(i % 7);
  const LabelMap lab(g, 7, lv);
  std::vector<int> wide_values(60, 0);
  wide_values[5] = 299;
  const LabelMap wide(g, 300, wide_values);
  for (const char* ext : {".nii", ".kgt"}) {
    const auto vp = dir / (std::string("v") + ext);
    const auto lp = dir / (std::string("l") + ext);
    const auto wp = dir / (std::string("w") + ext);
    save_volume(vp, vol);
    save_labels(lp, lab);
    save_labels(wp, wide);
    CHECK(load_volume(vp) == vol);
    CHECK(load_labels(lp) == lab);
    CHECK(load_labels(wp) == wide);
  }
}

TEST_CASE("broken volume files are reported", "[data]") {
  testing::TempDir dir;
  const Volume vol(Geometry{{4, 4, 4}, {1, 1, 1}, {0, 0, 0}});
  save_volume(dir / "v.nii", vol);
  std::string bytes;
  {
    std::ifstream in(dir / "v.nii", std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  {
    std::ofstream out(dir / "t.nii", std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK(code_of([&] { (void)load_volume(dir / "t.nii"); }) == ErrorCode::IOFailure);
  {
    auto bad = bytes;
    bad[344] = 'x';
    std::ofstream out(dir / "m.nii", std::ios::binary);
    out << bad;
  }
  CHECK(code_of([&] { (void)load_volume(dir / "m.nii"); }) == ErrorCode::UnsupportedFormat);
  CHECK(code_of([&] { (void)load_volume(dir / "v.mha"); }) == ErrorCode::UnsupportedFormat);
  CHECK(code_of([&] { (void)load_volume(dir / "missing.nii"); }) == ErrorCode::IOFailure);
}

TEST_CASE("preprocessing crops around the foreground and standardises it", "[data]") {
  const auto p = generate_phantom(small_spec(), {50, Sex::male, std::nullopt});
  const auto pre = preprocess(p.volume, {16, 16, 16});
  CHECK(pre.volume.dims() == Dims3{16, 16, 16});
  double sum = 0, sq = 0;
  std::int64_t n = 0;
  const auto cropped = crop(p.volume, pre.box);
  for (std::size_t i = 0; i < cropped.data().size(); ++i) {
    if (cropped.data()[i] == 0.0) continue;
    sum += pre.volume.data()[i];
    sq += pre.volume.data()[i] * pre.volume.data()[i];
    ++n;
  }
  CHECK(std::fabs(sum / static_cast<double>(n)) < 1e-6);
  CHECK(std::fabs(sq / static_cast<double>(n) - 1.0) < 1e-6);

  const auto centre = crop(p.tissue, pre.box).at(8, 8, 8);
  const auto full_centre = p.tissue.at(pre.box.start[0] + 8, pre.box.start[1] + 8, pre.box.start[2] + 8);
  CHECK(centre == full_centre);
  CHECK(centre != 0);
  CHECK(crop(p.tissue, pre.box).dims() == Dims3{16, 16, 16});
}

TEST_CASE("preprocessing is idempotent", "[data][property]") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    auto s = small_spec(seed);
    const auto p = generate_phantom(s, random_attributes(seed));
    const auto once = preprocess(p.volume, {16, 16, 16});
    const auto twice = preprocess(once.volume, {16, 16, 16});
    CHECK(twice.box.start == std::array<std::int64_t, 3>{0, 0, 0});
    for (std::size_t i = 0; i < once.volume.data().size(); ++i)
      REQUIRE(std::fabs(twice.volume.data()[i] - once.volume.data()[i]) < 1e-9);
  }
  const auto padded = preprocess(generate_phantom(small_spec(), {50, Sex::male, std::nullopt}).volume, {40, 40, 40});
  CHECK(padded.volume.dims() == Dims3{40, 40, 40});
  CHECK(padded.box.start[0] < 0);
}

TEST_CASE("empty volumes have no foreground", "[data]") {
  const Volume empty(Geometry{{8, 8, 8}, {1, 1, 1}, {0, 0, 0}});
  CHECK(code_of([&] { (void)preprocess(empty, {4, 4, 4}); }) == ErrorCode::EmptyForeground);
}

TEST_CASE("flips are involutions", "[data][property]") {
  const auto p = generate_phantom(small_spec(), {50, Sex::male, std::nullopt});
  CHECK(flip(p.volume, {false, false, false}) == p.volume);
  for (int mask = 1; mask < 8; ++mask) {
    const std::array<bool, 3> axes{(mask & 1) != 0, (mask & 2) != 0, (mask & 4) != 0};
    CHECK(flip(flip(p.volume, axes), axes) == p.volume);
    CHECK(flip(flip(p.tissue, axes), axes) == p.tissue);
    CHECK_FALSE(flip(p.tissue, axes) == p.tissue);
  }
  const auto f = flip(p.tissue, {true, false, false});
  CHECK(f.at(0, 3, 4) == p.tissue.at(23, 3, 4));
  const auto fs = flip(p, {false, true, true});
  CHECK(fs.structure == flip(p.structure, {false, true, true}));
}

TEST_CASE("flip draws are fair", "[data]") {
  Pinned low{0}, high{0xFFFFFFFFu};
  CHECK(draw_flips(low) == std::array<bool, 3>{true, true, true});
  CHECK(draw_flips(high) == std::array<bool, 3>{false, false, false});
  std::mt19937_64 rng(2024);
  std::array<int, 3> flips{};
  const int trials = 10000;
  for (int i = 0; i < trials; ++i) {
    const auto a = draw_flips(rng);
    for (std::size_t k = 0; k < 3; ++k) flips[k] += a[k];
  }
  for (int f : flips) {
    CHECK(f >= 0.47 * trials);
    CHECK(f <= 0.53 * trials);
  }
}

TEST_CASE("splits follow the ratios and partition the indices", "[data][property]") {
  const auto s = split(100, {0.8, 0.1, 0.1}, 5);
  CHECK(s.train.size() == 80);
  CHECK(s.val.size() == 10);
  CHECK(s.test.size() == 10);
  const auto again = split(100, {0.8, 0.1, 0.1}, 5);
  CHECK(again.train == s.train);
  CHECK(again.test == s.test);
  CHECK(split(100, {0.8, 0.1, 0.1}, 6).test != s.test);

  for (std::size_t n : {1u, 7u, 10u, 33u, 301u}) {
    const auto p = split(n, {0.7, 0.2, 0.1}, n);
    std::vector<std::size_t> all;
    for (const auto* part : {&p.train, &p.val, &p.test}) all.insert(all.end(), part->begin(), part->end());
    std::sort(all.begin(), all.end());
    REQUIRE(all.size() == n);
    for (std::size_t i = 0; i < n; ++i) REQUIRE(all[i] == i);
  }
  // 3.5 / 1.75 / 1.75: the two largest fractional parts get the spare indices.
  const auto odd = split(7, {0.5, 0.25, 0.25}, 1);
  CHECK(odd.train.size() == 3);
  CHECK(odd.val.size() == 2);
  CHECK(odd.test.size() == 2);
  CHECK(code_of([] { (void)split(10, {0.5, 0.5, 0.5}, 0); }) == ErrorCode::BadRatios);
  CHECK(code_of([] { (void)split(10, {-0.1, 0.6, 0.5}, 0); }) == ErrorCode::BadRatios);
}

TEST_CASE("dataset on disk matches the in-memory generator", "[data]") {
  testing::TempDir dir;
  auto spec = small_spec();
  spec.size = 16;
  const auto manifest = write_phantom_dataset(dir / "ds", spec, 10);
  CHECK(manifest.entries.size() == 10);
  CHECK(std::filesystem::exists(dir / "ds" / "manifest.json"));
  const auto loaded = load_dataset(dir / "ds");
  const auto memory = generate_dataset(spec, 10);
  REQUIRE(loaded.samples.size() == 10);
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(loaded.samples[i].volume == memory.samples[i].volume);
    CHECK(loaded.samples[i].structure == memory.samples[i].structure);
    CHECK(loaded.samples[i].attrs == memory.samples[i].attrs);
    CHECK(loaded.split_of[i] == memory.split_of[i]);
  }
  CHECK(loaded.indices("train").size() == 8);
  CHECK(load_manifest(dir / "ds").to_json() == manifest.to_json());
}
