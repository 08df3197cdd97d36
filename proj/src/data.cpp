// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0

#include "kgpl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <numbers>
#include <numeric>

#include "kgpl/container.hpp"

namespace kgpl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace

// ------------------------------------------------------------------ spec

void PhantomSpec::validate() const {
  if (size < 8) throw Error(ErrorCode::BadSpec, "size must be >= 8");
  if (num_tissues < 1 || tissue_classes() < 2) throw Error(ErrorCode::BadSpec, "need at least one tissue");
  if (num_structures < num_tissues || num_structures % num_tissues != 0)
    throw Error(ErrorCode::BadSpec, "num_structures must be a positive multiple of num_tissues");
  if (structure_classes() > 65536) throw Error(ErrorCode::BadSpec, "too many structures");
  if (!(age_effect >= 0.0 && age_effect <= 1.0)) throw Error(ErrorCode::BadSpec, "age_effect must lie in [0, 1]");
  // Neighbouring tissue means are 1 apart; keep them at least 3 sigma apart.
  if (!(noise_sigma >= 0.0 && 3.0 * noise_sigma <= 1.0)) throw Error(ErrorCode::BadSpec, "noise_sigma must lie in [0, 1/3]");
}

json PhantomSpec::to_json() const {
  return {{"size", size},         {"num_tissues", num_tissues}, {"num_structures", num_structures},
          {"age_effect", age_effect}, {"noise_sigma", noise_sigma}, {"seed", seed}};
}

PhantomSpec PhantomSpec::from_json(const json& j) {
  PhantomSpec s;
  s.size = j.value("size", s.size);
  s.num_tissues = j.value("num_tissues", s.num_tissues);
  s.num_structures = j.value("num_structures", s.num_structures);
  s.age_effect = j.value("age_effect", s.age_effect);
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.seed = j.value("seed", s.seed);
  return s;
}

// ------------------------------------------------------------------ generation

std::vector<int> structure_to_tissue_table(const PhantomSpec& spec) {
  spec.validate();
  const int per = spec.num_structures / spec.num_tissues;
  std::vector<int> table(static_cast<std::size_t>(spec.structure_classes()), 0);
  for (int s = 1; s <= spec.num_structures; ++s) table[static_cast<std::size_t>(s)] = (s - 1) / per + 1;
  return table;
}

LabelMap map_structures(const LabelMap& structure, std::span<const int> table, int tissue_classes) {
  LabelMap out(structure.geometry(), tissue_classes);
  for (std::int64_t v = 0; v < structure.size(); ++v) {
    const int s = structure.at(v);
    if (s < 0 || static_cast<std::size_t>(s) >= table.size())
      throw Error(ErrorCode::InvalidLabel, "structure label outside mapping table");
    out.set(v, table[static_cast<std::size_t>(s)]);
  }
  return out;
}

Sample generate_phantom(const PhantomSpec& spec, const SubjectAttributes& attrs) {
  spec.validate();
  validate(attrs);
  std::mt19937_64 rng(spec.seed);

  const auto n = spec.size;
  const double half = 0.5 * static_cast<double>(n - 1);
  const Vec3 centre{half + uniform(rng, -1.0, 1.0), half + uniform(rng, -1.0, 1.0), half + uniform(rng, -1.0, 1.0)};
  const Vec3 radius{0.40 * n * uniform(rng, 0.92, 1.0), 0.40 * n * uniform(rng, 0.92, 1.0),
                    0.40 * n * uniform(rng, 0.92, 1.0)};

  struct Harmonic {
    double amplitude, polar_freq, azimuth_freq, polar_phase, azimuth_phase;
  };
  std::vector<Harmonic> harmonics;
  for (int h = 1; h <= 3; ++h)
    harmonics.push_back({uniform(rng, 0.0, 0.05 / h), static_cast<double>(h), static_cast<double>(h),
                         uniform(rng, 0.0, 2 * std::numbers::pi), uniform(rng, 0.0, 2 * std::numbers::pi)});

  // Normalised radial boundaries between tissues. The innermost one grows with
  // age, squeezing the outer tissues.
  const int t_count = spec.num_tissues;
  const double inner = 0.30 + uniform(rng, -0.03, 0.03) + spec.age_effect * 0.35 * attrs.age_years / 100.0;
  std::vector<double> bounds;
  for (int t = 1; t < t_count; ++t)
    bounds.push_back(inner + (1.0 - inner) * static_cast<double>(t - 1) / static_cast<double>(t_count - 1));
  const double sector_offset = uniform(rng, -0.1, 0.1);
  const int per = spec.num_structures / spec.num_tissues;

  const Geometry geom{{n, n, n}, {1.0, 1.0, 1.0}, {0.0, 0.0, 0.0}};
  Sample s{"", Volume(geom), LabelMap(geom, spec.tissue_classes()), LabelMap(geom, spec.structure_classes()), attrs};
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);

  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t k = 0; k < n; ++k) {
        const double dx = (i - centre[0]) / radius[0];
        const double dy = (j - centre[1]) / radius[1];
        const double dz = (k - centre[2]) / radius[2];
        const double r = std::sqrt(dx * dx + dy * dy + dz * dz);
        const double polar = r > 0 ? std::acos(std::clamp(dz / r, -1.0, 1.0)) : 0.0;
        const double azimuth = std::atan2(dy, dx);
        double deform = 1.0;
        for (const auto& h : harmonics)
          deform += h.amplitude * std::sin(h.polar_freq * polar + h.polar_phase) *
                    std::cos(h.azimuth_freq * azimuth + h.azimuth_phase);
        const double rho = r / deform;
        if (rho > 1.0) continue;
        int tissue = 1;
        for (double b : bounds)
          if (rho > b) ++tissue;
        double a = std::fmod(azimuth + sector_offset + 4 * std::numbers::pi, 2 * std::numbers::pi);
        int sector = std::min(per - 1, static_cast<int>(a / (2 * std::numbers::pi) * per));
        s.tissue.set(i, j, k, tissue);
        s.structure.set(i, j, k, (tissue - 1) * per + sector + 1);
        s.volume.at(i, j, k) = std::max(0.05, static_cast<double>(tissue) + noise(rng));
      }
  return s;
}

LabelMap corrupt_boundary(const LabelMap& labels, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw Error(ErrorCode::OutOfRange, "fraction must lie in [0, 1]");
  const auto& d = labels.dims();
  std::mt19937_64 rng(seed);
  std::vector<std::int64_t> boundary;
  std::vector<std::vector<int>> neighbours;
  static constexpr int kOff[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (std::int64_t i = 0; i < d.x; ++i)
    for (std::int64_t j = 0; j < d.y; ++j)
      for (std::int64_t k = 0; k < d.z; ++k) {
        const int own = labels.at(i, j, k);
        std::vector<int> other;
        for (const auto& o : kOff) {
          const auto a = i + o[0], b = j + o[1], c = k + o[2];
          if (a < 0 || b < 0 || c < 0 || a >= d.x || b >= d.y || c >= d.z) continue;
          const int v = labels.at(a, b, c);
          if (v != own) other.push_back(v);
        }
        if (!other.empty()) {
          boundary.push_back(d.index(i, j, k));
          neighbours.push_back(std::move(other));
        }
      }
  LabelMap out = labels;
  const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(boundary.size())));
  std::vector<std::size_t> order(boundary.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t n = 0; n < count; ++n) {
    const auto& cand = neighbours[order[n]];
    out.set(boundary[order[n]], cand[std::uniform_int_distribution<std::size_t>(0, cand.size() - 1)(rng)]);
  }
  return out;
}

SubjectAttributes random_attributes(std::uint64_t seed) {
  static const std::vector<std::string> kDiagnoses = {"Alzheimer's disease", "mild cognitive impairment",
                                                      "autism spectrum disorder", "attention deficit disorder"};
  std::mt19937_64 rng(seed);
  SubjectAttributes a;
  a.age_years = std::uniform_int_distribution<int>(5, 95)(rng);
  const double u = uniform(rng, 0.0, 1.0);
  a.sex = u < 0.45 ? Sex::male : (u < 0.9 ? Sex::female : Sex::unspecified);
  if (uniform(rng, 0.0, 1.0) < 0.4)
    a.diagnosis = kDiagnoses[std::uniform_int_distribution<std::size_t>(0, kDiagnoses.size() - 1)(rng)];
  return a;
}

// ------------------------------------------------------------------ NIfTI-1

namespace {

constexpr std::size_t kNiftiHeader = 348;
constexpr std::int16_t kUint8 = 2, kInt16 = 4, kInt32 = 8, kFloat32 = 16, kFloat64 = 64, kUint16 = 512;

template <typename T>
void put(std::vector<char>& buf, std::size_t off, T v) {
  std::memcpy(buf.data() + off, &v, sizeof(T));
}

template <typename T>
T get(const std::vector<char>& buf, std::size_t off) {
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  return v;
}

std::vector<char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IOFailure, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const std::vector<char>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IOFailure, "cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::IOFailure, "write failed for " + path.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::IOFailure, "rename failed for " + path.string());
}

// NIfTI stores x fastest; Dims3 stores z fastest.
std::int64_t nifti_index(const Dims3& d, std::int64_t i, std::int64_t j, std::int64_t k) {
  return i + d.x * (j + d.y * k);
}

struct NiftiImage {
  Geometry geometry;
  std::int16_t datatype = 0;
  json extra = json::object();
  std::vector<double> values;  // Dims3 order
};

std::vector<char> encode_nifti(const Geometry& g, std::int16_t datatype, const json& extra,
                               const std::function<double(std::int64_t)>& value_at) {
  json ext = extra;
  ext["spacing"] = g.spacing;
  ext["origin"] = g.origin;
  std::string text = json{{"kgpl", ext}}.dump();
  const std::size_t esize = (8 + text.size() + 15) / 16 * 16;
  text.resize(esize - 8, '\0');
  const std::size_t offset = kNiftiHeader + 4 + esize;

  std::size_t bytes_per = 0;
  switch (datatype) {
    case kUint8: bytes_per = 1; break;
    case kUint16: bytes_per = 2; break;
    case kFloat64: bytes_per = 8; break;
    default: throw Error(ErrorCode::UnsupportedFormat, "unsupported datatype for writing");
  }
  const auto& d = g.dims;
  std::vector<char> buf(offset + bytes_per * static_cast<std::size_t>(d.voxels()), 0);
  put<std::int32_t>(buf, 0, 348);
  const std::int16_t dim[8] = {3, static_cast<std::int16_t>(d.x), static_cast<std::int16_t>(d.y),
                               static_cast<std::int16_t>(d.z), 1, 1, 1, 1};
  for (int n = 0; n < 8; ++n) put<std::int16_t>(buf, 40 + 2 * n, dim[n]);
  put<std::int16_t>(buf, 70, datatype);
  put<std::int16_t>(buf, 72, static_cast<std::int16_t>(8 * bytes_per));
  const float pixdim[8] = {1.0f, static_cast<float>(g.spacing[0]), static_cast<float>(g.spacing[1]),
                           static_cast<float>(g.spacing[2]), 1.0f, 1.0f, 1.0f, 1.0f};
  for (int n = 0; n < 8; ++n) put<float>(buf, 76 + 4 * n, pixdim[n]);
  put<float>(buf, 108, static_cast<float>(offset));
  put<float>(buf, 112, 1.0f);  // scl_slope
  buf[123] = 2;                // millimetres
  put<std::int16_t>(buf, 252, 1);  // qform_code
  put<std::int16_t>(buf, 254, 1);  // sform_code
  for (int a = 0; a < 3; ++a) put<float>(buf, 268 + 4 * a, static_cast<float>(g.origin[a]));
  for (int r = 0; r < 3; ++r) {
    put<float>(buf, 280 + 16 * r + 4 * r, static_cast<float>(g.spacing[r]));
    put<float>(buf, 280 + 16 * r + 12, static_cast<float>(g.origin[r]));
  }
  std::memcpy(buf.data() + 344, "n+1\0", 4);
  buf[348] = 1;  // extension present
  put<std::int32_t>(buf, 352, static_cast<std::int32_t>(esize));
  put<std::int32_t>(buf, 356, 0);
  std::memcpy(buf.data() + 360, text.data(), text.size());

  char* out = buf.data() + offset;
  for (std::int64_t i = 0; i < d.x; ++i)
    for (std::int64_t j = 0; j < d.y; ++j)
      for (std::int64_t k = 0; k < d.z; ++k) {
        const double v = value_at(d.index(i, j, k));
        char* p = out + bytes_per * static_cast<std::size_t>(nifti_index(d, i, j, k));
        switch (datatype) {
          case kUint8: { auto x = static_cast<std::uint8_t>(v); std::memcpy(p, &x, 1); break; }
          case kUint16: { auto x = static_cast<std::uint16_t>(v); std::memcpy(p, &x, 2); break; }
          default: std::memcpy(p, &v, 8);
        }
      }
  return buf;
}

NiftiImage decode_nifti(const fs::path& path) {
  const auto buf = read_file(path);
  if (buf.size() < kNiftiHeader) throw Error(ErrorCode::IOFailure, "truncated NIfTI header in " + path.string());
  if (get<std::int32_t>(buf, 0) != 348 || std::memcmp(buf.data() + 344, "n+1", 4) != 0)
    throw Error(ErrorCode::UnsupportedFormat, "not a single-file little-endian NIfTI-1 image: " + path.string());
  NiftiImage img;
  const auto ndim = get<std::int16_t>(buf, 40);
  if (ndim < 1 || ndim > 7) throw Error(ErrorCode::UnsupportedFormat, "bad dim[0]");
  std::int64_t ext[3] = {1, 1, 1};
  for (int n = 0; n < std::min<int>(ndim, 3); ++n) ext[n] = get<std::int16_t>(buf, 42 + 2 * n);
  for (int n = 3; n < ndim; ++n)
    if (get<std::int16_t>(buf, 42 + 2 * n) > 1) throw Error(ErrorCode::UnsupportedFormat, "only 3D images are supported");
  img.geometry.dims = {ext[0], ext[1], ext[2]};
  if (ext[0] < 1 || ext[1] < 1 || ext[2] < 1) throw Error(ErrorCode::UnsupportedFormat, "non-positive dimension");
  for (int a = 0; a < 3; ++a) {
    img.geometry.spacing[a] = std::fabs(get<float>(buf, 80 + 4 * a));
    if (img.geometry.spacing[a] == 0.0) img.geometry.spacing[a] = 1.0;
    img.geometry.origin[a] = get<std::int16_t>(buf, 254) > 0 ? get<float>(buf, 280 + 16 * a + 12) : get<float>(buf, 268 + 4 * a);
  }
  img.datatype = get<std::int16_t>(buf, 70);
  const auto offset = static_cast<std::size_t>(get<float>(buf, 108));

  if (buf.size() >= kNiftiHeader + 4 && buf[348] != 0) {
    std::size_t pos = kNiftiHeader + 4;
    while (pos + 8 <= std::min(offset, buf.size())) {
      const auto esize = static_cast<std::size_t>(get<std::int32_t>(buf, pos));
      if (esize < 8 || pos + esize > buf.size()) break;
      std::string text(buf.data() + pos + 8, esize - 8);
      text.erase(std::find(text.begin(), text.end(), '\0'), text.end());
      const auto parsed = json::parse(text, nullptr, false);
      if (!parsed.is_discarded() && parsed.contains("kgpl")) {
        img.extra = parsed["kgpl"];
        if (img.extra.contains("spacing")) img.geometry.spacing = img.extra["spacing"].get<Vec3>();
        if (img.extra.contains("origin")) img.geometry.origin = img.extra["origin"].get<Vec3>();
      }
      pos += esize;
    }
  }

  std::size_t bytes_per = 0;
  switch (img.datatype) {
    case kUint8: bytes_per = 1; break;
    case kInt16: case kUint16: bytes_per = 2; break;
    case kInt32: case kFloat32: bytes_per = 4; break;
    case kFloat64: bytes_per = 8; break;
    default: throw Error(ErrorCode::UnsupportedFormat, "unsupported NIfTI datatype " + std::to_string(img.datatype));
  }
  const auto& d = img.geometry.dims;
  if (offset < kNiftiHeader || buf.size() < offset + bytes_per * static_cast<std::size_t>(d.voxels()))
    throw Error(ErrorCode::IOFailure, "truncated NIfTI data in " + path.string());
  const float slope = get<float>(buf, 112), inter = get<float>(buf, 116);
  const bool scaled = slope != 0.0f && !(slope == 1.0f && inter == 0.0f);
  img.values.resize(static_cast<std::size_t>(d.voxels()));
  for (std::int64_t i = 0; i < d.x; ++i)
    for (std::int64_t j = 0; j < d.y; ++j)
      for (std::int64_t k = 0; k < d.z; ++k) {
        const char* p = buf.data() + offset + bytes_per * static_cast<std::size_t>(nifti_index(d, i, j, k));
        double v = 0;
        switch (img.datatype) {
          case kUint8: { std::uint8_t x; std::memcpy(&x, p, 1); v = x; break; }
          case kInt16: { std::int16_t x; std::memcpy(&x, p, 2); v = x; break; }
          case kUint16: { std::uint16_t x; std::memcpy(&x, p, 2); v = x; break; }
          case kInt32: { std::int32_t x; std::memcpy(&x, p, 4); v = x; break; }
          case kFloat32: { float x; std::memcpy(&x, p, 4); v = x; break; }
          default: std::memcpy(&v, p, 8);
        }
        if (scaled) v = v * slope + inter;
        img.values[static_cast<std::size_t>(d.index(i, j, k))] = v;
      }
  return img;
}

std::string extension_of(const fs::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext != ".nii" && ext != ".kgt") throw Error(ErrorCode::UnsupportedFormat, "unknown volume extension: " + path.string());
  return ext;
}

json geometry_json(const Geometry& g) {
  return {{"spacing", g.spacing}, {"origin", g.origin}};
}

Geometry geometry_from(const Container& c, const TensorRecord& r) {
  if (r.shape.size() != 3) throw Error(ErrorCode::UnsupportedFormat, "grid tensor must be 3D");
  Geometry g;
  g.dims = {r.shape[0], r.shape[1], r.shape[2]};
  g.spacing = c.meta.at("spacing").get<Vec3>();
  g.origin = c.meta.at("origin").get<Vec3>();
  return g;
}

Container read_grid(const fs::path& path) {
  try {
    return read_container(path);
  } catch (const Error& e) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorCode::IOFailure, std::string("malformed container: ") + e.what());
  }
}

}  // namespace

void save_volume(const fs::path& path, const Volume& volume) {
  if (extension_of(path) == ".nii") {
    write_file(path, encode_nifti(volume.geometry(), kFloat64, {{"kind", "volume"}},
                                  [&](std::int64_t v) { return volume.data()[static_cast<std::size_t>(v)]; }));
    return;
  }
  Container c;
  c.meta = geometry_json(volume.geometry());
  c.meta["kind"] = "volume";
  const auto& d = volume.dims();
  c.tensors.push_back(TensorRecord::from_values<double>("data", DType::f64, {d.x, d.y, d.z}, volume.data()));
  write_container(path, c);
}

Volume load_volume(const fs::path& path) {
  if (extension_of(path) == ".nii") {
    auto img = decode_nifti(path);
    return Volume(img.geometry, std::move(img.values));
  }
  const auto c = read_grid(path);
  const auto& r = c.find("data");
  const auto g = geometry_from(c, r);
  std::vector<double> values;
  switch (r.dtype) {
    case DType::f64: values = r.values<double>(); break;
    case DType::f32: {
      const auto f = r.values<float>();
      values.assign(f.begin(), f.end());
      break;
    }
    default: throw Error(ErrorCode::UnsupportedFormat, "volume tensor must be floating point");
  }
  if (static_cast<std::int64_t>(values.size()) != g.dims.voxels()) throw Error(ErrorCode::IOFailure, "volume size mismatch");
  return Volume(g, std::move(values));
}

void save_labels(const fs::path& path, const LabelMap& labels) {
  const bool wide = labels.bytes_per_voxel() == 2;
  if (extension_of(path) == ".nii") {
    const auto values = labels.values();
    write_file(path, encode_nifti(labels.geometry(), wide ? kUint16 : kUint8,
                                  {{"kind", "labels"}, {"num_classes", labels.num_classes()}},
                                  [&](std::int64_t v) { return values[static_cast<std::size_t>(v)]; }));
    return;
  }
  Container c;
  c.meta = geometry_json(labels.geometry());
  c.meta["kind"] = "labels";
  c.meta["num_classes"] = labels.num_classes();
  const auto& d = labels.dims();
  std::visit(
      [&](const auto& v) {
        using T = typename std::decay_t<decltype(v)>::value_type;
        c.tensors.push_back(TensorRecord::from_values<T>("data", wide ? DType::u16 : DType::u8, {d.x, d.y, d.z},
                                                         std::span<const T>(v)));
      },
      labels.storage());
  write_container(path, c);
}

LabelMap load_labels(const fs::path& path) {
  std::vector<int> values;
  Geometry g;
  int classes = 0;
  if (extension_of(path) == ".nii") {
    auto img = decode_nifti(path);
    g = img.geometry;
    values.reserve(img.values.size());
    for (double v : img.values) {
      if (v < 0 || v != std::floor(v)) throw Error(ErrorCode::InvalidLabel, "label volume holds non-integer values");
      values.push_back(static_cast<int>(v));
    }
    classes = img.extra.value("num_classes", 0);
  } else {
    const auto c = read_grid(path);
    const auto& r = c.find("data");
    g = geometry_from(c, r);
    if (r.dtype == DType::u8) {
      for (auto v : r.values<std::uint8_t>()) values.push_back(v);
    } else if (r.dtype == DType::u16) {
      for (auto v : r.values<std::uint16_t>()) values.push_back(v);
    } else {
      throw Error(ErrorCode::UnsupportedFormat, "label tensor must be uint8 or uint16");
    }
    classes = c.meta.value("num_classes", 0);
  }
  if (static_cast<std::int64_t>(values.size()) != g.dims.voxels()) throw Error(ErrorCode::IOFailure, "label size mismatch");
  if (classes <= 0) classes = values.empty() ? 1 : *std::max_element(values.begin(), values.end()) + 1;
  return LabelMap(g, classes, values);
}

// ------------------------------------------------------------------ preprocessing

namespace {

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  const auto q = a / b;
  return (a % b != 0 && ((a < 0) != (b < 0))) ? q - 1 : q;
}

Geometry cropped_geometry(const Geometry& g, const CropBox& box) {
  Geometry out = g;
  out.dims = box.size;
  for (int a = 0; a < 3; ++a) out.origin[a] = g.origin[a] + static_cast<double>(box.start[a]) * g.spacing[a];
  return out;
}

template <typename Get, typename Set>
void copy_box(const Dims3& src, const CropBox& box, Get get, Set set) {
  for (std::int64_t i = 0; i < box.size.x; ++i)
    for (std::int64_t j = 0; j < box.size.y; ++j)
      for (std::int64_t k = 0; k < box.size.z; ++k) {
        const auto a = i + box.start[0], b = j + box.start[1], c = k + box.start[2];
        if (a < 0 || b < 0 || c < 0 || a >= src.x || b >= src.y || c >= src.z) continue;
        set(box.size.index(i, j, k), src.index(a, b, c), get);
      }
}

}  // namespace

Volume crop(const Volume& volume, const CropBox& box) {
  Volume out(cropped_geometry(volume.geometry(), box));
  auto dst = out.data();
  const auto src = volume.data();
  copy_box(volume.dims(), box, 0, [&](std::int64_t to, std::int64_t from, int) {
    dst[static_cast<std::size_t>(to)] = src[static_cast<std::size_t>(from)];
  });
  return out;
}

LabelMap crop(const LabelMap& labels, const CropBox& box) {
  LabelMap out(cropped_geometry(labels.geometry(), box), labels.num_classes());
  copy_box(labels.dims(), box, 0, [&](std::int64_t to, std::int64_t from, int) { out.set(to, labels.at(from)); });
  return out;
}

Preprocessed preprocess(const Volume& volume, const Dims3& size) {
  if (size.x < 1 || size.y < 1 || size.z < 1) throw Error(ErrorCode::ShapeMismatch, "crop size must be positive");
  const auto& d = volume.dims();
  std::array<std::int64_t, 3> lo{d.x, d.y, d.z}, hi{-1, -1, -1};
  for (std::int64_t i = 0; i < d.x; ++i)
    for (std::int64_t j = 0; j < d.y; ++j)
      for (std::int64_t k = 0; k < d.z; ++k) {
        if (volume.at(i, j, k) == 0.0) continue;
        const std::array<std::int64_t, 3> p{i, j, k};
        for (int a = 0; a < 3; ++a) {
          lo[a] = std::min(lo[a], p[a]);
          hi[a] = std::max(hi[a], p[a]);
        }
      }
  if (hi[0] < 0) throw Error(ErrorCode::EmptyForeground, "volume has no non-zero voxels");

  CropBox box;
  box.size = size;
  const std::array<std::int64_t, 3> want{size.x, size.y, size.z};
  for (int a = 0; a < 3; ++a) box.start[a] = lo[a] + floor_div(hi[a] - lo[a] + 1 - want[a], 2);

  Preprocessed out{crop(volume, box), box};
  auto data = out.volume.data();
  double sum = 0, count = 0;
  for (double v : data)
    if (v != 0.0) sum += v, count += 1;
  if (count == 0) throw Error(ErrorCode::EmptyForeground, "crop removed every non-zero voxel");
  const double mean = sum / count;
  double var = 0;
  for (double v : data)
    if (v != 0.0) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / count);
  for (double& v : data)
    if (v != 0.0) v = sd > 0 ? (v - mean) / sd : v - mean;
  if (!out.volume.all_finite()) throw Error(ErrorCode::NonFinite, "normalisation produced non-finite values");
  return out;
}

// ------------------------------------------------------------------ flips

namespace {

template <typename F>
void for_each_flipped(const Dims3& d, const std::array<bool, 3>& axes, F f) {
  for (std::int64_t i = 0; i < d.x; ++i)
    for (std::int64_t j = 0; j < d.y; ++j)
      for (std::int64_t k = 0; k < d.z; ++k)
        f(d.index(i, j, k), d.index(axes[0] ? d.x - 1 - i : i, axes[1] ? d.y - 1 - j : j, axes[2] ? d.z - 1 - k : k));
}

}  // namespace

Volume flip(const Volume& volume, const std::array<bool, 3>& axes) {
  Volume out(volume.geometry());
  auto dst = out.data();
  const auto src = volume.data();
  for_each_flipped(volume.dims(), axes, [&](std::int64_t to, std::int64_t from) {
    dst[static_cast<std::size_t>(to)] = src[static_cast<std::size_t>(from)];
  });
  return out;
}

LabelMap flip(const LabelMap& labels, const std::array<bool, 3>& axes) {
  LabelMap out(labels.geometry(), labels.num_classes());
  for_each_flipped(labels.dims(), axes, [&](std::int64_t to, std::int64_t from) { out.set(to, labels.at(from)); });
  return out;
}

Sample flip(const Sample& sample, const std::array<bool, 3>& axes) {
  return {sample.id, flip(sample.volume, axes), flip(sample.tissue, axes), flip(sample.structure, axes), sample.attrs};
}

// ------------------------------------------------------------------ split

Split split(std::size_t n, const std::array<double, 3>& ratios, std::uint64_t seed) {
  double total = 0;
  for (double r : ratios) {
    if (!(r >= 0.0) || !std::isfinite(r)) throw Error(ErrorCode::BadRatios, "ratios must be finite and non-negative");
    total += r;
  }
  if (std::fabs(total - 1.0) > 1e-9) throw Error(ErrorCode::BadRatios, "ratios must sum to 1");

  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> frac{};
  std::size_t assigned = 0;
  for (int s = 0; s < 3; ++s) {
    const double exact = ratios[s] * static_cast<double>(n);
    sizes[s] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    frac[s] = exact - static_cast<double>(sizes[s]);
    assigned += sizes[s];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b]; });
  for (std::size_t r = 0; assigned < n; ++r, ++assigned) ++sizes[order[r % 3]];

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  Split out;
  auto it = perm.begin();
  out.train.assign(it, it + static_cast<std::ptrdiff_t>(sizes[0]));
  it += static_cast<std::ptrdiff_t>(sizes[0]);
  out.val.assign(it, it + static_cast<std::ptrdiff_t>(sizes[1]));
  it += static_cast<std::ptrdiff_t>(sizes[1]);
  out.test.assign(it, perm.end());
  for (auto* v : {&out.train, &out.val, &out.test}) std::sort(v->begin(), v->end());
  return out;
}

// ------------------------------------------------------------------ manifest

json to_json(const SubjectAttributes& a) {
  json j{{"age_years", a.age_years}, {"sex", std::string(to_string(a.sex))}};
  j["diagnosis"] = a.diagnosis ? json(*a.diagnosis) : json(nullptr);
  return j;
}

SubjectAttributes attributes_from_json(const json& j) {
  SubjectAttributes a;
  a.age_years = j.at("age_years").get<int>();
  a.sex = sex_from_string(j.value("sex", std::string("unspecified")));
  if (j.contains("diagnosis") && !j["diagnosis"].is_null()) a.diagnosis = j["diagnosis"].get<std::string>();
  validate(a);
  return a;
}

json Manifest::to_json() const {
  json entries_json = json::array();
  for (const auto& e : entries)
    entries_json.push_back({{"id", e.id},
                            {"image", e.image},
                            {"tissue", e.tissue},
                            {"structure", e.structure},
                            {"attrs", kgpl::to_json(e.attrs)},
                            {"split", e.split},
                            {"seed", e.seed}});
  return {{"format", "kgpl-phantoms-1"}, {"spec", spec.to_json()}, {"entries", entries_json}};
}

Manifest Manifest::from_json(const json& j) {
  Manifest m;
  m.spec = PhantomSpec::from_json(j.at("spec"));
  for (const auto& e : j.at("entries"))
    m.entries.push_back({e.at("id").get<std::string>(), e.at("image").get<std::string>(), e.at("tissue").get<std::string>(),
                         e.at("structure").get<std::string>(), attributes_from_json(e.at("attrs")),
                         e.at("split").get<std::string>(), e.value("seed", std::uint64_t{0})});
  return m;
}

namespace {

struct Plan {
  std::vector<std::string> split_of;
  std::vector<std::uint64_t> seeds;
  std::vector<SubjectAttributes> attrs;
};

Plan plan_dataset(const PhantomSpec& spec, std::size_t count, const std::array<double, 3>& ratios) {
  spec.validate();
  Plan p;
  p.split_of.assign(count, "train");
  const auto s = split(count, ratios, derive_seed(spec.seed, 0xA11CE));
  for (auto i : s.val) p.split_of[i] = "val";
  for (auto i : s.test) p.split_of[i] = "test";
  for (std::size_t i = 0; i < count; ++i) {
    p.seeds.push_back(derive_seed(spec.seed, i));
    p.attrs.push_back(random_attributes(derive_seed(p.seeds.back(), 0xA77)));
  }
  return p;
}

std::string sample_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%04zu", i);
  return buf;
}

}  // namespace

Manifest write_phantom_dataset(const fs::path& dir, const PhantomSpec& spec, std::size_t count,
                               const std::array<double, 3>& ratios) {
  const auto plan = plan_dataset(spec, count, ratios);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IOFailure, "cannot create " + dir.string());
  Manifest m;
  m.spec = spec;
  for (std::size_t i = 0; i < count; ++i) {
    PhantomSpec s = spec;
    s.seed = plan.seeds[i];
    const auto sample = generate_phantom(s, plan.attrs[i]);
    const auto id = sample_id(i);
    ManifestEntry e{id, "images/" + id + ".nii", "tissue/" + id + ".nii", "structure/" + id + ".nii",
                    plan.attrs[i], plan.split_of[i], plan.seeds[i]};
    save_volume(dir / e.image, sample.volume);
    save_labels(dir / e.tissue, sample.tissue);
    save_labels(dir / e.structure, sample.structure);
    m.entries.push_back(std::move(e));
  }
  std::vector<char> text;
  const auto dumped = m.to_json().dump(2) + "\n";
  text.assign(dumped.begin(), dumped.end());
  write_file(dir / "manifest.json", text);
  return m;
}

Manifest load_manifest(const fs::path& dir) {
  const auto bytes = read_file(dir / "manifest.json");
  try {
    return Manifest::from_json(json::parse(bytes.begin(), bytes.end()));
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorCode::IOFailure, std::string("malformed manifest: ") + e.what());
  }
}

std::vector<std::size_t> Dataset::indices(std::string_view split_name) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < split_of.size(); ++i)
    if (split_of[i] == split_name) out.push_back(i);
  return out;
}

Dataset load_dataset(const fs::path& dir) {
  const auto m = load_manifest(dir);
  Dataset d;
  d.spec = m.spec;
  for (const auto& e : m.entries) {
    Sample s{e.id, load_volume(dir / e.image), load_labels(dir / e.tissue), load_labels(dir / e.structure), e.attrs};
    validate_pair(s.volume, s.tissue);
    validate_pair(s.volume, s.structure);
    d.samples.push_back(std::move(s));
    d.split_of.push_back(e.split);
  }
  return d;
}

Dataset generate_dataset(const PhantomSpec& spec, std::size_t count, const std::array<double, 3>& ratios) {
  const auto plan = plan_dataset(spec, count, ratios);
  Dataset d;
  d.spec = spec;
  for (std::size_t i = 0; i < count; ++i) {
    PhantomSpec s = spec;
    s.seed = plan.seeds[i];
    auto sample = generate_phantom(s, plan.attrs[i]);
    sample.id = sample_id(i);
    d.samples.push_back(std::move(sample));
    d.split_of.push_back(plan.split_of[i]);
  }
  return d;
}

}  // namespace kgpl
