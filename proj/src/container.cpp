// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0

#include "kgpl/container.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <bit>
#include <fstream>
#include <memory>

#include "kgpl/error.hpp"

namespace kgpl {

static_assert(std::endian::native == std::endian::little, "container IO assumes a little-endian host");

namespace {

constexpr std::array<char, 8> kMagic{'K', 'G', 'P', 'L', 'T', 'N', 'S', '1'};

}  // namespace

std::string_view to_string(DType dtype) {
  switch (dtype) {
    case DType::f32: return "float32";
    case DType::f64: return "float64";
    case DType::u8: return "uint8";
    case DType::u16: return "uint16";
    case DType::i64: return "int64";
  }
  return "float32";
}

DType dtype_from_string(std::string_view name) {
  if (name == "float32") return DType::f32;
  if (name == "float64") return DType::f64;
  if (name == "uint8") return DType::u8;
  if (name == "uint16") return DType::u16;
  if (name == "int64") return DType::i64;
  throw Error(ErrorCode::UnsupportedFormat, "unknown dtype '" + std::string(name) + "'");
}

std::size_t element_size(DType dtype) {
  switch (dtype) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
    case DType::u16: return 2;
    case DType::i64: return 8;
  }
  return 1;
}

std::int64_t TensorRecord::numel() const {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

const TensorRecord& Container::find(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw Error(ErrorCode::KeyNotFound, "tensor '" + std::string(name) + "' not in container");
}

bool Container::contains(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return true;
  }
  return false;
}

std::string sha256_hex(std::span<const std::byte> bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest.data(), &len) != 1) {
    throw Error(ErrorCode::IOFailure, "sha256 computation failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

std::string sha256_hex(std::string_view text) {
  return sha256_hex(std::as_bytes(std::span<const char>(text.data(), text.size())));
}

void write_container(const std::filesystem::path& path, const Container& container) {
  std::vector<std::byte> payload;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& t : container.tensors) {
    if (t.bytes.size() != static_cast<std::size_t>(t.numel()) * element_size(t.dtype)) {
      throw Error(ErrorCode::ShapeMismatch, "tensor '" + t.name + "' byte size does not match its shape");
    }
    entries.push_back({{"name", t.name},
                       {"dtype", to_string(t.dtype)},
                       {"shape", t.shape},
                       {"offset", payload.size()},
                       {"nbytes", t.bytes.size()}});
    payload.insert(payload.end(), t.bytes.begin(), t.bytes.end());
  }
  nlohmann::json header{{"meta", container.meta}, {"checksum", "sha256:" + sha256_hex(payload)}, {"tensors", entries}};
  const std::string header_text = header.dump();
  const std::uint64_t header_len = header_text.size();

  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  auto tmp = path;
  tmp += ".tmp" + std::to_string(reinterpret_cast<std::uintptr_t>(&container));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IOFailure, "cannot open " + tmp.string() + " for writing");
    out.write(kMagic.data(), kMagic.size());
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (!out) throw Error(ErrorCode::IOFailure, "write to " + tmp.string() + " failed");
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw Error(ErrorCode::IOFailure, "cannot rename into " + path.string());
  }
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IOFailure, "cannot open " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() != static_cast<std::streamsize>(magic.size())) {
    throw Error(ErrorCode::IOFailure, path.string() + " is truncated");
  }
  if (magic != kMagic) throw Error(ErrorCode::UnsupportedFormat, path.string() + " is not a tensor container");
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (!in || header_len > (1u << 30)) throw Error(ErrorCode::IOFailure, path.string() + " has a truncated header");
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw Error(ErrorCode::IOFailure, path.string() + " has a truncated header");
  std::vector<std::byte> payload;
  {
    std::vector<char> rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    payload.resize(rest.size());
    if (!rest.empty()) std::memcpy(payload.data(), rest.data(), rest.size());
  }

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::IOFailure, path.string() + ": malformed header: " + e.what());
  }

  Container c;
  c.meta = header.value("meta", nlohmann::json::object());
  std::size_t expected = 0;
  for (const auto& e : header.at("tensors")) expected = std::max(expected, e.at("offset").get<std::size_t>() + e.at("nbytes").get<std::size_t>());
  if (payload.size() < expected) throw Error(ErrorCode::IOFailure, path.string() + " payload is truncated");
  if (header.at("checksum").get<std::string>() != "sha256:" + sha256_hex(payload)) {
    throw Error(ErrorCode::ChecksumMismatch, path.string() + " payload does not match its checksum");
  }
  for (const auto& e : header.at("tensors")) {
    TensorRecord t;
    t.name = e.at("name").get<std::string>();
    t.dtype = dtype_from_string(e.at("dtype").get<std::string>());
    t.shape = e.at("shape").get<std::vector<std::int64_t>>();
    const auto off = e.at("offset").get<std::size_t>();
    const auto n = e.at("nbytes").get<std::size_t>();
    t.bytes.assign(payload.begin() + static_cast<std::ptrdiff_t>(off), payload.begin() + static_cast<std::ptrdiff_t>(off + n));
    c.tensors.push_back(std::move(t));
  }
  return c;
}

}  // namespace kgpl
