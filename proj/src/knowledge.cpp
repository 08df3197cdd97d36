// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0

#include "kgpl/knowledge.hpp"

#include <httplib.h>

#include <array>
#include <cmath>
#include <cstring>
#include <regex>
#include <sstream>

#include "kgpl/container.hpp"

namespace kgpl {

namespace {

constexpr std::array<std::string_view, 14> kDecadeWords{
    "zero",  "ten",     "twenty", "thirty", "forty",       "fifty",           "sixty",
    "seventy", "eighty", "ninety", "one hundred", "one hundred ten", "one hundred twenty", "one hundred thirty"};

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::uint64_t mix(std::uint64_t value) { return splitmix64(value); }

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

void replace_all(std::string& text, std::string_view from, std::string_view to) {
  for (std::size_t pos = text.find(from); pos != std::string::npos; pos = text.find(from, pos + to.size())) {
    text.replace(pos, from.size(), to);
  }
}

}  // namespace

AgeBucket bucket_age(int age_years) {
  if (age_years < 0 || age_years > 130) {
    throw Error(ErrorCode::OutOfRange, "age " + std::to_string(age_years) + " outside [0, 130]");
  }
  const int decade = age_years / 10;
  return AgeBucket{decade * 10, decade * 10 + 9, std::string(kDecadeWords[static_cast<std::size_t>(decade)])};
}

PromptSentence render_sentence(const SubjectAttributes& attrs, const SentenceOptions& options) {
  for (std::string_view key : {"{sex}", "{diagnosis}", "{age_decade}"}) {
    if (options.template_text.find(key) == std::string::npos) {
      throw Error(ErrorCode::MissingPlaceholder, "template lacks " + std::string(key));
    }
  }
  const AgeBucket bucket = bucket_age(attrs.age_years);
  std::string sex_word =
      attrs.sex == Sex::unspecified ? options.unspecified_sex : std::string(to_string(attrs.sex));
  std::string diagnosis =
      attrs.diagnosis && !attrs.diagnosis->empty() ? *attrs.diagnosis : options.healthy_phrase;

  std::string text = options.template_text;
  replace_all(text, "{sex}", sex_word);
  replace_all(text, "{diagnosis}", diagnosis);
  replace_all(text, "{age_decade}", bucket.label);
  return PromptSentence{std::move(text), attrs};
}

StubTextEncoder::StubTextEncoder(std::uint64_t seed, std::int64_t hidden, std::int64_t max_tokens)
    : seed_(seed), hidden_(hidden), max_tokens_(max_tokens) {
  if (hidden < 1 || max_tokens < 0) throw Error(ErrorCode::BadConfig, "stub encoder needs hidden >= 1");
}

std::string StubTextEncoder::name() const { return "stub-" + std::to_string(seed_) + "-d" + std::to_string(hidden_); }

std::vector<float> StubTextEncoder::token_vector(std::string_view token, std::int64_t position) const {
  std::uint64_t state =
      fnv1a64(token) ^ mix(seed_) ^ mix(0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(position + 1));
  std::vector<double> raw(static_cast<std::size_t>(hidden_));
  double norm2 = 0.0;
  for (auto& x : raw) {
    x = 2.0 * (static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53) - 1.0;
    norm2 += x * x;
  }
  const double inv = 1.0 / std::sqrt(norm2);
  std::vector<float> out(raw.size());
  for (std::size_t j = 0; j < raw.size(); ++j) out[j] = static_cast<float>(raw[j] * inv);
  return out;
}

KnowledgeEmbedding StubTextEncoder::encode(std::string_view sentence) const {
  std::istringstream words{std::string(sentence)};
  KnowledgeEmbedding emb{0, hidden_, {}};
  std::string token;
  while (words >> token && emb.tokens < max_tokens_) {
    auto row = token_vector(token, emb.tokens);
    emb.values.insert(emb.values.end(), row.begin(), row.end());
    ++emb.tokens;
  }
  return emb;
}

std::unique_ptr<TextEncoder> stub_encoder(std::uint64_t seed) { return std::make_unique<StubTextEncoder>(seed); }

HttpTextEncoder::HttpTextEncoder(std::string url, std::int64_t hidden, std::int64_t max_tokens, std::string name)
    : hidden_(hidden), max_tokens_(max_tokens), name_(std::move(name)) {
  static const std::regex kUrl(R"(^http://([^/:]+)(?::(\d+))?(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, kUrl)) throw Error(ErrorCode::BadConfig, "unsupported encoder url '" + url + "'");
  host_ = m[1].str();
  port_ = m[2].matched ? std::stoi(m[2].str()) : 80;
  path_ = m[3].matched ? m[3].str() : "/";
}

KnowledgeEmbedding HttpTextEncoder::encode(std::string_view sentence) const {
  httplib::Client client(host_, port_);
  client.set_connection_timeout(5);
  client.set_read_timeout(60);
  auto res = client.Post(path_, std::string(sentence), "text/plain");
  if (!res) throw Error(ErrorCode::EncoderFailure, "encoder request failed: " + httplib::to_string(res.error()));
  if (res->status != 200) {
    throw Error(ErrorCode::EncoderFailure, "encoder returned HTTP " + std::to_string(res->status));
  }
  const std::string& body = res->body;
  if (body.size() < 8) throw Error(ErrorCode::EncoderFailure, "encoder response too short");
  std::uint32_t n = 0;
  std::uint32_t d = 0;
  std::memcpy(&n, body.data(), 4);
  std::memcpy(&d, body.data() + 4, 4);
  const std::size_t expected = 8 + static_cast<std::size_t>(n) * d * sizeof(float);
  if (body.size() != expected) throw Error(ErrorCode::EncoderFailure, "encoder payload size disagrees with its shape");
  KnowledgeEmbedding emb{n, d, std::vector<float>(static_cast<std::size_t>(n) * d)};
  if (!emb.values.empty()) std::memcpy(emb.values.data(), body.data() + 8, emb.values.size() * sizeof(float));
  return emb;
}

KnowledgeEmbedding encode_knowledge(const TextEncoder& encoder, const PromptSentence& sentence,
                                    std::int64_t fixed_tokens) {
  if (fixed_tokens < 1) throw Error(ErrorCode::BadConfig, "fixed token count must be >= 1");
  KnowledgeEmbedding raw = encoder.encode(sentence.text);
  if (raw.dim != encoder.hidden_size() || static_cast<std::int64_t>(raw.values.size()) != raw.tokens * raw.dim) {
    throw Error(ErrorCode::EncoderFailure, "encoder '" + encoder.name() + "' returned a malformed block");
  }
  for (float v : raw.values) {
    if (!std::isfinite(v)) throw Error(ErrorCode::EncoderFailure, "encoder '" + encoder.name() + "' returned NaN/Inf");
  }
  KnowledgeEmbedding out{fixed_tokens, raw.dim, std::vector<float>(static_cast<std::size_t>(fixed_tokens * raw.dim), 0.0f)};
  const auto keep = std::min(raw.tokens, fixed_tokens) * raw.dim;
  std::copy_n(raw.values.begin(), keep, out.values.begin());
  return out;
}

KnowledgeEmbedding mean_embedding(std::span<const KnowledgeEmbedding> embeddings) {
  if (embeddings.empty()) throw Error(ErrorCode::BadConfig, "cannot average zero embeddings");
  const auto& first = embeddings.front();
  std::vector<double> acc(first.values.size(), 0.0);
  for (const auto& e : embeddings) {
    if (e.tokens != first.tokens || e.dim != first.dim) throw Error(ErrorCode::ShapeMismatch, "embedding shapes differ");
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += e.values[i];
  }
  KnowledgeEmbedding out{first.tokens, first.dim, std::vector<float>(acc.size())};
  for (std::size_t i = 0; i < acc.size(); ++i) out.values[i] = static_cast<float>(acc[i] / static_cast<double>(embeddings.size()));
  return out;
}

std::string embedding_cache_key(std::string_view encoder_name, std::string_view sentence, std::int64_t fixed_tokens) {
  std::string material;
  material.append(encoder_name).push_back('\0');
  material.append(sentence).push_back('\0');
  material.append(std::to_string(fixed_tokens));
  return sha256_hex(material);
}

void cache_embedding(const std::filesystem::path& store, const std::string& key, const KnowledgeEmbedding& embedding,
                     std::string_view encoder_name) {
  Container c;
  c.meta = {{"kind", "knowledge_embedding"}, {"key", key}, {"encoder", encoder_name}};
  c.tensors.push_back(TensorRecord::from_values<float>("embedding", DType::f32, {embedding.tokens, embedding.dim},
                                                       embedding.values));
  write_container(store / (key + ".kgt"), c);
}

KnowledgeEmbedding load_embedding(const std::filesystem::path& store, const std::string& key) {
  const auto path = store / (key + ".kgt");
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::KeyNotFound, "no cached embedding for key " + key);
  const Container c = read_container(path);
  const auto& t = c.find("embedding");
  if (t.dtype != DType::f32 || t.shape.size() != 2) throw Error(ErrorCode::UnsupportedFormat, "bad embedding record");
  return KnowledgeEmbedding{t.shape[0], t.shape[1], t.values<float>()};
}

KnowledgeEmbedding cached_encode(const std::filesystem::path& store, const TextEncoder& encoder,
                                 const PromptSentence& sentence, std::int64_t fixed_tokens) {
  if (store.empty()) return encode_knowledge(encoder, sentence, fixed_tokens);
  const std::string key = embedding_cache_key(encoder.name(), sentence.text, fixed_tokens);
  try {
    return load_embedding(store, key);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::KeyNotFound && e.code() != ErrorCode::ChecksumMismatch) throw;
  }
  KnowledgeEmbedding emb = encode_knowledge(encoder, sentence, fixed_tokens);
  cache_embedding(store, key, emb, encoder.name());
  return emb;
}

}  // namespace kgpl
