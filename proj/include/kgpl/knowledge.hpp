// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0
//
// Knowledge prompt generation: subject attributes -> descriptive sentence ->
// (N, D) token embeddings from a pluggable text encoder, plus an on-disk cache.

#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "kgpl/core.hpp"

namespace kgpl {

inline constexpr std::int64_t kKnowledgeDim = 768;
inline constexpr std::int64_t kDefaultPromptTokens = 32;

inline constexpr std::string_view kDefaultTemplate =
    "This is a brain magnetic resonance image acquired from a {sex} with {diagnosis} at {age_decade} years old";
inline constexpr std::string_view kDefaultHealthyPhrase = "no reported condition";

struct AgeBucket {
  int lo = 0;
  int hi = 9;
  std::string label;  // "fifty" for [50, 59]

  bool operator==(const AgeBucket&) const = default;
};

/// Decade bucket [10*floor(age/10), +9]. Throws OutOfRange outside [0, 130].
AgeBucket bucket_age(int age_years);

struct PromptSentence {
  std::string text;
  SubjectAttributes source_attributes;
};

struct SentenceOptions {
  std::string template_text{kDefaultTemplate};
  std::string healthy_phrase{kDefaultHealthyPhrase};
  std::string unspecified_sex{"person"};
};

/// Substitutes {sex}, {diagnosis} and {age_decade}. Throws MissingPlaceholder
/// when the template lacks any of them, OutOfRange for invalid ages.
PromptSentence render_sentence(const SubjectAttributes& attrs, const SentenceOptions& options = {});

/// Row-major (N, D) block of token embeddings.
struct KnowledgeEmbedding {
  std::int64_t tokens = 0;
  std::int64_t dim = kKnowledgeDim;
  std::vector<float> values;

  std::span<const float> row(std::int64_t n) const {
    return std::span<const float>(values).subspan(static_cast<std::size_t>(n * dim), static_cast<std::size_t>(dim));
  }
  bool operator==(const KnowledgeEmbedding&) const = default;
};

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;

  /// One row per token; the row count may be anything from 0 to max_tokens().
  /// Backends report failures as Error(EncoderFailure).
  virtual KnowledgeEmbedding encode(std::string_view sentence) const = 0;
  virtual std::string name() const = 0;
  virtual std::int64_t max_tokens() const = 0;
  virtual std::int64_t hidden_size() const = 0;
};

/// Hermetic stand-in for a pretrained text encoder.
///
/// Sentences are split on whitespace; tokens past max_tokens are dropped. The
/// vector for token t at position i is derived as follows:
///   state  = fnv1a64(t) ^ splitmix64(seed) ^ splitmix64(0x9E37... * (i + 1))
///   x_j    = 2 * (top 53 bits of splitmix64 draw j from state) / 2^53 - 1
///   row    = x / ||x||  (computed in double, stored as float32)
/// Only integer arithmetic precedes the final normalisation, so the output is
/// identical across platforms.
class StubTextEncoder final : public TextEncoder {
 public:
  explicit StubTextEncoder(std::uint64_t seed, std::int64_t hidden = kKnowledgeDim, std::int64_t max_tokens = 77);

  KnowledgeEmbedding encode(std::string_view sentence) const override;
  std::string name() const override;
  std::int64_t max_tokens() const override { return max_tokens_; }
  std::int64_t hidden_size() const override { return hidden_; }

  std::vector<float> token_vector(std::string_view token, std::int64_t position) const;

 private:
  std::uint64_t seed_;
  std::int64_t hidden_;
  std::int64_t max_tokens_;
};

std::unique_ptr<TextEncoder> stub_encoder(std::uint64_t seed);

/// Client for an external encoder service (e.g. a BiomedCLIP wrapper).
///
/// Request:  POST <url> with the UTF-8 sentence as a text/plain body.
/// Response: u32 N, u32 D (little-endian) followed by N*D float32 values,
///           row-major, little-endian.
class HttpTextEncoder final : public TextEncoder {
 public:
  /// `url` looks like http://host:port/path.
  HttpTextEncoder(std::string url, std::int64_t hidden = kKnowledgeDim, std::int64_t max_tokens = 256,
                  std::string name = "http");

  KnowledgeEmbedding encode(std::string_view sentence) const override;
  std::string name() const override { return name_; }
  std::int64_t max_tokens() const override { return max_tokens_; }
  std::int64_t hidden_size() const override { return hidden_; }

 private:
  std::string host_;
  int port_ = 80;
  std::string path_;
  std::int64_t hidden_;
  std::int64_t max_tokens_;
  std::string name_;
};

/// Encodes and fixes the token axis to exactly `fixed_tokens` rows by
/// truncation or zero padding. Throws EncoderFailure for non-finite output or
/// a width that disagrees with the encoder's hidden size.
KnowledgeEmbedding encode_knowledge(const TextEncoder& encoder, const PromptSentence& sentence,
                                    std::int64_t fixed_tokens = kDefaultPromptTokens);

/// Row-wise mean of equally shaped embeddings.
KnowledgeEmbedding mean_embedding(std::span<const KnowledgeEmbedding> embeddings);

/// Content hash of (encoder name, sentence, fixed N).
std::string embedding_cache_key(std::string_view encoder_name, std::string_view sentence, std::int64_t fixed_tokens);

void cache_embedding(const std::filesystem::path& store, const std::string& key, const KnowledgeEmbedding& embedding,
                     std::string_view encoder_name = "");

/// Throws KeyNotFound, IOFailure or ChecksumMismatch.
KnowledgeEmbedding load_embedding(const std::filesystem::path& store, const std::string& key);

/// encode_knowledge behind the cache at `store` (skipped when store is empty).
KnowledgeEmbedding cached_encode(const std::filesystem::path& store, const TextEncoder& encoder,
                                 const PromptSentence& sentence, std::int64_t fixed_tokens);

}  // namespace kgpl
