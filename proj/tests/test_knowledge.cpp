// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <httplib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <thread>

#include "kgpl/container.hpp"
#include "kgpl/knowledge.hpp"
#include "testing.hpp"

using namespace kgpl;
using kgpl::testing::code_of;

namespace {

class FixedEncoder final : public TextEncoder {
 public:
  FixedEncoder(std::int64_t tokens, std::int64_t dim, float value) : tokens_(tokens), dim_(dim), value_(value) {}
  KnowledgeEmbedding encode(std::string_view) const override {
    return {tokens_, dim_, std::vector<float>(static_cast<std::size_t>(tokens_ * dim_), value_)};
  }
  std::string name() const override { return "fixed"; }
  std::int64_t max_tokens() const override { return tokens_; }
  std::int64_t hidden_size() const override { return dim_; }

 private:
  std::int64_t tokens_, dim_;
  float value_;
};

}  // namespace

TEST_CASE("age buckets are decades", "[knowledge]") {
  const auto fifty = bucket_age(50);
  CHECK(fifty.lo == 50);
  CHECK(fifty.hi == 59);
  CHECK(fifty.label == "fifty");
  CHECK(bucket_age(0).lo == 0);
  CHECK(bucket_age(0).hi == 9);
  CHECK(bucket_age(97).lo == 90);
  CHECK(bucket_age(97).hi == 99);
  CHECK(bucket_age(130).label == "one hundred thirty");
  CHECK(code_of([] { (void)bucket_age(131); }) == ErrorCode::OutOfRange);
  CHECK(code_of([] { (void)bucket_age(-1); }) == ErrorCode::OutOfRange);
}

TEST_CASE("default template renders the reference sentence", "[knowledge]") {
  const SubjectAttributes a{50, Sex::male, std::string("mild cognitive impairment")};
  CHECK(render_sentence(a).text ==
        "This is a brain magnetic resonance image acquired from a male with mild cognitive impairment at fifty "
        "years old");
  CHECK(render_sentence(a).source_attributes == a);
}

TEST_CASE("missing diagnosis and sex use the neutral phrases", "[knowledge]") {
  const SubjectAttributes a{25, Sex::female, std::nullopt};
  CHECK(render_sentence(a).text ==
        "This is a brain magnetic resonance image acquired from a female with no reported condition at twenty "
        "years old");
  const SubjectAttributes b{61, Sex::unspecified, std::nullopt};
  CHECK(render_sentence(b).text.find("from a person with") != std::string::npos);
}

TEST_CASE("templates must name every placeholder", "[knowledge]") {
  SentenceOptions o;
  o.template_text = "a {sex} with {diagnosis}";
  CHECK(code_of([&] { (void)render_sentence({40, Sex::male, std::nullopt}, o); }) == ErrorCode::MissingPlaceholder);
}

TEST_CASE("sentences depend on the decade only", "[knowledge][property]") {
  for (int age = 0; age <= 130; ++age) {
    for (int other = 0; other <= 130; ++other) {
      const SubjectAttributes a{age, Sex::female, std::string("autism")};
      const SubjectAttributes b{other, Sex::female, std::string("autism")};
      CHECK((render_sentence(a).text == render_sentence(b).text) == (age / 10 == other / 10));
    }
  }
}

TEST_CASE("stub vectors match an independent computation", "[knowledge]") {
  const StubTextEncoder enc(0);
  const auto v = enc.token_vector("male", 3);
  REQUIRE(v.size() == 768);
  // Reference values computed outside this code base from the documented derivation.
  CHECK(v[0] == -0x1.b0ed1ap-6f);
  CHECK(v[1] == -0x1.574756p-5f);
  CHECK(v[2] == 0x1.0daf78p-5f);
  CHECK(v[3] == -0x1.e63588p-6f);
  CHECK(v[767] == 0x1.dc58f4p-5f);
  CHECK(enc.token_vector("male", 3) == v);

  double norm = 0;
  for (float x : v) norm += static_cast<double>(x) * x;
  CHECK(std::fabs(std::sqrt(norm) - 1.0) < 1e-6);
}

TEST_CASE("distinct tokens give distinct directions", "[knowledge]") {
  const StubTextEncoder enc(0);
  const auto a = enc.token_vector("male", 0);
  const auto b = enc.token_vector("female", 0);
  double dot = 0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += static_cast<double>(a[i]) * b[i];
  CHECK(std::fabs(dot) < 0.999);
  CHECK(enc.token_vector("male", 0) != enc.token_vector("male", 1));
  CHECK(StubTextEncoder(1).token_vector("male", 0) != a);
}

TEST_CASE("encode_knowledge fixes the token axis", "[knowledge]") {
  const StubTextEncoder enc(0);
  const auto s = render_sentence({50, Sex::male, std::string("mild cognitive impairment")});
  const auto e = encode_knowledge(enc, s, 32);
  CHECK(e.tokens == 32);
  CHECK(e.dim == 768);
  CHECK(e.values.size() == 32u * 768u);
  CHECK(encode_knowledge(enc, s, 32) == e);

  const PromptSentence twelve{"one two three four five six seven eight nine ten eleven twelve", {}};
  const auto p = encode_knowledge(enc, twelve, 32);
  for (std::int64_t n = 0; n < 12; ++n) CHECK(p.row(n)[0] != 0.0f);
  for (std::int64_t n = 12; n < 32; ++n)
    for (float x : p.row(n)) REQUIRE(x == 0.0f);

  CHECK(enc.encode("").tokens == 0);
  const auto empty = encode_knowledge(enc, {"", {}}, 4);
  for (float x : empty.values) REQUIRE(x == 0.0f);
  for (float x : e.values) REQUIRE(std::isfinite(x));
}

TEST_CASE("growing fixed_N only appends zero rows", "[knowledge][property]") {
  const StubTextEncoder enc(5);
  const PromptSentence s{"a b c d e f g h i j", {}};
  const auto base = encode_knowledge(enc, s, 4);
  for (std::int64_t n : {4, 7, 10, 11, 40}) {
    const auto e = encode_knowledge(enc, s, n);
    const auto keep = std::min<std::int64_t>(10, n);
    for (std::int64_t r = 0; r < keep; ++r) {
      const auto ref = encode_knowledge(enc, s, 10).row(r);
      REQUIRE(std::equal(ref.begin(), ref.end(), e.row(r).begin()));
    }
    for (std::int64_t r = keep; r < n; ++r)
      for (float x : e.row(r)) REQUIRE(x == 0.0f);
  }
  CHECK(std::equal(base.row(3).begin(), base.row(3).end(), encode_knowledge(enc, s, 10).row(3).begin()));
}

TEST_CASE("sentences beyond max_tokens keep the first tokens", "[knowledge]") {
  const StubTextEncoder enc(0, 768, 3);
  const auto e = enc.encode("a b c d e");
  CHECK(e.tokens == 3);
  const auto c = enc.token_vector("c", 2);
  CHECK(std::equal(c.begin(), c.end(), e.row(2).begin()));
}

TEST_CASE("non-finite or malformed encoder output is an encoder failure", "[knowledge]") {
  const FixedEncoder nan_enc(2, 8, std::nanf(""));
  CHECK(code_of([&] { (void)encode_knowledge(nan_enc, {"x", {}}, 4); }) == ErrorCode::EncoderFailure);
  CHECK(code_of([&] { (void)encode_knowledge(FixedEncoder(1, 8, 0), {"x", {}}, 0); }) == ErrorCode::BadConfig);
}

TEST_CASE("embedding cache round trip and failures", "[knowledge]") {
  testing::TempDir dir;
  const StubTextEncoder enc(3);
  const auto s = render_sentence({70, Sex::female, std::string("Alzheimer's disease")});
  const auto e = encode_knowledge(enc, s, 32);
  const auto key = embedding_cache_key(enc.name(), s.text, 32);
  CHECK(key != embedding_cache_key(enc.name(), s.text, 16));
  CHECK(key != embedding_cache_key("other", s.text, 32));
  CHECK(key.size() == 64);

  cache_embedding(dir.path(), key, e, enc.name());
  CHECK(load_embedding(dir.path(), key) == e);
  CHECK(code_of([&] { (void)load_embedding(dir.path(), std::string(64, '0')); }) == ErrorCode::KeyNotFound);

  const auto file = dir.path() / (key + ".kgt");
  {
    std::fstream f(file, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(-3, std::ios::end);
    char c = 0;
    f.get(c);
    f.seekp(-3, std::ios::end);
    f.put(static_cast<char>(c ^ 0x40));
  }
  CHECK(code_of([&] { (void)load_embedding(dir.path(), key); }) == ErrorCode::ChecksumMismatch);

  testing::TempDir store;
  const auto first = cached_encode(store.path(), enc, s, 32);
  CHECK(std::filesystem::exists(store.path() / (key + ".kgt")));
  CHECK(cached_encode(store.path(), enc, s, 32) == first);
  CHECK(first == e);
}

TEST_CASE("mean embedding is the row-wise average", "[knowledge]") {
  const KnowledgeEmbedding a{1, 2, {1.0f, 2.0f}};
  const KnowledgeEmbedding b{1, 2, {3.0f, -2.0f}};
  const std::vector<KnowledgeEmbedding> both{a, b};
  const auto m = mean_embedding(both);
  CHECK(m.values == std::vector<float>{2.0f, 0.0f});
  const std::vector<KnowledgeEmbedding> bad{a, KnowledgeEmbedding{2, 1, {1.0f, 1.0f}}};
  CHECK(code_of([&] { (void)mean_embedding(bad); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("http encoder speaks the documented wire format", "[knowledge]") {
  httplib::Server server;
  server.Post("/encode", [](const httplib::Request& req, httplib::Response& res) {
    if (req.body == "fail") {
      res.status = 500;
      return;
    }
    const std::uint32_t n = 2, d = 4;
    std::string body(8 + n * d * 4, '\0');
    std::memcpy(body.data(), &n, 4);
    std::memcpy(body.data() + 4, &d, 4);
    for (std::uint32_t i = 0; i < n * d; ++i) {
      const float v = static_cast<float>(i) + static_cast<float>(req.body.size());
      std::memcpy(body.data() + 8 + 4 * i, &v, 4);
    }
    res.set_content(body, "application/octet-stream");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread worker([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  const HttpTextEncoder enc("http://127.0.0.1:" + std::to_string(port) + "/encode", 4, 16, "test-http");
  const auto e = encode_knowledge(enc, {"abc", {}}, 3);
  CHECK(e.tokens == 3);
  CHECK(e.dim == 4);
  CHECK(e.values[0] == 3.0f);
  CHECK(e.values[7] == 10.0f);
  for (std::size_t i = 8; i < 12; ++i) CHECK(e.values[i] == 0.0f);
  CHECK(code_of([&] { (void)enc.encode("fail"); }) == ErrorCode::EncoderFailure);
  CHECK(code_of([&] { (void)encode_knowledge(HttpTextEncoder("http://127.0.0.1:" + std::to_string(port) + "/encode", 8),
                                             {"abc", {}}, 3); }) == ErrorCode::EncoderFailure);

  server.stop();
  worker.join();
  CHECK(code_of([&] { (void)enc.encode("abc"); }) == ErrorCode::EncoderFailure);
  CHECK(code_of([] { HttpTextEncoder("ftp://x"); }) == ErrorCode::BadConfig);
}
