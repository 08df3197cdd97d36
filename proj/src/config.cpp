// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0

#include "kgpl/config.hpp"

#include <toml.hpp>

namespace kgpl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json to_json(const toml::node& node) {
  if (const auto* t = node.as_table()) {
    json out = json::object();
    for (const auto& [key, value] : *t) out[std::string(key.str())] = to_json(value);
    return out;
  }
  if (const auto* a = node.as_array()) {
    json out = json::array();
    for (const auto& value : *a) out.push_back(to_json(value));
    return out;
  }
  if (const auto* v = node.as_string()) return v->get();
  if (const auto* v = node.as_integer()) return v->get();
  if (const auto* v = node.as_floating_point()) return v->get();
  if (const auto* v = node.as_boolean()) return v->get();
  throw Error(ErrorCode::BadConfig, "unsupported TOML value (dates and times are not used)");
}

fs::path resolve(const fs::path& base, const json& j, const char* key) {
  if (!j.contains(key)) return {};
  fs::path p = j[key].get<std::string>();
  return p.is_absolute() || base.empty() ? p : base / p;
}

}  // namespace

json parse_toml_text(std::string_view text) {
  try {
    return to_json(toml::parse(text));
  } catch (const toml::parse_error& e) {
    throw Error(ErrorCode::BadConfig, std::string("invalid TOML: ") + std::string(e.description()));
  }
}

json parse_toml_file(const fs::path& path) {
  try {
    return to_json(toml::parse_file(path.string()));
  } catch (const toml::parse_error& e) {
    if (!fs::exists(path)) throw Error(ErrorCode::IOFailure, "cannot read " + path.string());
    throw Error(ErrorCode::BadConfig, path.string() + ": " + std::string(e.description()));
  }
}

std::unique_ptr<TextEncoder> KnowledgeSettings::make_encoder() const {
  if (encoder == "stub") return std::make_unique<StubTextEncoder>(seed, hidden);
  if (encoder == "http") {
    if (url.empty()) throw Error(ErrorCode::BadConfig, "knowledge.url is required for the http encoder");
    return std::make_unique<HttpTextEncoder>(url, hidden, max_tokens);
  }
  throw Error(ErrorCode::BadConfig, "unknown knowledge encoder '" + encoder + "'");
}

RunConfig RunConfig::from_json(const json& j, const fs::path& base_dir) {
  RunConfig c;
  try {
    if (j.contains("data")) c.data_dir = resolve(base_dir, j["data"], "dir");
    if (j.contains("output")) c.out_dir = resolve(base_dir, j["output"], "dir");
    if (j.contains("train")) c.train = j["train"];
    if (j.contains("loss")) c.train["loss"] = j["loss"];
    if (j.contains("backbone")) c.backbone = j["backbone"];
    if (j.contains("knowledge")) {
      const auto& k = j["knowledge"];
      c.knowledge.encoder = k.value("encoder", c.knowledge.encoder);
      c.knowledge.seed = k.value("seed", c.knowledge.seed);
      c.knowledge.url = k.value("url", c.knowledge.url);
      c.knowledge.hidden = k.value("hidden", c.knowledge.hidden);
      c.knowledge.max_tokens = k.value("max_tokens", c.knowledge.max_tokens);
    }
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorCode::BadConfig, std::string("invalid configuration: ") + e.what());
  }
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  return from_json(parse_toml_file(path), path.parent_path());
}

TrainConfig RunConfig::train_config(TrainMode mode, Stage stage) const {
  try {
    auto cfg = TrainConfig::from_json(train);
    cfg.mode = mode;
    cfg.stage = stage;
    cfg.validate();
    return cfg;
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorCode::BadConfig, std::string("invalid [train] section: ") + e.what());
  }
}

BackboneConfig RunConfig::backbone_config(BackboneKind kind) const {
  try {
    auto j = kgpl::to_json(BackboneConfig::defaults(kind));
    for (const auto& [key, value] : backbone.items()) {
      if (key == "kind" || key == "in_channels" || key == "num_classes")
        throw Error(ErrorCode::BadConfig, "backbone." + key + " is derived, not configurable");
      j[key] = value;
    }
    return backbone_config_from_json(j);
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorCode::BadConfig, std::string("invalid [backbone] section: ") + e.what());
  }
}

PhantomFile load_phantom_file(const fs::path& path) {
  const auto j = parse_toml_file(path);
  PhantomFile f;
  try {
    const auto& body = j.contains("phantom") ? j["phantom"] : j;
    f.spec = PhantomSpec::from_json(body);
    if (body.contains("ratios")) f.ratios = body["ratios"].get<std::array<double, 3>>();
    else if (j.contains("ratios")) f.ratios = j["ratios"].get<std::array<double, 3>>();
  } catch (const std::exception& e) {
    throw Error(ErrorCode::BadSpec, std::string("invalid phantom spec: ") + e.what());
  }
  f.spec.validate();
  return f;
}

}  // namespace kgpl
