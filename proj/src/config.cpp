// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#include "quadapter/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>

#include "quadapter/error.hpp"

namespace quadapter {

namespace {

constexpr std::pair<Method, std::string_view> kMethodNames[] = {
    {Method::kPtq, "ptq"},
    {Method::kCle, "cle"},
    {Method::kQuadapterBc, "quadapter_bc"},
    {Method::kQuadapter, "quadapter"},
    {Method::kQat, "qat"},
    {Method::kQuadapterBcQat, "quadapter_bc_qat"},
    {Method::kQatNoLsq, "qat_no_lsq"},
};

/// Reads known keys of one JSON object and rejects the rest.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    require(j.is_object(), ErrorKind::kConfig, "'" + path_ + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    if (const json* v = take(key)) {
      try {
        out = v->get<T>();
      } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::kConfig, "'" + where(key) + "': " + e.what());
      }
    }
  }

  void get_size(const char* key, std::size_t& out) {
    if (const json* v = take(key)) {
      require(v->is_number_unsigned(), ErrorKind::kConfig, "'" + where(key) + "' must be a non-negative integer");
      out = v->get<std::size_t>();
    }
  }

  const json* take(const char* key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    seen_.insert(key);
    return &*it;
  }

  std::string where(const char* key) const { return path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) fail(ErrorKind::kConfig, "unknown key '" + path_ + "." + it.key() + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

std::string_view to_string(Method method) {
  for (const auto& [m, name] : kMethodNames) {
    if (m == method) return name;
  }
  return "ptq";
}

Method parse_method(std::string_view name) {
  for (const auto& [m, n] : kMethodNames) {
    if (n == name) return m;
  }
  fail(ErrorKind::kConfig, "unknown method '" + std::string(name) + "'");
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> methods = [] {
    std::vector<Method> v;
    for (const auto& [m, _] : kMethodNames) v.push_back(m);
    return v;
  }();
  return methods;
}

bool uses_finetuning(Method method) {
  return method == Method::kQuadapter || method == Method::kQat || method == Method::kQuadapterBcQat ||
         method == Method::kQatNoLsq;
}

bool keeps_weights(Method method) {
  return method == Method::kPtq || method == Method::kCle || method == Method::kQuadapterBc ||
         method == Method::kQuadapter;
}

json to_json(const ModelConfig& c) {
  return json{{"vocab", c.vocab},     {"d_model", c.d_model}, {"layers", c.layers},
              {"heads", c.heads},     {"d_ff", c.d_ff},       {"max_seq", c.max_seq},
              {"ln_eps", c.ln_eps},   {"seed", c.seed},       {"tie_embeddings", c.tie_embeddings}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  ObjectReader r(j, "model");
  r.get("vocab", c.vocab);
  r.get("d_model", c.d_model);
  r.get("layers", c.layers);
  r.get("heads", c.heads);
  r.get("d_ff", c.d_ff);
  r.get("max_seq", c.max_seq);
  r.get("ln_eps", c.ln_eps);
  r.get("seed", c.seed);
  r.get("tie_embeddings", c.tie_embeddings);
  r.finish();
  return c;
}

json to_json(const TrainPlan& p) {
  return json{
      {"phase1",
       {{"lr", p.phase1.lr},
        {"decay", p.phase1.decay},
        {"decay_interval", p.phase1.decay_interval},
        {"steps", p.phase1.steps},
        {"batch_rows", p.phase1.batch_rows}}},
      {"phase2",
       {{"lr_alpha", p.phase2.lr_alpha},
        {"lr_theta", p.phase2.lr_theta},
        {"lr_weights", p.phase2.lr_weights},
        {"steps", p.phase2.steps},
        {"batch", p.phase2.batch},
        {"block", p.phase2.block}}},
      {"pretrain",
       {{"lr", p.pretrain.lr},
        {"warmup", p.pretrain.warmup},
        {"steps", p.pretrain.steps},
        {"batch", p.pretrain.batch},
        {"block", p.pretrain.block}}},
      {"seed", p.seed},
  };
}

TrainPlan train_plan_from_json(const json& j) {
  TrainPlan p;
  ObjectReader r(j, "train");
  if (const json* v = r.take("phase1")) {
    ObjectReader s(*v, "train.phase1");
    s.get("lr", p.phase1.lr);
    s.get("decay", p.phase1.decay);
    s.get("decay_interval", p.phase1.decay_interval);
    s.get("steps", p.phase1.steps);
    s.get_size("batch_rows", p.phase1.batch_rows);
    s.finish();
  }
  if (const json* v = r.take("phase2")) {
    ObjectReader s(*v, "train.phase2");
    s.get("lr_alpha", p.phase2.lr_alpha);
    s.get("lr_theta", p.phase2.lr_theta);
    s.get("lr_weights", p.phase2.lr_weights);
    s.get("steps", p.phase2.steps);
    s.get_size("batch", p.phase2.batch);
    s.get_size("block", p.phase2.block);
    s.finish();
  }
  if (const json* v = r.take("pretrain")) {
    ObjectReader s(*v, "train.pretrain");
    s.get("lr", p.pretrain.lr);
    s.get("warmup", p.pretrain.warmup);
    s.get("steps", p.pretrain.steps);
    s.get_size("batch", p.pretrain.batch);
    s.get_size("block", p.pretrain.block);
    s.finish();
  }
  r.get("seed", p.seed);
  r.finish();
  return p;
}

void RunConfig::set_seed(std::uint64_t s) {
  seed = s;
  model.seed = s;
  train.seed = s;
}

void RunConfig::validate() const {
  try {
    model.validate();
  } catch (const Error& e) {
    fail(ErrorKind::kConfig, std::string("model: ") + e.what());
  }
  train.validate();
  require(bits >= 2 && bits <= 16, ErrorKind::kConfig, "bits must lie in [2, 16]");
  require(data.synthetic_seed || !data.corpora.empty(), ErrorKind::kConfig,
          "no corpus paths and no synthetic seed given");
  require(!(data.synthetic_seed && !data.corpora.empty()), ErrorKind::kConfig,
          "give either corpus paths or a synthetic seed, not both");
  std::set<std::string> names;
  for (const CorpusPaths& c : data.corpora) {
    require(!c.name.empty() && !c.train.empty() && !c.valid.empty() && !c.test.empty(), ErrorKind::kConfig,
            "every corpus needs a name and train/valid/test paths");
    require(names.insert(c.name).second, ErrorKind::kConfig, "duplicate corpus name '" + c.name + "'");
  }
  if (data.synthetic_seed) names = {"A", "B"};
  require(names.count(fid) == 1, ErrorKind::kConfig, "fine-tuning corpus '" + fid + "' is not declared");
  require(data.calib_per_corpus >= 1 && data.calib_seq >= 1, ErrorKind::kConfig, "calibration set is empty");
  const auto seq_limit = static_cast<std::size_t>(model.max_seq);
  require(data.calib_seq <= seq_limit && train.phase2.block <= seq_limit && train.pretrain.block <= seq_limit &&
              eval.eval_block <= seq_limit,
          ErrorKind::kConfig, "sequence lengths must not exceed model.max_seq");
  require(eval.eval_block >= 1 && eval.batch >= 1, ErrorKind::kConfig, "eval block and batch must be >= 1");
  require(!eval.fractions.empty(), ErrorKind::kConfig, "eval.fractions must not be empty");
  for (double f : eval.fractions) {
    require(f > 0.0 && f <= 1.0, ErrorKind::kConfig, "data fractions must lie in (0, 1]");
  }
  require(surgery.factor > 0.0 && std::isfinite(surgery.factor), ErrorKind::kConfig, "surgery factor must be > 0");
  for (std::size_t c : surgery.channels) {
    require(c < static_cast<std::size_t>(model.d_model), ErrorKind::kConfig, "surgery channel outside d_model");
  }
  require(!output_dir.empty(), ErrorKind::kConfig, "output_dir must not be empty");
}

json RunConfig::to_json() const {
  json corpora = json::array();
  for (const CorpusPaths& c : data.corpora) {
    corpora.push_back({{"name", c.name}, {"train", c.train}, {"valid", c.valid}, {"test", c.test}});
  }
  json d{{"corpora", corpora},
         {"synthetic",
          {{"train_tokens", data.synthetic.train_tokens},
           {"valid_tokens", data.synthetic.valid_tokens},
           {"test_tokens", data.synthetic.test_tokens},
           {"min_tv", data.synthetic.min_tv}}},
         {"calib_per_corpus", data.calib_per_corpus},
         {"calib_seq", data.calib_seq}};
  d["synthetic_seed"] = data.synthetic_seed ? json(*data.synthetic_seed) : json(nullptr);
  json methods = json::array();
  for (Method m : matrix_methods) methods.push_back(std::string(quadapter::to_string(m)));
  return json{
      {"model", quadapter::to_json(model)},
      {"train", quadapter::to_json(train)},
      {"data", d},
      {"surgery",
       {{"enabled", surgery.enabled},
        {"sites", surgery.sites},
        {"channels", surgery.channels},
        {"factor", surgery.factor}}},
      {"eval", {{"eval_block", eval.eval_block}, {"batch", eval.batch}, {"fractions", eval.fractions}}},
      {"bits", bits},
      {"method", std::string(quadapter::to_string(method))},
      {"fid", fid},
      {"matrix_methods", methods},
      {"output_dir", output_dir},
      {"seed", seed},
  };
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  ObjectReader r(j, "config");
  if (const json* v = r.take("model")) c.model = model_config_from_json(*v);
  if (const json* v = r.take("train")) c.train = train_plan_from_json(*v);
  if (const json* v = r.take("data")) {
    ObjectReader d(*v, "config.data");
    if (const json* s = d.take("synthetic_seed"); s && !s->is_null()) {
      require(s->is_number_unsigned(), ErrorKind::kConfig, "'data.synthetic_seed' must be a non-negative integer");
      c.data.synthetic_seed = s->get<std::uint64_t>();
    }
    if (const json* s = d.take("synthetic")) {
      ObjectReader o(*s, "config.data.synthetic");
      o.get_size("train_tokens", c.data.synthetic.train_tokens);
      o.get_size("valid_tokens", c.data.synthetic.valid_tokens);
      o.get_size("test_tokens", c.data.synthetic.test_tokens);
      o.get("min_tv", c.data.synthetic.min_tv);
      o.finish();
    }
    if (const json* s = d.take("corpora")) {
      require(s->is_array(), ErrorKind::kConfig, "'data.corpora' must be an array");
      for (const json& e : *s) {
        CorpusPaths p;
        ObjectReader o(e, "config.data.corpora[]");
        o.get("name", p.name);
        o.get("train", p.train);
        o.get("valid", p.valid);
        o.get("test", p.test);
        o.finish();
        c.data.corpora.push_back(std::move(p));
      }
    }
    d.get_size("calib_per_corpus", c.data.calib_per_corpus);
    d.get_size("calib_seq", c.data.calib_seq);
    d.finish();
  }
  if (const json* v = r.take("surgery")) {
    ObjectReader s(*v, "config.surgery");
    s.get("enabled", c.surgery.enabled);
    s.get("sites", c.surgery.sites);
    s.get("channels", c.surgery.channels);
    s.get("factor", c.surgery.factor);
    s.finish();
  }
  if (const json* v = r.take("eval")) {
    ObjectReader s(*v, "config.eval");
    s.get_size("eval_block", c.eval.eval_block);
    s.get_size("batch", c.eval.batch);
    s.get("fractions", c.eval.fractions);
    s.finish();
  }
  r.get("bits", c.bits);
  if (const json* v = r.take("method")) {
    require(v->is_string(), ErrorKind::kConfig, "'method' must be a string");
    c.method = parse_method(v->get<std::string>());
  }
  r.get("fid", c.fid);
  if (const json* v = r.take("matrix_methods")) {
    require(v->is_array(), ErrorKind::kConfig, "'matrix_methods' must be an array");
    for (const json& m : *v) {
      require(m.is_string(), ErrorKind::kConfig, "'matrix_methods' entries must be strings");
      c.matrix_methods.push_back(parse_method(m.get<std::string>()));
    }
  }
  r.get("output_dir", c.output_dir);
  std::uint64_t seed = c.seed;
  r.get("seed", seed);
  r.finish();
  // The top-level seed drives every stream unless a section pins its own.
  const bool model_seed = j.contains("model") && j["model"].contains("seed");
  const bool train_seed = j.contains("train") && j["train"].contains("seed");
  c.seed = seed;
  if (!model_seed) c.model.seed = seed;
  if (!train_seed) c.train.seed = seed;
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorKind::kConfig, "cannot read config " + path.string());
  json j;
  try {
    j = json::parse(is, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kConfig, "config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

std::filesystem::path resolve_output_dir(const std::string& output_dir) {
  const std::filesystem::path p(output_dir);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv(kOutputRootEnv); root && *root) return std::filesystem::path(root) / p;
  return p;
}

}  // namespace quadapter
