// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#include "quadapter/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "quadapter/error.hpp"
#include "quadapter/ops.hpp"

namespace quadapter {

void ModelConfig::validate() const {
  require(vocab > 0 && d_model > 0 && layers > 0 && heads > 0 && d_ff > 0 && max_seq > 0, ErrorKind::kConfig,
          "model dimensions must be positive");
  require(d_model % heads == 0, ErrorKind::kConfig, "d_model must be divisible by heads");
  require(ln_eps > 0.0, ErrorKind::kConfig, "layer norm epsilon must be positive");
}

namespace {

std::string blk(std::size_t i) { return "blk" + std::to_string(i); }

Tensor normal(std::mt19937_64& rng, Shape shape, double std) {
  std::normal_distribution<double> dist(0.0, std);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

LayerNormParams make_ln(std::size_t d) { return {Tensor({d}, 1.0), Tensor({d}, 0.0)}; }

}  // namespace

std::vector<std::pair<std::string, Tensor*>> ToyTransformer::parameters() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("tok_emb", &tok_emb);
  out.emplace_back("pos_emb", &pos_emb);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    TransformerLayer& l = layers[i];
    const std::string p = blk(i);
    out.emplace_back(p + ".ln1.gamma", &l.ln1.gamma);
    out.emplace_back(p + ".ln1.beta", &l.ln1.beta);
    out.emplace_back(p + ".qkv.weight", &l.qkv.weight);
    out.emplace_back(p + ".qkv.bias", &l.qkv.bias);
    out.emplace_back(p + ".attn_proj.weight", &l.attn_proj.weight);
    out.emplace_back(p + ".attn_proj.bias", &l.attn_proj.bias);
    out.emplace_back(p + ".ln2.gamma", &l.ln2.gamma);
    out.emplace_back(p + ".ln2.beta", &l.ln2.beta);
    out.emplace_back(p + ".fc1.weight", &l.fc1.weight);
    out.emplace_back(p + ".fc1.bias", &l.fc1.bias);
    out.emplace_back(p + ".fc2.weight", &l.fc2.weight);
    out.emplace_back(p + ".fc2.bias", &l.fc2.bias);
  }
  out.emplace_back("ln_f.gamma", &ln_f.gamma);
  out.emplace_back("ln_f.beta", &ln_f.beta);
  if (!config.tie_embeddings) out.emplace_back("head.weight", &head.weight);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ToyTransformer::parameters() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, t] : const_cast<ToyTransformer*>(this)->parameters()) out.emplace_back(name, t);
  return out;
}

Tensor& ToyTransformer::parameter(const std::string& name) {
  for (auto& [n, t] : parameters()) {
    if (n == name) return *t;
  }
  fail(ErrorKind::kIndex, "no parameter named '" + name + "'");
}

const Tensor& ToyTransformer::parameter(const std::string& name) const {
  return const_cast<ToyTransformer*>(this)->parameter(name);
}

std::size_t ToyTransformer::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : parameters()) n += t->size();
  return n;
}

ToyTransformer build_model(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  const std::size_t v = config.vocab, d = config.d_model, ff = config.d_ff;
  constexpr double kStd = 0.02;
  const double resid_std = kStd / std::sqrt(2.0 * config.layers);
  ToyTransformer m;
  m.config = config;
  m.tok_emb = normal(rng, {v, d}, kStd);
  m.pos_emb = normal(rng, {static_cast<std::size_t>(config.max_seq), d}, kStd);
  for (int i = 0; i < config.layers; ++i) {
    TransformerLayer l;
    l.ln1 = make_ln(d);
    l.qkv = {normal(rng, {3 * d, d}, kStd), Tensor({3 * d}, 0.0)};
    l.attn_proj = {normal(rng, {d, d}, resid_std), Tensor({d}, 0.0)};
    l.ln2 = make_ln(d);
    l.fc1 = {normal(rng, {ff, d}, kStd), Tensor({ff}, 0.0)};
    l.fc2 = {normal(rng, {d, ff}, resid_std), Tensor({d}, 0.0)};
    m.layers.push_back(std::move(l));
  }
  m.ln_f = make_ln(d);
  if (!config.tie_embeddings) m.head.weight = normal(rng, {v, d}, kStd);
  return m;
}

std::vector<AdapterSite> adapter_sites(const ModelConfig& config) {
  std::vector<AdapterSite> sites;
  const std::size_t d = config.d_model;
  for (int i = 0; i < config.layers; ++i) {
    sites.push_back({blk(i) + ".ln1", blk(i) + ".qkv", d});
    sites.push_back({blk(i) + ".ln2", blk(i) + ".fc1", d});
  }
  // A tied head shares the embedding table, which cannot absorb the scale.
  if (!config.tie_embeddings) sites.push_back({"ln_f", "head", d});
  return sites;
}

std::vector<QuantAttachment> quant_attachments(const ModelConfig& config) {
  using enum QuantTarget;
  std::vector<QuantAttachment> a;
  a.push_back({"tok_emb.weight", kWeight, "tok_emb"});
  a.push_back({"pos_emb.weight", kWeight, "pos_emb"});
  for (int i = 0; i < config.layers; ++i) {
    const std::string p = blk(i);
    a.push_back({p + ".ln1.weight", kWeight, p + ".ln1.gamma"});
    a.push_back({p + ".ln1.out", kActivation, p + ".ln1"});
    a.push_back({p + ".qkv.weight", kWeight, p + ".qkv.weight"});
    a.push_back({p + ".qkv.out", kActivation, p + ".qkv"});
    a.push_back({p + ".attn.scores", kActivation, p + ".attn.scores_matmul"});
    a.push_back({p + ".attn.probs", kActivation, p + ".attn.softmax"});
    a.push_back({p + ".attn.ctx", kActivation, p + ".attn.context_matmul"});
    a.push_back({p + ".attn_proj.weight", kWeight, p + ".attn_proj.weight"});
    a.push_back({p + ".attn_proj.out", kActivation, p + ".attn_proj"});
    a.push_back({p + ".ln2.weight", kWeight, p + ".ln2.gamma"});
    a.push_back({p + ".ln2.out", kActivation, p + ".ln2"});
    a.push_back({p + ".fc1.weight", kWeight, p + ".fc1.weight"});
    a.push_back({p + ".fc1.out", kActivation, p + ".fc1"});
    a.push_back({p + ".gelu.out", kActivation, p + ".gelu"});
    a.push_back({p + ".fc2.weight", kWeight, p + ".fc2.weight"});
    a.push_back({p + ".fc2.out", kActivation, p + ".fc2"});
  }
  a.push_back({"ln_f.weight", kWeight, "ln_f.gamma"});
  a.push_back({"ln_f.out", kActivation, "ln_f"});
  a.push_back({"head.weight", kWeight, config.tie_embeddings ? "tok_emb" : "head.weight"});
  a.push_back({"head.out", kActivation, "head"});
  return a;
}

QuantizedView QuantizedView::make(const ModelConfig& config, int bits) {
  QuantizedView v;
  v.bits = bits;
  for (const QuantAttachment& a : quant_attachments(config)) v.quantizers.emplace(a.site, make_quantizer(bits));
  return v;
}

QuantizerState& QuantizedView::quantizer(const std::string& site) {
  auto it = quantizers.find(site);
  require(it != quantizers.end(), ErrorKind::kIndex, "no quantizer site '" + site + "'");
  return it->second;
}

std::vector<AdapterSite> install_quadapters(const ToyTransformer& model, QuantizedView& view) {
  std::vector<AdapterSite> sites = adapter_sites(model.config);
  for (const AdapterSite& s : sites) {
    const Applicability ok = check_applicability(LayerKind::kLayerNorm, InterveningOp::kNone, LayerKind::kLinear);
    if (!ok) fail(ErrorKind::kApplicability, "cannot install adapter at '" + s.name + "': " + ok.reason);
    view.adapters[s.name] = init_identity(s.width);
  }
  return sites;
}

namespace {

/// Binds parameters, adapters and quantizer states for one pass.
class ForwardPass {
 public:
  ForwardPass(Graph& g, const ToyTransformer& m, QuantizedView* view, ForwardOptions& opt)
      : g_(g), m_(m), view_(view), opt_(opt) {
    require(view_ || opt_.run.mode == QuantSwitch::kOff, ErrorKind::kContract,
            "quantized forward needs a quantized view");
    for (const auto& [name, t] : m_.parameters()) {
      vars_.params.emplace(name, g_.leaf(*t, opt_.train_weights, name));
    }
    if (view_) {
      for (auto& [site, p] : view_->adapters) {
        vars_.alphas.emplace(site, g_.leaf(p.alpha, opt_.train_alpha, site + ".alpha"));
      }
    }
    run_ = opt_.run;
    run_.theta_leaves = &vars_.thetas;
  }

  Var param(const std::string& name) const { return vars_.params.at(name); }

  QuantizerState& q(const std::string& site) {
    if (view_) return view_->quantizer(site);
    return scratch_[site];
  }

  Var quant(Var x, const std::string& site) { return quantize_site(x, q(site), run_, site); }

  void probe(const std::string& name, Var v) const {
    if (opt_.probe && *opt_.probe) (*opt_.probe)(name, v.value());
  }

  /// normalized input -> adapter -> quantized consumer output.
  Var adapted(Var x, const std::string& ln, const std::string& consumer, Var consumer_weight,
              std::optional<Var> consumer_bias) {
    Var n = normalize(x, m_.config.ln_eps);
    probe(ln + ".in", n);
    const Var* alpha = nullptr;
    std::optional<Var> inv;
    if (auto it = vars_.alphas.find(ln); it != vars_.alphas.end()) {
      alpha = &it->second;
      inv = reciprocal(*alpha);
    }
    FirstLayerVars first{LayerKind::kLayerNorm, param(ln + ".gamma"), param(ln + ".beta")};
    Var a = adapted_activation(n, first, alpha, q(ln + ".weight"), q(ln + ".out"), std::nullopt, run_, ln);
    Var y = adapted_consumer(a, consumer_weight, consumer_bias, inv ? &*inv : nullptr, q(consumer + ".weight"), run_,
                             consumer);
    return quant(y, consumer + ".out");
  }

  ModelVars& vars() { return vars_; }
  const QuantRun& run() const { return run_; }

 private:
  Graph& g_;
  const ToyTransformer& m_;
  QuantizedView* view_;
  ForwardOptions& opt_;
  QuantRun run_;
  ModelVars vars_;
  std::map<std::string, QuantizerState> scratch_;
};

}  // namespace

Var forward(Graph& g, const ToyTransformer& model, QuantizedView* view, const TokenBatch& batch,
            ForwardOptions& options, ModelVars* vars) {
  const ModelConfig& c = model.config;
  require(batch.batch > 0 && batch.seq > 0 && batch.tokens.size() == batch.batch * batch.seq, ErrorKind::kDimension,
          "token batch shape mismatch");
  require(batch.seq <= static_cast<std::size_t>(c.max_seq), ErrorKind::kDimension,
          "sequence length " + std::to_string(batch.seq) + " exceeds context " + std::to_string(c.max_seq));
  for (int t : batch.tokens) {
    require(t >= 0 && t < c.vocab, ErrorKind::kIndex, "token " + std::to_string(t) + " outside vocabulary");
  }
  ForwardPass fp(g, model, view, options);

  std::vector<int> positions(batch.tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % batch.seq);
  Var tok = fp.quant(fp.param("tok_emb"), "tok_emb.weight");
  Var pos = fp.quant(fp.param("pos_emb"), "pos_emb.weight");
  Var x = add(embedding(tok, batch.tokens), embedding(pos, positions));

  const AttentionShape shape{batch.batch, batch.seq, static_cast<std::size_t>(c.heads)};
  for (int i = 0; i < c.layers; ++i) {
    const std::string p = blk(i);
    Var qkv = fp.adapted(x, p + ".ln1", p + ".qkv", fp.param(p + ".qkv.weight"), fp.param(p + ".qkv.bias"));
    Var scores = fp.quant(attention_scores(qkv, shape), p + ".attn.scores");
    Var probs = fp.quant(causal_softmax(scores, batch.seq), p + ".attn.probs");
    Var ctx = fp.quant(attention_context(probs, qkv, shape), p + ".attn.ctx");
    Var proj_w = fp.quant(fp.param(p + ".attn_proj.weight"), p + ".attn_proj.weight");
    Var attn = fp.quant(linear(ctx, proj_w, fp.param(p + ".attn_proj.bias")), p + ".attn_proj.out");
    x = add(x, attn);

    Var h = fp.adapted(x, p + ".ln2", p + ".fc1", fp.param(p + ".fc1.weight"), fp.param(p + ".fc1.bias"));
    h = fp.quant(gelu(h), p + ".gelu.out");
    Var fc2_w = fp.quant(fp.param(p + ".fc2.weight"), p + ".fc2.weight");
    Var ffn = fp.quant(linear(h, fc2_w, fp.param(p + ".fc2.bias")), p + ".fc2.out");
    x = add(x, ffn);
  }
  Var head_w = c.tie_embeddings ? fp.param("tok_emb") : fp.param("head.weight");
  Var logits = fp.adapted(x, "ln_f", "head", head_w, std::nullopt);
  if (vars) *vars = fp.vars();
  return logits;
}

Tensor forward_logits(const ToyTransformer& model, QuantizedView* view, const TokenBatch& batch, QuantSwitch mode) {
  Graph g;
  ForwardOptions opt;
  opt.run.mode = mode;
  return forward(g, model, view, batch, opt).value();
}

void inject_outliers(ToyTransformer& model, const std::string& site, const std::vector<std::size_t>& channels,
                     double factor) {
  require(factor > 0.0 && std::isfinite(factor), ErrorKind::kContract, "outlier factor must be positive");
  const std::vector<AdapterSite> sites = adapter_sites(model.config);
  auto it = std::find_if(sites.begin(), sites.end(), [&](const AdapterSite& s) { return s.name == site; });
  require(it != sites.end(), ErrorKind::kIndex, "'" + site + "' is not an adapter-capable site");
  for (std::size_t ch : channels) {
    require(ch < it->width, ErrorKind::kIndex, "channel " + std::to_string(ch) + " out of range at " + site);
  }
  Tensor& gamma = model.parameter(site + ".gamma");
  Tensor& beta = model.parameter(site + ".beta");
  Tensor& w = model.parameter(it->consumer + ".weight");
  const double inv = 1.0 / factor;
  for (std::size_t ch : channels) {
    gamma[ch] *= factor;
    beta[ch] *= factor;
    for (std::size_t r = 0; r < w.rows(); ++r) w.at(r, ch) *= inv;
  }
}

QuadapterBlock extract_block(const ToyTransformer& model, const QuantizedView& view, const AdapterSite& site) {
  FirstLayer first{LayerKind::kLayerNorm, model.parameter(site.name + ".gamma"), model.parameter(site.name + ".beta")};
  LinearLayer consumer;
  consumer.weight = model.parameter(site.consumer + ".weight");
  if (site.consumer != "head") consumer.bias = model.parameter(site.consumer + ".bias");
  QuadapterBlock b = make_block(site.name, std::move(first), {std::move(consumer)}, view.bits);
  if (auto it = view.adapters.find(site.name); it != view.adapters.end()) b.params = it->second;
  return b;
}

void fold_commit(ToyTransformer& model, QuantizedView& view) {
  for (const AdapterSite& s : adapter_sites(model.config)) {
    auto it = view.adapters.find(s.name);
    if (it == view.adapters.end()) continue;
    Tensor& gamma = model.parameter(s.name + ".gamma");
    Tensor& beta = model.parameter(s.name + ".beta");
    Tensor& w = model.parameter(s.consumer + ".weight");
    const FoldedWeights f = fold(FirstLayer{LayerKind::kLayerNorm, gamma, beta}, {&w}, it->second.alpha);
    gamma = f.first_weight;
    beta = f.first_bias;
    w = f.consumer_weights.front();
  }
  view.adapters.clear();
}

}  // namespace quadapter
