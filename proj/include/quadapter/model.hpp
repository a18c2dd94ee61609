// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "quadapter/adapter.hpp"
#include "quadapter/autodiff.hpp"
#include "quadapter/quant.hpp"
#include "quadapter/tensor.hpp"

namespace quadapter {

struct ModelConfig {
  int vocab = 256;
  int d_model = 64;
  int layers = 2;
  int heads = 4;
  int d_ff = 256;
  int max_seq = 128;
  double ln_eps = 1e-5;
  std::uint64_t seed = 1;
  bool tie_embeddings = false;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
};

struct TransformerLayer {
  LayerNormParams ln1;
  LinearLayer qkv;  // fused [3d x d]
  LinearLayer attn_proj;
  LayerNormParams ln2;
  LinearLayer fc1;
  LinearLayer fc2;
};

/// Decoder-only pre-norm transformer with learned positions and an untied
/// logit projection by default.
struct ToyTransformer {
  ModelConfig config;
  Tensor tok_emb;  // [V x d]
  Tensor pos_emb;  // [T_max x d]
  std::vector<TransformerLayer> layers;
  LayerNormParams ln_f;
  LinearLayer head;  // [V x d], no bias; empty when tied

  /// Stable (name, tensor) list; the order is the checkpoint order.
  std::vector<std::pair<std::string, Tensor*>> parameters();
  std::vector<std::pair<std::string, const Tensor*>> parameters() const;
  Tensor& parameter(const std::string& name);
  const Tensor& parameter(const std::string& name) const;
  std::size_t parameter_count() const;
};

/// Normal(0, 0.02) weights with residual output projections scaled by
/// 1/sqrt(2L); zero biases, unit gammas.
ToyTransformer build_model(const ModelConfig& config);

/// An adapter installation point: a layer norm and the linear it feeds.
struct AdapterSite {
  std::string name;      // layer norm, e.g. "blk0.ln1"
  std::string consumer;  // linear, e.g. "blk0.qkv"
  std::size_t width = 0;
};

std::vector<AdapterSite> adapter_sites(const ModelConfig& config);

enum class QuantTarget { kWeight, kActivation };

/// One quantizer attachment: what tensor it reads.
struct QuantAttachment {
  std::string site;
  QuantTarget target = QuantTarget::kWeight;
  std::string tensor;  // parameter name or producing op
};

/// Every quantizer site of the quantized model, in forward order.
std::vector<QuantAttachment> quant_attachments(const ModelConfig& config);

/// M_Q: quantizer states for every weight and activation site plus the
/// adapter scales. Model parameters are never stored here.
struct QuantizedView {
  int bits = 8;
  std::map<std::string, QuantizerState> quantizers;
  std::map<std::string, QuadapterParams> adapters;

  /// All sites dynamic, no adapters.
  static QuantizedView make(const ModelConfig& config, int bits);
  QuantizerState& quantizer(const std::string& site);
  bool has_adapters() const noexcept { return !adapters.empty(); }
};

/// Installs one identity adapter per site after checking applicability.
std::vector<AdapterSite> install_quadapters(const ToyTransformer& model, QuantizedView& view);

/// A batch of equal-length token rows, row-major.
struct TokenBatch {
  std::vector<int> tokens;
  std::size_t batch = 0;
  std::size_t seq = 0;
};

using ActivationProbe = std::function<void(const std::string&, const Tensor&)>;

struct ForwardOptions {
  QuantRun run{QuantSwitch::kOff, false, nullptr, nullptr};
  bool train_weights = false;
  bool train_alpha = false;
  // Also called with "<site>.in" for the normalized input of adapter sites.
  const ActivationProbe* probe = nullptr;
};

/// Graph leaves bound during one forward pass.
struct ModelVars {
  std::map<std::string, Var> params;
  std::map<std::string, Var> alphas;
  std::map<std::string, Var> thetas;
};

/// Logits [batch*seq x V]. view == nullptr means the plain FP model;
/// otherwise adapters in the view are applied and options.run decides what
/// the quantizers do.
Var forward(Graph& graph, const ToyTransformer& model, QuantizedView* view, const TokenBatch& batch,
            ForwardOptions& options, ModelVars* vars = nullptr);

/// Convenience wrapper returning logits as a tensor.
Tensor forward_logits(const ToyTransformer& model, QuantizedView* view, const TokenBatch& batch, QuantSwitch mode);

/// Scales gamma/beta of the chosen channels at an adapter site by factor and
/// the consumer's matching input columns by 1/factor. The FP function is
/// unchanged up to rounding.
void inject_outliers(ToyTransformer& model, const std::string& site, const std::vector<std::size_t>& channels,
                     double factor);

/// Copies the layers of one adapter site into a standalone block; alpha comes
/// from the view when present.
QuadapterBlock extract_block(const ToyTransformer& model, const QuantizedView& view, const AdapterSite& site);

/// Folds the view's adapters into the parameters and drops them from the view.
void fold_commit(ToyTransformer& model, QuantizedView& view);

}  // namespace quadapter
