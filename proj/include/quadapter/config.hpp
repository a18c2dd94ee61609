// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "quadapter/data.hpp"
#include "quadapter/model.hpp"
#include "quadapter/train.hpp"

namespace quadapter {

using json = nlohmann::ordered_json;

enum class Method { kPtq, kCle, kQuadapterBc, kQuadapter, kQat, kQuadapterBcQat, kQatNoLsq };

std::string_view to_string(Method method);
/// Config error on an unknown name.
Method parse_method(std::string_view name);
const std::vector<Method>& all_methods();
/// Methods that train on a fine-tuning corpus.
bool uses_finetuning(Method method);
/// Methods that leave the model weights untouched.
bool keeps_weights(Method method);

json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const json& j);
json to_json(const TrainPlan& plan);
TrainPlan train_plan_from_json(const json& j);

/// Files of one named corpus.
struct CorpusPaths {
  std::string name;
  std::string train;
  std::string valid;
  std::string test;
};

struct DataConfig {
  std::optional<std::uint64_t> synthetic_seed;
  SyntheticOptions synthetic;
  std::vector<CorpusPaths> corpora;
  std::size_t calib_per_corpus = 5;
  std::size_t calib_seq = 128;
};

/// Function-preserving outlier surgery applied to the FP model before
/// quantization.
struct SurgeryConfig {
  bool enabled = true;
  std::vector<std::string> sites;  // empty means every adapter site
  std::vector<std::size_t> channels{5, 37};
  double factor = 100.0;
};

struct EvalConfig {
  std::size_t eval_block = 128;
  std::size_t batch = 8;
  std::vector<double> fractions{1.0};  // data-size sweep over D2
};

struct RunConfig {
  ModelConfig model;
  TrainPlan train;
  DataConfig data;
  SurgeryConfig surgery;
  EvalConfig eval;
  int bits = 8;
  Method method = Method::kQuadapter;
  std::string fid = "A";
  std::vector<Method> matrix_methods;  // empty means all but qat_no_lsq
  std::string output_dir = "runs/default";
  std::uint64_t seed = 1;

  /// Throws a config error on any invalid field.
  void validate() const;
  json to_json() const;
  /// Unknown keys at any level are config errors.
  static RunConfig from_json(const json& j);
  static RunConfig load(const std::filesystem::path& path);
  /// Applies seed to the model and the train plan. Synthetic corpora keep
  /// their own seed.
  void set_seed(std::uint64_t s);
};

constexpr const char* kOutputRootEnv = "QUADAPTER_OUTPUT_ROOT";

/// Relative output directories resolve against $QUADAPTER_OUTPUT_ROOT when it
/// is set, else against the working directory.
std::filesystem::path resolve_output_dir(const std::string& output_dir);

}  // namespace quadapter
