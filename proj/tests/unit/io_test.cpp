// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>

#include "quadapter/checkpoint.hpp"
#include "quadapter/config.hpp"
#include "quadapter/error.hpp"
#include "quadapter/manifest.hpp"
#include "quadapter/model.hpp"

namespace fs = std::filesystem;

namespace quadapter {
namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "quadapter_io_test" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::optional<ErrorKind> kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return std::nullopt;
}

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.heads = 2;
  c.d_ff = 32;
  c.max_seq = 16;
  c.seed = 3;
  return c;
}

RunConfig shipped() { return RunConfig::load(QUADAPTER_SOURCE_DIR "/configs/default.json"); }

TEST(Config, ShippedDefaultRoundTrips) {
  const RunConfig c = shipped();
  EXPECT_EQ(RunConfig::from_json(c.to_json()).to_json().dump(), c.to_json().dump());
  // Only the data source differs from the built-in defaults.
  json built_in = RunConfig{}.to_json();
  built_in["data"]["synthetic_seed"] = 7;
  EXPECT_EQ(c.to_json().dump(), built_in.dump());
}

TEST(Config, NoDataSourceIsAConfigError) {
  EXPECT_EQ(kind_of([] { RunConfig::from_json(RunConfig{}.to_json()); }), ErrorKind::kConfig);
}

TEST(Config, UnknownKeysAreRejectedAtAnyDepth) {
  json j = shipped().to_json();
  j["colour"] = "blue";
  EXPECT_EQ(kind_of([&] { RunConfig::from_json(j); }), ErrorKind::kConfig);
  j = shipped().to_json();
  j["train"]["phase1"]["momentum"] = 0.9;
  EXPECT_EQ(kind_of([&] { RunConfig::from_json(j); }), ErrorKind::kConfig);
  j = shipped().to_json();
  j["model"]["dropout"] = 0.1;
  EXPECT_EQ(kind_of([&] { RunConfig::from_json(j); }), ErrorKind::kConfig);
}

TEST(Config, InvalidValuesAreConfigErrors) {
  json j = shipped().to_json();
  j["bits"] = 1;
  EXPECT_EQ(kind_of([&] { RunConfig::from_json(j).validate(); }), ErrorKind::kConfig);
  j = shipped().to_json();
  j["method"] = "adaround";
  EXPECT_EQ(kind_of([&] { RunConfig::from_json(j); }), ErrorKind::kConfig);
  j = shipped().to_json();
  j["model"]["heads"] = "four";
  EXPECT_EQ(kind_of([&] { RunConfig::from_json(j); }), ErrorKind::kConfig);
}

TEST(Config, MethodNamesRoundTrip) {
  for (Method m : all_methods()) EXPECT_EQ(parse_method(to_string(m)), m);
  EXPECT_TRUE(keeps_weights(Method::kQuadapter));
  EXPECT_TRUE(keeps_weights(Method::kQuadapterBc));
  EXPECT_FALSE(keeps_weights(Method::kQat));
  EXPECT_TRUE(uses_finetuning(Method::kQatNoLsq));
  EXPECT_FALSE(uses_finetuning(Method::kCle));
}

TEST(Config, SeedOverrideReachesModelAndPlan) {
  RunConfig c;
  c.set_seed(42);
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.model.seed, 42u);
}

TEST(Config, OutputRootEnvironment) {
  ::unsetenv(kOutputRootEnv);
  EXPECT_EQ(resolve_output_dir("runs/x"), fs::path("runs/x"));
  ::setenv(kOutputRootEnv, "/tmp/qroot", 1);
  EXPECT_EQ(resolve_output_dir("runs/x"), fs::path("/tmp/qroot/runs/x"));
  EXPECT_EQ(resolve_output_dir("/abs/y"), fs::path("/abs/y"));
  ::unsetenv(kOutputRootEnv);
}

TEST(Checkpoint, RoundTripIsExactAndStable) {
  const ToyTransformer m = build_model(small_config());
  QuantizedView v = QuantizedView::make(m.config, 8);
  install_quadapters(m, v);
  v.adapters.begin()->second.alpha[3] = 2.5;
  const json meta = {{"method", "quadapter"}};
  const std::string bytes = encode_checkpoint(m, &v, meta);
  EXPECT_EQ(bytes.substr(0, 8), kCheckpointMagic);
  const Checkpoint back = decode_checkpoint(bytes);
  ASSERT_TRUE(back.view.has_value());
  EXPECT_EQ(back.meta, meta);
  EXPECT_EQ(encode_checkpoint(back.model, &*back.view, back.meta), bytes);
  const auto pa = m.parameters(), pb = back.model.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(bit_equal(*pa[i].second, *pb[i].second)) << pa[i].first;
  EXPECT_EQ(back.view->adapters.begin()->second.alpha[3], 2.5);
}

TEST(Checkpoint, FpOnlyHasNoView) {
  const ToyTransformer m = build_model(small_config());
  EXPECT_FALSE(decode_checkpoint(encode_checkpoint(m, nullptr)).view.has_value());
}

TEST(Checkpoint, CorruptBytesAreIoErrors) {
  const std::string bytes = encode_checkpoint(build_model(small_config()), nullptr);
  EXPECT_EQ(kind_of([&] { decode_checkpoint("NOTACKPT" + bytes.substr(8)); }), ErrorKind::kIo);
  EXPECT_EQ(kind_of([&] { decode_checkpoint(bytes.substr(0, bytes.size() - 8)); }), ErrorKind::kIo);
  EXPECT_EQ(kind_of([&] { decode_checkpoint(bytes.substr(0, 5)); }), ErrorKind::kIo);
}

TEST(Checkpoint, FileRoundTrip) {
  const fs::path dir = scratch("ckpt");
  const ToyTransformer m = build_model(small_config());
  save_checkpoint(dir / "a.ckpt", m, nullptr);
  EXPECT_EQ(read_file(dir / "a.ckpt"), encode_checkpoint(m, nullptr));
  EXPECT_EQ(kind_of([&] { load_checkpoint(dir / "missing.ckpt"); }), ErrorKind::kIo);
}

TEST(Manifest, BlobHashMatchesGit) {
  // git hash-object on a file holding "hello\n"
  EXPECT_EQ(git_blob_sha1("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
  EXPECT_EQ(git_blob_sha1(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}

TEST(Manifest, RecordsArtifactsAndRoundTrips) {
  const fs::path dir = scratch("manifest");
  write_file(dir / "out.csv", "a,b\n1,2\n");
  write_file(dir / "in.txt", "hello\n");
  Manifest m;
  m.command = "quantize";
  m.seed = 7;
  m.config = shipped().to_json();
  m.add_input(dir / "in.txt");
  m.add_artifact(dir, "out.csv");
  const fs::path written = m.write(dir);
  EXPECT_EQ(written.filename(), "quantize.manifest.json");
  std::ifstream is(written);
  const Manifest back = Manifest::from_json(json::parse(is));
  EXPECT_EQ(back.to_json(), m.to_json());
  EXPECT_EQ(back.inputs.at((dir / "in.txt").string()), "ce013625030ba8dba906f756967f9e9ca394464a");
  EXPECT_EQ(back.artifacts.at("out.csv"), git_blob_sha1("a,b\n1,2\n"));
  // The config snapshot loads as a run config again.
  EXPECT_EQ(RunConfig::from_json(back.config).to_json(), m.config);
}

}  // namespace
}  // namespace quadapter
