// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#include "quadapter/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "quadapter/error.hpp"

namespace quadapter {

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

namespace {

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(std::string_view bytes, std::size_t& pos) {
  require(pos + sizeof(T) <= bytes.size(), ErrorKind::kIo, "checkpoint is truncated");
  T v;
  std::memcpy(&v, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

json quantizer_json(const QuantizerState& q) {
  return json{{"theta_min", q.theta_min},
              {"theta_max", q.theta_max},
              {"bits", q.bits},
              {"mode", std::string(to_string(q.mode))},
              {"observed", q.observed}};
}

QuantizerState quantizer_from_json(const json& j) {
  QuantizerState q;
  q.theta_min = j.at("theta_min").get<double>();
  q.theta_max = j.at("theta_max").get<double>();
  q.bits = j.at("bits").get<int>();
  q.mode = parse_quant_mode(j.at("mode").get<std::string>());
  q.observed = j.at("observed").get<bool>();
  return q;
}

std::string alpha_name(const std::string& site) { return "alpha/" + site; }

}  // namespace

std::string encode_checkpoint(const ToyTransformer& model, const QuantizedView* view, const json& meta) {
  std::vector<std::pair<std::string, const Tensor*>> tensors = model.parameters();
  json header;
  header["format"] = "quadapter-checkpoint";
  header["config"] = to_json(model.config);
  if (view) {
    json quantizers = json::object();
    for (const auto& [site, q] : view->quantizers) quantizers[site] = quantizer_json(q);
    json adapters = json::array();
    for (const auto& [site, p] : view->adapters) {
      adapters.push_back(site);
      tensors.emplace_back(alpha_name(site), &p.alpha);
    }
    header["view"] = {{"bits", view->bits}, {"quantizers", quantizers}, {"adapters", adapters}};
  } else {
    header["view"] = nullptr;
  }
  json index = json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    index.push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset}});
    offset += t->size() * sizeof(double);
  }
  header["tensors"] = index;
  header["meta"] = meta;
  const std::string h = header.dump();

  std::string out(kCheckpointMagic);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, h.size());
  out += h;
  out.reserve(out.size() + offset);
  for (const auto& [name, t] : tensors) {
    out.append(reinterpret_cast<const char*>(t->ptr()), t->size() * sizeof(double));
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  require(bytes.substr(0, kCheckpointMagic.size()) == kCheckpointMagic, ErrorKind::kIo, "not a checkpoint file");
  std::size_t pos = kCheckpointMagic.size();
  const auto version = get<std::uint32_t>(bytes, pos);
  require(version == kCheckpointVersion, ErrorKind::kIo, "unsupported checkpoint version " + std::to_string(version));
  const auto header_len = get<std::uint64_t>(bytes, pos);
  require(pos + header_len <= bytes.size(), ErrorKind::kIo, "checkpoint header is truncated");
  Checkpoint ck;
  try {
    const json header = json::parse(bytes.substr(pos, header_len));
    pos += header_len;
    const std::size_t data_begin = pos;
    ck.model = build_model(model_config_from_json(header.at("config")));
    ck.meta = header.at("meta");
    if (!header.at("view").is_null()) {
      const json& v = header.at("view");
      QuantizedView view;
      view.bits = v.at("bits").get<int>();
      for (const auto& [site, q] : v.at("quantizers").items()) view.quantizers[site] = quantizer_from_json(q);
      for (const json& site : v.at("adapters")) view.adapters[site.get<std::string>()] = QuadapterParams{};
      ck.view = std::move(view);
    }
    std::size_t seen = 0;
    for (const json& entry : header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const std::size_t n = shape_size(shape);
      require(data_begin + offset + n * sizeof(double) <= bytes.size(), ErrorKind::kIo,
              "tensor '" + name + "' runs past the end of the checkpoint");
      std::vector<double> values(n);
      std::memcpy(values.data(), bytes.data() + data_begin + offset, n * sizeof(double));
      Tensor t(shape, std::move(values));
      if (name.starts_with("alpha/")) {
        require(ck.view.has_value(), ErrorKind::kIo, "adapter tensor without a quantized view");
        auto it = ck.view->adapters.find(name.substr(6));
        require(it != ck.view->adapters.end(), ErrorKind::kIo, "adapter '" + name + "' is not listed");
        it->second.alpha = std::move(t);
      } else {
        Tensor& p = ck.model.parameter(name);
        require(p.shape() == t.shape(), ErrorKind::kIo, "tensor '" + name + "' has the wrong shape");
        p = std::move(t);
        ++seen;
      }
    }
    require(seen == ck.model.parameters().size(), ErrorKind::kIo, "checkpoint is missing parameters");
    if (ck.view) {
      for (const auto& [site, p] : ck.view->adapters) {
        require(!p.alpha.empty(), ErrorKind::kIo, "adapter '" + site + "' has no alpha tensor");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kIo, std::string("malformed checkpoint header: ") + e.what());
  }
  return ck;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::kIo, "cannot read " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(os), ErrorKind::kIo, "cannot write " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(os), ErrorKind::kIo, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void save_checkpoint(const std::filesystem::path& path, const ToyTransformer& model, const QuantizedView* view,
                     const json& meta) {
  write_file(path, encode_checkpoint(model, view, meta));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace quadapter
