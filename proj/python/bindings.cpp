// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

// Python bindings: the quantizer, CLE, checkpoints and the pipeline commands.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <string>
#include <vector>

#include "quadapter/adapter.hpp"
#include "quadapter/checkpoint.hpp"
#include "quadapter/config.hpp"
#include "quadapter/error.hpp"
#include "quadapter/manifest.hpp"
#include "quadapter/pipeline.hpp"
#include "quadapter/quant.hpp"

namespace py = pybind11;
namespace q = quadapter;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

q::Tensor to_tensor(const Array& a) {
  q::Shape shape(a.shape(), a.shape() + a.ndim());
  if (shape.empty()) shape = {1};
  return q::Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const q::Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.ptr(), t.ptr() + t.size(), out.mutable_data());
  return out;
}

py::object to_python(const q::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

q::RunConfig config_from(const py::object& config) {
  if (py::isinstance<py::str>(config) || py::hasattr(config, "__fspath__")) {
    return q::RunConfig::load(py::str(config).cast<std::string>());
  }
  const std::string text = py::module_::import("json").attr("dumps")(config).cast<std::string>();
  return q::RunConfig::from_json(q::json::parse(text));
}

py::list rows_to_python(const std::vector<q::PplRow>& rows) {
  py::list out;
  for (const q::PplRow& r : rows) {
    py::dict d;
    d["method"] = r.method;
    d["fid_corpus"] = r.fid;
    d["eval_corpus"] = r.eval;
    d["data_fraction"] = r.fraction;
    d["ppl"] = r.ppl;
    out.append(d);
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_quadapter, m) {
  m.doc() = "Quadapter core bindings";

  static py::exception<q::Error> error(m, "QuadapterError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const q::Error& e) {
      PyErr_SetString(error.ptr(), (std::string(q::to_string(e.kind())) + ": " + e.what()).c_str());
    }
  });

  m.def(
      "scale_offset",
      [](double theta_min, double theta_max, int bits) {
        q::QuantizerState s = q::make_quantizer(bits, q::QuantMode::kStatic);
        s.theta_min = theta_min;
        s.theta_max = theta_max;
        s.observed = true;
        const q::ScaleOffset so = q::derive_scale_offset(s);
        return py::make_tuple(so.scale, so.offset);
      },
      py::arg("theta_min"), py::arg("theta_max"), py::arg("bits") = 8);

  m.def(
      "fake_quantize",
      [](const Array& x, py::object theta_min, py::object theta_max, int bits) {
        const bool dynamic = theta_min.is_none() && theta_max.is_none();
        q::QuantizerState s = q::make_quantizer(bits, dynamic ? q::QuantMode::kDynamic : q::QuantMode::kStatic);
        if (!dynamic) {
          s.theta_min = theta_min.cast<double>();
          s.theta_max = theta_max.cast<double>();
          s.observed = true;
        }
        const q::Tensor t = to_tensor(x);
        Array out = to_array(q::fake_quantize(t, s));
        out.resize(std::vector<py::ssize_t>(x.shape(), x.shape() + x.ndim()));
        return out;
      },
      py::arg("x"), py::arg("theta_min") = py::none(), py::arg("theta_max") = py::none(), py::arg("bits") = 8,
      "Fake-quantize x; without a range the batch min/max is used.");

  m.def(
      "init_cle",
      [](const Array& first, const Array& second) {
        const q::CleResult r = q::init_cle(to_tensor(first), to_tensor(second));
        return py::make_tuple(to_array(r.params.alpha), r.dead_channels, r.diagnostics);
      },
      py::arg("first"), py::arg("second"), "Returns (alpha, dead_channels, diagnostics).");

  m.def("git_blob_sha1", [](py::bytes data) { return q::git_blob_sha1(std::string(data)); }, py::arg("data"));

  m.def(
      "load_config", [](const py::object& config) { return to_python(config_from(config).to_json()); },
      py::arg("config"), "Validated run config (path or dict) as a dict with every default filled in.");

  m.def(
      "load_checkpoint",
      [](const std::filesystem::path& path) {
        const q::Checkpoint ck = q::load_checkpoint(path);
        py::dict tensors;
        for (const auto& [name, t] : ck.model.parameters()) tensors[py::str(name)] = to_array(*t);
        py::dict alphas;
        if (ck.view) {
          for (const auto& [site, p] : ck.view->adapters) alphas[py::str(site)] = to_array(p.alpha);
        }
        py::dict out;
        out["config"] = to_python(q::to_json(ck.model.config));
        out["tensors"] = tensors;
        out["alpha"] = alphas;
        out["meta"] = to_python(ck.meta);
        return out;
      },
      py::arg("path"));

  m.def(
      "pretrain",
      [](const py::object& config, const std::filesystem::path& out) {
        const q::PretrainResult r = q::cmd_pretrain(config_from(config), out);
        return py::make_tuple(r.checkpoint, rows_to_python(r.rows));
      },
      py::arg("config"), py::arg("output_dir"), "Returns (checkpoint path, FP perplexity rows).");

  m.def(
      "quantize",
      [](const py::object& config, const std::filesystem::path& checkpoint, const std::string& method,
         const std::string& fid, const std::filesystem::path& out) {
        q::RunConfig c = config_from(config);
        c.method = q::parse_method(method);
        if (!fid.empty()) c.fid = fid;
        c.validate();
        const q::QuantizeResult r = q::cmd_quantize(c, checkpoint, out);
        return py::make_tuple(r.checkpoint, rows_to_python(r.outcome.rows));
      },
      py::arg("config"), py::arg("checkpoint"), py::arg("method"), py::arg("fid") = "", py::arg("output_dir"),
      "Returns (checkpoint path, perplexity rows).");

  m.def(
      "fold",
      [](const std::filesystem::path& checkpoint, const std::filesystem::path& out) {
        return q::cmd_fold(checkpoint, out).max_abs_deviation;
      },
      py::arg("checkpoint"), py::arg("output"), "Folds adapters into the weights; returns the self-check deviation.");

  m.def("methods", [] {
    std::vector<std::string> names;
    for (q::Method x : q::all_methods()) names.emplace_back(q::to_string(x));
    return names;
  });
}
