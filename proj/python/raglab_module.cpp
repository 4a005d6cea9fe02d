#include <sstream>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "raglab/analysis.h"
#include "raglab/cli.h"
#include "raglab/error.h"
#include "raglab/flow.h"
#include "raglab/kape.h"
#include "raglab/metrics.h"
#include "raglab/tokenizer.h"
#include "raglab/weights_io.h"
#include "raglab/world.h"

namespace py = pybind11;
using namespace raglab;

namespace {

// Byte-fallback tokens may not form valid UTF-8.
py::str lenient_str(const std::string& text) {
  return py::reinterpret_steal<py::str>(
      PyUnicode_DecodeUTF8(text.data(), static_cast<Py_ssize_t>(text.size()), "replace"));
}

py::array_t<double> to_numpy(const Tensor& t) {
  py::array_t<double> a({t.rows(), t.cols()});
  auto out = a.mutable_unchecked<2>();
  const auto d = t.data();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < t.cols(); ++c) out(r, c) = static_cast<double>(d[r * t.cols() + c]);
  }
  return a;
}

Tensor from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw DimensionError("expected a 2-D array");
  const auto rows = static_cast<std::size_t>(a.shape(0));
  const auto cols = static_cast<std::size_t>(a.shape(1));
  std::vector<Real> v(a.data(), a.data() + rows * cols);
  return Tensor::matrix(rows, cols, std::move(v));
}

py::dict config_dict(const ModelConfig& c) {
  py::dict d;
  d["n_layers"] = c.n_layers;
  d["n_heads"] = c.n_heads;
  d["d_model"] = c.d_model;
  d["d_ff"] = c.d_ff;
  d["vocab_size"] = c.vocab_size;
  d["max_seq"] = c.max_seq;
  d["activation"] = std::string(to_string(c.activation));
  d["tie_embeddings"] = c.tie_embeddings;
  return d;
}

// Trained weights plus the vocabulary they were trained with.
struct PyModel {
  ModelWeights weights;
  Tokenizer tok;

  static PyModel load(const std::string& weights_path, const std::string& vocab_path) {
    PyModel m{load_weights(weights_path), Tokenizer::load(vocab_path)};
    if (m.tok.size() != m.weights.config.vocab_size) {
      throw ConfigError("vocabulary size does not match the weights");
    }
    return m;
  }

  py::dict forward(const std::vector<TokenId>& tokens) const {
    ForwardOptions opt;
    opt.trace = TraceLevel::full;
    ForwardResult r;
    {
      py::gil_scoped_release release;
      r = raglab::forward(weights, tokens, opt);
    }
    const std::size_t n = tokens.size();
    const std::size_t L = weights.config.n_layers, H = weights.config.n_heads;
    py::array_t<double> att({L, H, n, n});
    auto a = att.mutable_unchecked<4>();
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t h = 0; h < H; ++h) {
        const auto d = r.trace.attention[l][h].data();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < n; ++j) a(l, h, i, j) = static_cast<double>(d[i * n + j]);
        }
      }
    }
    py::list gates;
    for (const auto& g : r.trace.gate_activations) gates.append(to_numpy(g));
    py::dict out;
    out["logits"] = to_numpy(r.logits);
    out["attention"] = att;
    out["gate_activations"] = gates;
    return out;
  }

  std::vector<TokenId> generate(const std::vector<TokenId>& prompt, std::size_t max_new) const {
    GenerateOptions g;
    g.max_new = max_new;
    g.stop_tokens = {Tokenizer::kEos, Tokenizer::kPad};
    py::gil_scoped_release release;
    return generate_greedy(weights, prompt, g);
  }
};

}  // namespace

PYBIND11_MODULE(_raglab, m) {
  m.doc() = "Instrumented toy transformer for RAG knowledge-utilization analyses";

  static py::exception<Error> base(m, "RaglabError", PyExc_RuntimeError);
  static py::exception<ConfigError> config_error(m, "ConfigError", base.ptr());
  static py::exception<RangeError> range_error(m, "RangeError", base.ptr());
  static py::exception<DimensionError> dim_error(m, "DimensionError", base.ptr());
  static py::exception<FormatError> format_error(m, "FormatError", base.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ConfigError& e) {
      PyErr_SetString(config_error.ptr(), e.what());
    } catch (const RangeError& e) {
      PyErr_SetString(range_error.ptr(), e.what());
    } catch (const DimensionError& e) {
      PyErr_SetString(dim_error.ptr(), e.what());
    } catch (const FormatError& e) {
      PyErr_SetString(format_error.ptr(), e.what());
    } catch (const Error& e) {
      PyErr_SetString(base.ptr(), e.what());
    }
  });

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = run_cli(args, out, err);
        }
        return py::make_tuple(code, lenient_str(out.str()), lenient_str(err.str()));
      },
      py::arg("args"), "Run a raglab subcommand; returns (exit_code, stdout, stderr).");

  m.def("normalize_answer", &normalize_answer, py::arg("text"), py::arg("drop_articles") = true);
  m.def(
      "exact_match",
      [](const std::string& p, const std::vector<std::string>& g) { return exact_match(p, g); },
      py::arg("prediction"), py::arg("golds"));
  m.def(
      "cover_exact_match",
      [](const std::string& p, const std::vector<std::string>& g) { return cover_exact_match(p, g); },
      py::arg("prediction"), py::arg("golds"));
  m.def(
      "token_f1", [](const std::string& p, const std::vector<std::string>& g) { return token_f1(p, g); },
      py::arg("prediction"), py::arg("golds"));

  m.def(
      "generate_world_json",
      [](std::uint64_t seed, std::size_t entities, std::size_t relations, std::size_t objects,
         double holdout, double context_fraction) {
        WorldParams p{seed, entities, relations, objects, holdout, context_fraction};
        return world_to_json(generate_world(p)).dump();
      },
      py::arg("seed") = 1, py::arg("entities") = 400, py::arg("relations") = 5,
      py::arg("objects") = 24, py::arg("holdout") = 0.1, py::arg("context_fraction") = 0.2);
  m.def(
      "dataset_json",
      [](const std::string& world_json, std::uint64_t seed) {
        const auto world = world_from_json(nlohmann::json::parse(world_json));
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& ex : make_dataset(world, seed)) arr.push_back(example_to_json(ex));
        return arr.dump();
      },
      py::arg("world_json"), py::arg("seed") = 1);

  m.def(
      "flow_sum",
      [](const std::vector<py::array_t<double, py::array::c_style | py::array::forcecast>>& mats,
         const std::vector<std::size_t>& rows, const std::vector<std::size_t>& cols,
         const std::string& norm) {
        std::vector<Tensor> ts;
        for (const auto& a : mats) ts.push_back(from_numpy(a));
        return flow_sum(ts, rows, cols, parse_flow_norm(norm));
      },
      py::arg("matrices"), py::arg("rows"), py::arg("cols"), py::arg("normalization") = "raw");
  m.def(
      "segment_changepoint",
      [](const std::vector<double>& curve) {
        const auto s = segment_changepoint(curve);
        return std::vector<std::pair<std::size_t, std::size_t>>(s.ranges.begin(), s.ranges.end());
      },
      py::arg("curve"));
  m.def(
      "segment_quartile",
      [](std::size_t n) {
        const auto s = segment_quartile(n);
        return std::vector<std::pair<std::size_t, std::size_t>>(s.ranges.begin(), s.ranges.end());
      },
      py::arg("n_layers"));
  m.def(
      "normalize_pair",
      [](double raw_ik, double raw_ek) {
        const auto p = normalize_pair(raw_ik, raw_ek);
        return py::make_tuple(p.p_ik, p.p_ek, p.defined);
      },
      py::arg("raw_ik"), py::arg("raw_ek"));
  m.def("kape_score", &kape_score, py::arg("p_ik"), py::arg("p_ek"));
  m.def("sign_test_p", &sign_test_p, py::arg("plus"), py::arg("minus"));

  py::class_<PyModel>(m, "Model")
      .def_static("load", &PyModel::load, py::arg("weights"), py::arg("vocab"))
      .def_property_readonly("config", [](const PyModel& self) { return config_dict(self.weights.config); })
      .def("encode", [](const PyModel& self, const std::string& t) { return self.tok.encode(t); })
      .def("decode",
           [](const PyModel& self, const std::vector<TokenId>& ids) {
             return lenient_str(self.tok.decode(ids));
           })
      .def("forward", &PyModel::forward, py::arg("tokens"),
           "Logits, attention [layer, head, row, col] and per-layer gate activations.")
      .def("generate", &PyModel::generate, py::arg("prompt"), py::arg("max_new") = 8);
}
