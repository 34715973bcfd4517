#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <fstream>

#include "../../tools/cli.hpp"
#include "mlsae/activation_stream.hpp"
#include "mlsae/errors.hpp"
#include "mlsae/layer_analytics.hpp"
#include "mlsae/sae.hpp"
#include "mlsae/toy_transformer.hpp"
#include "mlsae/trainer.hpp"
#include "mlsae/tuned_lens.hpp"

namespace py = pybind11;
using namespace mlsae;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

RowMatrix<float> to_matrix(const FloatArray& a, Eigen::Index expected_cols) {
  if (a.ndim() != 2) throw DimensionError("expected a 2-D array");
  if (a.shape(1) != expected_cols) {
    throw DimensionError("expected " + std::to_string(expected_cols) + " columns, got " +
                         std::to_string(a.shape(1)));
  }
  return Eigen::Map<const RowMatrix<float>>(a.data(), a.shape(0), a.shape(1));
}

py::dict header_dict(const StreamHeader& h) {
  py::dict d;
  d["d"] = h.d;
  d["n_layers"] = h.n_layers;
  d["n_tokens"] = h.n_tokens;
  d["model_tag"] = h.model_tag;
  return d;
}

py::tuple read_stream(const std::filesystem::path& path, std::uint64_t max_tokens) {
  StreamFile file(path);
  const auto& h = file.header();
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> flags;
  std::vector<float> data;
  ActivationRecord rec;
  while ((max_tokens == 0 || ids.size() < max_tokens) && file.reader().next(rec)) {
    ids.push_back(rec.token_id);
    flags.push_back(rec.flags);
    data.insert(data.end(), rec.vectors.begin(), rec.vectors.end());
  }
  const auto t = static_cast<py::ssize_t>(ids.size());
  py::array_t<float> acts({t, static_cast<py::ssize_t>(h.n_layers), static_cast<py::ssize_t>(h.d)});
  std::copy(data.begin(), data.end(), acts.mutable_data());
  return py::make_tuple(py::array_t<TokenId>(t, ids.data()), py::array_t<std::uint8_t>(t, flags.data()), acts);
}

std::uint64_t write_stream_py(const std::filesystem::path& path,
                              py::array_t<TokenId, py::array::c_style | py::array::forcecast> ids,
                              py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> flags,
                              FloatArray acts, const std::string& model_tag) {
  if (acts.ndim() != 3) throw DimensionError("activations must be [tokens, layers, d]");
  const auto t = static_cast<std::size_t>(acts.shape(0));
  if (ids.size() != static_cast<py::ssize_t>(t) || flags.size() != static_cast<py::ssize_t>(t)) {
    throw DimensionError("token_ids and flags must have one entry per token");
  }
  StreamHeader h;
  h.n_layers = static_cast<std::uint32_t>(acts.shape(1));
  h.d = static_cast<std::uint32_t>(acts.shape(2));
  h.n_tokens = t;
  h.model_tag = model_tag;
  std::uint64_t bytes = 0;
  io::write_file_atomic(path, [&](std::ostream& out) {
    StreamWriter w(out, h);
    const std::size_t rec = h.record_floats();
    for (std::size_t i = 0; i < t; ++i) {
      w.write(ids.data()[i], flags.data()[i], std::span<const float>(acts.data() + i * rec, rec));
    }
    w.finish();
    bytes = w.bytes_written();
  });
  return bytes;
}

void write_lens_py(const std::filesystem::path& path, FloatArray weights, FloatArray biases) {
  if (weights.ndim() != 3 || biases.ndim() != 2 || weights.shape(0) != biases.shape(0) ||
      weights.shape(1) != weights.shape(2) || weights.shape(1) != biases.shape(1)) {
    throw DimensionError("lens weights must be [layers, d, d] and biases [layers, d]");
  }
  const auto L = weights.shape(0), d = weights.shape(1);
  std::vector<Eigen::MatrixXd> w;
  std::vector<Eigen::VectorXd> b;
  for (py::ssize_t l = 0; l < L; ++l) {
    w.push_back(Eigen::Map<const RowMatrix<float>>(weights.data() + l * d * d, d, d).cast<double>());
    b.push_back(Eigen::Map<const Eigen::VectorXf>(biases.data() + l * d, d).cast<double>());
  }
  save_lens(TunedLens::from_parameters(std::move(w), std::move(b)), path);
}

RowMatrix<float> lens_map(const TunedLens& lens, std::size_t layer, const FloatArray& x, bool inverse) {
  RowMatrix<float> m = to_matrix(x, lens.d());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::span<float> row(m.row(r).data(), lens.d());
    if (inverse) lens.invert_in_place(layer, row);
    else lens.apply_in_place(layer, row);
  }
  return m;
}

py::dict decomposition_dict(const VarianceDecomposition& v) {
  py::dict d;
  d["var_total"] = v.total;
  d["var_within_latent"] = v.within_latent;
  d["var_between_latent"] = v.between_latent;
  d["var_within_token"] = v.within_token;
  d["ratio_latent"] = v.ratio_latent;
  d["ratio_token"] = v.ratio_token;
  d["active_latents"] = v.active_latents;
  d["dead_latents"] = v.dead_latents;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Multi-layer sparse autoencoder toolkit: formats, SAE math, lens and analytics.";

  static py::exception<Error> base(m, "MlsaeError", PyExc_RuntimeError);
  static py::exception<DimensionError> dim(m, "DimensionError", base.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const DimensionError& e) {
      py::set_error(dim, e.what());
    } catch (const Error& e) {
      py::set_error(base, e.what());
    }
  });

  m.def("read_stream_header", [](const std::filesystem::path& p) { return header_dict(read_stream_header(p)); });
  m.def("validate_stream", [](const std::filesystem::path& p) {
    const auto s = validate_stream(p);
    py::dict d = header_dict(s.header);
    d["records"] = s.records;
    d["special_records"] = s.special_records;
    d["vectors_per_layer"] = s.vectors_per_layer;
    return d;
  });
  m.def("read_stream", &read_stream, py::arg("path"), py::arg("max_tokens") = 0,
        "Returns (token_ids, flags, activations[tokens, layers, d]).");
  m.def("write_stream", &write_stream_py, py::arg("path"), py::arg("token_ids"), py::arg("flags"),
        py::arg("activations"), py::arg("model_tag") = "");
  m.def("write_lens", &write_lens_py, py::arg("path"), py::arg("weights"), py::arg("biases"));

  py::class_<TunedLens>(m, "TunedLens")
      .def_static("load", [](const std::filesystem::path& p, std::optional<std::uint32_t> d,
                             std::optional<std::uint32_t> layers) { return load_lens(p, d, layers); },
                  py::arg("path"), py::arg("d") = py::none(), py::arg("n_layers") = py::none())
      .def_static("identity", &TunedLens::identity)
      .def_property_readonly("d", &TunedLens::d)
      .def_property_readonly("n_layers", &TunedLens::n_layers)
      .def_property_readonly("min_rcond", &TunedLens::min_rcond)
      .def("apply", [](const TunedLens& l, std::size_t layer, FloatArray x) { return lens_map(l, layer, x, false); })
      .def("invert", [](const TunedLens& l, std::size_t layer, FloatArray x) { return lens_map(l, layer, x, true); })
      .def("save", [](const TunedLens& l, const std::filesystem::path& p) { save_lens(l, p); });

  py::class_<CheckpointInfo>(m, "Sae")
      .def_static("load", &load_checkpoint)
      .def_property_readonly("d", [](const CheckpointInfo& c) { return c.sae.d; })
      .def_property_readonly("n", [](const CheckpointInfo& c) { return c.sae.n(); })
      .def_property_readonly("k", [](const CheckpointInfo& c) { return c.sae.k; })
      .def_property_readonly("k_aux", [](const CheckpointInfo& c) { return c.sae.k_aux; })
      .def_property_readonly("alpha", [](const CheckpointInfo& c) { return c.sae.alpha; })
      .def_property_readonly("steps", [](const CheckpointInfo& c) { return c.steps; })
      .def_property_readonly("layer_subset", [](const CheckpointInfo& c) { return c.layer_subset; })
      .def_property_readonly("encoder", [](const CheckpointInfo& c) { return c.params.encoder; })
      .def_property_readonly("decoder", [](const CheckpointInfo& c) { return c.params.decoder; })
      .def_property_readonly("bias", [](const CheckpointInfo& c) { return c.params.bias; })
      .def("encode",
           [](const CheckpointInfo& c, FloatArray x) {
             const auto z = encode(to_matrix(x, c.sae.d), c.params, c.sae);
             const auto rows = static_cast<py::ssize_t>(z.rows), k = static_cast<py::ssize_t>(z.k);
             py::array_t<LatentIndex> idx({rows, k});
             py::array_t<float> val({rows, k});
             std::copy(z.indices.begin(), z.indices.end(), idx.mutable_data());
             std::copy(z.values.begin(), z.values.end(), val.mutable_data());
             return py::make_tuple(idx, val);
           })
      .def("reconstruct",
           [](const CheckpointInfo& c, FloatArray x) {
             return decode(encode(to_matrix(x, c.sae.d), c.params, c.sae), c.params);
           })
      .def("forward_loss", [](const CheckpointInfo& c, FloatArray x, std::vector<bool> dead) {
             const auto out = forward_loss(to_matrix(x, c.sae.d), c.params, c.sae, dead);
             py::dict d;
             d["fvu"] = out.fvu;
             d["aux_loss"] = out.aux_loss;
             d["total_loss"] = out.total_loss;
             return d;
           }, py::arg("x"), py::arg("dead") = std::vector<bool>{});

  m.def("fvu", [](FloatArray x, FloatArray x_hat) {
    const auto a = to_matrix(x, x.ndim() == 2 ? x.shape(1) : 0);
    return fvu(a, to_matrix(x_hat, a.cols()));
  });
  m.def("geometric_median", [](FloatArray points) {
    const auto p = to_matrix(points, points.ndim() == 2 ? points.shape(1) : 0);
    const auto r = geometric_median(p);
    return py::make_tuple(r.median, r.iterations, r.converged);
  });
  m.def("mmcs", [](FloatArray a, FloatArray b, bool self) {
    if (a.ndim() != 2 || b.ndim() != 2) throw DimensionError("mmcs: expected 2-D arrays [d, n]");
    ColMatrix<float> am = Eigen::Map<const RowMatrix<float>>(a.data(), a.shape(0), a.shape(1));
    ColMatrix<float> bm = Eigen::Map<const RowMatrix<float>>(b.data(), b.shape(0), b.shape(1));
    return mmcs(am, bm, self ? MmcsMode::Self : MmcsMode::Cross);
  }, py::arg("a"), py::arg("b"), py::arg("self_mode") = false);

  m.def("load_snapshot", [](const std::filesystem::path& p) {
    const auto snap = load_snapshot(p);
    const auto& t = snap.totals;
    const auto n = static_cast<py::ssize_t>(t.n_latents()), L = static_cast<py::ssize_t>(t.n_layers());
    py::array_t<double> s({n, L});
    py::array_t<std::uint64_t> c({n, L});
    for (LatentIndex j = 0; j < t.n_latents(); ++j) {
      for (LayerIndex l = 0; l < t.n_layers(); ++l) {
        s.mutable_at(j, l) = t.sum(j, l);
        c.mutable_at(j, l) = t.count(j, l);
      }
    }
    py::dict d;
    d["S"] = s;
    d["C"] = c;
    d["per_token_variance_sums"] = snap.per_token.sums();
    d["per_token_counts"] = snap.per_token.counts();
    d["tokens_processed"] = t.tokens_processed();
    d["decomposition"] = decomposition_dict(variance_decomposition(snap));
    return d;
  });

  m.def("generate_corpus", &toy::generate_corpus, py::arg("n_bytes"), py::arg("seed") = 0);
  m.def("parse_train_config", [](const std::string& text) { return train_config_to_json(parse_train_config(text)); },
        "Validates a train config and returns it with defaults filled in.");
  m.def("run_cli", [](std::vector<std::string> args) {
    args.insert(args.begin(), "mlsae");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    return cli::run(static_cast<int>(argv.size()), argv.data());
  }, "Runs a command-line subcommand in-process and returns its exit status.");
}
