#include "streamlod/lod.hpp"
#include "streamlod/metrics.hpp"
#include "streamlod/model.hpp"
#include "streamlod/motion_gmm.hpp"
#include "streamlod/pipeline.hpp"
#include "streamlod/residual_codec.hpp"
#include "streamlod/scene.hpp"

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

namespace py = pybind11;
using namespace streamlod;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

// Images cross the boundary as (H, W, C) float64 arrays.
py::array_t<double> to_numpy(const Image& img) {
  py::array_t<double> out({img.height(), img.width(), img.channels()});
  std::memcpy(out.mutable_data(), img.pixels().data(), img.size() * sizeof(double));
  return out;
}

Image from_numpy(const Array& a) {
  if (a.ndim() != 3) throw std::invalid_argument("expected an (H, W, C) array");
  Image img(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)), static_cast<int>(a.shape(2)));
  std::memcpy(img.pixels().data(), a.data(), img.size() * sizeof(double));
  return img;
}

py::bytes to_bytes(const std::vector<std::uint8_t>& v) {
  return {reinterpret_cast<const char*>(v.data()), v.size()};
}

std::vector<std::uint8_t> from_bytes(const py::bytes& b) {
  const std::string s = b;
  return {s.begin(), s.end()};
}

}  // namespace

PYBIND11_MODULE(_streamlod, m) {
  m.doc() = "Streaming level-of-detail Gaussian splatting";

  m.def("psnr", [](const Array& a, const Array& b) { return psnr(from_numpy(a), from_numpy(b)); });
  m.def("ssim", [](const Array& a, const Array& b) { return ssim(from_numpy(a), from_numpy(b)); });

  m.def("level_count", &level_count, py::arg("d_max"), py::arg("d_min"));
  m.def("anchor_base_level", &anchor_base_level, py::arg("d_max"), py::arg("distance"), py::arg("levels"));

  py::class_<Gmm2>(m, "Gmm2")
      .def_property_readonly("weights", [](const Gmm2& g) { return std::array{g.weights[0], g.weights[1]}; })
      .def_property_readonly("means", [](const Gmm2& g) { return std::array{g.means[0], g.means[1]}; })
      .def_property_readonly("variances", [](const Gmm2& g) { return std::array{g.variances[0], g.variances[1]}; })
      .def_readonly("degenerate", &Gmm2::degenerate)
      .def_readonly("iterations", &Gmm2::iterations)
      .def_readonly("log_likelihood_trace", &Gmm2::log_likelihood_trace)
      .def("posterior_high", &Gmm2::posterior_high);
  m.def("fit_gmm", [](const std::vector<double>& v) { return fit_gmm(v); }, py::arg("values"));

  py::enum_<ResidualKind>(m, "ResidualKind").value("Quantized", ResidualKind::Quantized).value("Raw", ResidualKind::Raw);

  py::class_<ResidualEntry>(m, "ResidualEntry")
      .def(py::init<>())
      .def_readwrite("anchor_id", &ResidualEntry::anchor_id)
      .def_readwrite("pos_delta", &ResidualEntry::pos_delta)
      .def_readwrite("feature_code", &ResidualEntry::feature_code)
      .def_readwrite("offset_code", &ResidualEntry::offset_code);

  py::class_<ResidualSet>(m, "ResidualSet")
      .def(py::init<>())
      .def_readwrite("frame", &ResidualSet::frame)
      .def_readwrite("kind", &ResidualSet::kind)
      .def_readwrite("step_feature", &ResidualSet::step_feature)
      .def_readwrite("step_offset", &ResidualSet::step_offset)
      .def_readwrite("entries", &ResidualSet::entries);

  py::register_exception<CodecError>(m, "CodecError", PyExc_ValueError);
  m.def("encode_frame", [](const ResidualSet& s) { return to_bytes(encode_frame(s)); });
  m.def("decode_frame", [](const py::bytes& b) { return decode_frame(from_bytes(b)); });
  m.def("quantized_frame_bytes", &quantized_frame_bytes);

  py::class_<Camera>(m, "Camera")
      .def_readonly("width", &Camera::width)
      .def_readonly("height", &Camera::height)
      .def_readonly("rotation", &Camera::rotation)
      .def_readonly("translation", &Camera::translation);

  py::class_<SyntheticScene>(m, "Scene")
      .def_property_readonly("frames", [](const SyntheticScene& s) { return s.spec.frames; })
      .def_readonly("cameras", &SyntheticScene::cameras)
      .def_property_readonly("points", [](const SyntheticScene& s) {
        Eigen::MatrixX3d p(s.points.size(), 3);
        for (std::size_t i = 0; i < s.points.size(); ++i) p.row(i) = s.points[i].transpose();
        return p;
      })
      .def("image", [](const SyntheticScene& s, int t, int v) { return to_numpy(s.images.at(t).at(v)); })
      .def("mask", [](const SyntheticScene& s, int t, int v) { return to_numpy(s.masks.at(t).at(v)); })
      .def("training_views", &SyntheticScene::training_views)
      .def("held_out_views", &SyntheticScene::held_out_views)
      .def("save", [](const SyntheticScene& s, const std::filesystem::path& dir) { save_scene(dir, s); });
  m.def("generate_scene", [](const std::string& json) { return generate_scene(parse_scene_spec(json)); },
        py::arg("spec_json"));
  m.def("load_scene", &load_scene);

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_static("from_json", &parse_run_config)
      .def("set", [](RunConfig& c, const std::string& key, const std::string& value) { c.set(key, value); })
      .def("ablate", [](RunConfig& c, const std::string& name) { apply_ablation(c, name); })
      .def("to_json", &RunConfig::to_json);

  py::class_<ReportRow>(m, "ReportRow")
      .def_readonly("epoch", &ReportRow::epoch)
      .def_readonly("frame", &ReportRow::frame)
      .def_readonly("loss", &ReportRow::loss)
      .def_readonly("psnr", &ReportRow::psnr)
      .def_readonly("dyn_count", &ReportRow::dyn_count)
      .def_readonly("bytes", &ReportRow::bytes);

  py::class_<Model>(m, "Model")
      .def_property_readonly("anchor_count", [](const Model& md) { return md.hierarchy.size(); })
      .def("render", [](const Model& md, const Camera& cam) {
        RenderSettings rs;
        return to_numpy(render_model(md, cam, rs).image);
      });

  py::class_<RunResult>(m, "RunResult")
      .def_readonly("rows", &RunResult::rows)
      .def_readonly("canonical", &RunResult::canonical)
      .def_readonly("final_model", &RunResult::final_model)
      .def_readonly("seconds", &RunResult::seconds)
      .def_property_readonly("frame_bytes", [](const RunResult& r) {
        std::vector<py::bytes> out;
        for (const auto& f : r.frames) out.push_back(to_bytes(f.bytes));
        return out;
      });

  m.def(
      "run_stream",
      [](const SyntheticScene& s, const RunConfig& c, std::optional<std::filesystem::path> out) {
        py::gil_scoped_release release;
        return run_stream(s, c, out);
      },
      py::arg("scene"), py::arg("config"), py::arg("out_dir") = py::none());
  m.def("playback", &playback, py::arg("run_dir"), py::arg("frame"));
  m.def("render_run", [](const std::filesystem::path& run_dir, int frame, const Camera& cam) {
    const Model md = playback(run_dir, frame);
    return to_numpy(render_model(md, cam, run_render_settings(run_dir)).image);
  });
}
