#include <sstream>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <torch/torch.h>

#include "dtune/analysis.hpp"
#include "dtune/checkpoint.hpp"
#include "dtune/cli.hpp"
#include "dtune/config.hpp"
#include "dtune/errors.hpp"
#include "dtune/importance.hpp"
#include "dtune/sprite.hpp"

namespace py = pybind11;
using nlohmann::json;

namespace {

py::array_t<float> image_array(const dtune::Image& img) {
    py::array_t<float> a({img.height, img.width, 3});
    std::copy(img.data.begin(), img.data.end(), a.mutable_data());
    return a;
}

py::array_t<bool> mask_array(const dtune::Mask& m) {
    py::array_t<bool> a({m.height, m.width});
    auto* out = a.mutable_data();
    for (int y = 0; y < m.height; ++y) {
        for (int x = 0; x < m.width; ++x) out[y * m.width + x] = m.at(y, x) != 0;
    }
    return a;
}

dtune::ParamMap param_map(const py::dict& d) {
    dtune::ParamMap m;
    for (auto item : d) {
        auto arr = py::array_t<double, py::array::c_style | py::array::forcecast>::ensure(item.second);
        if (!arr) throw dtune::ContractError("tensor " + py::str(item.first).cast<std::string>() + " is not numeric");
        dtune::ParamTensor t;
        for (py::ssize_t i = 0; i < arr.ndim(); ++i) t.shape.push_back(arr.shape(i));
        t.values.assign(arr.data(), arr.data() + arr.size());
        m.emplace(py::str(item.first).cast<std::string>(), std::move(t));
    }
    return m;
}

json identity_json(const dtune::SpriteIdentity& id) {
    auto rgb = [](const dtune::Rgb& c) { return json::array({c.r, c.g, c.b}); };
    return {{"shape", dtune::shape_name(id.shape)},
            {"primary", rgb(id.primary)},
            {"secondary", rgb(id.secondary)},
            {"texture_freq", id.texture_freq},
            {"seed", id.seed}};
}

}  // namespace

PYBIND11_MODULE(_dtune, m) {
    m.doc() = "Native core: sprite rendering, configs, checkpoints, importance scores and the CLI.";
    m.attr("__version__") = dtune::kVersion;

    static py::exception<dtune::Error> base_error(m, "Error");
    static py::exception<dtune::ValidationError> validation_error(m, "ValidationError", base_error.ptr());
    static py::exception<dtune::CorruptionError> corruption_error(m, "CorruptionError", base_error.ptr());
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const dtune::ValidationError& e) {
            py::set_error(validation_error, (e.path() + ": " + e.what()).c_str());
        } catch (const dtune::CorruptionError& e) {
            py::set_error(corruption_error, e.what());
        } catch (const dtune::Error& e) {
            py::set_error(base_error, (std::string(e.kind()) + ": " + e.what()).c_str());
        }
    });

    m.def("run_cli",
          [](std::vector<std::string> args) {
              args.insert(args.begin(), "dtune");
              std::vector<const char*> argv;
              for (const auto& a : args) argv.push_back(a.c_str());
              std::ostringstream out, err;
              int rc = 0;
              {
                  py::gil_scoped_release release;
                  torch::set_num_threads(1);
                  rc = dtune::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
              }
              return py::make_tuple(rc, out.str(), err.str());
          },
          py::arg("args"), "Runs a CLI command in-process; returns (exit_code, stdout, stderr).");

    m.def("identity_json", [](std::uint64_t seed) { return identity_json(dtune::generate_identity(seed)).dump(); },
          py::arg("seed"));

    m.def("render",
          [](std::uint64_t identity_seed, int template_id, int resolution, std::uint64_t context_seed) {
              const auto id = dtune::generate_identity(identity_seed);
              const auto ctx = dtune::sample_context(dtune::prompt_template(template_id), resolution, {}, context_seed);
              const auto r = dtune::render(id, ctx, resolution);
              return py::make_tuple(image_array(r.image), mask_array(r.mask));
          },
          py::arg("identity_seed"), py::arg("template_id") = 0, py::arg("resolution") = 32, py::arg("context_seed") = 0,
          "Renders one sprite; returns (image [H, W, 3] float32 in [0, 1], mask [H, W] bool).");

    m.def("templates", [] {
        std::vector<std::string> out;
        for (const auto& t : dtune::prompt_templates()) out.push_back(t.text);
        return out;
    });

    m.def("default_config_json", [] { return dtune::default_config().dump(); });
    m.def("validate_config_json", [](const std::string& text) {
        return dtune::validate_config(json::parse(text)).dump();
    });
    m.def("config_hash_json", [](const std::string& text) { return dtune::config_hash(json::parse(text)); });

    m.def("layer_score",
          [](const py::dict& base, const py::dict& tuned, const std::string& layer) {
              const auto s = dtune::layer_score(param_map(base), param_map(tuned), layer);
              return s.score;
          },
          py::arg("base"), py::arg("tuned"), py::arg("layer_id"));

    m.def("importance_report_json",
          [](const py::dict& base, const std::vector<py::dict>& tuned) {
              std::vector<dtune::ParamMap> maps;
              for (const auto& t : tuned) maps.push_back(param_map(t));
              return dtune::report_to_json(dtune::aggregate(param_map(base), maps)).dump();
          },
          py::arg("base"), py::arg("tuned"));

    m.def("steps_to_threshold",
          [](const std::vector<double>& trace, double threshold) -> py::object {
              const auto s = dtune::steps_to_threshold(trace, threshold);
              return s ? py::object(py::int_(*s)) : py::object(py::none());
          },
          py::arg("trace"), py::arg("threshold"));

    m.def("load_checkpoint",
          [](const std::string& dir) {
              const auto ck = dtune::load_checkpoint(dir);
              py::dict tensors;
              for (const auto& [name, t] : ck.tensors) {
                  py::array_t<float> a(t.shape);
                  std::copy(t.values.begin(), t.values.end(), a.mutable_data());
                  tensors[py::str(name)] = a;
              }
              return py::make_tuple(ck.config.dump(), ck.extra.dump(), tensors);
          },
          py::arg("path"), "Returns (config JSON, extra JSON, {name: float32 array}).");
}
