#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <nlohmann/json.hpp>

#include "fovea/analysis.hpp"
#include "fovea/common.hpp"
#include "fovea/control.hpp"
#include "fovea/fusion.hpp"
#include "fovea/image.hpp"
#include "fovea/imaging.hpp"
#include "fovea/optics.hpp"
#include "fovea/optimize.hpp"
#include "fovea/parallel.hpp"
#include "fovea/zernike.hpp"

namespace py = pybind11;
using namespace fovea;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

/// (H, W) or (H, W, C) array to a planar image.
Image to_image(const Array& a) {
    if (a.ndim() != 2 && a.ndim() != 3) throw InvalidArgument("image must have shape (H, W) or (H, W, C)");
    const int h = static_cast<int>(a.shape(0)), w = static_cast<int>(a.shape(1));
    const int c = a.ndim() == 3 ? static_cast<int>(a.shape(2)) : 1;
    Image img(w, h, c);
    const double* src = a.data();
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int k = 0; k < c; ++k) img.at(k, y, x) = src[(static_cast<std::size_t>(y) * w + x) * c + k];
    return img;
}

Array from_image(const Image& img) {
    std::vector<py::ssize_t> shape{img.height, img.width};
    if (img.channels > 1) shape.push_back(img.channels);
    Array a(shape);
    double* dst = a.mutable_data();
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int k = 0; k < img.channels; ++k)
                dst[(static_cast<std::size_t>(y) * img.width + x) * img.channels + k] = img.at(k, y, x);
    return a;
}

std::vector<Image> to_stack(const std::vector<Array>& arrays) {
    std::vector<Image> out;
    for (const auto& a : arrays) out.push_back(to_image(a));
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Phase plate fovea stacking core";

    py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<InvalidArgument>(m, "InvalidArgument", PyExc_ValueError);
    py::register_exception<OutsideAperture>(m, "OutsideAperture", PyExc_ValueError);
    py::register_exception<DegenerateFit>(m, "DegenerateFit", PyExc_RuntimeError);
    py::register_exception<OptimizationFailed>(m, "OptimizationFailed", PyExc_RuntimeError);
    py::register_exception<IoError>(m, "IoError", PyExc_OSError);

    m.def("set_thread_count", &set_thread_count, py::arg("threads"));
    m.def("thread_count", &thread_count);

    // zernike
    m.def("osa_index", &zernike::osa_index, py::arg("n"), py::arg("m"));
    m.def("osa_to_nm", [](int j) {
        const auto r = zernike::osa_to_nm(j);
        return py::make_tuple(r.n, r.m);
    });
    m.def("term_count", &zernike::term_count, py::arg("max_order"));

    py::class_<zernike::Expansion>(m, "Expansion")
        .def(py::init<int, double>(), py::arg("max_order") = 4, py::arg("aperture_radius_mm") = 5.0)
        .def(py::init<int, double, std::vector<double>>(), py::arg("max_order"), py::arg("aperture_radius_mm"),
             py::arg("coeffs_um"))
        .def_property_readonly("max_order", &zernike::Expansion::max_order)
        .def_property_readonly("aperture_radius_mm", &zernike::Expansion::aperture_radius_mm)
        .def_property(
            "coeffs",
            [](const zernike::Expansion& e) {
                const auto c = e.coeffs();
                return std::vector<double>(c.begin(), c.end());
            },
            [](zernike::Expansion& e, const std::vector<double>& v) {
                if (static_cast<int>(v.size()) != e.size()) throw InvalidArgument("coefficient count mismatch");
                std::copy(v.begin(), v.end(), e.coeffs().begin());
            })
        .def("__len__", &zernike::Expansion::size)
        .def("__getitem__", [](const zernike::Expansion& e, int j) {
            if (j < 0 || j >= e.size()) throw py::index_error();
            return e[j];
        })
        .def("__setitem__", [](zernike::Expansion& e, int j, double v) {
            if (j < 0 || j >= e.size()) throw py::index_error();
            e[j] = v;
        })
        .def("eval", &zernike::Expansion::eval, py::arg("rho"), py::arg("phi"))
        .def("eval_xy", &zernike::Expansion::eval_xy, py::arg("x_mm"), py::arg("y_mm"))
        .def("rotated", &zernike::Expansion::rotated, py::arg("angle"))
        .def("to_json", [](const zernike::Expansion& e) { return nlohmann::json(e).dump(); });

    m.def(
        "fit",
        [](const std::vector<double>& x, const std::vector<double>& y, const std::vector<double>& opd, int max_order,
           double radius) {
            if (x.size() != y.size() || x.size() != opd.size()) throw InvalidArgument("sample arrays differ in length");
            std::vector<zernike::Sample> s(x.size());
            for (std::size_t i = 0; i < x.size(); ++i) s[i] = {x[i], y[i], opd[i]};
            const auto r = zernike::fit(s, max_order, radius);
            return py::make_tuple(r.expansion, r.residual_rms_um);
        },
        py::arg("x_mm"), py::arg("y_mm"), py::arg("opd_um"), py::arg("max_order") = 4,
        py::arg("aperture_radius_mm") = 5.0);

    // optics
    py::class_<optics::Assembly>(m, "Assembly")
        .def(py::init<>())
        .def_readwrite("d_dpp_mm", &optics::Assembly::d_dpp_mm)
        .def_readwrite("d_sensor_mm", &optics::Assembly::d_sensor_mm)
        .def_readwrite("d_img_mm", &optics::Assembly::d_img_mm)
        .def_readwrite("c_img_mm", &optics::Assembly::c_img_mm);

    py::class_<optics::SystemConfig>(m, "SystemConfig")
        .def_static("load", &optics::SystemConfig::load, py::arg("path"))
        .def_readwrite("assembly", &optics::SystemConfig::assembly)
        .def_readwrite("plate_aperture_radius_mm", &optics::SystemConfig::plate_aperture_radius_mm);

    py::class_<optics::OpticalSystem>(m, "OpticalSystem")
        .def(py::init<optics::SystemConfig>(), py::arg("config"))
        .def_property_readonly("config", &optics::OpticalSystem::config)
        .def_property_readonly("effective_focal_length_mm", &optics::OpticalSystem::effective_focal_length_mm)
        .def_property_readonly("half_diagonal_mm", &optics::OpticalSystem::half_diagonal_mm)
        .def_property_readonly("object_distance_mm", &optics::OpticalSystem::object_distance_mm)
        .def_property_readonly("sensor_z_mm", &optics::OpticalSystem::sensor_z_mm)
        .def("with_assembly", &optics::OpticalSystem::with_assembly, py::arg("assembly"));

    m.def("field_point", &optics::field_point, py::arg("system"), py::arg("rho"), py::arg("theta"),
          py::arg("depth_mm"));

    // analysis
    m.def(
        "rms_spot",
        [](const optics::OpticalSystem& sys, const zernike::Expansion& plate, const optics::Vec3& p, int rings) {
            return analysis::rms_spot(sys, plate, p, rings).r_um;
        },
        py::arg("system"), py::arg("plate"), py::arg("object_point"), py::arg("rings") = analysis::kDefaultRings);
    m.def(
        "mtf50",
        [](const optics::OpticalSystem& sys, const zernike::Expansion& plate, const optics::Vec3& p, int rays) {
            analysis::PsfOptions o;
            o.rays = rays;
            const auto r = analysis::mtf50(analysis::mtf_from_psf(analysis::psf_render(sys, plate, p, o)));
            return py::make_tuple(r.lpmm, r.saturated);
        },
        py::arg("system"), py::arg("plate"), py::arg("object_point"), py::arg("rays") = 20000);

    // optimize
    m.def(
        "optimize_single",
        [](const optics::OpticalSystem& sys, const std::vector<optics::Vec3>& points, int max_iterations,
           bool defocus_only) {
            optimize::Schedule s;
            s.max_iterations = max_iterations;
            const auto r = defocus_only ? optimize::optimize_defocus_only(sys, points, s)
                                        : optimize::optimize_single(sys, points, s);
            return py::make_tuple(r.expansion, r.final_loss);
        },
        py::arg("system"), py::arg("points"), py::arg("max_iterations") = 500, py::arg("defocus_only") = false);
    m.def(
        "optimize_joint",
        [](const optics::OpticalSystem& sys, int budget, int rows, int cols, std::uint64_t seed, int max_iterations) {
            optimize::GridSpec g;
            g.rows = rows;
            g.cols = cols;
            optimize::Schedule s;
            s.max_iterations = max_iterations;
            const auto r = optimize::optimize_joint(sys, budget, g, s, seed);
            return py::make_tuple(r.set.patterns, r.stack.n_star, r.stack.mean_r_min());
        },
        py::arg("system"), py::arg("budget"), py::arg("rows") = 16, py::arg("cols") = 16, py::arg("seed") = 0,
        py::arg("max_iterations") = 500);

    // fusion
    m.def("psnr", [](const Array& a, const Array& b) { return fusion::psnr(to_image(a), to_image(b)); });
    m.def("ssim", [](const Array& a, const Array& b) { return fusion::ssim(to_image(a), to_image(b)); });
    m.def(
        "fuse_sharpness",
        [](const std::vector<Array>& stack, double blur_radius, int laplacian_scale) {
            const auto r = fusion::fuse_sharpness(to_stack(stack), blur_radius, laplacian_scale);
            return py::make_tuple(from_image(r.fused), from_image(r.index_map));
        },
        py::arg("stack"), py::arg("blur_radius") = 15.0, py::arg("laplacian_scale") = 1);
    m.def(
        "fuse_mask",
        [](const std::vector<Array>& stack, const std::vector<int>& mask, int rows, int cols) {
            return from_image(fusion::fuse_mask(to_stack(stack), mask, rows, cols));
        },
        py::arg("stack"), py::arg("mask"), py::arg("rows"), py::arg("cols"));
    m.def(
        "fuse_pyramid",
        [](const std::vector<Array>& stack, int levels) { return from_image(fusion::fuse_pyramid(to_stack(stack), levels)); },
        py::arg("stack"), py::arg("levels") = 5);
    m.def("natural_texture", [](int w, int h, std::uint64_t seed) { return from_image(imaging::natural_texture(w, h, seed)); },
          py::arg("width"), py::arg("height"), py::arg("seed") = 0);

    // control
    py::class_<control::SyntheticDevice>(m, "SyntheticDevice")
        .def(py::init([]() { return control::SyntheticDevice(); }))
        .def_property_readonly("term_count", &control::SyntheticDevice::term_count)
        .def("apply", &control::SyntheticDevice::apply, py::arg("volts"));
    m.attr("ELECTRODES") = control::kElectrodes;
    m.attr("VMAX") = control::kVmax;
    m.def("solve_linear", [](const Eigen::MatrixXd& a, const Eigen::VectorXd& w, double vmax) {
        const auto r = control::solve_linear(a, w, vmax);
        return py::make_tuple(r.V, r.residual);
    }, py::arg("a_per_volt2"), py::arg("w"), py::arg("vmax") = control::kVmax);
    m.def(
        "grid_control",
        [](const std::vector<std::vector<double>>& anchors, int rows, int cols, double x, double y) {
            const auto r = control::grid_control(anchors, rows, cols, x, y);
            return py::make_tuple(r.value, r.clamped);
        },
        py::arg("anchors"), py::arg("rows"), py::arg("cols"), py::arg("x"), py::arg("y"));
}
