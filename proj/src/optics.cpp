#include "fovea/optics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

#include "fovea/common.hpp"
#include "fovea/dual.hpp"

namespace fovea::optics {

namespace {

struct Sellmeier {
    std::string_view name;
    std::array<double, 3> b;
    std::array<double, 3> c;  // um^2
};

// Schott / Malitson catalog coefficients.
constexpr std::array<Sellmeier, 5> kCatalog{{
    {"N-BK7", {1.03961212, 0.231792344, 1.01046945}, {0.00600069867, 0.0200179144, 103.560653}},
    {"N-BAF10", {1.5851495, 0.143559385, 1.08521269}, {0.00926681282, 0.0424489805, 105.613573}},
    {"N-SF6HT", {1.77931763, 0.338149866, 2.08734474}, {0.0133714182, 0.0617533621, 174.01759}},
    {"N-SF6", {1.77931763, 0.338149866, 2.08734474}, {0.0133714182, 0.0617533621, 174.01759}},
    {"F_SILICA", {0.6961663, 0.4079426, 0.8974794}, {0.00467914826, 0.0135120631, 97.9340025}},
}};

constexpr double kIntersectTolerance = 1e-10;
constexpr double kUmPerMmToSlope = 1e-3;

template <class T>
struct V3 {
    T x, y, z;
};

template <class T>
T dot(const V3<T>& a, const V3<T>& b) {
    return a.x * b.x + a.y * b.y + a.z * b.z;
}

// Advance (o, d) to the interface and refract. Returns false when the ray dies.
template <class T>
bool step(const Interface& s, V3<T>& o, V3<T>& d) {
    using std::copysign;
    using std::sqrt;
    const double c = s.curvature;
    const T oz = o.z - s.z_mm;
    const T b = c * (o.x * d.x + o.y * d.y + oz * d.z) - d.z;
    const T cc = c * (o.x * o.x + o.y * o.y + oz * oz) - 2.0 * oz;
    const T disc = b * b - c * cc;
    if (disc < 0.0) return false;
    const T denom = b + copysign(sqrt(disc), b);
    if (value_of(denom) == 0.0) return false;
    const T t = -cc / denom;
    if (t < -kIntersectTolerance) return false;
    o = {o.x + t * d.x, o.y + t * d.y, o.z + t * d.z};
    if (value_of(o.x * o.x + o.y * o.y) > s.semi_diameter_mm * s.semi_diameter_mm) return false;
    if (s.n_before == s.n_after) return true;

    V3<T> n{c * o.x, c * o.y, c * (o.z - s.z_mm) - 1.0};
    const T inv = 1.0 / sqrt(dot(n, n));
    n = {n.x * inv, n.y * inv, n.z * inv};
    T cosi = dot(n, d);
    if (cosi < 0.0) {
        n = {-n.x, -n.y, -n.z};
        cosi = -cosi;
    }
    const double mu = s.n_before / s.n_after;
    const T k = 1.0 - mu * mu * (1.0 - cosi * cosi);
    if (k < 0.0) return false;
    const T g = sqrt(k) - mu * cosi;
    d = {mu * d.x + g * n.x, mu * d.y + g * n.y, mu * d.z + g * n.z};
    return true;
}

template <class T>
bool to_plane(double z, V3<T>& o, const V3<T>& d) {
    if (!(d.z > 0.0) && !(d.z < 0.0)) return false;
    const T t = (z - o.z) / d.z;
    if (t < -kIntersectTolerance) return false;
    o = {o.x + t * d.x, o.y + t * d.y, o.z + t * d.z};
    return true;
}

template <class T>
bool run_lens(std::span<const Interface> lens, double sensor_z, V3<T>& o, V3<T>& d) {
    for (const Interface& s : lens)
        if (!step(s, o, d)) return false;
    return to_plane(sensor_z, o, d);
}

std::vector<Interface> build_interfaces(const std::vector<Surface>& surfaces, double wavelength_nm) {
    std::vector<Interface> out;
    for (const Surface& s : surfaces) {
        if (s.kind != SurfaceKind::SphericalRefractor && s.kind != SurfaceKind::PlanarRefractor) continue;
        out.push_back({s.z_mm, s.curvature(), s.semi_diameter_mm, refractive_index(s.material_before, wavelength_nm),
                       refractive_index(s.material_after, wavelength_nm)});
    }
    return out;
}

// Paraxial y-nu chain over the lens group; returns -1/C.
double paraxial_efl(const std::vector<Interface>& lens) {
    double a = 1.0, b = 0.0, c = 0.0, d = 1.0;
    double prev_z = lens.empty() ? 0.0 : lens.front().z_mm;
    for (const Interface& s : lens) {
        const double t = (s.z_mm - prev_z) / s.n_before;
        // transfer
        a += t * c;
        b += t * d;
        const double power = (s.n_after - s.n_before) * s.curvature;
        c -= power * a;
        d -= power * b;
        prev_z = s.z_mm;
    }
    return c == 0.0 ? 0.0 : -1.0 / c;
}

SurfaceKind parse_kind(const std::string& type) {
    if (type == "spherical") return SurfaceKind::SphericalRefractor;
    if (type == "planar") return SurfaceKind::PlanarRefractor;
    throw InvalidArgument("unknown lens surface type '" + type + "'");
}

}  // namespace

double refractive_index(std::string_view material, double wavelength_nm) {
    if (material == "air" || material == "vacuum") return 1.0;
    if (!(wavelength_nm >= 400.0 && wavelength_nm <= 750.0))
        throw CatalogError("wavelength " + std::to_string(wavelength_nm) + " nm outside [400, 750] nm");
    for (const auto& glass : kCatalog) {
        if (glass.name != material) continue;
        const double l2 = (wavelength_nm * 1e-3) * (wavelength_nm * 1e-3);
        double n2 = 1.0;
        for (int i = 0; i < 3; ++i) n2 += glass.b[i] * l2 / (l2 - glass.c[i]);
        return std::sqrt(n2);
    }
    throw CatalogError("unknown material '" + std::string(material) + "'");
}

std::vector<std::string> material_names() {
    std::vector<std::string> names{"air", "vacuum"};
    for (const auto& g : kCatalog) names.emplace_back(g.name);
    return names;
}

std::string_view to_string(SurfaceKind kind) {
    switch (kind) {
        case SurfaceKind::PhasePlate: return "phase_plate";
        case SurfaceKind::SphericalRefractor: return "spherical_refractor";
        case SurfaceKind::PlanarRefractor: return "planar_refractor";
        case SurfaceKind::Stop: return "stop";
        case SurfaceKind::Sensor: return "sensor";
    }
    return "unknown";
}

double SensorSpec::half_diagonal_mm() const {
    return 0.5 * std::hypot(width_mm(), height_mm());
}

LensPrescription LensPrescription::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open lens file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed lens file " + path.string() + ": " + e.what());
    }
    LensPrescription lens;
    from_json(j, lens);
    return lens;
}

double LensPrescription::length_mm() const {
    double total = 0.0;
    for (std::size_t i = 0; i + 1 < surfaces.size(); ++i) total += surfaces[i].thickness_to_next_mm;
    return total;
}

void from_json(const nlohmann::json& j, LensPrescription& lens) {
    lens.name = j.value("name", std::string{});
    lens.surfaces.clear();
    const nlohmann::json& list = j.is_array() ? j : j.at("surfaces");
    for (const auto& s : list) {
        LensSurface ls;
        ls.type = s.value("type", std::string("spherical"));
        ls.radius_mm = s.value("radius_mm", 0.0);
        ls.thickness_to_next_mm = s.at("thickness_to_next_mm").get<double>();
        ls.material = s.at("material").get<std::string>();
        ls.semi_diameter_mm = s.at("semi_diameter_mm").get<double>();
        lens.surfaces.push_back(ls);
    }
}

void to_json(nlohmann::json& j, const LensPrescription& lens) {
    j = nlohmann::json{{"name", lens.name}, {"surfaces", nlohmann::json::array()}};
    for (const auto& s : lens.surfaces)
        j["surfaces"].push_back({{"type", s.type},
                                 {"radius_mm", s.radius_mm},
                                 {"thickness_to_next_mm", s.thickness_to_next_mm},
                                 {"material", s.material},
                                 {"semi_diameter_mm", s.semi_diameter_mm}});
}

void to_json(nlohmann::json& j, const Assembly& a) {
    j = nlohmann::json{{"d_dpp_mm", a.d_dpp_mm},
                       {"d_sensor_mm", a.d_sensor_mm},
                       {"d_img_mm", a.d_img_mm},
                       {"c_img_mm", {a.c_img_mm.x(), a.c_img_mm.y()}}};
}

void from_json(const nlohmann::json& j, Assembly& a) {
    a.d_dpp_mm = j.at("d_dpp_mm").get<double>();
    a.d_sensor_mm = j.at("d_sensor_mm").get<double>();
    a.d_img_mm = j.at("d_img_mm").get<double>();
    const auto c = j.value("c_img_mm", std::vector<double>{0.0, 0.0});
    if (c.size() != 2) throw InvalidArgument("c_img_mm must have two components");
    a.c_img_mm = Vec2(c[0], c[1]);
}

void to_json(nlohmann::json& j, const SystemConfig& c) {
    j = nlohmann::json{{"lens", c.lens},
                       {"assembly", c.assembly},
                       {"object_distance_mm", c.assembly.d_img_mm},
                       {"plate_aperture_radius_mm", c.plate_aperture_radius_mm},
                       {"sensor",
                        {{"pixel_pitch_um", c.sensor.pixel_pitch_um},
                         {"resolution", {c.sensor.width_px, c.sensor.height_px}}}},
                       {"wavelengths_nm", c.wavelengths_nm}};
}

SystemConfig SystemConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open system file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed system file " + path.string() + ": " + e.what());
    }
    SystemConfig c;
    if (j.contains("lens_file")) {
        c.lens = LensPrescription::load(path.parent_path() / j.at("lens_file").get<std::string>());
    } else {
        from_json(j.at("lens"), c.lens);
    }
    from_json(j.at("assembly"), c.assembly);
    if (j.contains("object_distance_mm") && j.at("object_distance_mm").get<double>() != c.assembly.d_img_mm)
        throw InvalidArgument("object_distance_mm must equal assembly.d_img_mm");
    c.plate_aperture_radius_mm = j.value("plate_aperture_radius_mm", c.plate_aperture_radius_mm);
    if (j.contains("sensor")) {
        const auto& s = j.at("sensor");
        c.sensor.pixel_pitch_um = s.value("pixel_pitch_um", c.sensor.pixel_pitch_um);
        if (s.contains("resolution")) {
            const auto res = s.at("resolution").get<std::vector<int>>();
            if (res.size() != 2) throw InvalidArgument("sensor.resolution must have two entries");
            c.sensor.width_px = res[0];
            c.sensor.height_px = res[1];
        }
    }
    if (j.contains("wavelengths_nm")) c.wavelengths_nm = j.at("wavelengths_nm").get<std::array<double, 3>>();
    return c;
}

OpticalSystem::OpticalSystem(SystemConfig config) : config_(std::move(config)) {
    const Assembly& a = config_.assembly;
    if (!(config_.plate_aperture_radius_mm > 0.0)) throw InvalidArgument("plate aperture radius must be positive");
    if (!(a.d_img_mm > 0.0) || !(a.d_dpp_mm > 0.0) || !(a.d_sensor_mm > 0.0))
        throw InvalidArgument("assembly distances must be positive");

    const double r_ap = config_.plate_aperture_radius_mm;
    surfaces_.push_back({SurfaceKind::Stop, 0.0, 0.0, r_ap, "air", "air"});
    surfaces_.push_back({SurfaceKind::PhasePlate, 0.0, 0.0, r_ap, "air", "air"});
    double z = a.d_dpp_mm;
    std::string before = "air";
    for (std::size_t i = 0; i < config_.lens.surfaces.size(); ++i) {
        const LensSurface& ls = config_.lens.surfaces[i];
        Surface s{parse_kind(ls.type), z, ls.radius_mm, ls.semi_diameter_mm, before, ls.material};
        if (!(s.semi_diameter_mm > 0.0)) throw InvalidArgument("lens semi-diameter must be positive");
        if (s.kind == SurfaceKind::SphericalRefractor && !(std::abs(s.radius_mm) > s.semi_diameter_mm))
            throw InvalidArgument("spherical surface radius must exceed its semi-diameter");
        if (i > 0 && !(z > surfaces_.back().z_mm)) throw InvalidArgument("lens surfaces must be strictly ordered");
        surfaces_.push_back(s);
        before = ls.material;
        if (i + 1 < config_.lens.surfaces.size()) z += ls.thickness_to_next_mm;
    }
    if (before != "air") throw InvalidArgument("lens must end in air");
    sensor_z_ = z + a.d_sensor_mm;
    const double sensor_semi = 2.0 * config_.sensor.half_diagonal_mm();
    surfaces_.push_back({SurfaceKind::Sensor, sensor_z_, 0.0, sensor_semi, "air", "air"});

    for (double wl : config_.wavelengths_nm) interfaces_.push_back(build_interfaces(surfaces_, wl));
    const auto& mid = interfaces_[interfaces_.size() / 2];
    efl_ = mid.empty() ? sensor_z_ : paraxial_efl(mid);
}

std::vector<Interface> OpticalSystem::interfaces_at(double wavelength_nm) const {
    for (std::size_t i = 0; i < config_.wavelengths_nm.size(); ++i)
        if (config_.wavelengths_nm[i] == wavelength_nm) return interfaces_[i];
    return build_interfaces(surfaces_, wavelength_nm);
}

OpticalSystem OpticalSystem::with_assembly(const Assembly& assembly) const {
    SystemConfig c = config_;
    c.assembly = assembly;
    return OpticalSystem(std::move(c));
}

Ray refract_phase_plate(const Ray& ray, zernike::Slope slope, double plate_z_mm) {
    Ray out = ray;
    if (!ray.alive) return out;
    V3<double> o{ray.origin.x(), ray.origin.y(), ray.origin.z()};
    const V3<double> d{ray.direction.x(), ray.direction.y(), ray.direction.z()};
    if (!to_plane(plate_z_mm, o, d)) {
        out.alive = false;
        return out;
    }
    out.origin = Vec3(o.x, o.y, o.z);
    const double a = ray.direction.x() + slope.dx;
    const double b = ray.direction.y() + slope.dy;
    const double s = a * a + b * b;
    if (s >= 1.0) {
        out.alive = false;
        return out;
    }
    out.direction = Vec3(a, b, std::sqrt(1.0 - s));
    return out;
}

Ray refract_spherical(const Ray& ray, const Surface& surface, double n1, double n2) {
    Ray out = ray;
    if (!ray.alive) return out;
    const Interface s{surface.z_mm, surface.curvature(), surface.semi_diameter_mm, n1, n2};
    V3<double> o{ray.origin.x(), ray.origin.y(), ray.origin.z()};
    V3<double> d{ray.direction.x(), ray.direction.y(), ray.direction.z()};
    if (!step(s, o, d)) {
        out.alive = false;
        return out;
    }
    out.origin = Vec3(o.x, o.y, o.z);
    out.direction = Vec3(d.x, d.y, d.z);
    return out;
}

namespace {

struct PlateCrossing {
    double x, y, alpha, beta;
};

std::optional<PlateCrossing> cross_plate(const OpticalSystem& system, const Ray& ray,
                                         const zernike::Expansion& plate) {
    if (!ray.alive) return std::nullopt;
    V3<double> o{ray.origin.x(), ray.origin.y(), ray.origin.z()};
    const V3<double> d{ray.direction.x(), ray.direction.y(), ray.direction.z()};
    if (!to_plane(system.plate_z_mm(), o, d)) return std::nullopt;
    const double r2 = o.x * o.x + o.y * o.y;
    const double stop = system.plate_aperture_radius_mm() * (1.0 + 1e-12);
    if (r2 > stop * stop) return std::nullopt;
    const double rp = plate.aperture_radius_mm() * (1.0 + 1e-12);
    if (r2 > rp * rp) return std::nullopt;
    const zernike::Slope g = plate.grad_cartesian(o.x, o.y);
    const double a = d.x + kUmPerMmToSlope * g.dx;
    const double b = d.y + kUmPerMmToSlope * g.dy;
    if (a * a + b * b >= 1.0) return std::nullopt;
    return PlateCrossing{o.x, o.y, a, b};
}

int wavelength_slot(const OpticalSystem& system, double wavelength_nm) {
    const auto wl = system.wavelengths_nm();
    for (std::size_t i = 0; i < wl.size(); ++i)
        if (wl[i] == wavelength_nm) return static_cast<int>(i);
    return -1;
}

}  // namespace

bool trace_from_plate(const OpticalSystem& system, int wavelength_index, double x_mm, double y_mm, double alpha,
                      double beta, Vec2& p, Eigen::Matrix2d* jacobian) {
    const auto& lens = system.interfaces(wavelength_index);
    if (jacobian == nullptr) {
        const double s = alpha * alpha + beta * beta;
        if (s >= 1.0) return false;
        V3<double> o{x_mm, y_mm, system.plate_z_mm()};
        V3<double> d{alpha, beta, std::sqrt(1.0 - s)};
        if (!run_lens<double>(lens, system.sensor_z_mm(), o, d)) return false;
        p = Vec2(o.x, o.y);
        return true;
    }
    using D2 = Dual<2>;
    const D2 a = D2::variable(alpha, 0);
    const D2 b = D2::variable(beta, 1);
    const D2 s = a * a + b * b;
    if (s.v >= 1.0) return false;
    V3<D2> o{D2(x_mm), D2(y_mm), D2(system.plate_z_mm())};
    V3<D2> d{a, b, sqrt(1.0 - s)};
    if (!run_lens<D2>(lens, system.sensor_z_mm(), o, d)) return false;
    p = Vec2(o.x.v, o.y.v);
    (*jacobian) << o.x.d[0], o.x.d[1], o.y.d[0], o.y.d[1];
    return true;
}

std::optional<Vec2> trace(const OpticalSystem& system, const Ray& ray, const zernike::Expansion& plate) {
    const auto crossing = cross_plate(system, ray, plate);
    if (!crossing) return std::nullopt;
    const int slot = wavelength_slot(system, ray.wavelength_nm);
    Vec2 p;
    if (slot >= 0) {
        if (!trace_from_plate(system, slot, crossing->x, crossing->y, crossing->alpha, crossing->beta, p))
            return std::nullopt;
        return p;
    }
    const auto lens = system.interfaces_at(ray.wavelength_nm);
    const double s = crossing->alpha * crossing->alpha + crossing->beta * crossing->beta;
    V3<double> o{crossing->x, crossing->y, system.plate_z_mm()};
    V3<double> d{crossing->alpha, crossing->beta, std::sqrt(1.0 - s)};
    if (!run_lens<double>(lens, system.sensor_z_mm(), o, d)) return std::nullopt;
    return Vec2(o.x, o.y);
}

std::optional<GradientTrace> trace_with_gradient(const OpticalSystem& system, const Ray& ray,
                                                 const zernike::Expansion& plate) {
    const auto crossing = cross_plate(system, ray, plate);
    if (!crossing) return std::nullopt;
    int slot = wavelength_slot(system, ray.wavelength_nm);
    if (slot < 0) throw InvalidArgument("trace_with_gradient requires a design wavelength");
    GradientTrace out;
    Eigen::Matrix2d j_dir;
    if (!trace_from_plate(system, slot, crossing->x, crossing->y, crossing->alpha, crossing->beta, out.p, &j_dir))
        return std::nullopt;
    const int k = plate.size();
    std::vector<double> gu(static_cast<std::size_t>(k)), gv(static_cast<std::size_t>(k));
    const double r = plate.aperture_radius_mm();
    plate.basis().gradients(crossing->x / r, crossing->y / r, gu, gv);
    out.jacobian.resize(2, k);
    for (int i = 0; i < k; ++i) {
        const Eigen::Vector2d dslope(kUmPerMmToSlope * gu[static_cast<std::size_t>(i)] / r,
                                     kUmPerMmToSlope * gv[static_cast<std::size_t>(i)] / r);
        out.jacobian.col(i) = j_dir * dslope;
    }
    return out;
}

int hexapolar_count(int rings) { return 1 + 3 * rings * (rings + 1); }

std::vector<Vec2> hexapolar_points(int rings, double azimuth) {
    if (rings < 0) throw InvalidArgument("ring count must be non-negative");
    std::vector<Vec2> pts;
    pts.reserve(static_cast<std::size_t>(hexapolar_count(rings)));
    pts.emplace_back(0.0, 0.0);
    for (int k = 1; k <= rings; ++k) {
        const double r = static_cast<double>(k) / rings;
        const int count = 6 * k;
        for (int i = 0; i < count; ++i) {
            const double t = azimuth + 2.0 * std::numbers::pi * i / count;
            pts.emplace_back(r * std::cos(t), r * std::sin(t));
        }
    }
    return pts;
}

std::vector<Ray> sample_aperture(const OpticalSystem& system, const Vec3& object_point, int rings,
                                 double wavelength_nm) {
    const double azimuth = (object_point.x() == 0.0 && object_point.y() == 0.0)
                               ? 0.0
                               : std::atan2(object_point.y(), object_point.x());
    const double r_ap = system.plate_aperture_radius_mm();
    std::vector<Ray> rays;
    for (const Vec2& q : hexapolar_points(rings, azimuth)) {
        const Vec3 target(q.x() * r_ap, q.y() * r_ap, system.plate_z_mm());
        Ray ray;
        ray.origin = object_point;
        ray.direction = (target - object_point).normalized();
        ray.wavelength_nm = wavelength_nm;
        rays.push_back(ray);
    }
    return rays;
}

Vec3 field_point(const OpticalSystem& system, double rho, double theta, double depth_mm) {
    const double tan_phi = rho * system.half_diagonal_mm() / system.effective_focal_length_mm();
    const double lateral = depth_mm * tan_phi;
    return Vec3(-lateral * std::cos(theta), -lateral * std::sin(theta), system.plate_z_mm() - depth_mm);
}

Vec3 field_point_for_sensor(const OpticalSystem& system, const Vec2& sensor_mm, double depth_mm) {
    const double r = sensor_mm.norm();
    const double theta = r == 0.0 ? 0.0 : std::atan2(sensor_mm.y(), sensor_mm.x());
    return field_point(system, r / system.half_diagonal_mm(), theta, depth_mm);
}

std::optional<Ray> trace_interfaces(std::span<const Interface> interfaces, const Ray& ray, double end_z_mm) {
    if (!ray.alive) return std::nullopt;
    V3<double> o{ray.origin.x(), ray.origin.y(), ray.origin.z()};
    V3<double> d{ray.direction.x(), ray.direction.y(), ray.direction.z()};
    for (const Interface& s : interfaces)
        if (!step(s, o, d)) return std::nullopt;
    if (!to_plane(end_z_mm, o, d)) return std::nullopt;
    Ray out = ray;
    out.origin = Vec3(o.x, o.y, o.z);
    out.direction = Vec3(d.x, d.y, d.z);
    return out;
}

}  // namespace fovea::optics
