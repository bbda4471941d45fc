#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

#include "fovea/zernike.hpp"

namespace fovea::optics {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;

/// Sellmeier index of a catalog material ("air"/"vacuum" are exactly 1).
/// Throws CatalogError for unknown names or wavelengths outside [400, 750] nm.
double refractive_index(std::string_view material, double wavelength_nm);
std::vector<std::string> material_names();

enum class SurfaceKind { PhasePlate, SphericalRefractor, PlanarRefractor, Stop, Sensor };

std::string_view to_string(SurfaceKind kind);

struct Surface {
    SurfaceKind kind = SurfaceKind::PlanarRefractor;
    double z_mm = 0.0;
    double radius_mm = 0.0;  ///< signed vertex radius, spherical refractors only
    double semi_diameter_mm = 1.0;
    std::string material_before = "air";
    std::string material_after = "air";

    double curvature() const { return kind == SurfaceKind::SphericalRefractor ? 1.0 / radius_mm : 0.0; }
};

struct Ray {
    Vec3 origin = Vec3::Zero();
    Vec3 direction = Vec3::UnitZ();  ///< unit (alpha, beta, gamma)
    double wavelength_nm = 587.6;
    bool alive = true;
};

struct LensSurface {
    std::string type = "spherical";  ///< "spherical" or "planar"
    double radius_mm = 0.0;
    double thickness_to_next_mm = 0.0;
    std::string material = "air";  ///< medium after the surface
    double semi_diameter_mm = 1.0;
};

struct LensPrescription {
    std::string name;
    std::vector<LensSurface> surfaces;

    static LensPrescription load(const std::filesystem::path& path);
    double length_mm() const;
};

struct SensorSpec {
    double pixel_pitch_um = 5.5;
    int width_px = 2048;
    int height_px = 2048;

    double width_mm() const { return pixel_pitch_um * 1e-3 * width_px; }
    double height_mm() const { return pixel_pitch_um * 1e-3 * height_px; }
    /// R = pitch * resolution * sqrt(2) / 2 for a square sensor.
    double half_diagonal_mm() const;
};

/// Assembly distances recovered by calibration.
struct Assembly {
    double d_dpp_mm = 5.0;      ///< phase plate to lens front vertex
    double d_sensor_mm = 47.0;  ///< lens back vertex to sensor
    double d_img_mm = 652.0;    ///< object (image) plane to phase plate
    Vec2 c_img_mm = Vec2::Zero();  ///< scene center offset from the optical axis in the object plane

    bool operator==(const Assembly&) const = default;
};

struct SystemConfig {
    LensPrescription lens;
    Assembly assembly;
    double plate_aperture_radius_mm = 5.0;
    SensorSpec sensor;
    std::array<double, 3> wavelengths_nm{486.1, 587.6, 656.3};

    /// Loads a system file; "lens_file" is resolved relative to the system file.
    static SystemConfig load(const std::filesystem::path& path);
};

/// Refracting interface prepared for one wavelength.
struct Interface {
    double z_mm = 0.0;
    double curvature = 0.0;
    double semi_diameter_mm = 0.0;
    double n_before = 1.0;
    double n_after = 1.0;
};

/// Stop and phase plate share the plane z = 0; the lens follows at d_dpp and
/// the sensor at d_sensor behind the last lens vertex. Objects sit at negative z.
class OpticalSystem {
public:
    explicit OpticalSystem(SystemConfig config);

    const SystemConfig& config() const { return config_; }
    const Assembly& assembly() const { return config_.assembly; }
    const std::vector<Surface>& surfaces() const { return surfaces_; }
    std::span<const double> wavelengths_nm() const { return config_.wavelengths_nm; }
    int wavelength_count() const { return static_cast<int>(config_.wavelengths_nm.size()); }

    double plate_z_mm() const { return 0.0; }
    double plate_aperture_radius_mm() const { return config_.plate_aperture_radius_mm; }
    double sensor_z_mm() const { return sensor_z_; }
    double object_distance_mm() const { return config_.assembly.d_img_mm; }
    double effective_focal_length_mm() const { return efl_; }
    double half_diagonal_mm() const { return config_.sensor.half_diagonal_mm(); }

    /// Lens interfaces at design wavelength `index`.
    const std::vector<Interface>& interfaces(int wavelength_index) const {
        return interfaces_[static_cast<std::size_t>(wavelength_index)];
    }
    std::vector<Interface> interfaces_at(double wavelength_nm) const;

    OpticalSystem with_assembly(const Assembly& assembly) const;

private:
    SystemConfig config_;
    std::vector<Surface> surfaces_;
    std::vector<std::vector<Interface>> interfaces_;
    double sensor_z_ = 0.0;
    double efl_ = 0.0;
};

void to_json(nlohmann::json& j, const Assembly& a);
void from_json(const nlohmann::json& j, Assembly& a);
void to_json(nlohmann::json& j, const SystemConfig& c);
void from_json(const nlohmann::json& j, LensPrescription& lens);
void to_json(nlohmann::json& j, const LensPrescription& lens);

/// Generalized Snell law at a thin phase plate: the direction cosines gain the
/// OPD slope. `slope` is dimensionless (length per length). The origin moves to
/// the plate plane. An evanescent result marks the ray dead.
Ray refract_phase_plate(const Ray& ray, zernike::Slope slope, double plate_z_mm = 0.0);

/// Intersect and refract at a spherical surface (vector Snell law). Misses,
/// aperture clipping and total internal reflection mark the ray dead.
Ray refract_spherical(const Ray& ray, const Surface& surface, double n1, double n2);

/// Full sequential trace from the object side to the sensor plane.
std::optional<Vec2> trace(const OpticalSystem& system, const Ray& ray, const zernike::Expansion& plate);

struct GradientTrace {
    Vec2 p;
    Eigen::Matrix<double, 2, Eigen::Dynamic> jacobian;  ///< dp/dw, mm per micrometer
};

/// Sensor point plus its exact derivative with respect to every plate coefficient.
std::optional<GradientTrace> trace_with_gradient(const OpticalSystem& system, const Ray& ray,
                                                 const zernike::Expansion& plate);

/// Rays per hexapolar pattern with `rings` rings: 1 + 3 rings (rings + 1).
int hexapolar_count(int rings);

/// Unit-disk hexapolar points rotated by `azimuth`; the first point is the center.
std::vector<Vec2> hexapolar_points(int rings, double azimuth = 0.0);

/// Deterministic hexapolar fan from object point P onto the stop (plate plane).
/// The pattern is rotated to the azimuth of P, so rotating P rotates every ray.
std::vector<Ray> sample_aperture(const OpticalSystem& system, const Vec3& object_point, int rings,
                                 double wavelength_nm);

/// Object point at `depth_mm` in front of the plate whose chief ray images near
/// normalized sensor radius rho (rho = f tan(phi) / R) and azimuth theta.
Vec3 field_point(const OpticalSystem& system, double rho, double theta, double depth_mm);
/// Same, addressed by a sensor position in millimeters.
Vec3 field_point_for_sensor(const OpticalSystem& system, const Vec2& sensor_mm, double depth_mm);

/// Low-level trace from the plate plane with outgoing direction (alpha, beta).
/// Optionally returns d(p)/d(alpha, beta).
bool trace_from_plate(const OpticalSystem& system, int wavelength_index, double x_mm, double y_mm, double alpha,
                      double beta, Vec2& p, Eigen::Matrix2d* jacobian = nullptr);

/// Trace a ray through an interface sequence in either axial direction and stop
/// on the plane z = end_z_mm. Returns the final position or nullopt if dead.
std::optional<Ray> trace_interfaces(std::span<const Interface> interfaces, const Ray& ray, double end_z_mm);

}  // namespace fovea::optics
