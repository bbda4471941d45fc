#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fovea/image.hpp"
#include "fovea/optics.hpp"
#include "fovea/optimize.hpp"
#include "fovea/zernike.hpp"

namespace fovea::imaging {

using optics::Vec2;

/// Planar texture in the object plane. The texture center sits at the
/// assembly's c_img; column index grows along +x and row index along +y.
struct Scene {
    Image texture;
    double extent_x_mm = 100.0;
    double extent_y_mm = 100.0;
    double depth_mm = 0.0;  ///< 0 means the system object distance

    /// Loads PNG/EXR plus a JSON sidecar {"extent_mm": [w, h], "depth_mm": d}.
    static Scene load(const std::filesystem::path& image_path, const std::filesystem::path& sidecar);
    void validate() const;
};

struct RenderOptions {
    int width_px = 256;   ///< simulated sensor resolution covering the full sensor
    int height_px = 256;
    int psf_grid = 9;     ///< g x g PSF anchors spanning the sensor
    int psf_rays = 3000;  ///< per wavelength and anchor
    int max_kernel_radius_px = 24;
    double noise_sigma = 0.0;  ///< optional additive Gaussian noise
    std::uint64_t noise_seed = 0;
};

/// Warp plus spatially varying convolution. Channel c of the output (R, G, B)
/// uses wavelength index 2 - c. Kernels are interpolated bilinearly between
/// anchors, then applied to the chief-ray warped scene.
Image render(const Scene& scene, const optics::OpticalSystem& system, const zernike::Expansion& plate,
             const RenderOptions& options = {}, std::vector<std::string>* warnings = nullptr);

/// Geometric part only: scene sampled through the chief-ray map.
Image render_warp(const Scene& scene, const optics::OpticalSystem& system, const zernike::Expansion& plate,
                  const RenderOptions& options = {});

/// Layers are rendered independently and summed; each texture should already
/// carry its coverage mask (zero outside the layer).
Image render_layers(std::span<const Scene> layers, const optics::OpticalSystem& system,
                    const zernike::Expansion& plate, const RenderOptions& options = {});

struct FoveaStack {
    std::vector<Image> images;
    optimize::PatternSet patterns;
    std::optional<optimize::SpotGridStack> mask;
    double depth_mm = 0.0;
};

FoveaStack render_stack(const Scene& scene, const optics::OpticalSystem& system, const optimize::PatternSet& set,
                        const RenderOptions& options = {});

/// Sensor position (mm) of a simulated pixel center.
Vec2 pixel_to_sensor(const optics::OpticalSystem& system, const RenderOptions& options, double col, double row);

/// Chief ray through the plate center, traced to the sensor (mm).
std::optional<Vec2> chief_ray_hit(const optics::OpticalSystem& system, const zernike::Expansion& plate,
                                  const optics::Vec3& object_point, int wavelength_index);

/// Pinhole stand-in: no lens, tiny stop, sensor `distance_mm` behind it.
optics::OpticalSystem pinhole_system(double distance_mm, double object_distance_mm,
                                     const optics::SensorSpec& sensor = {});

/// Procedural test scenes in [0, 1].
Image checkerboard_texture(int width, int height, int squares);
Image dot_grid_texture(int width, int height, int dots);
Image natural_texture(int width, int height, std::uint64_t seed);

}  // namespace fovea::imaging
