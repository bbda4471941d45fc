#include "fovea/imaging.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>

#include <nlohmann/json.hpp>

#include "fovea/common.hpp"
#include "fovea/parallel.hpp"

namespace fovea::imaging {

using optics::Vec3;

void Scene::validate() const {
    if (texture.empty()) throw InvalidArgument("scene texture is empty");
    if (!(extent_x_mm > 0.0) || !(extent_y_mm > 0.0)) throw InvalidArgument("scene extent must be positive");
    for (double v : texture.data)
        if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("scene texture values must lie in [0, 1]");
}

Scene Scene::load(const std::filesystem::path& image_path, const std::filesystem::path& sidecar) {
    Scene s;
    s.texture = read_image(image_path);
    if (s.texture.channels == 1) {
        Image rgb(s.texture.width, s.texture.height, 3);
        for (int c = 0; c < 3; ++c) std::copy(s.texture.data.begin(), s.texture.data.end(), rgb.plane(c));
        s.texture = std::move(rgb);
    }
    for (double& v : s.texture.data) v = std::clamp(v, 0.0, 1.0);
    std::ifstream in(sidecar);
    if (!in) throw IoError("cannot open scene sidecar " + sidecar.string());
    nlohmann::json j;
    try {
        in >> j;
        const auto e = j.at("extent_mm").get<std::vector<double>>();
        if (e.size() != 2) throw InvalidArgument("extent_mm must have two entries");
        s.extent_x_mm = e[0];
        s.extent_y_mm = e[1];
        s.depth_mm = j.value("depth_mm", 0.0);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed scene sidecar " + sidecar.string() + ": " + e.what());
    }
    s.validate();
    return s;
}

Vec2 pixel_to_sensor(const optics::OpticalSystem& system, const RenderOptions& o, double col, double row) {
    const auto& sensor = system.config().sensor;
    const double px = sensor.width_mm() / o.width_px, py = sensor.height_mm() / o.height_px;
    return Vec2((col + 0.5 - 0.5 * o.width_px) * px, (row + 0.5 - 0.5 * o.height_px) * py);
}

std::optional<Vec2> chief_ray_hit(const optics::OpticalSystem& system, const zernike::Expansion& plate,
                                  const Vec3& object_point, int wavelength_index) {
    const Vec3 d = (Vec3(0.0, 0.0, system.plate_z_mm()) - object_point).normalized();
    const auto g = plate.grad_cartesian(0.0, 0.0);
    Vec2 p;
    if (!optics::trace_from_plate(system, wavelength_index, 0.0, 0.0, d.x() + 1e-3 * g.dx, d.y() + 1e-3 * g.dy, p))
        return std::nullopt;
    return p;
}

optics::OpticalSystem pinhole_system(double distance_mm, double object_distance_mm, const optics::SensorSpec& sensor) {
    optics::SystemConfig c;
    c.lens.name = "pinhole";
    c.assembly.d_dpp_mm = 0.5 * distance_mm;
    c.assembly.d_sensor_mm = 0.5 * distance_mm;
    c.assembly.d_img_mm = object_distance_mm;
    c.plate_aperture_radius_mm = 1e-6;
    c.sensor = sensor;
    return optics::OpticalSystem(c);
}

namespace {

/// Object-plane point whose chief ray lands on sensor point s, solved by a
/// fixed-point iteration on the local magnification.
class ChiefRayInverse {
public:
    ChiefRayInverse(const optics::OpticalSystem& system, const zernike::Expansion& plate, double depth, int wl)
        : system_(system), plate_(plate), depth_(depth), wl_(wl) {
        const double delta = 1e-3 * depth;
        const auto h0 = forward(Vec2::Zero());
        const auto h1 = forward(Vec2(delta, 0.0));
        if (!h0 || !h1) throw Error("chief ray through the plate center does not reach the sensor");
        mag_ = (h1->x() - h0->x()) / delta;
        if (!(std::abs(mag_) > 0.0)) throw Error("degenerate chief-ray magnification");
    }

    std::optional<Vec2> forward(const Vec2& x) const {
        return chief_ray_hit(system_, plate_, Vec3(x.x(), x.y(), system_.plate_z_mm() - depth_), wl_);
    }

    std::optional<Vec2> inverse(const Vec2& s) const {
        Vec2 x = s / mag_;
        for (int it = 0; it < 50; ++it) {
            const auto h = forward(x);
            if (!h) return std::nullopt;
            const Vec2 err = s - *h;
            x += err / mag_;
            if (err.norm() < 1e-11) break;
        }
        return x;
    }

private:
    const optics::OpticalSystem& system_;
    const zernike::Expansion& plate_;
    double depth_;
    int wl_;
    double mag_ = 1.0;
};

/// Chief-ray warped scene on a padded simulation grid, one plane per channel.
struct WarpedScene {
    int pad = 0;
    int width = 0, height = 0;  // padded size
    std::vector<std::vector<double>> planes;  // by output channel

    double at(int c, int row, int col) const {
        return planes[static_cast<std::size_t>(c)][static_cast<std::size_t>(row * width + col)];
    }
};

double scene_depth(const Scene& scene, const optics::OpticalSystem& system) {
    return scene.depth_mm > 0.0 ? scene.depth_mm : system.object_distance_mm();
}

WarpedScene warp_scene(const Scene& scene, const optics::OpticalSystem& system, const zernike::Expansion& plate,
                       const RenderOptions& o, int pad) {
    const double depth = scene_depth(scene, system);
    const Vec2 c_img = system.assembly().c_img_mm;
    WarpedScene w;
    w.pad = pad;
    w.width = o.width_px + 2 * pad;
    w.height = o.height_px + 2 * pad;
    w.planes.assign(3, std::vector<double>(static_cast<std::size_t>(w.width * w.height), 0.0));

    // Inverse map tabulated on a coarse node grid and interpolated bilinearly.
    constexpr int kNodes = 33;
    const Vec2 lo = pixel_to_sensor(system, o, -pad - 0.5, -pad - 0.5);
    const Vec2 hi = pixel_to_sensor(system, o, o.width_px + pad - 0.5, o.height_px + pad - 0.5);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (int c = 0; c < 3; ++c) {
        const int wl = 2 - c;
        ChiefRayInverse inv(system, plate, depth, wl);
        std::vector<Vec2> table(kNodes * kNodes, Vec2(nan, nan));
        parallel_for(table.size(), [&](std::size_t n) {
            const int i = static_cast<int>(n) / kNodes, j = static_cast<int>(n) % kNodes;
            const Vec2 s(lo.x() + (hi.x() - lo.x()) * j / (kNodes - 1), lo.y() + (hi.y() - lo.y()) * i / (kNodes - 1));
            if (auto x = inv.inverse(s)) table[n] = *x;
        });
        auto& plane = w.planes[static_cast<std::size_t>(c)];
        const Image& tex = scene.texture;
        const int tc = tex.channels == 3 ? c : 0;
        for (int row = 0; row < w.height; ++row) {
            for (int col = 0; col < w.width; ++col) {
                const Vec2 s = pixel_to_sensor(system, o, col - pad, row - pad);
                const double fx = (s.x() - lo.x()) / (hi.x() - lo.x()) * (kNodes - 1);
                const double fy = (s.y() - lo.y()) / (hi.y() - lo.y()) * (kNodes - 1);
                const int j0 = std::clamp(static_cast<int>(std::floor(fx)), 0, kNodes - 2);
                const int i0 = std::clamp(static_cast<int>(std::floor(fy)), 0, kNodes - 2);
                const double tx = fx - j0, ty = fy - i0;
                const auto& a = table[static_cast<std::size_t>(i0 * kNodes + j0)];
                const auto& b = table[static_cast<std::size_t>(i0 * kNodes + j0 + 1)];
                const auto& cc = table[static_cast<std::size_t>((i0 + 1) * kNodes + j0)];
                const auto& d = table[static_cast<std::size_t>((i0 + 1) * kNodes + j0 + 1)];
                const Vec2 x = (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * cc + tx * d);
                if (std::isnan(x.x())) continue;
                const double u = (x.x() - c_img.x()) / scene.extent_x_mm * tex.width + 0.5 * tex.width - 0.5;
                const double v = (x.y() - c_img.y()) / scene.extent_y_mm * tex.height + 0.5 * tex.height - 0.5;
                plane[static_cast<std::size_t>(row * w.width + col)] = sample_bilinear(tex, tc, u, v);
            }
        }
    }
    return w;
}

struct Tap {
    int dx, dy;
    double w;
};

struct AnchorKernels {
    int grid = 1;
    int radius = 0;
    std::vector<std::array<std::vector<Tap>, 3>> taps;  // by anchor, output channel
};

AnchorKernels build_kernels(const optics::OpticalSystem& system, const zernike::Expansion& plate, double depth,
                            const RenderOptions& o, std::vector<std::string>* warnings) {
    const int g = o.psf_grid;
    const auto& sensor = system.config().sensor;
    const double hw = sensor.width_mm() / 2, hh = sensor.height_mm() / 2;
    const double pitch_x = sensor.width_mm() / o.width_px, pitch_y = sensor.height_mm() / o.height_px;
    int rings = 0;
    while (optics::hexapolar_count(rings) < o.psf_rays) ++rings;

    const auto na = static_cast<std::size_t>(g * g);
    // Ray offsets from the chief ray in simulation pixels, by anchor and channel.
    std::vector<std::array<std::vector<Vec2>, 3>> offsets(na);
    std::vector<char> valid(na, 0);
    ChiefRayInverse inv(system, plate, depth, 1);
    parallel_for(na, [&](std::size_t a) {
        const int ai = static_cast<int>(a) / g, aj = static_cast<int>(a) % g;
        const Vec2 s(g > 1 ? -hw + 2 * hw * aj / (g - 1) : 0.0, g > 1 ? -hh + 2 * hh * ai / (g - 1) : 0.0);
        const auto x = inv.inverse(s);
        if (!x) return;
        const Vec3 p(x->x(), x->y(), system.plate_z_mm() - depth);
        int alive = 0, total = 0;
        for (int c = 0; c < 3; ++c) {
            const int wl = 2 - c;
            const auto chief = chief_ray_hit(system, plate, p, wl);
            if (!chief) return;
            for (const auto& ray :
                 optics::sample_aperture(system, p, rings, system.wavelengths_nm()[static_cast<std::size_t>(wl)])) {
                ++total;
                if (auto h = optics::trace(system, ray, plate)) {
                    ++alive;
                    offsets[a][static_cast<std::size_t>(c)].push_back(
                        Vec2((h->x() - chief->x()) / pitch_x, (h->y() - chief->y()) / pitch_y));
                }
            }
        }
        valid[a] = 2 * alive >= total;
    });

    AnchorKernels k;
    k.grid = g;
    double reach = 0.0;
    for (std::size_t a = 0; a < na; ++a)
        if (valid[a])
            for (const auto& ch : offsets[a])
                for (const auto& v : ch) reach = std::max(reach, v.cwiseAbs().maxCoeff());
    k.radius = std::min(o.max_kernel_radius_px, static_cast<int>(std::ceil(reach)) + 1);
    const int r = k.radius, side = 2 * r + 1;

    k.taps.resize(na);
    std::vector<int> substitute(na);
    for (std::size_t a = 0; a < na; ++a) {
        substitute[a] = static_cast<int>(a);
        if (valid[a]) continue;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t b = 0; b < na; ++b) {
            if (!valid[b]) continue;
            const double di = static_cast<double>(static_cast<int>(a) / g - static_cast<int>(b) / g);
            const double dj = static_cast<double>(static_cast<int>(a) % g - static_cast<int>(b) % g);
            if (di * di + dj * dj < best) {
                best = di * di + dj * dj;
                substitute[a] = static_cast<int>(b);
            }
        }
        if (!std::isfinite(best)) throw Error("render: every PSF anchor is vignetted");
        if (warnings) warnings->push_back("PSF anchor " + std::to_string(a) + " vignetted; using anchor " +
                                          std::to_string(substitute[a]));
    }
    for (std::size_t a = 0; a < na; ++a) {
        const auto& src = offsets[static_cast<std::size_t>(substitute[a])];
        for (int c = 0; c < 3; ++c) {
            std::vector<double> dense(static_cast<std::size_t>(side * side), 0.0);
            double total = 0.0;
            for (const Vec2& v : src[static_cast<std::size_t>(c)]) {
                const double fx = std::floor(v.x()), fy = std::floor(v.y());
                const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
                const double tx = v.x() - fx, ty = v.y() - fy;
                const int xs[2] = {x0, x0 + 1}, ys[2] = {y0, y0 + 1};
                const double wx[2] = {1 - tx, tx}, wy[2] = {1 - ty, ty};
                for (int q = 0; q < 2; ++q)
                    for (int p = 0; p < 2; ++p) {
                        if (std::abs(xs[p]) > r || std::abs(ys[q]) > r) continue;
                        const double w = wx[p] * wy[q];
                        dense[static_cast<std::size_t>((ys[q] + r) * side + xs[p] + r)] += w;
                        total += w;
                    }
            }
            auto& taps = k.taps[a][static_cast<std::size_t>(c)];
            if (total <= 0.0) {
                taps.push_back({0, 0, 1.0});
                continue;
            }
            for (int y = 0; y < side; ++y)
                for (int x = 0; x < side; ++x) {
                    const double w = dense[static_cast<std::size_t>(y * side + x)];
                    if (w > 0.0) taps.push_back({x - r, y - r, w / total});
                }
        }
    }
    return k;
}

void check_options(const RenderOptions& o) {
    if (o.width_px < 1 || o.height_px < 1) throw InvalidArgument("render: resolution must be positive");
    if (o.psf_grid < 1) throw InvalidArgument("render: psf_grid must be at least 1");
    if (o.psf_rays < 1) throw InvalidArgument("render: psf_rays must be positive");
    if (o.max_kernel_radius_px < 0) throw InvalidArgument("render: max_kernel_radius_px must be non-negative");
}

}  // namespace

Image render_warp(const Scene& scene, const optics::OpticalSystem& system, const zernike::Expansion& plate,
                  const RenderOptions& o) {
    check_options(o);
    scene.validate();
    const WarpedScene w = warp_scene(scene, system, plate, o, 0);
    Image out(o.width_px, o.height_px, 3);
    for (int c = 0; c < 3; ++c) std::copy(w.planes[static_cast<std::size_t>(c)].begin(),
                                          w.planes[static_cast<std::size_t>(c)].end(), out.plane(c));
    return out;
}

Image render(const Scene& scene, const optics::OpticalSystem& system, const zernike::Expansion& plate,
             const RenderOptions& o, std::vector<std::string>* warnings) {
    check_options(o);
    scene.validate();
    const double depth = scene_depth(scene, system);
    const AnchorKernels k = build_kernels(system, plate, depth, o, warnings);
    const WarpedScene w = warp_scene(scene, system, plate, o, k.radius);
    const int g = k.grid;
    Image out(o.width_px, o.height_px, 3);
    const double hw = system.config().sensor.width_mm() / 2, hh = system.config().sensor.height_mm() / 2;
    parallel_for(static_cast<std::size_t>(o.height_px), [&](std::size_t rr) {
        const int row = static_cast<int>(rr);
        for (int col = 0; col < o.width_px; ++col) {
            const Vec2 s = pixel_to_sensor(system, o, col, row);
            const double fu = g > 1 ? std::clamp((s.x() + hw) / (2 * hw) * (g - 1), 0.0, g - 1.0) : 0.0;
            const double fv = g > 1 ? std::clamp((s.y() + hh) / (2 * hh) * (g - 1), 0.0, g - 1.0) : 0.0;
            const int a0 = std::min(static_cast<int>(fu), std::max(g - 2, 0));
            const int b0 = std::min(static_cast<int>(fv), std::max(g - 2, 0));
            const double tu = fu - a0, tv = fv - b0;
            const int a1 = std::min(a0 + 1, g - 1), b1 = std::min(b0 + 1, g - 1);
            const std::pair<int, double> anchors[4] = {{b0 * g + a0, (1 - tu) * (1 - tv)},
                                                       {b0 * g + a1, tu * (1 - tv)},
                                                       {b1 * g + a0, (1 - tu) * tv},
                                                       {b1 * g + a1, tu * tv}};
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (const auto& [a, wa] : anchors) {
                    if (wa == 0.0) continue;
                    double v = 0.0;
                    for (const Tap& t : k.taps[static_cast<std::size_t>(a)][static_cast<std::size_t>(c)])
                        v += t.w * w.at(c, row + w.pad - t.dy, col + w.pad - t.dx);
                    acc += wa * v;
                }
                out.at(c, row, col) = acc;
            }
        }
    });
    if (o.noise_sigma > 0.0) {
        std::mt19937_64 rng(o.noise_seed);
        std::normal_distribution<double> n(0.0, o.noise_sigma);
        for (double& v : out.data) v += n(rng);
    }
    return out;
}

Image render_layers(std::span<const Scene> layers, const optics::OpticalSystem& system,
                    const zernike::Expansion& plate, const RenderOptions& options) {
    if (layers.empty()) throw InvalidArgument("render_layers: no layers");
    Image out;
    for (const Scene& s : layers) {
        Image r = render(s, system, plate, options);
        if (out.empty()) {
            out = std::move(r);
        } else {
            for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += r.data[i];
        }
    }
    return out;
}

FoveaStack render_stack(const Scene& scene, const optics::OpticalSystem& system, const optimize::PatternSet& set,
                        const RenderOptions& options) {
    if (set.patterns.empty()) throw InvalidArgument("render_stack: empty pattern set");
    FoveaStack stack;
    stack.patterns = set;
    stack.depth_mm = scene_depth(scene, system);
    for (const auto& p : set.patterns) stack.images.push_back(render(scene, system, p, options));
    return stack;
}

// ---------------------------------------------------------------- textures

Image checkerboard_texture(int width, int height, int squares) {
    if (width < 1 || height < 1 || squares < 1) throw InvalidArgument("checkerboard_texture: invalid size");
    Image img(width, height, 3);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            const int cx = x * squares / width, cy = y * squares / height;
            const double v = ((cx + cy) % 2 == 0) ? 0.9 : 0.1;
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = v;
        }
    return img;
}

Image dot_grid_texture(int width, int height, int dots) {
    if (width < 1 || height < 1 || dots < 1) throw InvalidArgument("dot_grid_texture: invalid size");
    Image img(width, height, 3, 0.9);
    const double cell_x = static_cast<double>(width) / dots, cell_y = static_cast<double>(height) / dots;
    const double sigma = 0.12 * std::min(cell_x, cell_y);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            const double u = (x + 0.5) / cell_x, v = (y + 0.5) / cell_y;
            const double dx = (u - std::floor(u) - 0.5) * cell_x, dy = (v - std::floor(v) - 0.5) * cell_y;
            const double val = 0.9 - 0.8 * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = val;
        }
    return img;
}

Image natural_texture(int width, int height, std::uint64_t seed) {
    if (width < 1 || height < 1) throw InvalidArgument("natural_texture: invalid size");
    // Dead-leaves model: occluding discs with a power-law size distribution.
    Image img(width, height, 3, 0.5);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const double rmin = 1.5, rmax = 0.15 * std::max(width, height);
    const int count = std::max(200, width * height / 60);
    for (int n = 0; n < count; ++n) {
        const double cx = uni(rng) * width, cy = uni(rng) * height;
        // p(r) ~ r^-3 via inverse CDF
        const double u = uni(rng);
        const double r = 1.0 / std::sqrt((1 - u) / (rmin * rmin) + u / (rmax * rmax));
        double col[3];
        const double base = 0.1 + 0.8 * uni(rng);
        for (double& c : col) c = std::clamp(base + 0.25 * (uni(rng) - 0.5), 0.0, 1.0);
        const int x0 = std::max(0, static_cast<int>(cx - r - 1)), x1 = std::min(width - 1, static_cast<int>(cx + r + 1));
        const int y0 = std::max(0, static_cast<int>(cy - r - 1)), y1 = std::min(height - 1, static_cast<int>(cy + r + 1));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
                const double cover = std::clamp(r - d + 0.5, 0.0, 1.0);
                if (cover <= 0.0) continue;
                for (int c = 0; c < 3; ++c) img.at(c, y, x) = (1 - cover) * img.at(c, y, x) + cover * col[c];
            }
    }
    return img;
}

}  // namespace fovea::imaging
