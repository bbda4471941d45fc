#include "fovea/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <queue>

#include "fovea/common.hpp"
#include "fovea/parallel.hpp"

namespace fovea::analysis {

namespace {

constexpr double kSlopePerUmPerMm = 1e-3;  // um of OPD per mm -> dimensionless slope

double field_angle_deg(const Vec3& p) {
    return std::atan2(std::hypot(p.x(), p.y()), -p.z()) * 180.0 / std::numbers::pi;
}

int rings_for_count(int rays) {
    int r = 0;
    while (optics::hexapolar_count(r) < rays) ++r;
    return r;
}

}  // namespace

double spot_size_um(std::span<const std::vector<Vec2>> hits, Vec2* centroid_mm) {
    Vec2 c = Vec2::Zero();
    std::size_t total = 0;
    for (const auto& h : hits) {
        for (const auto& p : h) c += p;
        total += h.size();
    }
    if (total == 0) throw InvalidArgument("spot_size_um: no alive rays");
    c /= static_cast<double>(total);
    if (centroid_mm) *centroid_mm = c;
    double sum = 0.0;
    int lambdas = 0;
    for (const auto& h : hits) {
        if (h.empty()) continue;
        double s = 0.0;
        for (const auto& p : h) s += (p - c).norm();
        sum += s / static_cast<double>(h.size());
        ++lambdas;
    }
    return 1000.0 * sum / lambdas;
}

SpotResult rms_spot(const optics::OpticalSystem& system, const zernike::Expansion& plate, const Vec3& object_point,
                    int rings) {
    std::vector<std::vector<Vec2>> hits(static_cast<std::size_t>(system.wavelength_count()));
    SpotResult out;
    for (int w = 0; w < system.wavelength_count(); ++w) {
        const double nm = system.wavelengths_nm()[static_cast<std::size_t>(w)];
        for (const auto& ray : optics::sample_aperture(system, object_point, rings, nm)) {
            ++out.total;
            if (auto p = optics::trace(system, ray, plate)) hits[static_cast<std::size_t>(w)].push_back(*p);
        }
    }
    for (const auto& h : hits) out.alive += static_cast<int>(h.size());
    out.vignetted = 2 * out.alive < out.total;
    if (out.alive == 0) {
        out.r_um = std::numeric_limits<double>::quiet_NaN();
        return out;
    }
    out.r_um = spot_size_um(hits, &out.centroid_mm);
    return out;
}

// ---------------------------------------------------------------- SpotEvaluator

SpotEvaluator::SpotEvaluator(const optics::OpticalSystem& system, std::vector<Vec3> object_points, int max_order,
                             int rings)
    : system_(&system),
      points_(std::move(object_points)),
      max_order_(max_order),
      terms_(zernike::term_count(max_order)),
      rays_per_point_(optics::hexapolar_count(rings)) {
    const auto& basis = zernike::Basis::get(max_order);
    const double r_ap = system.plate_aperture_radius_mm();
    const auto k = static_cast<std::size_t>(terms_);
    rays_.resize(points_.size() * static_cast<std::size_t>(rays_per_point_));
    basis_grad_.resize(rays_.size() * 2 * k);
    std::vector<double> gu(k), gv(k);
    std::size_t idx = 0;
    for (const Vec3& p : points_) {
        for (const auto& ray : optics::sample_aperture(system, p, rings, system.wavelengths_nm()[0])) {
            const double t = (system.plate_z_mm() - ray.origin.z()) / ray.direction.z();
            const double x = ray.origin.x() + t * ray.direction.x();
            const double y = ray.origin.y() + t * ray.direction.y();
            rays_[idx] = {x, y, ray.direction.x(), ray.direction.y()};
            basis.gradients(x / r_ap, y / r_ap, gu, gv);
            double* g = &basis_grad_[idx * 2 * k];
            for (std::size_t j = 0; j < k; ++j) {
                g[j] = kSlopePerUmPerMm * gu[j] / r_ap;
                g[k + j] = kSlopePerUmPerMm * gv[j] / r_ap;
            }
            ++idx;
        }
    }
}

SpotResult SpotEvaluator::evaluate(std::size_t i, const zernike::Expansion& plate, std::span<double> grad) const {
    if (plate.max_order() != max_order_) throw InvalidArgument("SpotEvaluator: expansion order mismatch");
    if (std::abs(plate.aperture_radius_mm() - system_->plate_aperture_radius_mm()) > 1e-12)
        throw InvalidArgument("SpotEvaluator: plate aperture differs from the system stop");
    const bool want_grad = !grad.empty();
    if (want_grad && grad.size() != static_cast<std::size_t>(terms_))
        throw InvalidArgument("SpotEvaluator: gradient span has the wrong size");

    const auto k = static_cast<std::size_t>(terms_);
    const auto n = static_cast<std::size_t>(rays_per_point_);
    const int wl = system_->wavelength_count();
    const auto w = plate.coeffs();

    struct Hit {
        Vec2 p;
        Eigen::Matrix2d j;
        bool alive;
    };
    // Hits stored [wavelength][ray].
    std::vector<Hit> hits(static_cast<std::size_t>(wl) * n);
    std::vector<int> alive_count(static_cast<std::size_t>(wl), 0);
    std::vector<double> sx(n), sy(n);
    const PlateRay* rays = &rays_[i * n];
    const double* bg = &basis_grad_[i * n * 2 * k];
    for (std::size_t r = 0; r < n; ++r) {
        double gx = 0.0, gy = 0.0;
        const double* g = bg + r * 2 * k;
        for (std::size_t j = 0; j < k; ++j) {
            gx += w[j] * g[j];
            gy += w[j] * g[k + j];
        }
        sx[r] = gx;
        sy[r] = gy;
    }

    SpotResult out;
    out.total = wl * static_cast<int>(n);
    Vec2 centroid = Vec2::Zero();
    for (int l = 0; l < wl; ++l) {
        for (std::size_t r = 0; r < n; ++r) {
            Hit& h = hits[static_cast<std::size_t>(l) * n + r];
            const double a = rays[r].alpha + sx[r];
            const double b = rays[r].beta + sy[r];
            h.alive = optics::trace_from_plate(*system_, l, rays[r].x, rays[r].y, a, b, h.p,
                                               want_grad ? &h.j : nullptr);
            if (h.alive) {
                centroid += h.p;
                ++alive_count[static_cast<std::size_t>(l)];
            }
        }
    }
    for (int c : alive_count) out.alive += c;
    out.vignetted = 2 * out.alive < out.total;
    if (want_grad) std::fill(grad.begin(), grad.end(), 0.0);
    if (out.alive == 0) {
        out.r_um = std::numeric_limits<double>::quiet_NaN();
        return out;
    }
    centroid /= out.alive;
    out.centroid_mm = centroid;

    int lambdas = 0;
    for (int c : alive_count) lambdas += c > 0 ? 1 : 0;

    double sum = 0.0;
    Vec2 mean_cu = Vec2::Zero();  // sum over rays of c_l * u
    std::vector<Vec2> u(hits.size(), Vec2::Zero());
    for (int l = 0; l < wl; ++l) {
        const int cnt = alive_count[static_cast<std::size_t>(l)];
        if (cnt == 0) continue;
        const double c = 1.0 / (static_cast<double>(lambdas) * cnt);
        for (std::size_t r = 0; r < n; ++r) {
            const std::size_t idx = static_cast<std::size_t>(l) * n + r;
            if (!hits[idx].alive) continue;
            const Vec2 d = hits[idx].p - centroid;
            const double len = d.norm();
            sum += c * len;
            if (want_grad && len > 0.0) {
                u[idx] = c * d / len;
                mean_cu += u[idx];
            }
        }
    }
    out.r_um = 1000.0 * sum;
    if (!want_grad) return out;

    // dr/dp_i = c_l u_i - (1/N) sum c u ; chain through dp/d(alpha,beta) and the basis slopes.
    mean_cu /= out.alive;
    for (std::size_t r = 0; r < n; ++r) {
        Vec2 dir = Vec2::Zero();  // d r / d(alpha, beta) for this plate ray, summed over wavelengths
        for (int l = 0; l < wl; ++l) {
            const std::size_t idx = static_cast<std::size_t>(l) * n + r;
            if (!hits[idx].alive) continue;
            dir += hits[idx].j.transpose() * (u[idx] - mean_cu);
        }
        if (dir.x() == 0.0 && dir.y() == 0.0) continue;
        const double* g = bg + r * 2 * k;
        for (std::size_t j = 0; j < k; ++j) grad[j] += 1000.0 * (dir.x() * g[j] + dir.y() * g[k + j]);
    }
    return out;
}

std::vector<double> SpotEvaluator::evaluate_all(const zernike::Expansion& plate) const {
    std::vector<double> r(points_.size());
    parallel_for(points_.size(), [&](std::size_t i) {
        const SpotResult s = evaluate(i, plate);
        r[i] = s.vignetted ? std::numeric_limits<double>::quiet_NaN() : s.r_um;
    });
    return r;
}

// ---------------------------------------------------------------- PSF

double Psf::second_moment_um2() const {
    double m = 0.0;
    const double c = support / 2;
    for (int ch = 0; ch < 3; ++ch) {
        double mc = 0.0;
        for (int row = 0; row < support; ++row)
            for (int col = 0; col < support; ++col)
                mc += at(ch, row, col) * ((row - c) * (row - c) + (col - c) * (col - c));
        m += kLuminanceWeights[static_cast<std::size_t>(ch)] * mc;
    }
    return m * pixel_pitch_um * pixel_pitch_um;
}

Psf psf_render(const optics::OpticalSystem& system, const zernike::Expansion& plate, const Vec3& object_point,
               const PsfOptions& options) {
    if (options.support < 2 || options.pixel_pitch_um <= 0.0 || options.rays < 1)
        throw InvalidArgument("psf_render: invalid options");
    if (system.wavelength_count() != 3) throw InvalidArgument("psf_render: three wavelengths expected");
    const int rings = rings_for_count(options.rays);

    std::array<std::vector<Vec2>, 3> hits;
    Vec2 centroid = Vec2::Zero();
    std::size_t alive = 0;
    for (int w = 0; w < 3; ++w) {
        const double nm = system.wavelengths_nm()[static_cast<std::size_t>(w)];
        for (const auto& ray : optics::sample_aperture(system, object_point, rings, nm)) {
            if (auto p = optics::trace(system, ray, plate)) {
                hits[static_cast<std::size_t>(w)].push_back(*p);
                centroid += *p;
                ++alive;
            }
        }
    }
    if (alive == 0) throw Error("psf_render: every ray was vignetted");
    centroid /= static_cast<double>(alive);

    Psf psf;
    psf.support = options.support;
    psf.pixel_pitch_um = options.pixel_pitch_um;
    psf.centroid_mm = centroid;
    psf.field_angle_deg = field_angle_deg(object_point);
    psf.rho = system.effective_focal_length_mm() * std::tan(psf.field_angle_deg * std::numbers::pi / 180.0) /
              system.half_diagonal_mm();
    if (options.frame == PsfFrame::Radial && centroid.norm() > 1e-9)
        psf.frame_angle_rad = std::atan2(centroid.y(), centroid.x());
    const double ca = std::cos(psf.frame_angle_rad), sa = std::sin(psf.frame_angle_rad);
    const int s = options.support;
    const double pitch_mm = options.pixel_pitch_um * 1e-3;
    for (int w = 0; w < 3; ++w) {
        auto& img = psf.channels[static_cast<std::size_t>(w)];
        img.assign(static_cast<std::size_t>(s * s), 0.0);
        double total = 0.0;
        for (const Vec2& p : hits[static_cast<std::size_t>(w)]) {
            const Vec2 d = p - centroid;
            const double xr = (ca * d.x() + sa * d.y()) / pitch_mm;
            const double yr = (-sa * d.x() + ca * d.y()) / pitch_mm;
            const int col = static_cast<int>(std::floor(xr + 0.5)) + s / 2;
            const int row = static_cast<int>(std::floor(yr + 0.5)) + s / 2;
            if (col < 0 || col >= s || row < 0 || row >= s) continue;
            img[static_cast<std::size_t>(row * s + col)] += 1.0;
            total += 1.0;
        }
        if (total == 0.0) throw Error("psf_render: empty histogram for a channel");
        for (double& v : img) v /= total;
    }
    return psf;
}

// ---------------------------------------------------------------- MTF

namespace {

std::vector<double> lsf_mtf(const std::vector<double>& lsf) {
    const int s = static_cast<int>(lsf.size());
    double dc = 0.0;
    for (double v : lsf) dc += v;
    std::vector<double> out(static_cast<std::size_t>(s / 2 + 1));
    for (int k = 0; k <= s / 2; ++k) {
        std::complex<double> acc = 0.0;
        for (int i = 0; i < s; ++i) {
            const double ph = -2.0 * std::numbers::pi * k * (i - s / 2) / s;
            acc += lsf[static_cast<std::size_t>(i)] * std::complex<double>(std::cos(ph), std::sin(ph));
        }
        out[static_cast<std::size_t>(k)] = dc > 0.0 ? std::abs(acc) / dc : 0.0;
    }
    return out;
}

}  // namespace

MtfCurve mtf_from_psf(const Psf& psf) {
    const int s = psf.support;
    std::vector<double> tan_lsf(static_cast<std::size_t>(s), 0.0), sag_lsf(static_cast<std::size_t>(s), 0.0);
    for (int row = 0; row < s; ++row) {
        for (int col = 0; col < s; ++col) {
            double g = 0.0;
            for (int ch = 0; ch < 3; ++ch) g += kLuminanceWeights[static_cast<std::size_t>(ch)] * psf.at(ch, row, col);
            tan_lsf[static_cast<std::size_t>(col)] += g;  // x axis is radial in the radial frame
            sag_lsf[static_cast<std::size_t>(row)] += g;
        }
    }
    MtfCurve c;
    c.tangential = lsf_mtf(tan_lsf);
    c.sagittal = lsf_mtf(sag_lsf);
    c.field_angle_deg = psf.field_angle_deg;
    c.rho = psf.rho;
    const double span_mm = s * psf.pixel_pitch_um * 1e-3;
    for (std::size_t k = 0; k < c.tangential.size(); ++k) {
        c.frequencies_lpmm.push_back(static_cast<double>(k) / span_mm);
        c.mean.push_back(0.5 * (c.tangential[k] + c.sagittal[k]));
    }
    return c;
}

Mtf50 mtf50(const MtfCurve& curve) {
    for (std::size_t k = 1; k < curve.mean.size(); ++k) {
        if (curve.mean[k] < 0.5) {
            const double m0 = curve.mean[k - 1], m1 = curve.mean[k];
            const double f0 = curve.frequencies_lpmm[k - 1], f1 = curve.frequencies_lpmm[k];
            return {f0 + (0.5 - m0) / (m1 - m0) * (f1 - f0), false};
        }
    }
    return {curve.frequencies_lpmm.empty() ? 0.0 : curve.frequencies_lpmm.back(), true};
}

// ---------------------------------------------------------------- coverage

double PolarGrid::theta(int j) const {
    return -std::numbers::pi + 2.0 * std::numbers::pi * j / theta_nodes;
}

double CoverageMap::interpolate(double rho, double theta) const {
    const int nr = grid.rho_nodes, nt = grid.theta_nodes;
    const double fr = std::clamp(rho, 0.0, 1.0) * (nr - 1);
    const int i0 = std::min(static_cast<int>(std::floor(fr)), std::max(nr - 2, 0));
    const double tr = nr > 1 ? fr - i0 : 0.0;
    const int i1 = std::min(i0 + 1, nr - 1);
    double ft = (theta + std::numbers::pi) / (2.0 * std::numbers::pi) * nt;
    ft -= nt * std::floor(ft / nt);
    const int j0 = static_cast<int>(std::floor(ft)) % nt;
    const int j1 = (j0 + 1) % nt;
    const double tt = ft - std::floor(ft);
    const double a = (1 - tt) * at(i0, j0) + tt * at(i0, j1);
    const double b = (1 - tt) * at(i1, j0) + tt * at(i1, j1);
    return (1 - tr) * a + tr * b;
}

CoverageRegion threshold_region(const CoverageMap& map, double threshold,
                                std::optional<std::pair<double, double>> target) {
    const int nr = map.grid.rho_nodes, nt = map.grid.theta_nodes;
    const auto idx = [nt](int i, int j) { return static_cast<std::size_t>(i * nt + j); };
    std::vector<char> above(static_cast<std::size_t>(nr * nt)), in(static_cast<std::size_t>(nr * nt), 0);
    for (int i = 0; i < nr; ++i)
        for (int j = 0; j < nt; ++j) above[idx(i, j)] = map.at(i, j) >= threshold;

    if (target) {
        const int ti = std::clamp(static_cast<int>(std::lround(target->first * (nr - 1))), 0, nr - 1);
        double ft = (target->second + std::numbers::pi) / (2.0 * std::numbers::pi) * nt;
        int tj = static_cast<int>(std::lround(ft)) % nt;
        if (tj < 0) tj += nt;
        if (above[idx(ti, tj)]) {
            std::queue<std::pair<int, int>> q;
            q.push({ti, tj});
            in[idx(ti, tj)] = 1;
            while (!q.empty()) {
                auto [i, j] = q.front();
                q.pop();
                std::vector<std::pair<int, int>> nb{{i, (j + 1) % nt}, {i, (j + nt - 1) % nt}};
                if (i > 0) nb.push_back({i - 1, j});
                if (i + 1 < nr) nb.push_back({i + 1, j});
                if (i == 0)  // the center nodes are one physical point
                    for (int jj = 0; jj < nt; ++jj) nb.push_back({0, jj});
                for (auto [a, b] : nb) {
                    if (above[idx(a, b)] && !in[idx(a, b)]) {
                        in[idx(a, b)] = 1;
                        q.push({a, b});
                    }
                }
            }
        }
    } else {
        in = above;
    }

    CoverageRegion reg;
    const double drho = nr > 1 ? 1.0 / (nr - 1) : 1.0;
    const double dtheta = 2.0 * std::numbers::pi / nt;
    std::vector<char> col_used(static_cast<std::size_t>(nt), 0);
    reg.rho_min = 1.0;
    for (int i = 0; i < nr; ++i) {
        const double rho = map.grid.rho(i);
        const double lo = std::max(0.0, rho - drho / 2), hi = std::min(1.0, rho + drho / 2);
        for (int j = 0; j < nt; ++j) {
            if (!in[idx(i, j)]) continue;
            ++reg.nodes;
            reg.area += 0.5 * (hi * hi - lo * lo) * dtheta;
            reg.rho_min = std::min(reg.rho_min, rho);
            reg.rho_max = std::max(reg.rho_max, rho);
            col_used[static_cast<std::size_t>(j)] = 1;
        }
    }
    reg.found = reg.nodes > 0;
    if (!reg.found) {
        reg.rho_min = 0.0;
        return reg;
    }
    // Smallest circular arc holding every used theta column.
    std::vector<int> used;
    for (int j = 0; j < nt; ++j)
        if (col_used[static_cast<std::size_t>(j)]) used.push_back(j);
    int best_gap = 0, start = used.front();
    for (std::size_t a = 0; a < used.size(); ++a) {
        const int next = used[(a + 1) % used.size()];
        int gap = (next - used[a] + nt) % nt;
        if (gap == 0) gap = nt;
        if (gap > best_gap) {
            best_gap = gap;
            start = next;
        }
    }
    const int cells = nt - best_gap + 1;
    reg.theta_extent = std::min(cells, nt) * dtheta;
    reg.theta_min = map.grid.theta(start) - dtheta / 2;
    reg.theta_max = reg.theta_min + reg.theta_extent;
    return reg;
}

CoverageMap coverage_map(const optics::OpticalSystem& system, const zernike::Expansion& plate,
                         const CoverageOptions& options) {
    if (options.grid.rho_nodes < 1 || options.grid.theta_nodes < 1) throw InvalidArgument("coverage_map: empty grid");
    CoverageMap map;
    map.grid = options.grid;
    map.threshold_lpmm = options.threshold_lpmm;
    const int nr = map.grid.rho_nodes, nt = map.grid.theta_nodes;
    const double depth = options.depth_mm > 0.0 ? options.depth_mm : system.object_distance_mm();
    map.mtf50.assign(static_cast<std::size_t>(nr * nt), 0.0);
    parallel_for(static_cast<std::size_t>(nr * nt), [&](std::size_t n) {
        const int i = static_cast<int>(n) / nt, j = static_cast<int>(n) % nt;
        if (map.grid.rho(i) == 0.0 && j > 0) return;  // filled from j = 0 below
        const Vec3 p = optics::field_point(system, map.grid.rho(i), map.grid.theta(j), depth);
        map.mtf50[n] = mtf50(mtf_from_psf(psf_render(system, plate, p, options.psf))).lpmm;
    });
    for (int i = 0; i < nr; ++i)
        if (map.grid.rho(i) == 0.0)
            for (int j = 1; j < nt; ++j) map.mtf50[static_cast<std::size_t>(i * nt + j)] = map.at(i, 0);
    map.region = threshold_region(map, options.threshold_lpmm, options.target);
    return map;
}

ImagesNeeded images_needed(const optics::OpticalSystem& system, double threshold,
                           std::span<const LibraryEntry> library, const BudgetOptions& options) {
    if (library.empty()) throw InvalidArgument("images_needed: empty pattern library");
    if (options.lattice < 1 || options.rotations < 1) throw InvalidArgument("images_needed: invalid options");
    const auto& sensor = system.config().sensor;
    const double hw = sensor.width_mm() / 2, hh = sensor.height_mm() / 2, r = system.half_diagonal_mm();
    const int l = options.lattice;
    std::vector<std::pair<double, double>> cells;  // (rho, theta)
    for (int a = 0; a < l; ++a) {
        for (int b = 0; b < l; ++b) {
            const double x = -hw + (b + 0.5) * 2 * hw / l;
            const double y = -hh + (a + 0.5) * 2 * hh / l;
            cells.push_back({std::hypot(x, y) / r, std::atan2(y, x)});
        }
    }
    struct Candidate {
        int entry;
        double angle;
        std::vector<char> covers;
    };
    std::vector<Candidate> cands;
    for (std::size_t e = 0; e < library.size(); ++e) {
        const int rots = library[e].rho == 0.0 ? 1 : options.rotations;
        for (int k = 0; k < rots; ++k) {
            Candidate c{static_cast<int>(e), 2.0 * std::numbers::pi * k / rots, {}};
            c.covers.resize(cells.size());
            for (std::size_t q = 0; q < cells.size(); ++q)
                c.covers[q] = library[e].map.interpolate(cells[q].first, cells[q].second - c.angle) >= threshold;
            cands.push_back(std::move(c));
        }
    }
    ImagesNeeded out;
    out.cells = static_cast<int>(cells.size());
    std::vector<char> covered(cells.size(), 0);
    for (std::size_t q = 0; q < cells.size(); ++q) {
        bool any = false;
        for (const auto& c : cands) any = any || c.covers[q];
        if (!any) {
            covered[q] = 1;
            ++out.uncoverable;
        }
    }
    while (true) {
        int best = -1, best_gain = 0;
        for (std::size_t ci = 0; ci < cands.size(); ++ci) {
            int gain = 0;
            for (std::size_t q = 0; q < cells.size(); ++q) gain += (!covered[q] && cands[ci].covers[q]) ? 1 : 0;
            if (gain > best_gain) {
                best_gain = gain;
                best = static_cast<int>(ci);
            }
        }
        if (best < 0) break;
        const auto& c = cands[static_cast<std::size_t>(best)];
        for (std::size_t q = 0; q < cells.size(); ++q) covered[q] = covered[q] || c.covers[q];
        out.chosen.push_back({c.entry, c.angle});
    }
    out.count = static_cast<int>(out.chosen.size());
    return out;
}

}  // namespace fovea::analysis
