#include "fovea/calibrate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fovea/common.hpp"
#include "fovea/fusion.hpp"
#include "fovea/parallel.hpp"

namespace fovea::calibrate {

Assembly staged(const Assembly& a, const StageOffset& o) {
    Assembly s = a;
    s.d_img_mm += o.dz_mm;
    s.c_img_mm += Vec2(o.dx_mm, o.dy_mm);
    return s;
}

void Problem::validate() const {
    if (captures.empty()) throw InvalidArgument("calibration needs captures");
    std::set<int> pats;
    std::set<std::array<double, 3>> stages;
    for (const auto& c : captures) {
        if (c.pattern < 0 || c.pattern >= static_cast<int>(patterns.size()))
            throw InvalidArgument("capture references an unknown pattern");
        if (c.image.width != render.width_px || c.image.height != render.height_px)
            throw InvalidArgument("capture size does not match the render resolution");
        pats.insert(c.pattern);
        stages.insert({c.offset.dx_mm, c.offset.dy_mm, c.offset.dz_mm});
    }
    if (pats.size() < 2) throw InvalidArgument("calibration needs at least two distinct plate patterns");
    if (stages.size() < 2) throw InvalidArgument("calibration needs at least two stage positions");
    if (target && (target->pattern < 0 || target->pattern >= static_cast<int>(patterns.size())))
        throw InvalidArgument("target references an unknown pattern");
    scene.validate();
}

namespace {

imaging::Scene at_system_depth(imaging::Scene s) {
    s.depth_mm = 0.0;  // follow the (staged) system object distance
    return s;
}

imaging::RenderOptions noiseless(imaging::RenderOptions o) {
    o.noise_sigma = 0.0;
    return o;
}

}  // namespace

std::vector<Capture> synthesize_captures(const optics::SystemConfig& config, const Assembly& truth,
                                         const imaging::Scene& scene, const std::vector<zernike::Expansion>& patterns,
                                         const std::vector<StageOffset>& offsets,
                                         const imaging::RenderOptions& render) {
    const optics::OpticalSystem base(config);
    const imaging::Scene sc = at_system_depth(scene);
    std::vector<Capture> out;
    for (std::size_t p = 0; p < patterns.size(); ++p)
        for (const auto& o : offsets) {
            imaging::RenderOptions ro = render;
            ro.noise_seed = render.noise_seed + out.size();
            out.push_back({imaging::render(sc, base.with_assembly(staged(truth, o)), patterns[p], ro),
                           static_cast<int>(p), o});
        }
    return out;
}

ParamVector to_params(const Assembly& a) {
    return {a.d_dpp_mm, a.d_sensor_mm, a.d_img_mm, a.c_img_mm.x(), a.c_img_mm.y()};
}

Assembly from_params(const ParamVector& p) {
    Assembly a;
    a.d_dpp_mm = p[0];
    a.d_sensor_mm = p[1];
    a.d_img_mm = p[2];
    a.c_img_mm = Vec2(p[3], p[4]);
    return a;
}

double mean_ssim(const Problem& problem, const Assembly& a, std::vector<double>* per_image) {
    const optics::OpticalSystem base(problem.config);
    const imaging::Scene sc = at_system_depth(problem.scene);
    const imaging::RenderOptions ro = noiseless(problem.render);
    std::vector<double> s(problem.captures.size(), 0.0);
    parallel_for(problem.captures.size(), [&](std::size_t i) {
        const Capture& c = problem.captures[i];
        try {
            const Image r = imaging::render(sc, base.with_assembly(staged(a, c.offset)),
                                            problem.patterns[static_cast<std::size_t>(c.pattern)], ro);
            s[i] = fusion::ssim(r, c.image);
        } catch (const InvalidArgument&) {
            throw;
        } catch (const Error&) {
            s[i] = 0.0;  // geometry the tracer cannot image counts as a total mismatch
        }
    });
    if (per_image) *per_image = s;
    double sum = 0.0;
    for (double v : s) sum += v;
    return sum / static_cast<double>(s.size());
}

namespace {

class Search {
public:
    Search(const Problem& p, const Options& o, ParamVector start) : problem_(p), opt_(o), x_(start) {
        for (int i = 0; i < kParameters; ++i)
            if (o.free[static_cast<std::size_t>(i)]) index_.push_back(i);
        best_ = value(x_);
    }

    double best() const { return best_; }
    const ParamVector& x() const { return x_; }
    int evaluations() const { return evaluations_; }
    std::size_t dims() const { return index_.size(); }

    /// Point at step t along direction d (scaled coordinates) from x.
    ParamVector along(const ParamVector& x, const Eigen::VectorXd& d, double t) const {
        ParamVector y = x;
        for (std::size_t k = 0; k < index_.size(); ++k) {
            const auto i = static_cast<std::size_t>(index_[k]);
            y[i] += t * d[static_cast<Eigen::Index>(k)] * opt_.initial_step[i];
        }
        return y;
    }

    double resolution(const Eigen::VectorXd& d) const {
        double r = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < index_.size(); ++k) {
            const auto i = static_cast<std::size_t>(index_[k]);
            const double dk = std::abs(d[static_cast<Eigen::Index>(k)]);
            if (dk > 1e-12) r = std::min(r, opt_.tolerance[i] / (opt_.initial_step[i] * dk));
        }
        return r;
    }

    /// Brent line search (golden section with parabolic steps) on [-h, h]
    /// around x, re-centred and repeated when the optimum lands on the bracket
    /// edge. Moves x only when the mean SSIM rises.
    double line_search(const Eigen::VectorXd& d, double h) {
        const double tol = resolution(d);
        double center = 0.0;
        double best_t = 0.0, best_v = best_;
        for (int widen = 0; widen < 4; ++widen) {
            brent(d, center - h, center + h, center, best_v, tol, best_t, best_v);
            const double edge = std::min(std::abs(best_t - (center - h)), std::abs(best_t - (center + h)));
            if (edge > 2.0 * tol || best_t == 0.0) break;
            center = best_t;
        }
        const double gain = best_v - best_;
        if (gain > 0.0) {
            x_ = along(x_, d, best_t);
            best_ = best_v;
            trace.push_back(best_);
        }
        return std::max(gain, 0.0);
    }

    /// Line search along the Newton direction of a finite-difference quadratic
    /// model (step `fd` in scaled units). Needs about (n + 1)(n + 2) / 2 + n
    /// evaluations; worth it in the narrow d_dpp / d_img valley where
    /// direction sets crawl.
    double newton_step(double fd) {
        const auto n = static_cast<Eigen::Index>(index_.size());
        const auto unit = [&](Eigen::Index k) { return Eigen::VectorXd::Unit(n, k); };
        const double f0 = best_;
        Eigen::VectorXd g(n), fp(n), fm(n);
        Eigen::MatrixXd H(n, n);
        for (Eigen::Index i = 0; i < n; ++i) {
            fp[i] = value(along(x_, unit(i), fd));
            fm[i] = value(along(x_, unit(i), -fd));
            g[i] = (fp[i] - fm[i]) / (2.0 * fd);
            H(i, i) = (fp[i] - 2.0 * f0 + fm[i]) / (fd * fd);
        }
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = i + 1; j < n; ++j) {
                const double fij = value(along(along(x_, unit(i), fd), unit(j), fd));
                H(i, j) = H(j, i) = (fij - fp[i] - fp[j] + f0) / (fd * fd);
            }
        // maximizing: force the model concave before inverting
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(H);
        Eigen::VectorXd lam = eig.eigenvalues();
        const double floor = 1e-6 + 1e-3 * lam.cwiseAbs().maxCoeff();
        for (Eigen::Index k = 0; k < n; ++k) lam[k] = -std::max(-lam[k], floor);
        const Eigen::VectorXd p = -(eig.eigenvectors() * lam.cwiseInverse().asDiagonal() * eig.eigenvectors().transpose()) * g;
        const double len = p.norm();
        if (!(len > 1e-12) || !std::isfinite(len)) return 0.0;
        return line_search(p / len, 1.5 * len);
    }

    std::vector<double> trace;

private:
    // Maximizes SSIM along d on [a, b]; x0 lies inside with known value v0.
    void brent(const Eigen::VectorXd& dir, double a, double b, double x0, double v0, double tol, double& best_t,
               double& best_v) {
        const double cgold = 0.3819660112501051;
        double x = x0, w = x0, v = x0;
        double fx = -v0, fw = fx, fv = fx;  // minimize -SSIM
        double d = 0.0, e = 0.0;
        const double tol1 = 0.5 * tol, tol2 = tol;
        for (int it = 0; it < 60; ++it) {
            const double xm = 0.5 * (a + b);
            if (std::abs(x - xm) <= tol2 - 0.5 * (b - a)) break;
            bool golden = true;
            if (std::abs(e) > tol1) {
                const double r = (x - w) * (fx - fv);
                double q = (x - v) * (fx - fw);
                double p = (x - v) * q - (x - w) * r;
                q = 2.0 * (q - r);
                if (q > 0.0) p = -p;
                q = std::abs(q);
                const double last = e;
                e = d;
                if (std::abs(p) < std::abs(0.5 * q * last) && p > q * (a - x) && p < q * (b - x)) {
                    d = p / q;
                    const double u = x + d;
                    if (u - a < tol2 || b - u < tol2) d = xm >= x ? tol1 : -tol1;
                    golden = false;
                }
            }
            if (golden) {
                e = x >= xm ? a - x : b - x;
                d = cgold * e;
            }
            const double u = std::abs(d) >= tol1 ? x + d : x + (d > 0.0 ? tol1 : -tol1);
            const double su = value(along(x_, dir, u));
            note(u, su, best_t, best_v);
            const double fu = -su;
            if (fu <= fx) {
                (u >= x ? a : b) = x;
                v = w;
                fv = fw;
                w = x;
                fw = fx;
                x = u;
                fx = fu;
            } else {
                (u < x ? a : b) = u;
                if (fu <= fw || w == x) {
                    v = w;
                    fv = fw;
                    w = u;
                    fw = fu;
                } else if (fu <= fv || v == x || v == w) {
                    v = u;
                    fv = fu;
                }
            }
        }
    }

    double value(const ParamVector& x) {
        ++evaluations_;
        return mean_ssim(problem_, from_params(x));
    }
    static void note(double t, double v, double& best_t, double& best_v) {
        if (v > best_v) {
            best_v = v;
            best_t = t;
        }
    }

    const Problem& problem_;
    const Options& opt_;
    ParamVector x_;
    std::vector<int> index_;
    double best_ = 0.0;
    int evaluations_ = 0;
};

}  // namespace

Result calibrate(const Problem& problem, const Options& o) {
    problem.validate();
    for (int i = 0; i < kParameters; ++i)
        if (!(o.initial_step[static_cast<std::size_t>(i)] > 0.0) || !(o.tolerance[static_cast<std::size_t>(i)] > 0.0))
            throw InvalidArgument("calibration steps and tolerances must be positive");
    if (o.max_sweeps < 0) throw InvalidArgument("max_sweeps must be non-negative");

    Result r;
    r.initial = problem.config.assembly;
    Assembly start = r.initial;
    if (o.homography_init && problem.target && (o.free[3] || o.free[4])) {
        start = homography_c_img(problem, start);
        if (!o.free[3]) start.c_img_mm.x() = r.initial.c_img_mm.x();
        if (!o.free[4]) start.c_img_mm.y() = r.initial.c_img_mm.y();
        r.homography = start;
    }

    Search s(problem, o, to_params(start));
    s.trace.push_back(s.best());
    const auto n = static_cast<Eigen::Index>(s.dims());
    std::vector<Eigen::VectorXd> dirs;
    for (Eigen::Index k = 0; k < n; ++k) dirs.push_back(Eigen::VectorXd::Unit(n, k));
    double h = 1.0;
    bool model_ok = false;  // last quadratic-model step improved
    for (int sweep = 0; sweep < o.max_sweeps && n > 0; ++sweep) {
        const ParamVector x0 = s.x();
        const double f0 = s.best();
        // once the model steps work, direction-set sweeps only cost evaluations
        if (!model_ok) {
            double largest = 0.0;
            std::size_t largest_k = 0;
            for (std::size_t k = 0; k < dirs.size(); ++k) {
                const double gain = s.line_search(dirs[k], h);
                if (gain > largest) {
                    largest = gain;
                    largest_k = k;
                }
            }
            // Powell step: search along the net displacement of this sweep and let
            // it replace the direction that helped most.
            Eigen::VectorXd disp(n);
            for (Eigen::Index k = 0; k < n; ++k) {
                int idx = 0;
                for (int i = 0, seen = 0; i < kParameters; ++i)
                    if (o.free[static_cast<std::size_t>(i)] && seen++ == k) idx = i;
                disp[k] = (s.x()[static_cast<std::size_t>(idx)] - x0[static_cast<std::size_t>(idx)]) /
                          o.initial_step[static_cast<std::size_t>(idx)];
            }
            if (disp.norm() > 1e-9 && n > 1) {
                const Eigen::VectorXd d = disp / disp.norm();
                s.line_search(d, std::max(h, disp.norm()));
                if (largest > 0.0) {
                    dirs.erase(dirs.begin() + static_cast<std::ptrdiff_t>(largest_k));
                    dirs.push_back(d);
                }
            }
        }
        model_ok = n > 1 && s.newton_step(0.02) > 0.0;
        r.sweeps = sweep + 1;
        // a flat valley can give tiny gains while the parameters still travel
        bool moved = false;
        for (int i = 0; i < kParameters; ++i) {
            const auto k = static_cast<std::size_t>(i);
            moved = moved || std::abs(s.x()[k] - x0[k]) > o.tolerance[k];
        }
        if (s.best() - f0 < o.min_gain && !moved) break;
        h = std::max(0.125, 0.5 * h);  // brackets widen on demand
    }

    r.final = from_params(s.x());
    r.ssim_trace = s.trace;
    r.evaluations = s.evaluations();
    mean_ssim(problem, r.final, &r.per_image_ssim);
    if (s.best() < o.abort_ssim) {
        std::ostringstream msg;
        msg << "calibration stalled at mean SSIM " << s.best() << " (< " << o.abort_ssim
            << "); the initial distances are probably outside the basin of the true assembly";
        throw OptimizationFailed(msg.str());
    }
    return r;
}

// ---------------------------------------------------------------- target geometry

std::vector<Vec2> detect_dots(const Image& img, int min_pixels) {
    if (img.empty()) throw InvalidArgument("detect_dots: empty image");
    const Image lum = img.channels == 1 ? img : luminance(img);
    const auto [lo_it, hi_it] = std::minmax_element(lum.data.begin(), lum.data.end());
    const double lo = *lo_it, hi = *hi_it;
    if (!(hi > lo)) return {};
    const double thr = 0.5 * (lo + hi);
    const int w = lum.width, h = lum.height;
    std::vector<int> label(static_cast<std::size_t>(w * h), -1);
    std::vector<Vec2> dots;
    for (int y0 = 0; y0 < h; ++y0)
        for (int x0 = 0; x0 < w; ++x0) {
            const auto i0 = static_cast<std::size_t>(y0 * w + x0);
            if (label[i0] >= 0 || lum.data[i0] >= thr) continue;
            std::queue<std::pair<int, int>> q;
            q.push({x0, y0});
            label[i0] = 1;
            double sw = 0.0, sx = 0.0, sy = 0.0;
            int count = 0;
            bool border = false;
            while (!q.empty()) {
                const auto [x, y] = q.front();
                q.pop();
                const double wt = thr - lum.data[static_cast<std::size_t>(y * w + x)];
                sw += wt;
                sx += wt * x;
                sy += wt * y;
                ++count;
                if (x == 0 || y == 0 || x == w - 1 || y == h - 1) border = true;
                const int nx[4] = {x - 1, x + 1, x, x}, ny[4] = {y, y, y - 1, y + 1};
                for (int k = 0; k < 4; ++k) {
                    if (nx[k] < 0 || ny[k] < 0 || nx[k] >= w || ny[k] >= h) continue;
                    const auto j = static_cast<std::size_t>(ny[k] * w + nx[k]);
                    if (label[j] >= 0 || lum.data[j] >= thr) continue;
                    label[j] = 1;
                    q.push({nx[k], ny[k]});
                }
            }
            if (!border && count >= min_pixels && sw > 0.0) dots.emplace_back(sx / sw, sy / sw);
        }
    return dots;
}

Eigen::Matrix3d fit_homography(const std::vector<Vec2>& from, const std::vector<Vec2>& to) {
    if (from.size() != to.size()) throw InvalidArgument("fit_homography: point lists differ in length");
    if (from.size() < 4) throw DegenerateFit("fit_homography: need at least 4 correspondences");
    const auto normalizer = [](const std::vector<Vec2>& pts) {
        Vec2 mean = Vec2::Zero();
        for (const auto& p : pts) mean += p;
        mean /= static_cast<double>(pts.size());
        double d = 0.0;
        for (const auto& p : pts) d += (p - mean).norm();
        d /= static_cast<double>(pts.size());
        const double s = d > 0.0 ? std::sqrt(2.0) / d : 1.0;
        Eigen::Matrix3d t;
        t << s, 0, -s * mean.x(), 0, s, -s * mean.y(), 0, 0, 1;
        return t;
    };
    const Eigen::Matrix3d ta = normalizer(from), tb = normalizer(to);
    Eigen::MatrixXd m(2 * static_cast<Eigen::Index>(from.size()), 9);
    for (std::size_t i = 0; i < from.size(); ++i) {
        const Eigen::Vector3d a = ta * Eigen::Vector3d(from[i].x(), from[i].y(), 1.0);
        const Eigen::Vector3d b = tb * Eigen::Vector3d(to[i].x(), to[i].y(), 1.0);
        const auto r = 2 * static_cast<Eigen::Index>(i);
        m.row(r) << -a.x(), -a.y(), -1, 0, 0, 0, b.x() * a.x(), b.x() * a.y(), b.x();
        m.row(r + 1) << 0, 0, 0, -a.x(), -a.y(), -1, b.y() * a.x(), b.y() * a.y(), b.y();
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeFullV);
    const auto& sv = svd.singularValues();
    if (sv.size() >= 8 && sv[7] <= 1e-12 * sv[0]) throw DegenerateFit("fit_homography: degenerate point configuration");
    const Eigen::VectorXd hv = svd.matrixV().col(8);
    Eigen::Matrix3d hn;
    hn << hv[0], hv[1], hv[2], hv[3], hv[4], hv[5], hv[6], hv[7], hv[8];
    Eigen::Matrix3d hm = tb.inverse() * hn * ta;
    if (std::abs(hm(2, 2)) < 1e-15) throw DegenerateFit("fit_homography: map sends points to infinity");
    return hm / hm(2, 2);
}

Vec2 apply_homography(const Eigen::Matrix3d& h, const Vec2& p) {
    const Eigen::Vector3d q = h * Eigen::Vector3d(p.x(), p.y(), 1.0);
    return Vec2(q.x() / q.z(), q.y() / q.z());
}

Assembly homography_c_img(const Problem& problem, const Assembly& start, int iterations) {
    if (!problem.target) throw InvalidArgument("homography initialization needs a target capture");
    const Target& t = *problem.target;
    const optics::OpticalSystem base(problem.config);
    const imaging::RenderOptions ro = noiseless(problem.render);
    const imaging::Scene sc = at_system_depth(t.scene);
    const auto& plate = problem.patterns.at(static_cast<std::size_t>(t.pattern));
    const auto captured = detect_dots(t.image);
    const auto& sensor = problem.config.sensor;
    const double px = sensor.width_mm() / ro.width_px, py = sensor.height_mm() / ro.height_px;

    Assembly a = start;
    for (int it = 0; it < iterations; ++it) {
        const optics::OpticalSystem sys = base.with_assembly(a);
        const auto rendered = detect_dots(imaging::render(sc, sys, plate, ro));
        if (rendered.size() < 4 || captured.size() < 4) throw DegenerateFit("too few target dots detected");
        // Nearest-neighbor matching, limited to well under the dot spacing.
        double spacing = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < rendered.size(); ++i)
            for (std::size_t j = i + 1; j < rendered.size(); ++j)
                spacing = std::min(spacing, (rendered[i] - rendered[j]).norm());
        std::vector<Vec2> from, to;
        for (const auto& p : rendered) {
            const Vec2* best = nullptr;
            double bd = 0.35 * spacing;
            for (const auto& q : captured)
                if ((q - p).norm() < bd) {
                    bd = (q - p).norm();
                    best = &q;
                }
            if (best) {
                from.push_back(p);
                to.push_back(*best);
            }
        }
        const Eigen::Matrix3d hm = fit_homography(from, to);

        // Image of the scene center and its response to c_img (finite differences).
        const double depth = a.d_img_mm;
        const auto hit = [&](const Vec2& c) {
            const auto s = imaging::chief_ray_hit(sys, plate, Vec3(c.x(), c.y(), sys.plate_z_mm() - depth), 1);
            if (!s) throw DegenerateFit("scene center is not imaged");
            return *s;
        };
        const double eps = 0.5;
        const Vec2 c0 = a.c_img_mm;
        const Vec2 s0 = hit(c0);
        Eigen::Matrix2d jac;
        jac.col(0) = (hit(c0 + Vec2(eps, 0)) - hit(c0 - Vec2(eps, 0))) / (2 * eps);
        jac.col(1) = (hit(c0 + Vec2(0, eps)) - hit(c0 - Vec2(0, eps))) / (2 * eps);
        // Sensor mm to fractional pixel, matching pixel_to_sensor.
        const Vec2 p0((s0.x() + sensor.width_mm() / 2) / px - 0.5, (s0.y() + sensor.height_mm() / 2) / py - 0.5);
        const Vec2 p1 = apply_homography(hm, p0);
        const Vec2 shift_mm((p1.x() - p0.x()) * px, (p1.y() - p0.y()) * py);
        a.c_img_mm += jac.fullPivLu().solve(shift_mm);
    }
    return a;
}

void to_json(nlohmann::json& j, const Result& r) {
    j = nlohmann::json{{"initial", r.initial},
                       {"final", r.final},
                       {"ssim_trace", r.ssim_trace},
                       {"per_image_ssim", r.per_image_ssim},
                       {"final_mean_ssim", r.ssim_trace.empty() ? 0.0 : r.ssim_trace.back()},
                       {"evaluations", r.evaluations},
                       {"sweeps", r.sweeps}};
    if (r.homography) j["after_homography"] = *r.homography;
}

}  // namespace fovea::calibrate
