#include "fovea/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fovea/common.hpp"
#include "fovea/parallel.hpp"

namespace fovea::fusion {

namespace {

int mirror(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - i - 1;
    }
    return i;
}

std::vector<double> gaussian_kernel(double sigma, int radius) {
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double s = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        s += k[static_cast<std::size_t>(i + radius)];
    }
    for (double& v : k) v /= s;
    return k;
}

/// Separable filtering of one plane with mirrored borders.
void separable(const double* src, double* dst, int w, int h, const std::vector<double>& k) {
    const int r = static_cast<int>(k.size() / 2);
    std::vector<double> tmp(static_cast<std::size_t>(w) * h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * src[y * w + mirror(x + i, w)];
            tmp[static_cast<std::size_t>(y * w + x)] = acc;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -r; i <= r; ++i)
                acc += k[static_cast<std::size_t>(i + r)] * tmp[static_cast<std::size_t>(mirror(y + i, h) * w + x)];
            dst[y * w + x] = acc;
        }
}

Image abs_laplacian(const Image& gray, int step = 1) {
    Image out(gray.width, gray.height, 1);
    const int w = gray.width, h = gray.height;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double c = gray.at(0, y, x);
            const double l = gray.at(0, y, mirror(x - step, w)) + gray.at(0, y, mirror(x + step, w)) +
                             gray.at(0, mirror(y - step, h), x) + gray.at(0, mirror(y + step, h), x) - 4.0 * c;
            out.at(0, y, x) = std::abs(l);
        }
    return out;
}

void check_stack(std::span<const Image> stack, std::size_t min_size) {
    if (stack.size() < min_size) throw InvalidArgument("fusion needs at least " + std::to_string(min_size) + " images");
    for (const Image& im : stack) {
        if (im.empty()) throw InvalidArgument("fusion: empty image in stack");
        if (!im.same_shape(stack.front())) throw InvalidArgument("fusion: images differ in resolution or channels");
    }
}

// 5-tap binomial pyramid filters.
constexpr double kBinomial[5] = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};

Image reduce(const Image& img) {
    const int w = (img.width + 1) / 2, h = (img.height + 1) / 2;
    Image out(w, h, img.channels);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int i = -2; i <= 2; ++i)
                    for (int j = -2; j <= 2; ++j)
                        acc += kBinomial[i + 2] * kBinomial[j + 2] *
                               img.at(c, mirror(2 * y + i, img.height), mirror(2 * x + j, img.width));
                out.at(c, y, x) = acc;
            }
    return out;
}

Image expand(const Image& img, int w, int h) {
    Image out(w, h, img.channels);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int i = -2; i <= 2; ++i) {
                    if ((y + i) % 2 != 0) continue;
                    const int sy = std::clamp((y + i) / 2, 0, img.height - 1);
                    for (int j = -2; j <= 2; ++j) {
                        if ((x + j) % 2 != 0) continue;
                        const int sx = std::clamp((x + j) / 2, 0, img.width - 1);
                        acc += 4.0 * kBinomial[i + 2] * kBinomial[j + 2] * img.at(c, sy, sx);
                    }
                }
                out.at(c, y, x) = acc;
            }
    return out;
}

}  // namespace

Image gaussian_blur(const Image& img, double sigma) {
    if (sigma <= 0.0) return img;
    const auto k = gaussian_kernel(sigma, std::max(1, static_cast<int>(std::ceil(3.0 * sigma))));
    Image out(img.width, img.height, img.channels);
    for (int c = 0; c < img.channels; ++c) separable(img.plane(c), out.plane(c), img.width, img.height, k);
    return out;
}

Image sharpness_map(const Image& img, double blur_radius, int laplacian_scale) {
    if (blur_radius < 0.0) throw InvalidArgument("sharpness_map: blur radius must be non-negative");
    if (laplacian_scale < 1) throw InvalidArgument("sharpness_map: Laplacian scale must be >= 1");
    return gaussian_blur(abs_laplacian(luminance(img), laplacian_scale), blur_radius);
}

std::vector<Image> sharpness_weights(std::span<const Image> stack, double blur_radius, int laplacian_scale) {
    check_stack(stack, 1);
    std::vector<Image> s(stack.size());
    parallel_for(stack.size(), [&](std::size_t k) { s[k] = sharpness_map(stack[k], blur_radius, laplacian_scale); });
    const std::size_t n = s.front().data.size();
    const double uniform = 1.0 / static_cast<double>(stack.size());
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (const auto& m : s) sum += m.data[i];
        for (auto& m : s) m.data[i] = sum > 0.0 ? m.data[i] / sum : uniform;
    }
    return s;
}

SharpnessFusion fuse_sharpness(std::span<const Image> stack, double blur_radius, int laplacian_scale) {
    check_stack(stack, 2);
    const auto w = sharpness_weights(stack, blur_radius, laplacian_scale);
    const Image& first = stack.front();
    SharpnessFusion r{Image(first.width, first.height, first.channels), Image(first.width, first.height, 1)};
    const std::size_t plane = first.plane_size();
    for (std::size_t i = 0; i < plane; ++i) {
        int best = 0;
        for (std::size_t k = 1; k < stack.size(); ++k)
            if (w[k].data[i] > w[static_cast<std::size_t>(best)].data[i]) best = static_cast<int>(k);
        r.index_map.data[i] = best;
        for (int c = 0; c < first.channels; ++c) {
            double acc = 0.0;
            for (std::size_t k = 0; k < stack.size(); ++k) acc += w[k].data[i] * stack[k].plane(c)[i];
            r.fused.plane(c)[i] = acc;
        }
    }
    return r;
}

Image fuse_mask(std::span<const Image> stack, std::span<const int> mask, int mask_rows, int mask_cols) {
    check_stack(stack, 1);
    if (mask_rows < 1 || mask_cols < 1 || mask.size() != static_cast<std::size_t>(mask_rows * mask_cols))
        throw InvalidArgument("fuse_mask: mask shape does not match its size");
    for (int m : mask)
        if (m < 0 || m >= static_cast<int>(stack.size())) throw InvalidArgument("fuse_mask: mask index out of range");
    const Image& first = stack.front();
    Image out(first.width, first.height, first.channels);
    for (int y = 0; y < first.height; ++y) {
        const int my = std::min(y * mask_rows / first.height, mask_rows - 1);
        for (int x = 0; x < first.width; ++x) {
            const int mx = std::min(x * mask_cols / first.width, mask_cols - 1);
            const auto& src = stack[static_cast<std::size_t>(mask[static_cast<std::size_t>(my * mask_cols + mx)])];
            for (int c = 0; c < first.channels; ++c) out.at(c, y, x) = src.at(c, y, x);
        }
    }
    return out;
}

Image fuse_pyramid(std::span<const Image> stack, int levels) {
    check_stack(stack, 1);
    if (levels < 1) throw InvalidArgument("fuse_pyramid: levels must be at least 1");
    const Image& first = stack.front();
    if ((std::min(first.width, first.height) >> (levels - 1)) < 4)
        throw InvalidArgument("fuse_pyramid: image too small for " + std::to_string(levels) + " levels");

    // Laplacian pyramids, level 0 finest; the last level is the Gaussian residual.
    std::vector<std::vector<Image>> pyr(stack.size());
    parallel_for(stack.size(), [&](std::size_t k) {
        Image g = stack[k];
        for (int l = 0; l + 1 < levels; ++l) {
            Image next = reduce(g);
            Image up = expand(next, g.width, g.height);
            for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] -= up.data[i];
            pyr[k].push_back(std::move(g));
            g = std::move(next);
        }
        pyr[k].push_back(std::move(g));
    });

    std::vector<Image> fused(static_cast<std::size_t>(levels));
    for (int l = 0; l < levels; ++l) {
        const Image& ref = pyr[0][static_cast<std::size_t>(l)];
        Image out(ref.width, ref.height, ref.channels);
        const bool residual = l == levels - 1;
        std::vector<Image> score(stack.size());
        for (std::size_t k = 0; k < stack.size(); ++k) {
            const Image lum = luminance(pyr[k][static_cast<std::size_t>(l)]);
            if (residual) {
                score[k] = gaussian_blur(abs_laplacian(lum), 1.0);
            } else {
                score[k] = lum;
                for (double& v : score[k].data) v = std::abs(v);
            }
        }
        for (std::size_t i = 0; i < ref.plane_size(); ++i) {
            std::size_t best = 0;
            for (std::size_t k = 1; k < stack.size(); ++k)
                if (score[k].data[i] > score[best].data[i]) best = k;
            for (int c = 0; c < ref.channels; ++c)
                out.plane(c)[i] = pyr[best][static_cast<std::size_t>(l)].plane(c)[i];
        }
        fused[static_cast<std::size_t>(l)] = std::move(out);
    }
    Image g = fused.back();
    for (int l = levels - 2; l >= 0; --l) {
        const Image& band = fused[static_cast<std::size_t>(l)];
        Image up = expand(g, band.width, band.height);
        for (std::size_t i = 0; i < up.data.size(); ++i) up.data[i] += band.data[i];
        g = std::move(up);
    }
    return g;
}

double psnr(const Image& a, const Image& ref) {
    if (!a.same_shape(ref) || a.empty()) throw InvalidArgument("psnr: size mismatch");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) mse += (a.data[i] - ref.data[i]) * (a.data[i] - ref.data[i]);
    mse /= static_cast<double>(a.data.size());
    if (mse <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

double ssim(const Image& a, const Image& b) {
    if (!a.same_shape(b) || a.empty()) throw InvalidArgument("ssim: size mismatch");
    constexpr int r = 5;
    if (a.width <= 2 * r || a.height <= 2 * r) throw InvalidArgument("ssim: image smaller than the 11x11 window");
    const auto k = gaussian_kernel(1.5, r);
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    const int w = a.width, h = a.height;
    const std::size_t n = a.plane_size();
    double total = 0.0;
    for (int c = 0; c < a.channels; ++c) {
        const double* x = a.plane(c);
        const double* y = b.plane(c);
        std::vector<double> xx(n), yy(n), xy(n);
        for (std::size_t i = 0; i < n; ++i) {
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        std::vector<double> mx(n), my(n), sxx(n), syy(n), sxy(n);
        separable(x, mx.data(), w, h, k);
        separable(y, my.data(), w, h, k);
        separable(xx.data(), sxx.data(), w, h, k);
        separable(yy.data(), syy.data(), w, h, k);
        separable(xy.data(), sxy.data(), w, h, k);
        double acc = 0.0;
        int count = 0;
        for (int yy_ = r; yy_ < h - r; ++yy_)
            for (int xx_ = r; xx_ < w - r; ++xx_) {
                const std::size_t i = static_cast<std::size_t>(yy_ * w + xx_);
                const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i];
                const double cov = sxy[i] - mx[i] * my[i];
                acc += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) /
                       ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
                ++count;
            }
        total += acc / count;
    }
    return total / a.channels;
}

Metrics metrics(const Image& fused, const Image& reference) { return {psnr(fused, reference), ssim(fused, reference)}; }

}  // namespace fovea::fusion
