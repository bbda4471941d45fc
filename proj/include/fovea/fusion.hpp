#pragma once

#include <span>
#include <vector>

#include "fovea/image.hpp"

namespace fovea::fusion {

inline constexpr double kPsnrCap = 99.0;

/// Separable Gaussian blur with mirrored borders; kernel truncated at 3 sigma.
Image gaussian_blur(const Image& img, double sigma);

/// |4-neighbor Laplacian| (stencil step laplacian_scale) of the luminance, blurred by a Gaussian with
/// sigma = blur_radius (pixels). Single channel.
Image sharpness_map(const Image& img, double blur_radius, int laplacian_scale = 1);

struct SharpnessFusion {
    Image fused;
    Image index_map;  ///< argmax_k S_k per pixel, single channel, ties to the lowest k
};

/// Per-pixel weighted average with weights S_k / sum S (uniform where sum is 0).
SharpnessFusion fuse_sharpness(std::span<const Image> stack, double blur_radius = 15.0,
                               int laplacian_scale = 1);

/// Weights used by fuse_sharpness, one single-channel image per input.
std::vector<Image> sharpness_weights(std::span<const Image> stack, double blur_radius = 15.0,
                                     int laplacian_scale = 1);

/// Pixel-wise selection from a rows x cols index mask, upsampled by nearest neighbor.
Image fuse_mask(std::span<const Image> stack, std::span<const int> mask, int mask_rows, int mask_cols);

/// Laplacian-pyramid fusion: band coefficients chosen by largest luminance
/// magnitude, the coarsest level by largest local Laplacian response.
Image fuse_pyramid(std::span<const Image> stack, int levels = 5);

struct Metrics {
    double psnr_db = 0.0;
    double ssim = 0.0;
};

double psnr(const Image& a, const Image& reference);
/// 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range 1, mean over channels.
double ssim(const Image& a, const Image& b);
Metrics metrics(const Image& fused, const Image& reference);

}  // namespace fovea::fusion
