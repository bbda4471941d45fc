#pragma once

#include <filesystem>
#include <vector>

namespace fovea {

/// Planar floating-point image; RGB images store R, G, B planes in that order.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 3;
    std::vector<double> data;

    Image() = default;
    Image(int w, int h, int c = 3, double fill = 0.0)
        : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

    std::size_t plane_size() const { return static_cast<std::size_t>(width) * height; }
    double& at(int c, int y, int x) {
        return data[static_cast<std::size_t>(c) * plane_size() + static_cast<std::size_t>(y) * width + x];
    }
    double at(int c, int y, int x) const {
        return data[static_cast<std::size_t>(c) * plane_size() + static_cast<std::size_t>(y) * width + x];
    }
    double* plane(int c) { return data.data() + static_cast<std::size_t>(c) * plane_size(); }
    const double* plane(int c) const { return data.data() + static_cast<std::size_t>(c) * plane_size(); }
    bool same_shape(const Image& o) const {
        return width == o.width && height == o.height && channels == o.channels;
    }
    bool empty() const { return data.empty(); }
};

/// Rec. 709 relative luminance; single-channel images pass through.
Image luminance(const Image& rgb);

/// Bilinear sample with zero outside; x, y in pixel units (pixel centers at integers).
double sample_bilinear(const Image& img, int channel, double x, double y);

/// 8-bit PNG (gray or RGB), values clamped to [0, 1].
void write_png(const std::filesystem::path& path, const Image& img);
Image read_png(const std::filesystem::path& path);

/// Half-float RGB EXR; gray images are written as three equal channels.
void write_exr(const std::filesystem::path& path, const Image& img);
Image read_exr(const std::filesystem::path& path);

/// Dispatches on the extension (.png or .exr).
void write_image(const std::filesystem::path& path, const Image& img);
Image read_image(const std::filesystem::path& path);

}  // namespace fovea
