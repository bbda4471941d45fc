#include "fovea/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include <ImfArray.h>
#include <ImfRgbaFile.h>
#include <png.h>

#include "fovea/common.hpp"

namespace fovea {

Image luminance(const Image& rgb) {
    if (rgb.channels == 1) return rgb;
    if (rgb.channels != 3) throw InvalidArgument("luminance: expected 1 or 3 channels");
    Image out(rgb.width, rgb.height, 1);
    const double* r = rgb.plane(0);
    const double* g = rgb.plane(1);
    const double* b = rgb.plane(2);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = 0.2126 * r[i] + 0.7152 * g[i] + 0.0722 * b[i];
    return out;
}

double sample_bilinear(const Image& img, int channel, double x, double y) {
    const double fx = std::floor(x), fy = std::floor(y);
    const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
    const double tx = x - fx, ty = y - fy;
    const auto px = [&](int yy, int xx) {
        if (xx < 0 || yy < 0 || xx >= img.width || yy >= img.height) return 0.0;
        return img.at(channel, yy, xx);
    };
    return (1 - ty) * ((1 - tx) * px(y0, x0) + tx * px(y0, x0 + 1)) +
           ty * ((1 - tx) * px(y0 + 1, x0) + tx * px(y0 + 1, x0 + 1));
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};

}  // namespace

void write_png(const std::filesystem::path& path, const Image& img) {
    if (img.channels != 1 && img.channels != 3) throw InvalidArgument("write_png: 1 or 3 channels required");
    std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "wb"));
    if (!f) throw IoError("cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng failed writing " + path.string());
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> row(static_cast<std::size_t>(img.width * img.channels));
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) {
                const double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
                row[static_cast<std::size_t>(x * img.channels + c)] = static_cast<png_byte>(std::lround(v * 255.0));
            }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image read_png(const std::filesystem::path& path) {
    png_image pimg{};
    pimg.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&pimg, path.c_str())) throw IoError("cannot read PNG " + path.string());
    const bool gray = (pimg.format & PNG_FORMAT_FLAG_COLOR) == 0;
    pimg.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    std::vector<png_byte> buf(PNG_IMAGE_SIZE(pimg));
    if (!png_image_finish_read(&pimg, nullptr, buf.data(), 0, nullptr)) {
        png_image_free(&pimg);
        throw IoError("cannot decode PNG " + path.string());
    }
    const int c = gray ? 1 : 3;
    Image img(static_cast<int>(pimg.width), static_cast<int>(pimg.height), c);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int k = 0; k < c; ++k)
                img.at(k, y, x) = buf[static_cast<std::size_t>((y * img.width + x) * c + k)] / 255.0;
    return img;
}

void write_exr(const std::filesystem::path& path, const Image& img) {
    if (img.channels != 1 && img.channels != 3) throw InvalidArgument("write_exr: 1 or 3 channels required");
    try {
        std::vector<Imf::Rgba> px(img.plane_size());
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                auto& p = px[static_cast<std::size_t>(y * img.width + x)];
                const int g = img.channels == 3 ? 1 : 0, b = img.channels == 3 ? 2 : 0;
                p = Imf::Rgba(static_cast<float>(img.at(0, y, x)), static_cast<float>(img.at(g, y, x)),
                              static_cast<float>(img.at(b, y, x)), 1.0f);
            }
        Imf::RgbaOutputFile file(path.c_str(), img.width, img.height, Imf::WRITE_RGB);
        file.setFrameBuffer(px.data(), 1, static_cast<std::size_t>(img.width));
        file.writePixels(img.height);
    } catch (const std::exception& e) {
        throw IoError("cannot write EXR " + path.string() + ": " + e.what());
    }
}

Image read_exr(const std::filesystem::path& path) {
    try {
        Imf::RgbaInputFile file(path.c_str());
        const auto dw = file.dataWindow();
        const int w = dw.max.x - dw.min.x + 1, h = dw.max.y - dw.min.y + 1;
        Imf::Array2D<Imf::Rgba> px(h, w);
        file.setFrameBuffer(&px[0][0] - dw.min.x - dw.min.y * w, 1, static_cast<std::size_t>(w));
        file.readPixels(dw.min.y, dw.max.y);
        Image img(w, h, 3);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                img.at(0, y, x) = px[y][x].r;
                img.at(1, y, x) = px[y][x].g;
                img.at(2, y, x) = px[y][x].b;
            }
        return img;
    } catch (const std::exception& e) {
        throw IoError("cannot read EXR " + path.string() + ": " + e.what());
    }
}

void write_image(const std::filesystem::path& path, const Image& img) {
    const auto ext = path.extension().string();
    if (ext == ".png") return write_png(path, img);
    if (ext == ".exr") return write_exr(path, img);
    throw IoError("unsupported image extension '" + ext + "'");
}

Image read_image(const std::filesystem::path& path) {
    const auto ext = path.extension().string();
    if (ext == ".png") return read_png(path);
    if (ext == ".exr") return read_exr(path);
    throw IoError("unsupported image extension '" + ext + "'");
}

}  // namespace fovea
