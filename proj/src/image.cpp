#include "procdiff/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "procdiff/common.hpp"

namespace procdiff {

namespace {

Image8 load_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::string magic;
    in >> magic;
    if (magic != "P6") fail(ErrorKind::Io, "not a P6 ppm: " + path.string());
    int w = 0, h = 0, maxval = 0;
    // skip comments between header tokens
    auto next_int = [&](int& out) {
        while (in >> std::ws && in.peek() == '#') in.ignore(1 << 16, '\n');
        in >> out;
    };
    next_int(w);
    next_int(h);
    next_int(maxval);
    if (!in || w <= 0 || h <= 0 || maxval != 255)
        fail(ErrorKind::Io, "bad ppm header: " + path.string());
    in.ignore(1);  // single whitespace before raster
    Image8 img;
    img.width = w;
    img.height = h;
    img.rgb.resize(static_cast<size_t>(w) * h * 3);
    in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.rgb.size()))
        fail(ErrorKind::Io, "truncated ppm raster: " + path.string());
    return img;
}

void save_ppm(const Image8& img, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::Io, "cannot write: " + path.string());
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.rgb.data()),
              static_cast<std::streamsize>(img.rgb.size()));
    if (!out) fail(ErrorKind::Io, "short write: " + path.string());
}

Image8 load_png(const std::filesystem::path& path) {
    png_image png;
    std::memset(&png, 0, sizeof(png));
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&png, path.string().c_str()))
        fail(ErrorKind::Io, "undecodable png: " + path.string() + " (" + png.message + ")");
    png.format = PNG_FORMAT_RGB;
    Image8 img;
    img.width = static_cast<int>(png.width);
    img.height = static_cast<int>(png.height);
    img.rgb.resize(PNG_IMAGE_SIZE(png));
    if (!png_image_finish_read(&png, nullptr, img.rgb.data(), 0, nullptr)) {
        std::string msg = png.message;
        png_image_free(&png);
        fail(ErrorKind::Io, "undecodable png: " + path.string() + " (" + msg + ")");
    }
    return img;
}

void save_png(const Image8& img, const std::filesystem::path& path) {
    png_image png;
    std::memset(&png, 0, sizeof(png));
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(img.width);
    png.height = static_cast<png_uint_32>(img.height);
    png.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&png, path.string().c_str(), 0, img.rgb.data(), 0, nullptr))
        fail(ErrorKind::Io, "cannot write png: " + path.string() + " (" + png.message + ")");
}

}  // namespace

Image8 make_image(int width, int height, uint8_t r, uint8_t g, uint8_t b) {
    Image8 img;
    img.width = width;
    img.height = height;
    img.rgb.resize(static_cast<size_t>(width) * height * 3);
    for (size_t i = 0; i < img.rgb.size(); i += 3) {
        img.rgb[i] = r;
        img.rgb[i + 1] = g;
        img.rgb[i + 2] = b;
    }
    return img;
}

Image8 load_image(const std::filesystem::path& path) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) fail(ErrorKind::Io, "cannot open image: " + path.string());
    unsigned char magic[2] = {0, 0};
    probe.read(reinterpret_cast<char*>(magic), 2);
    probe.close();
    if (magic[0] == 'P' && magic[1] == '6') return load_ppm(path);
    return load_png(path);
}

void save_image(const Image8& img, const std::filesystem::path& path) {
    if (img.width <= 0 || img.height <= 0)
        fail(ErrorKind::Validation, "cannot save empty image");
    if (path.extension() == ".ppm")
        save_ppm(img, path);
    else
        save_png(img, path);
}

Image8 center_crop_square(const Image8& img) {
    if (img.width == img.height) return img;
    int side = std::min(img.width, img.height);
    int x0 = (img.width - side) / 2;
    int y0 = (img.height - side) / 2;
    Image8 out;
    out.width = side;
    out.height = side;
    out.rgb.resize(static_cast<size_t>(side) * side * 3);
    for (int y = 0; y < side; ++y)
        std::memcpy(out.rgb.data() + static_cast<size_t>(y) * side * 3,
                    img.pixel(x0, y0 + y), static_cast<size_t>(side) * 3);
    return out;
}

Image8 resize_bilinear(const Image8& img, int out_w, int out_h) {
    if (img.width <= 0 || img.height <= 0)
        fail(ErrorKind::Validation, "resize of empty image");
    if (out_w == img.width && out_h == img.height) return img;
    Image8 out;
    out.width = out_w;
    out.height = out_h;
    out.rgb.resize(static_cast<size_t>(out_w) * out_h * 3);
    double sx = static_cast<double>(img.width) / out_w;
    double sy = static_cast<double>(img.height) / out_h;
    for (int y = 0; y < out_h; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        double wy = fy - y0;
        int y0c = std::clamp(y0, 0, img.height - 1);
        int y1c = std::clamp(y0 + 1, 0, img.height - 1);
        for (int x = 0; x < out_w; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            double wx = fx - x0;
            int x0c = std::clamp(x0, 0, img.width - 1);
            int x1c = std::clamp(x0 + 1, 0, img.width - 1);
            for (int c = 0; c < 3; ++c) {
                double v00 = img.pixel(x0c, y0c)[c];
                double v01 = img.pixel(x1c, y0c)[c];
                double v10 = img.pixel(x0c, y1c)[c];
                double v11 = img.pixel(x1c, y1c)[c];
                double v = v00 * (1 - wx) * (1 - wy) + v01 * wx * (1 - wy) +
                           v10 * (1 - wx) * wy + v11 * wx * wy;
                out.pixel(x, y)[c] = static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
            }
        }
    }
    return out;
}

Image8 crop_and_resize_square(const Image8& img, int side) {
    if (img.width == side && img.height == side) return img;
    return resize_bilinear(center_crop_square(img), side, side);
}

}  // namespace procdiff
