#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace procdiff {

// 8-bit RGB, row-major, tightly packed.
struct Image8 {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> rgb;

    bool empty() const { return rgb.empty(); }
    uint8_t* pixel(int x, int y) { return rgb.data() + (static_cast<size_t>(y) * width + x) * 3; }
    const uint8_t* pixel(int x, int y) const {
        return rgb.data() + (static_cast<size_t>(y) * width + x) * 3;
    }
};

Image8 make_image(int width, int height, uint8_t r = 0, uint8_t g = 0, uint8_t b = 0);

// PNG and binary PPM (P6), chosen by file magic on read and by extension on
// write. Fails with ErrorKind::Io on undecodable/unwritable files.
Image8 load_image(const std::filesystem::path& path);
void save_image(const Image8& img, const std::filesystem::path& path);

Image8 center_crop_square(const Image8& img);
Image8 resize_bilinear(const Image8& img, int out_w, int out_h);

// Center-crop to square then bilinear resize; identity when already square
// at the target side.
Image8 crop_and_resize_square(const Image8& img, int side);

}  // namespace procdiff
