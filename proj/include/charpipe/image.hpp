#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "charpipe/common.hpp"

namespace charpipe {

// Dense interleaved float image, values in [0, 1]. channels is 1 or 3.
// Pixel (y, x) channel k sits at data[(y * width + x) * channels + k].
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> data;

    Image() = default;
    Image(int h, int w, int c, float fill = 0.0f)
        : height(h), width(w), channels(c),
          data(static_cast<size_t>(h) * w * c, fill) {}

    float& at(int y, int x, int c) {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    float at(int y, int x, int c) const {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    size_t numel() const { return data.size(); }
    bool same_shape(const Image& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }
};

// Exact byte equality of two images (shape and every float bit).
bool images_identical(const Image& a, const Image& b);

// Mean over all elements.
double image_mean(const Image& a);

// Nearest-neighbor resize to (oh, ow).
Image resize_nearest(const Image& src, int oh, int ow);

// 8-bit PNG I/O. Images are quantized with round(v * 255) on save and read
// back as k / 255. Writing uses fixed libpng settings so the same pixels
// always produce the same file bytes.
void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

} // namespace charpipe
