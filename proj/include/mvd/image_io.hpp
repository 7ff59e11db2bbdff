#pragma once

// File formats for capture data: 8-bit RGB PNG (PPM fallback), and flat
// little-endian float buffers with a 16-byte header (8-byte magic, u32
// height, u32 width) for depth maps and normal maps.

#include <string>
#include <vector>

#include "mvd/common.hpp"

namespace mvd {

struct ImageU8 {
    int height = 0, width = 0;
    std::vector<unsigned char> pixels;  // H*W*3 RGB row-major
};

ImageU8 quantize_image(const std::vector<float>& rgb, int height, int width);
std::vector<float> dequantize_image(const ImageU8& img);

void write_png(const std::string& path, const ImageU8& img);
ImageU8 read_png(const std::string& path);

void write_ppm(const std::string& path, const ImageU8& img);
ImageU8 read_ppm(const std::string& path);

// magic "MVDDEPTH", H*W float32
void write_depth(const std::string& path, int height, int width, const float* data);
std::vector<float> read_depth(const std::string& path, int& height, int& width);

// magic "MVDNORML", H*W*3 float32
void write_normals(const std::string& path, int height, int width, const float* data);
std::vector<float> read_normals(const std::string& path, int& height, int& width);

}  // namespace mvd
