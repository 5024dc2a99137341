#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "musiq/image.hpp"

namespace musiq {

// PNG or JPEG payload -> float RGB in [0,1]. Grayscale is replicated to
// three channels, alpha is dropped.
ImageBuffer decode_image(const std::vector<uint8_t>& bytes);

ImageBuffer load_image(const std::string& path);

std::vector<uint8_t> encode_png_rgb8(const ImageBuffer& img);

void write_png_rgb8(const std::string& path, const ImageBuffer& img);

// 8-bit grayscale writers used by the visualization exports.
void write_png_gray8(const std::string& path, int height, int width,
                     const std::vector<uint8_t>& gray);
void write_pgm(const std::string& path, int height, int width,
               const std::vector<uint8_t>& gray);

}  // namespace musiq
