#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "musiq/common.hpp"

namespace musiq {

// Decoded image: row-major H x W x C float pixels in [0,1], C == 3.
struct ImageBuffer {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<float> pixels;

  ImageBuffer() = default;
  ImageBuffer(int h, int w)
      : height(h), width(w), pixels(static_cast<size_t>(h) * w * 3, 0.0f) {
    if (h < 1 || w < 1) throw ShapeError("ImageBuffer: extents must be >= 1");
  }

  float& at(int y, int x, int c) {
    return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
  float at(int y, int x, int c) const {
    return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
};

struct ResizedImage {
  ImageBuffer image;
  double alpha = 1.0;
};

// Native image plus its ARP-resized variants (one per configured longer-side
// target), in configuration order.
struct MultiScaleRepresentation {
  ImageBuffer native;
  std::vector<int> targets;          // L_k
  std::vector<ResizedImage> variants;
};

// Aspect-ratio-preserving resize: alpha = L / max(H, W). Downscales get a
// Gaussian low-pass with sigma = 0.5*(1/alpha - 1) before bilinear sampling;
// upscales are plain bilinear.
ResizedImage arp_resize(const ImageBuffer& img, int longer_side);

// Zero-pad on the bottom/right so both extents are multiples of the patch
// side; original pixels stay at the top-left.
ImageBuffer pad_to_patch_multiple(const ImageBuffer& img, int patch);

ImageBuffer hflip(const ImageBuffer& img);

MultiScaleRepresentation build_multiscale(const ImageBuffer& native,
                                          const std::vector<int>& targets);

}  // namespace musiq
