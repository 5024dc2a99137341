#include "musiq/image.hpp"

#include <algorithm>
#include <cmath>

namespace musiq {

namespace {

// Separable Gaussian, clamp-to-edge boundary, kernel truncated at ceil(3*sigma).
ImageBuffer gaussian_blur(const ImageBuffer& img, double sigma) {
  int radius = static_cast<int>(std::ceil(3.0 * sigma));
  if (radius < 1) return img;
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * (i / sigma) * (i / sigma));
    sum += kernel[i + radius];
  }
  for (double& k : kernel) k /= sum;

  ImageBuffer tmp(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          int xi = std::clamp(x + i, 0, img.width - 1);
          acc += kernel[i + radius] * img.at(y, xi, c);
        }
        tmp.at(y, x, c) = static_cast<float>(acc);
      }
  ImageBuffer out(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          int yi = std::clamp(y + i, 0, img.height - 1);
          acc += kernel[i + radius] * tmp.at(yi, x, c);
        }
        out.at(y, x, c) = static_cast<float>(acc);
      }
  return out;
}

ImageBuffer bilinear_resize(const ImageBuffer& img, int oh, int ow) {
  ImageBuffer out(oh, ow);
  double sy = static_cast<double>(img.height) / oh;
  double sx = static_cast<double>(img.width) / ow;
  for (int y = 0; y < oh; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    int y0 = static_cast<int>(std::floor(fy));
    double wy = fy - y0;
    int ya = std::clamp(y0, 0, img.height - 1);
    int yb = std::clamp(y0 + 1, 0, img.height - 1);
    for (int x = 0; x < ow; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      int x0 = static_cast<int>(std::floor(fx));
      double wx = fx - x0;
      int xa = std::clamp(x0, 0, img.width - 1);
      int xb = std::clamp(x0 + 1, 0, img.width - 1);
      for (int c = 0; c < 3; ++c) {
        double top = (1.0 - wx) * img.at(ya, xa, c) + wx * img.at(ya, xb, c);
        double bot = (1.0 - wx) * img.at(yb, xa, c) + wx * img.at(yb, xb, c);
        out.at(y, x, c) = static_cast<float>((1.0 - wy) * top + wy * bot);
      }
    }
  }
  return out;
}

}  // namespace

ResizedImage arp_resize(const ImageBuffer& img, int longer_side) {
  if (longer_side < 1) throw ShapeError("arp_resize: longer side must be >= 1");
  int longest = std::max(img.height, img.width);
  double alpha = static_cast<double>(longer_side) / longest;
  int h = std::max(1, static_cast<int>(std::lround(alpha * img.height)));
  int w = std::max(1, static_cast<int>(std::lround(alpha * img.width)));
  // The longer side is pinned to L exactly; rounding only affects the other axis.
  if (img.height >= img.width) h = longer_side;
  if (img.width >= img.height) w = longer_side;

  if (h == img.height && w == img.width) return {img, alpha};
  const ImageBuffer* src = &img;
  ImageBuffer blurred;
  if (alpha < 1.0) {
    double sigma = 0.5 * (1.0 / alpha - 1.0);
    if (sigma > 0.0) {
      blurred = gaussian_blur(img, sigma);
      src = &blurred;
    }
  }
  return {bilinear_resize(*src, h, w), alpha};
}

ImageBuffer pad_to_patch_multiple(const ImageBuffer& img, int patch) {
  if (patch < 1) throw ShapeError("pad_to_patch_multiple: patch side must be >= 1");
  int ph = (img.height + patch - 1) / patch * patch;
  int pw = (img.width + patch - 1) / patch * patch;
  if (ph == img.height && pw == img.width) return img;
  ImageBuffer out(ph, pw);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, x, c);
  return out;
}

ImageBuffer hflip(const ImageBuffer& img) {
  ImageBuffer out(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
  return out;
}

MultiScaleRepresentation build_multiscale(const ImageBuffer& native,
                                          const std::vector<int>& targets) {
  MultiScaleRepresentation ms;
  ms.native = native;
  ms.targets = targets;
  ms.variants.reserve(targets.size());
  for (int L : targets) ms.variants.push_back(arp_resize(native, L));
  return ms;
}

}  // namespace musiq
