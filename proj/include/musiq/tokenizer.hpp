#pragma once

#include <vector>

#include "musiq/image.hpp"

namespace musiq {

// Raster-order square patches cut from one (already padded) image.
struct PatchGrid {
  int scale = 0;  // 0 = native, 1..K = resized variants
  int rows = 0;
  int cols = 0;
  int patch = 0;                      // P
  std::vector<float> blocks;          // rows*cols blocks of P*P*3, raster order
  int count() const { return rows * cols; }
};

// One slot of the fixed token layout.
struct TokenSlot {
  bool valid = false;
  int scale = -1;  // segment scale; -1 for the CLS slot
  int row = -1;    // patch coordinates; -1,-1 for CLS and padding
  int col = -1;
  int patch_index = -1;  // index into the packed valid-patch list, -1 otherwise
};

struct LayoutSegment {
  int scale = 0;
  int offset = 0;    // first slot of the segment
  int capacity = 0;  // slots reserved
  int valid = 0;     // leading valid slots
  int rows = 0;      // source grid extents (for HSE)
  int cols = 0;
};

// Fixed-length slot layout: [CLS, native x l, scale_1 x m_1, ..., scale_K x m_K].
// Slot count depends only on the capacities, never on the input image.
struct TokenLayout {
  std::vector<TokenSlot> slots;        // slots[0] is CLS
  std::vector<LayoutSegment> segments; // native first (when present), then k = 1..K
  int valid_patches = 0;               // packed patch list length

  int total_slots() const { return static_cast<int>(slots.size()); }
};

// Layout plus the packed pixel blocks feeding the patch encoder.
struct TokenizedImage {
  TokenLayout layout;
  int patch = 0;
  std::vector<float> patch_pixels;  // valid_patches blocks of P*P*3, slot order
};

// Cut a padded image into P x P patches. Extents must be multiples of P.
PatchGrid extract_patches(const ImageBuffer& img, int patch, int scale_index);

// Assemble the layout from per-scale grids. `max_native` is the native
// segment capacity l (truncation keeps the raster-order prefix);
// `capacities` are the m_k. With padded=false every segment is sized to its
// actual patch count (single-input evaluation).
TokenLayout build_layout(const PatchGrid* native, const std::vector<PatchGrid>& variants,
                         int max_native, const std::vector<int>& capacities, bool padded);

// Full pipeline: pad each scale, cut patches, build layout, pack pixels.
TokenizedImage tokenize(const MultiScaleRepresentation& ms, int patch, int max_native,
                        const std::vector<int>& capacities, bool padded,
                        bool include_native = true);

}  // namespace musiq
