#include "musiq/tokenizer.hpp"

#include <algorithm>

namespace musiq {

PatchGrid extract_patches(const ImageBuffer& img, int patch, int scale_index) {
  if (patch < 1) throw ShapeError("extract_patches: patch side must be >= 1");
  if (img.height % patch != 0 || img.width % patch != 0)
    throw ShapeError("extract_patches: extents are not multiples of the patch side");
  PatchGrid grid;
  grid.scale = scale_index;
  grid.rows = img.height / patch;
  grid.cols = img.width / patch;
  grid.patch = patch;
  size_t block = static_cast<size_t>(patch) * patch * 3;
  grid.blocks.resize(static_cast<size_t>(grid.count()) * block);
  for (int i = 0; i < grid.rows; ++i)
    for (int j = 0; j < grid.cols; ++j) {
      float* dst = grid.blocks.data() + (static_cast<size_t>(i) * grid.cols + j) * block;
      for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x)
          for (int c = 0; c < 3; ++c)
            dst[(static_cast<size_t>(y) * patch + x) * 3 + c] =
                img.at(i * patch + y, j * patch + x, c);
    }
  return grid;
}

namespace {

void append_segment(TokenLayout& layout, const PatchGrid& grid, int capacity,
                    int& next_patch_index) {
  LayoutSegment seg;
  seg.scale = grid.scale;
  seg.offset = layout.total_slots();
  seg.capacity = capacity;
  seg.valid = std::min(grid.count(), capacity);
  seg.rows = grid.rows;
  seg.cols = grid.cols;
  for (int s = 0; s < capacity; ++s) {
    TokenSlot slot;
    slot.scale = grid.scale;
    if (s < seg.valid) {
      slot.valid = true;
      slot.row = s / grid.cols;
      slot.col = s % grid.cols;
      slot.patch_index = next_patch_index++;
    }
    layout.slots.push_back(slot);
  }
  layout.segments.push_back(seg);
}

}  // namespace

TokenLayout build_layout(const PatchGrid* native, const std::vector<PatchGrid>& variants,
                         int max_native, const std::vector<int>& capacities, bool padded) {
  if (variants.size() != capacities.size())
    throw ShapeError("build_layout: one capacity per variant required");
  TokenLayout layout;
  TokenSlot cls;
  cls.valid = true;
  layout.slots.push_back(cls);

  int next = 0;
  if (native) {
    int cap = padded ? max_native : std::min(native->count(), max_native);
    append_segment(layout, *native, cap, next);
  }
  for (size_t k = 0; k < variants.size(); ++k) {
    if (variants[k].count() > capacities[k])
      throw ShapeError("build_layout: variant patch count exceeds its capacity");
    int cap = padded ? capacities[k] : variants[k].count();
    append_segment(layout, variants[k], cap, next);
  }
  layout.valid_patches = next;
  return layout;
}

TokenizedImage tokenize(const MultiScaleRepresentation& ms, int patch, int max_native,
                        const std::vector<int>& capacities, bool padded,
                        bool include_native) {
  PatchGrid native;
  std::vector<PatchGrid> variants;
  if (include_native)
    native = extract_patches(pad_to_patch_multiple(ms.native, patch), patch, 0);
  for (size_t k = 0; k < ms.variants.size(); ++k)
    variants.push_back(extract_patches(pad_to_patch_multiple(ms.variants[k].image, patch),
                                       patch, static_cast<int>(k) + 1));

  TokenizedImage out;
  out.patch = patch;
  out.layout = build_layout(include_native ? &native : nullptr, variants, max_native,
                            capacities, padded);

  size_t block = static_cast<size_t>(patch) * patch * 3;
  out.patch_pixels.resize(static_cast<size_t>(out.layout.valid_patches) * block);
  for (const TokenSlot& slot : out.layout.slots) {
    if (!slot.valid || slot.patch_index < 0) continue;
    const PatchGrid& grid = slot.scale == 0 ? native : variants[slot.scale - 1];
    const float* src =
        grid.blocks.data() + (static_cast<size_t>(slot.row) * grid.cols + slot.col) * block;
    std::copy(src, src + block,
              out.patch_pixels.data() + static_cast<size_t>(slot.patch_index) * block);
  }
  return out;
}

}  // namespace musiq
