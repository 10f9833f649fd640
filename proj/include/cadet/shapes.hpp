#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cadet/image.hpp"
#include "cadet/types.hpp"

namespace cadet {

// Synthetic detection dataset: colored shapes on a textured gray background,
// with exact bounding boxes. Object type is cued primarily by color, so a
// type discriminator has signal to erase.
struct ShapesConfig {
  int image_count = 2000;
  int image_size = 128;
  std::uint64_t seed = 7;
  int min_shapes = 1;
  int max_shapes = 1;
  double min_side = 24;
  double max_side = 72;
  // square, circle, triangle, cross, ring (a prefix of this list).
  int class_count = 5;
  // Unlabeled clutter splats per image: amorphous blobs drawn with random
  // hue but object-matched brightness and saturation, so telling objects
  // from clutter takes shape regularity rather than a color threshold.
  int min_clutter = 0;
  int max_clutter = 0;
};

struct ShapesDataset {
  DatasetIndex index;
  std::vector<ImageU8> images;  // parallel to index.images
};

ShapesDataset generate_shapes(const ShapesConfig& config);

// Writes <dir>/img_<id>.ppm for every image plus <dir>/annotations.json.
void write_shapes(const ShapesDataset& dataset, const std::string& dir);

}  // namespace cadet
