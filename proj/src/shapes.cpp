#include "cadet/shapes.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>

#include "cadet/coco_io.hpp"
#include "cadet/errors.hpp"
#include "cadet/geometry.hpp"
#include "cadet/nn.hpp"

namespace cadet {

namespace {

// Type is cued by geometry alone: every fill — object or clutter — draws
// from the same random-hue distribution, so color carries no class or
// figure/ground signal and class difficulty is a matter of shape
// distinctiveness. Fills are bright against the dark background, so plain
// luminance contrast carries objectness for any class.
constexpr const char* kShapeNames[5] = {"square", "circle", "triangle",
                                        "cross", "ring"};

std::uint8_t clamp_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
}

Rgb jitter(Rgb base, nn::Rng& rng, double amount) {
  Rgb out;
  for (int c = 0; c < 3; ++c) {
    out[c] = clamp_u8(base[c] + rng.uniform(-amount, amount));
  }
  return out;
}

bool inside_shape(int cls, double u, double v) {
  // (u, v) in [0,1]^2 within the bounding box.
  double du = u - 0.5, dv = v - 0.5;
  switch (cls) {
    case 0:  // square
      return true;
    case 1:  // circle
      return du * du + dv * dv <= 0.25;
    case 2:  // triangle, apex up
      return v >= 2.0 * std::abs(du);
    case 3:  // cross
      return std::abs(du) <= 1.0 / 6 || std::abs(dv) <= 1.0 / 6;
    case 4: {  // ring
      double r2 = du * du + dv * dv;
      return r2 <= 0.25 && r2 >= 0.25 * 0.25;
    }
    default:
      return false;
  }
}

// Fixed saturation/value sit mid-palette, so clutter fills share the
// objects' brightness statistics and differ only in hue and outline.
Rgb hsv_fill(double hue_deg) {
  constexpr double kSat = 0.66, kVal = 0.92;
  double c = kVal * kSat;
  double hp = hue_deg / 60.0;
  double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) {
    r = c, g = x;
  } else if (hp < 2) {
    r = x, g = c;
  } else if (hp < 3) {
    g = c, b = x;
  } else if (hp < 4) {
    g = x, b = c;
  } else if (hp < 5) {
    r = x, b = c;
  } else {
    r = c, b = x;
  }
  double m = kVal - c;
  return {clamp_u8((r + m) * 255), clamp_u8((g + m) * 255),
          clamp_u8((b + m) * 255)};
}

// Lumpy union of disks — a solid core plus a ring of offset lumps — so the
// outline has no straight edges and no constant-curvature arc to mimic the
// shape classes. Disk extents stay inside the box.
void draw_splat(ImageU8& image, const BoundingBox& box, Rgb color,
                nn::Rng& rng) {
  double r_out = std::min(box.width(), box.height()) / 2;
  double cx = (box.x_min + box.x_max) / 2;
  double cy = (box.y_min + box.y_max) / 2;
  struct Disk {
    double x, y, r;
  };
  std::vector<Disk> disks;
  disks.push_back({cx, cy, r_out * rng.uniform(0.30, 0.45)});
  int lumps = 5 + rng.uniform_int(3);
  for (int j = 0; j < lumps; ++j) {
    double ang = (j + rng.uniform(0.0, 0.8)) * 2.0 * std::numbers::pi / lumps;
    double dist = r_out * rng.uniform(0.25, 0.55);
    disks.push_back({cx + dist * std::cos(ang), cy + dist * std::sin(ang),
                     r_out * rng.uniform(0.25, 0.45)});
  }
  int x0 = static_cast<int>(std::floor(box.x_min));
  int y0 = static_cast<int>(std::floor(box.y_min));
  int x1 = static_cast<int>(std::ceil(box.x_max));
  int y1 = static_cast<int>(std::ceil(box.y_max));
  for (int y = std::max(0, y0); y < std::min(image.height, y1); ++y) {
    for (int x = std::max(0, x0); x < std::min(image.width, x1); ++x) {
      for (const auto& d : disks) {
        double dx = x + 0.5 - d.x, dy = y + 0.5 - d.y;
        if (dx * dx + dy * dy <= d.r * d.r) {
          image.set(x, y, color);
          break;
        }
      }
    }
  }
}

void draw_shape(ImageU8& image, int cls, const BoundingBox& box, Rgb color) {
  int x0 = static_cast<int>(std::floor(box.x_min));
  int y0 = static_cast<int>(std::floor(box.y_min));
  int x1 = static_cast<int>(std::ceil(box.x_max));
  int y1 = static_cast<int>(std::ceil(box.y_max));
  for (int y = std::max(0, y0); y < std::min(image.height, y1); ++y) {
    for (int x = std::max(0, x0); x < std::min(image.width, x1); ++x) {
      double u = (x + 0.5 - box.x_min) / box.width();
      double v = (y + 0.5 - box.y_min) / box.height();
      if (u < 0 || u > 1 || v < 0 || v > 1) continue;
      if (inside_shape(cls, u, v)) image.set(x, y, color);
    }
  }
}

}  // namespace

ShapesDataset generate_shapes(const ShapesConfig& config) {
  if (config.class_count < 1 || config.class_count > 5) {
    throw ConfigError("shapes: class_count must be in 1..5");
  }
  if (config.min_shapes < 1 || config.max_shapes < config.min_shapes) {
    throw ConfigError("shapes: bad shapes-per-image range");
  }
  if (config.min_side < 8 || config.max_side < config.min_side ||
      config.max_side > config.image_size - 4) {
    throw ConfigError("shapes: bad side range");
  }
  if (config.min_clutter < 0 || config.max_clutter < config.min_clutter) {
    throw ConfigError("shapes: bad clutter range");
  }

  ShapesDataset out;
  std::vector<std::string> names;
  for (int c = 0; c < config.class_count; ++c) names.push_back(kShapeNames[c]);
  out.index.vocabulary = ClassVocabulary(names);

  nn::Rng rng(nn::Rng::derive(config.seed, 11));
  int s = config.image_size;
  for (int i = 0; i < config.image_count; ++i) {
    ImageId id = i + 1;
    ImageU8 image(s, s);
    // Dark textured near-gray background: base tone, per-pixel luminance
    // noise, and faint chroma, so brightness (not any particular hue) is
    // what separates background from objects.
    double base = rng.uniform(70, 100);
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        double g = base + rng.uniform(-18, 18);
        image.set(x, y, {clamp_u8(g + rng.uniform(-10, 10)),
                         clamp_u8(g + rng.uniform(-10, 10)),
                         clamp_u8(g + rng.uniform(-10, 10))});
      }
    }

    int count = config.min_shapes +
                (config.max_shapes > config.min_shapes
                     ? rng.uniform_int(config.max_shapes - config.min_shapes + 1)
                     : 0);
    struct PlacedShape {
      int cls;
      BoundingBox box;
      Rgb color;
    };
    std::vector<PlacedShape> shapes;
    std::vector<BoundingBox> placed;
    for (int k = 0; k < count; ++k) {
      int cls = rng.uniform_int(config.class_count);
      // Rejection-place to keep shapes mostly separate.
      for (int attempt = 0; attempt < 20; ++attempt) {
        double side = rng.uniform(config.min_side, config.max_side);
        double cx = rng.uniform(2 + side / 2, s - 2 - side / 2);
        double cy = rng.uniform(2 + side / 2, s - 2 - side / 2);
        BoundingBox box = BoundingBox::from_center(cx, cy, side, side);
        bool clear = true;
        for (const auto& other : placed) {
          if (iou(box, other) > 0.2) {
            clear = false;
            break;
          }
        }
        if (!clear) continue;
        shapes.push_back({cls, box, jitter(kShapeClasses[cls].color, rng, 35)});
        placed.push_back(box);
        Annotation a;
        a.box = box;
        a.class_id = cls;
        a.image_id = id;
        out.index.annotations.push_back(a);
        break;
      }
    }

    // Clutter goes under the labeled shapes, which are drawn last so their
    // boxes stay exact even where a splat's box grazes them.
    int clutter =
        config.min_clutter +
        (config.max_clutter > config.min_clutter
             ? rng.uniform_int(config.max_clutter - config.min_clutter + 1)
             : 0);
    for (int k = 0; k < clutter; ++k) {
      for (int attempt = 0; attempt < 20; ++attempt) {
        double side = rng.uniform(config.min_side, config.max_side);
        double cx = rng.uniform(2 + side / 2, s - 2 - side / 2);
        double cy = rng.uniform(2 + side / 2, s - 2 - side / 2);
        BoundingBox box = BoundingBox::from_center(cx, cy, side, side);
        bool clear = true;
        for (const auto& other : placed) {
          if (iou(box, other) > 0.2) {
            clear = false;
            break;
          }
        }
        if (!clear) continue;
        draw_splat(image, box, jitter(hsv_fill(rng.uniform(0, 360)), rng, 35),
                   rng);
        placed.push_back(box);
        break;
      }
    }
    for (const auto& sh : shapes) draw_shape(image, sh.cls, sh.box, sh.color);

    ImageInfo info;
    info.id = id;
    info.width = s;
    info.height = s;
    char buf[32];
    std::snprintf(buf, sizeof buf, "img_%06lld.ppm", static_cast<long long>(id));
    info.locator = buf;
    out.index.images.push_back(info);
    out.images.push_back(std::move(image));
  }
  out.index.validate();
  return out;
}

void write_shapes(const ShapesDataset& dataset, const std::string& dir) {
  std::filesystem::create_directories(dir);
  for (size_t i = 0; i < dataset.images.size(); ++i) {
    write_ppm(dataset.images[i],
              dir + "/" + dataset.index.images[i].locator);
  }
  save_coco_json(dataset.index, dir + "/annotations.json");
}

}  // namespace cadet
