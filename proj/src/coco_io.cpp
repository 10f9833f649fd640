#include "cadet/coco_io.hpp"

#include <algorithm>
#include <fstream>

#include <nlohmann/json.hpp>

#include "cadet/errors.hpp"

namespace cadet {

namespace {

using json = nlohmann::ordered_json;

json parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    // nlohmann reports the byte offset in what(); keep it.
    throw DataError(path + ": " + e.what());
  }
}

const json& field(const json& j, const char* key, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) throw DataError(where + ": missing '" + key + "'");
  return *it;
}

}  // namespace

DatasetIndex load_coco_json(const std::string& path,
                            const std::map<std::string, std::string>& aliases) {
  json j = parse_file(path);
  DatasetIndex index;
  try {
    const json& categories = field(j, "categories", path);
    std::vector<std::string> names;
    std::map<long long, int> cat_to_class;
    for (size_t i = 0; i < categories.size(); ++i) {
      std::string where = path + ": categories[" + std::to_string(i) + "]";
      const json& cat = categories[i];
      long long cat_id = field(cat, "id", where).get<long long>();
      if (cat_to_class.count(cat_id)) {
        throw DataError(where + ": duplicate category id");
      }
      cat_to_class[cat_id] = static_cast<int>(i);
      names.push_back(field(cat, "name", where).get<std::string>());
    }
    index.vocabulary = ClassVocabulary(names, aliases);

    std::map<ImageId, size_t> image_pos;
    const json& images = field(j, "images", path);
    for (size_t i = 0; i < images.size(); ++i) {
      std::string where = path + ": images[" + std::to_string(i) + "]";
      const json& im = images[i];
      ImageInfo info;
      info.id = field(im, "id", where).get<ImageId>();
      info.width = field(im, "width", where).get<int>();
      info.height = field(im, "height", where).get<int>();
      if (im.contains("file_name")) info.locator = im["file_name"].get<std::string>();
      if (info.width <= 0 || info.height <= 0) {
        throw DataError(where + ": non-positive image size");
      }
      if (image_pos.count(info.id)) throw DataError(where + ": duplicate image id");
      image_pos[info.id] = index.images.size();
      index.images.push_back(std::move(info));
    }

    const json& annotations = field(j, "annotations", path);
    for (size_t i = 0; i < annotations.size(); ++i) {
      std::string where = path + ": annotations[" + std::to_string(i) + "]";
      const json& an = annotations[i];
      Annotation a;
      a.image_id = field(an, "image_id", where).get<ImageId>();
      auto img_it = image_pos.find(a.image_id);
      if (img_it == image_pos.end()) {
        throw DataError(where + ": unknown image_id " + std::to_string(a.image_id));
      }
      long long cat = field(an, "category_id", where).get<long long>();
      auto cat_it = cat_to_class.find(cat);
      if (cat_it == cat_to_class.end()) {
        throw DataError(where + ": unknown category_id " + std::to_string(cat));
      }
      a.class_id = cat_it->second;
      const json& bbox = field(an, "bbox", where);
      if (!bbox.is_array() || bbox.size() != 4) {
        throw DataError(where + ": bbox must be [x, y, w, h]");
      }
      double x = bbox[0].get<double>(), y = bbox[1].get<double>();
      double w = bbox[2].get<double>(), h = bbox[3].get<double>();
      if (w <= 0 || h <= 0) throw DataError(where + ": non-positive bbox extent");
      const ImageInfo& info = index.images[img_it->second];
      a.box = clip_box({x, y, x + w, y + h}, info.width, info.height);
      if (a.box.width() <= 0 || a.box.height() <= 0) {
        throw DataError(where + ": bbox lies outside the image");
      }
      a.is_crowd = an.value("iscrowd", 0) != 0;
      index.annotations.push_back(std::move(a));
    }
  } catch (const json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  index.validate();
  return index;
}

void save_coco_json(const DatasetIndex& index, const std::string& path) {
  json j;
  json images = json::array();
  for (const auto& im : index.images) {
    json e{{"id", im.id}, {"width", im.width}, {"height", im.height}};
    if (!im.locator.empty()) e["file_name"] = im.locator;
    images.push_back(std::move(e));
  }
  json annotations = json::array();
  long long next_id = 1;
  for (const auto& a : index.annotations) {
    annotations.push_back({{"id", next_id++},
                           {"image_id", a.image_id},
                           {"category_id", a.class_id + 1},
                           {"bbox", {a.box.x_min, a.box.y_min, a.box.width(),
                                     a.box.height()}},
                           {"iscrowd", a.is_crowd ? 1 : 0}});
  }
  json categories = json::array();
  for (int i = 0; i < index.vocabulary.size(); ++i) {
    categories.push_back({{"id", i + 1}, {"name", index.vocabulary.name(i)}});
  }
  j["images"] = std::move(images);
  j["annotations"] = std::move(annotations);
  j["categories"] = std::move(categories);
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << j.dump(2) << "\n";
}

}  // namespace cadet
