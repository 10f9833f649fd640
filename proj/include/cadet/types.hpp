#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cadet/geometry.hpp"

namespace cadet {

using ImageId = std::int64_t;

struct Annotation {
  BoundingBox box;
  int class_id = 0;  // index into the owning vocabulary
  ImageId image_id = 0;
  bool is_crowd = false;
};

struct Detection {
  BoundingBox box;
  double score = 0;  // in [0,1]
  ImageId image_id = 0;
  std::optional<int> class_id;  // absent for class-agnostic output
};

// Lowercase, trim, collapse internal whitespace, strip punctuation, then
// apply the manual alias map (whose keys are normalized the same way).
std::string normalize_name(const std::string& raw,
                           const std::map<std::string, std::string>& aliases = {});

class ClassVocabulary {
 public:
  ClassVocabulary() = default;
  // Names are normalized on construction; duplicates after normalization
  // and aliases pointing outside the vocabulary are rejected.
  ClassVocabulary(const std::vector<std::string>& names,
                  const std::map<std::string, std::string>& aliases = {});

  int size() const { return static_cast<int>(names_.size()); }
  const std::vector<std::string>& names() const { return names_; }
  const std::string& name(int class_id) const { return names_.at(class_id); }
  const std::map<std::string, std::string>& aliases() const { return aliases_; }

  // Resolves a raw name through normalization + aliases; nullopt if unknown.
  std::optional<int> find(const std::string& raw) const;
  int require(const std::string& raw) const;  // DataError if unknown

 private:
  std::vector<std::string> names_;
  std::map<std::string, std::string> aliases_;
  std::map<std::string, int> index_;
};

struct ImageInfo {
  ImageId id = 0;
  int width = 0;
  int height = 0;
  std::string locator;  // pixel source, e.g. a file path
};

struct DatasetIndex {
  std::vector<ImageInfo> images;
  std::vector<Annotation> annotations;
  ClassVocabulary vocabulary;

  const ImageInfo* find_image(ImageId id) const;
  std::vector<const Annotation*> annotations_of(ImageId id) const;
  // Throws DataError on dangling image ids, unknown class ids, or boxes
  // that escape their image bounds.
  void validate() const;
};

}  // namespace cadet
