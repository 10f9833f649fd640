#include "cadet/types.hpp"

#include <cctype>
#include <unordered_map>

#include "cadet/errors.hpp"

namespace cadet {

std::string normalize_name(const std::string& raw,
                           const std::map<std::string, std::string>& aliases) {
  std::string out;
  out.reserve(raw.size());
  bool pending_space = false;
  for (unsigned char c : raw) {
    if (std::isalnum(c)) {
      if (pending_space && !out.empty()) out.push_back(' ');
      pending_space = false;
      out.push_back(static_cast<char>(std::tolower(c)));
    } else if (std::isspace(c) || std::ispunct(c)) {
      pending_space = true;  // punctuation acts as a word break
    }
  }
  auto it = aliases.find(out);
  if (it != aliases.end()) return it->second;
  return out;
}

ClassVocabulary::ClassVocabulary(
    const std::vector<std::string>& names,
    const std::map<std::string, std::string>& aliases) {
  for (const auto& [key, target] : aliases) {
    aliases_[normalize_name(key)] = normalize_name(target);
  }
  for (const auto& raw : names) {
    std::string canonical = normalize_name(raw, aliases_);
    if (index_.count(canonical)) {
      throw DataError("duplicate class name after normalization: '" +
                      canonical + "' (from '" + raw + "')");
    }
    index_[canonical] = static_cast<int>(names_.size());
    names_.push_back(canonical);
  }
  for (const auto& [key, target] : aliases_) {
    if (!index_.count(target)) {
      throw DataError("alias target '" + target +
                      "' is not a vocabulary class");
    }
  }
}

std::optional<int> ClassVocabulary::find(const std::string& raw) const {
  auto it = index_.find(normalize_name(raw, aliases_));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

int ClassVocabulary::require(const std::string& raw) const {
  auto id = find(raw);
  if (!id) throw DataError("unknown class name: '" + raw + "'");
  return *id;
}

const ImageInfo* DatasetIndex::find_image(ImageId id) const {
  for (const auto& im : images) {
    if (im.id == id) return &im;
  }
  return nullptr;
}

std::vector<const Annotation*> DatasetIndex::annotations_of(ImageId id) const {
  std::vector<const Annotation*> out;
  for (const auto& a : annotations) {
    if (a.image_id == id) out.push_back(&a);
  }
  return out;
}

void DatasetIndex::validate() const {
  std::unordered_map<ImageId, const ImageInfo*> by_id;
  for (const auto& im : images) by_id[im.id] = &im;
  for (const auto& a : annotations) {
    auto it = by_id.find(a.image_id);
    if (it == by_id.end()) {
      throw DataError("annotation references missing image id " +
                      std::to_string(a.image_id));
    }
    if (a.class_id < 0 || a.class_id >= vocabulary.size()) {
      throw DataError("annotation class id " + std::to_string(a.class_id) +
                      " outside vocabulary");
    }
    const ImageInfo& im = *it->second;
    if (!a.box.valid() || a.box.x_min < 0 || a.box.y_min < 0 ||
        a.box.x_max > im.width || a.box.y_max > im.height) {
      throw DataError("annotation box escapes image " +
                      std::to_string(a.image_id));
    }
  }
}

}  // namespace cadet
