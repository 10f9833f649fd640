#pragma once

#include <map>
#include <string>

#include "cadet/types.hpp"

namespace cadet {

// COCO annotation JSON (images / annotations / categories). Boxes arrive as
// (x, y, w, h) and are stored corner-form, clipped to the image. Category
// names pass through normalize_name with the given alias map. Malformed input
// raises DataError with a location (byte offset for parse errors, element
// index otherwise).
DatasetIndex load_coco_json(const std::string& path,
                            const std::map<std::string, std::string>& aliases = {});

// Inverse of load_coco_json; save -> load -> save is byte-identical.
void save_coco_json(const DatasetIndex& index, const std::string& path);

}  // namespace cadet
