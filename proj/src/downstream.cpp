#include "cadet/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <optional>

#include <netdb.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "cadet/errors.hpp"

namespace cadet {

namespace {

// Pixel rect spanning the (padded, clipped) box; upscaled if tiny so the
// classifier never sees sub-8px crops.
ImageU8 crop_box(const ImageU8& image, const BoundingBox& box) {
  int x0 = static_cast<int>(std::floor(box.x_min));
  int y0 = static_cast<int>(std::floor(box.y_min));
  int x1 = static_cast<int>(std::ceil(box.x_max));
  int y1 = static_cast<int>(std::ceil(box.y_max));
  ImageU8 crop = crop_image(image, x0, y0, x1, y1);
  int scale = 1;
  while (crop.width * scale < 8 || crop.height * scale < 8) ++scale;
  if (scale > 1) crop = resize_nearest(crop, crop.width * scale, crop.height * scale);
  return crop;
}

BoundingBox padded_box(const BoundingBox& box, double padding, const ImageU8& image) {
  double pw = padding * box.width(), ph = padding * box.height();
  BoundingBox out{box.x_min - pw, box.y_min - ph, box.x_max + pw, box.y_max + ph};
  return clip_box(out, image.width, image.height);
}

}  // namespace

std::vector<std::pair<CropSpec, ImageU8>> make_crops(
    const std::vector<Detection>& detections, const ImageU8& image, int m,
    double padding) {
  std::vector<std::pair<CropSpec, ImageU8>> crops;
  int count = std::min<int>(m, static_cast<int>(detections.size()));
  crops.reserve(count);
  for (int i = 0; i < count; ++i) {
    CropSpec spec;
    spec.image_id = detections[i].image_id;
    spec.rank = i + 1;
    spec.box = padded_box(detections[i].box, padding, image);
    spec.padding = padding;
    crops.emplace_back(spec, crop_box(image, spec.box));
  }
  return crops;
}

// ---------------------------------------------------------------------------
// OracleClassifier

OracleClassifier::OracleClassifier(const DatasetIndex& truths, double iou_threshold)
    : truths_(truths), iou_threshold_(iou_threshold) {}

ClassificationResult OracleClassifier::classify(const CropSpec& spec,
                                                const ImageU8& crop) {
  (void)crop;
  double best = 0;
  const Annotation* hit = nullptr;
  for (const Annotation* ann : truths_.annotations_of(spec.image_id)) {
    if (ann->is_crowd) continue;
    double v = iou(spec.box, ann->box);
    if (v > best) {
      best = v;
      hit = ann;
    }
  }
  if (hit && best >= iou_threshold_) {
    return {truths_.vocabulary.name(hit->class_id), best};
  }
  return {"background", 1.0 - best};
}

// ---------------------------------------------------------------------------
// SocketClassifier

SocketClassifier::SocketClassifier(const std::string& address) {
  auto colon = address.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == address.size()) {
    throw ConfigError("classifier address must be host:port, got '" + address + "'");
  }
  host_ = address.substr(0, colon);
  try {
    port_ = std::stoi(address.substr(colon + 1));
  } catch (const std::exception&) {
    port_ = -1;
  }
  if (port_ <= 0 || port_ > 65535) {
    throw ConfigError("bad classifier port in '" + address + "'");
  }
}

SocketClassifier::~SocketClassifier() {
  if (fd_ >= 0) ::close(fd_);
}

void SocketClassifier::connect_once() {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  int rc = ::getaddrinfo(host_.c_str(), std::to_string(port_).c_str(), &hints, &res);
  if (rc != 0) {
    throw DataError("classifier resolve failed for " + host_ + ": " + gai_strerror(rc));
  }
  int fd = -1;
  for (addrinfo* ai = res; ai; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0) {
    throw DataError("cannot connect to classifier at " + host_ + ":" +
                    std::to_string(port_));
  }
  fd_ = fd;
  buffer_.clear();
}

ClassificationResult SocketClassifier::classify(const CropSpec& spec,
                                                const ImageU8& crop) {
  (void)spec;
  if (fd_ < 0) connect_once();
  long long id = next_id_++;

  nlohmann::ordered_json request = {
      {"id", id}, {"image", base64_encode(encode_png(crop))}};
  std::string line = request.dump();
  line.push_back('\n');

  auto fail = [this](const std::string& why) -> ClassificationResult {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
    throw DataError("classifier connection: " + why);
  };

  size_t sent = 0;
  while (sent < line.size()) {
    ssize_t n = ::send(fd_, line.data() + sent, line.size() - sent, 0);
    if (n <= 0) return fail("send failed");
    sent += static_cast<size_t>(n);
  }

  std::string reply;
  for (;;) {
    auto nl = buffer_.find('\n');
    if (nl != std::string::npos) {
      reply = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      break;
    }
    char chunk[4096];
    ssize_t n = ::recv(fd_, chunk, sizeof chunk, 0);
    if (n <= 0) return fail("connection closed mid-reply");
    buffer_.append(chunk, static_cast<size_t>(n));
  }

  try {
    auto j = nlohmann::json::parse(reply);
    if (j.at("id").get<long long>() != id) {
      return fail("response id mismatch");
    }
    return {j.at("label").get<std::string>(), j.value("confidence", 0.0)};
  } catch (const nlohmann::json::exception& e) {
    return fail(std::string("bad response: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

// nullopt if every attempt threw; failures are tallied by the caller.
std::optional<ClassificationResult> classify_with_retry(
    ClassifierClient& classifier, const CropSpec& spec, const ImageU8& crop,
    int max_attempts) {
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    try {
      return classifier.classify(spec, crop);
    } catch (const std::exception&) {
      // transient transport failure; retry
    }
  }
  return std::nullopt;
}

}  // namespace

DownstreamReport evaluate_downstream(
    const DatasetIndex& dataset,
    const std::function<ImageU8(ImageId)>& load_image,
    const std::function<std::vector<Detection>(ImageId)>& detect,
    ClassifierClient& classifier, const DownstreamOptions& options) {
  if (options.m_grid.empty()) throw ConfigError("downstream m grid is empty");
  if (dataset.images.empty()) throw DataError("downstream eval: empty dataset");
  int m_max = *std::max_element(options.m_grid.begin(), options.m_grid.end());
  if (m_max <= 0) throw ConfigError("downstream m values must be positive");

  DownstreamReport report;
  std::map<ImageId, std::vector<std::pair<int, int>>> predictions;
  std::map<ImageId, int> truth_classes;
  int bo_correct = 0, uncropped_correct = 0, gt_correct = 0;

  for (const auto& info : dataset.images) {
    const Annotation* truth = nullptr;
    for (const Annotation* ann : dataset.annotations_of(info.id)) {
      if (ann->is_crowd) continue;
      if (truth) {
        throw DataError("downstream eval: image " + std::to_string(info.id) +
                        " has more than one ground-truth object");
      }
      truth = ann;
    }
    if (!truth) {
      throw DataError("downstream eval: image " + std::to_string(info.id) +
                      " has no ground-truth object");
    }
    truth_classes[info.id] = truth->class_id;

    ImageU8 image = load_image(info.id);
    std::vector<Detection> detections = detect(info.id);
    std::stable_sort(detections.begin(), detections.end(),
                     [](const Detection& a, const Detection& b) {
                       return a.score > b.score;
                     });

    auto run = [&](const CropSpec& spec, const ImageU8& crop) {
      auto result =
          classify_with_retry(classifier, spec, crop, options.max_attempts);
      if (!result) ++report.classifier_failures;
      return result;
    };
    auto label_id = [&](const std::optional<ClassificationResult>& r) {
      if (!r) return -1;
      auto found = dataset.vocabulary.find(r->label);
      return found ? *found : -1;
    };

    // Ranked crops feeding Accuracy@M.
    auto& rows = predictions[info.id];
    for (const auto& [spec, crop] : make_crops(detections, image, m_max,
                                               options.padding)) {
      rows.emplace_back(label_id(run(spec, crop)), spec.rank);
    }

    // Best-overlap selection against the single truth box.
    if (!detections.empty()) {
      const Detection& pick = best_overlap_select(detections, truth->box);
      auto [spec, crop] = make_crops({pick}, image, 1, options.padding).front();
      if (label_id(run(spec, crop)) == truth->class_id) ++bo_correct;
    }

    // Reference rows: whole frame, then the ground-truth crop.
    CropSpec whole;
    whole.image_id = info.id;
    whole.box = BoundingBox{0, 0, static_cast<double>(image.width),
                            static_cast<double>(image.height)};
    if (label_id(run(whole, image)) == truth->class_id) ++uncropped_correct;

    Detection as_detection{truth->box, 1.0, info.id, std::nullopt};
    auto [gt_spec, gt_crop] =
        make_crops({as_detection}, image, 1, options.padding).front();
    if (label_id(run(gt_spec, gt_crop)) == truth->class_id) ++gt_correct;
  }

  double n = static_cast<double>(dataset.images.size());
  for (int m : options.m_grid) {
    report.accuracy_at_m[m] = accuracy_at_m(predictions, truth_classes, m);
  }
  report.bo_accuracy = bo_correct / n;
  report.uncropped_accuracy = uncropped_correct / n;
  report.gt_crop_accuracy = gt_correct / n;
  return report;
}

}  // namespace cadet
