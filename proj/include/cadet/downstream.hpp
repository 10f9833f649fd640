#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cadet/image.hpp"
#include "cadet/metrics.hpp"
#include "cadet/types.hpp"

namespace cadet {

struct CropSpec {
  ImageId image_id = 0;
  int rank = 1;  // 1-based by detection score
  BoundingBox box;
  double padding = 0;  // context fraction applied around the box
};

// Top-m detections cropped out of the image (detections must be score-sorted;
// fewer detections yield fewer crops). Boxes get padded by `padding` times
// their extent, clipped, then cropped; crops below 8x8 are upscaled.
std::vector<std::pair<CropSpec, ImageU8>> make_crops(
    const std::vector<Detection>& detections, const ImageU8& image, int m,
    double padding = 0);

struct ClassificationResult {
  std::string label;
  double confidence = 0;
};

// Pluggable crop classifier. The oracle reads the spec, the socket client the
// pixels. Transport errors surface as exceptions; the evaluator retries.
class ClassifierClient {
 public:
  virtual ~ClassifierClient() = default;
  virtual ClassificationResult classify(const CropSpec& spec,
                                        const ImageU8& crop) = 0;
};

// Deterministic test oracle: answers the class name of the ground-truth box
// IoU-matched by spec.box (>= threshold), otherwise "background".
class OracleClassifier : public ClassifierClient {
 public:
  explicit OracleClassifier(const DatasetIndex& truths, double iou_threshold = 0.5);
  ClassificationResult classify(const CropSpec& spec, const ImageU8& crop) override;

 private:
  const DatasetIndex& truths_;
  double iou_threshold_;
};

// Newline-delimited JSON over TCP: request {"id", "image"(base64 PNG)},
// response {"id", "label", "confidence"}. One persistent connection,
// re-established on failure.
class SocketClassifier : public ClassifierClient {
 public:
  explicit SocketClassifier(const std::string& address);  // "host:port"
  ~SocketClassifier() override;
  ClassificationResult classify(const CropSpec& spec, const ImageU8& crop) override;

 private:
  void connect_once();
  std::string host_;
  int port_ = 0;
  int fd_ = -1;
  long long next_id_ = 1;
  std::string buffer_;
};

struct DownstreamOptions {
  std::vector<int> m_grid = {1, 5, 10};
  double padding = 0;
  int max_attempts = 3;  // classifier calls per crop before marking failure
};

// Accuracy@M over the m grid, BO-accuracy, plus the reference rows
// (uncropped image, ground-truth crop). Every eval image must carry exactly
// one non-crowd ground-truth annotation. Classifier failures count the
// affected image as wrong and are tallied.
DownstreamReport evaluate_downstream(
    const DatasetIndex& dataset,
    const std::function<ImageU8(ImageId)>& load_image,
    const std::function<std::vector<Detection>(ImageId)>& detect,
    ClassifierClient& classifier, const DownstreamOptions& options = {});

}  // namespace cadet
