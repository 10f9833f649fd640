#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <functional>
#include <mutex>
#include <optional>
#include <thread>

#include <nlohmann/json.hpp>

#include "cadet/downstream.hpp"
#include "cadet/errors.hpp"
#include "cadet/nn.hpp"

using namespace cadet;

namespace {

// Minimal NDJSON line server on a loopback ephemeral port. The handler runs
// on the server thread (no doctest macros there); returning nullopt closes
// the connection without replying.
class LineServer {
 public:
  using Handler = std::function<std::optional<std::string>(const nlohmann::json&)>;

  explicit LineServer(Handler handler) : handler_(std::move(handler)) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    REQUIRE(listen_fd_ >= 0);
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = 0;
    REQUIRE(::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0);
    REQUIRE(::listen(listen_fd_, 8) == 0);
    socklen_t len = sizeof addr;
    REQUIRE(::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len) == 0);
    port_ = ntohs(addr.sin_port);
    thread_ = std::thread([this] { loop(); });
  }

  LineServer(const LineServer&) = delete;

  ~LineServer() {
    stop_.store(true);
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    if (thread_.joinable()) thread_.join();
  }

  std::string address() const { return "127.0.0.1:" + std::to_string(port_); }

 private:
  void loop() {
    while (!stop_.load()) {
      int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) return;
      std::string buf;
      char chunk[4096];
      bool open = true;
      while (open) {
        auto nl = buf.find('\n');
        if (nl == std::string::npos) {
          ssize_t n = ::recv(fd, chunk, sizeof chunk, 0);
          if (n <= 0) break;
          buf.append(chunk, static_cast<size_t>(n));
          continue;
        }
        std::string line = buf.substr(0, nl);
        buf.erase(0, nl + 1);
        std::optional<std::string> reply;
        try {
          reply = handler_(nlohmann::json::parse(line));
        } catch (...) {
          break;
        }
        if (!reply) break;
        std::string out = *reply + "\n";
        open = ::send(fd, out.data(), out.size(), 0) ==
               static_cast<ssize_t>(out.size());
      }
      ::close(fd);
    }
  }

  Handler handler_;
  int listen_fd_ = -1;
  int port_ = 0;
  std::atomic<bool> stop_{false};
  std::thread thread_;
};

ImageU8 gradient_image(int w, int h) {
  ImageU8 img(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      img.set(x, y, {static_cast<std::uint8_t>(x * 7 % 256),
                     static_cast<std::uint8_t>(y * 11 % 256),
                     static_cast<std::uint8_t>((x + y) % 256)});
    }
  }
  return img;
}

Detection det(BoundingBox box, double score, ImageId id = 1) {
  return {box, score, id, std::nullopt};
}

}  // namespace

TEST_CASE("make_crops ranks, pads, and upscales") {
  ImageU8 img = gradient_image(40, 40);
  std::vector<Detection> dets = {det({10, 10, 20, 20}, 0.9),
                                 det({0, 0, 3, 3}, 0.8),
                                 det({25, 25, 39, 39}, 0.7)};

  auto crops = make_crops(dets, img, 2);
  REQUIRE(crops.size() == 2);
  CHECK(crops[0].first.rank == 1);
  CHECK(crops[1].first.rank == 2);
  CHECK(crops[0].first.box == dets[0].box);  // zero padding keeps the box
  CHECK(crops[0].second.pixels == crop_image(img, 10, 10, 20, 20).pixels);

  auto all = make_crops(dets, img, 10);
  CHECK(all.size() == 3);  // fewer detections than m

  // 3x3 pixel crop scales up threefold to clear the 8px floor
  CHECK(all[1].second.width == 9);
  CHECK(all[1].second.height == 9);
  CHECK(all[1].first.box == dets[1].box);

  auto padded = make_crops(dets, img, 1, 0.5);
  CHECK(padded[0].first.box == BoundingBox{5, 5, 25, 25});
  CHECK(padded[0].first.padding == 0.5);
  auto clipped = make_crops({det({25, 25, 39, 39}, 0.7)}, img, 1, 1.0);
  CHECK(clipped[0].first.box == BoundingBox{11, 11, 40, 40});  // clipped at edges
}

TEST_CASE("oracle classifier answers by box overlap") {
  DatasetIndex index;
  index.vocabulary = ClassVocabulary({"square", "circle"});
  index.images.push_back({1, 40, 40, ""});
  index.annotations.push_back({{10, 10, 20, 20}, 1, 1, false});
  index.annotations.push_back({{0, 0, 40, 40}, 0, 1, true});  // crowd: ignored

  OracleClassifier oracle(index);
  ImageU8 unused(8, 8);

  CropSpec exact{1, 1, {10, 10, 20, 20}, 0};
  auto hit = oracle.classify(exact, unused);
  CHECK(hit.label == "circle");
  CHECK(hit.confidence == 1.0);

  CropSpec off{1, 1, {28, 28, 38, 38}, 0};
  CHECK(oracle.classify(off, unused).label == "background");

  CropSpec half{1, 1, {10, 15, 20, 25}, 0};  // iou 1/3, below threshold
  CHECK(oracle.classify(half, unused).label == "background");

  CropSpec overlapping{1, 1, {10, 10, 20, 21.0}, 0};  // iou 10/11
  CHECK(oracle.classify(overlapping, unused).label == "circle");

  // crowd never matches even though it covers everything
  CropSpec wide{1, 1, {0, 0, 40, 40}, 0};
  CHECK(oracle.classify(wide, unused).label == "background");
}

TEST_CASE("downstream evaluation with ground-truth detections is exact") {
  DatasetIndex index;
  index.vocabulary = ClassVocabulary({"square", "circle", "triangle"});
  std::map<ImageId, ImageU8> images;
  std::map<ImageId, std::vector<Detection>> detections;
  for (ImageId id = 1; id <= 3; ++id) {
    index.images.push_back({id, 64, 64, ""});
    BoundingBox box{6.0 + id, 8.0, 26.0 + id, 30.0};
    index.annotations.push_back({box, static_cast<int>(id - 1), id, false});
    images[id] = gradient_image(64, 64);
    detections[id] = {det(box, 0.9, id), det({40, 40, 60, 60}, 0.5, id)};
  }

  OracleClassifier oracle(index);
  DownstreamOptions opts;
  opts.m_grid = {1, 5};
  auto report = evaluate_downstream(
      index, [&](ImageId id) { return images.at(id); },
      [&](ImageId id) { return detections.at(id); }, oracle, opts);

  CHECK(report.accuracy_at_m.at(1) == 1.0);
  CHECK(report.accuracy_at_m.at(5) == 1.0);
  CHECK(report.bo_accuracy == 1.0);
  CHECK(report.gt_crop_accuracy == 1.0);
  CHECK(report.uncropped_accuracy == 0.0);  // whole frame overlaps nothing enough
  CHECK(report.classifier_failures == 0);

  SUBCASE("images must carry exactly one object") {
    DatasetIndex twice = index;
    twice.annotations.push_back({{2, 2, 10, 10}, 0, 1, false});
    CHECK_THROWS_AS(evaluate_downstream(
                        twice, [&](ImageId id) { return images.at(id); },
                        [&](ImageId id) { return detections.at(id); }, oracle, opts),
                    DataError);

    DatasetIndex none = index;
    none.images.push_back({9, 64, 64, ""});
    CHECK_THROWS_AS(evaluate_downstream(
                        none, [&](ImageId id) { return images.at(id); },
                        [&](ImageId) { return std::vector<Detection>{}; }, oracle,
                        opts),
                    DataError);
  }
}

TEST_CASE("accuracy@m grows with m and matches a rank tally") {
  nn::Rng rng(77);
  DatasetIndex index;
  index.vocabulary = ClassVocabulary({"a", "b", "c", "d"});
  std::map<ImageId, ImageU8> images;
  std::map<ImageId, std::vector<Detection>> detections;
  std::vector<int> gt_rank;  // 1-based rank of the true box per image

  const int images_n = 60;
  for (ImageId id = 1; id <= images_n; ++id) {
    index.images.push_back({id, 64, 64, ""});
    BoundingBox truth{2, 2, 10, 10};
    index.annotations.push_back({truth, rng.uniform_int(4), id, false});
    images[id] = gradient_image(64, 64);

    int slot = rng.uniform_int(7);  // among 7 detections
    std::vector<Detection> dets;
    for (int i = 0; i < 7; ++i) {
      double score = 1.0 - 0.01 * i;
      if (i == slot) {
        dets.push_back(det(truth, score, id));
      } else {
        double x = 16.0 + 6.0 * i;
        dets.push_back(det({x, 40, x + 5, 48}, score, id));
      }
    }
    gt_rank.push_back(slot + 1);
    detections[id] = dets;
  }

  OracleClassifier oracle(index);
  DownstreamOptions opts;
  opts.m_grid = {1, 2, 4, 8};
  auto report = evaluate_downstream(
      index, [&](ImageId id) { return images.at(id); },
      [&](ImageId id) { return detections.at(id); }, oracle, opts);

  double prev = 0;
  for (int m : opts.m_grid) {
    double acc = report.accuracy_at_m.at(m);
    CHECK(acc >= prev);
    prev = acc;
    int hits = 0;
    for (int r : gt_rank) hits += r <= m ? 1 : 0;
    CHECK(acc == doctest::Approx(hits / double(images_n)).epsilon(1e-12));
  }
  CHECK(report.accuracy_at_m.at(8) > report.accuracy_at_m.at(1));
  CHECK(report.bo_accuracy == 1.0);
}

TEST_CASE("socket classifier speaks ndjson and survives reconnects") {
  std::mutex mu;
  std::vector<long long> seen_ids;
  ImageU8 last_image;
  std::atomic<int> request_count{0};
  std::atomic<int> mode{0};  // 0 echo, 1 drop-every-other, 2 wrong id, 3 garbage

  LineServer server([&](const nlohmann::json& req) -> std::optional<std::string> {
    int n = ++request_count;
    long long id = req.at("id").get<long long>();
    ImageU8 img = decode_png(base64_decode(req.at("image").get<std::string>()));
    {
      std::lock_guard<std::mutex> lock(mu);
      seen_ids.push_back(id);
      last_image = img;
    }
    switch (mode.load()) {
      case 1:
        if (n % 2 == 1) return std::nullopt;  // drop odd requests unreplied
        break;
      case 2:
        return nlohmann::json{{"id", id + 999}, {"label", "x"}}.dump();
      case 3:
        return std::string("not json at all");
      default:
        break;
    }
    nlohmann::json reply = {{"id", id},
                            {"label", "seen-" + std::to_string(img.width) + "x" +
                                          std::to_string(img.height)},
                            {"confidence", 0.75}};
    return reply.dump();
  });

  SocketClassifier client(server.address());
  ImageU8 crop = gradient_image(9, 11);
  CropSpec spec{1, 1, {0, 0, 9, 11}, 0};

  auto first = client.classify(spec, crop);
  CHECK(first.label == "seen-9x11");
  CHECK(first.confidence == 0.75);
  {
    std::lock_guard<std::mutex> lock(mu);
    REQUIRE(seen_ids.size() == 1);
    CHECK(seen_ids[0] == 1);
    CHECK(last_image.pixels == crop.pixels);  // png+base64 transport is lossless
  }

  auto second = client.classify(spec, gradient_image(12, 5));
  CHECK(second.label == "seen-12x5");
  {
    std::lock_guard<std::mutex> lock(mu);
    CHECK(seen_ids.back() == 2);  // ids increase per request
  }

  SUBCASE("dropped connections throw, then the next call reconnects") {
    mode.store(1);
    CHECK_THROWS_AS(client.classify(spec, crop), DataError);  // dropped, no reply
    auto after = client.classify(spec, crop);                 // fresh connection
    CHECK(after.label == "seen-9x11");
  }

  SUBCASE("id mismatches and non-json replies are data errors") {
    mode.store(2);
    CHECK_THROWS_AS(client.classify(spec, crop), DataError);
    mode.store(3);
    CHECK_THROWS_AS(client.classify(spec, crop), DataError);
  }
}

TEST_CASE("socket classifier address validation") {
  CHECK_THROWS_AS(SocketClassifier("nohost"), ConfigError);
  CHECK_THROWS_AS(SocketClassifier("host:"), ConfigError);
  CHECK_THROWS_AS(SocketClassifier(":123"), ConfigError);
  CHECK_THROWS_AS(SocketClassifier("host:notaport"), ConfigError);
  CHECK_THROWS_AS(SocketClassifier("host:0"), ConfigError);
  CHECK_THROWS_AS(SocketClassifier("host:70000"), ConfigError);
}

TEST_CASE("evaluator retries transient classifier failures") {
  // Class is painted into the pixels so the server can answer from the crop.
  const std::vector<std::string> names = {"square", "circle", "triangle"};
  DatasetIndex index;
  index.vocabulary = ClassVocabulary(names);
  std::map<ImageId, ImageU8> images;
  for (ImageId id = 1; id <= 3; ++id) {
    index.images.push_back({id, 16, 16, ""});
    index.annotations.push_back({{2, 2, 12, 12}, static_cast<int>(id - 1), id, false});
    ImageU8 img(16, 16);
    for (int y = 0; y < 16; ++y) {
      for (int x = 0; x < 16; ++x) {
        img.set(x, y, {static_cast<std::uint8_t>(50 * (id - 1)), 128, 30});
      }
    }
    images[id] = img;
  }

  std::atomic<int> request_count{0};
  std::atomic<int> drops{0};
  LineServer server([&](const nlohmann::json& req) -> std::optional<std::string> {
    int n = ++request_count;
    if (n % 2 == 1) {  // flaky: drop every other request before replying
      ++drops;
      return std::nullopt;
    }
    ImageU8 img = decode_png(base64_decode(req.at("image").get<std::string>()));
    int cls = img.at(0, 0)[0] / 50;
    nlohmann::json reply = {{"id", req.at("id")},
                            {"label", names[static_cast<size_t>(cls)]},
                            {"confidence", 1.0}};
    return reply.dump();
  });

  SocketClassifier client(server.address());
  DownstreamOptions opts;
  opts.m_grid = {1};
  opts.max_attempts = 3;
  auto report = evaluate_downstream(
      index, [&](ImageId id) { return images.at(id); },
      [&](ImageId id) {
        return std::vector<Detection>{det({2, 2, 12, 12}, 0.9, id)};
      },
      client, opts);

  CHECK(report.classifier_failures == 0);  // every drop was retried away
  CHECK(drops.load() > 0);
  CHECK(report.accuracy_at_m.at(1) == 1.0);
  CHECK(report.bo_accuracy == 1.0);
  CHECK(report.gt_crop_accuracy == 1.0);
  CHECK(report.uncropped_accuracy == 1.0);  // uniform fill: whole frame matches too

  SUBCASE("persistent failure marks images wrong and is tallied") {
    LineServer black_hole([](const nlohmann::json&) -> std::optional<std::string> {
      return std::nullopt;
    });
    SocketClassifier doomed(black_hole.address());
    DownstreamOptions strict;
    strict.m_grid = {1};
    strict.max_attempts = 2;
    auto failed = evaluate_downstream(
        index, [&](ImageId id) { return images.at(id); },
        [&](ImageId id) {
          return std::vector<Detection>{det({2, 2, 12, 12}, 0.9, id)};
        },
        doomed, strict);
    CHECK(failed.classifier_failures == 3 * 4);  // 4 calls per image, all fail
    CHECK(failed.accuracy_at_m.at(1) == 0.0);
    CHECK(failed.bo_accuracy == 0.0);
    CHECK(failed.gt_crop_accuracy == 0.0);
  }
}
