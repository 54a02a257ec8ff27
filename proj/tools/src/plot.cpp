#include "pgunet_cli/plot.hpp"

#include <algorithm>
#include <cstdio>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "pgunet/errors.hpp"

namespace pgu::cli {

namespace {

constexpr int kWidth = 900, kHeight = 480, kLeft = 70, kRight = 30, kTop = 40, kBottom = 60;

const cv::Scalar kLossColor(200, 80, 30);  // BGR
const cv::Scalar kZsiColor(40, 150, 40);
const cv::Scalar kAxisColor(60, 60, 60);

void text(cv::Mat& img, const std::string& s, cv::Point at, const cv::Scalar& color, double size = 0.45) {
  cv::putText(img, s, at, cv::FONT_HERSHEY_SIMPLEX, size, color, 1, cv::LINE_AA);
}

}  // namespace

void render_curves(const std::filesystem::path& path, const std::vector<StageReport>& stages) {
  std::vector<double> loss, zsi;
  std::vector<std::size_t> boundaries;
  for (const auto& s : stages) {
    if (!loss.empty()) boundaries.push_back(loss.size());
    loss.insert(loss.end(), s.epoch_loss.begin(), s.epoch_loss.end());
    zsi.insert(zsi.end(), s.val_zsi.begin(), s.val_zsi.end());
  }
  cv::Mat img(kHeight, kWidth, CV_8UC3, cv::Scalar(255, 255, 255));
  const int plot_w = kWidth - kLeft - kRight, plot_h = kHeight - kTop - kBottom;
  cv::rectangle(img, {kLeft, kTop}, {kLeft + plot_w, kTop + plot_h}, kAxisColor, 1);
  for (int t = 0; t <= 4; ++t) {
    const int y = kTop + plot_h - t * plot_h / 4;
    char label[16];
    std::snprintf(label, sizeof label, "%.2f", t / 4.0);
    text(img, label, {kLeft - 45, y + 5}, kAxisColor);
    cv::line(img, {kLeft - 4, y}, {kLeft, y}, kAxisColor);
  }
  const std::size_t n = std::max<std::size_t>(loss.size(), 1);
  const auto x_of = [&](std::size_t i) { return kLeft + static_cast<int>((i + 0.5) * plot_w / n); };
  const auto y_of = [&](double v) { return kTop + plot_h - static_cast<int>(std::clamp(v, 0.0, 1.0) * plot_h); };

  for (std::size_t b : boundaries) {
    const int x = kLeft + static_cast<int>(b * plot_w / n);
    for (int y = kTop; y < kTop + plot_h; y += 8) cv::line(img, {x, y}, {x, std::min(y + 4, kTop + plot_h)}, kAxisColor);
  }
  for (std::size_t s = 0, start = 0; s < stages.size(); start += stages[s].epoch_loss.size(), ++s) {
    const std::size_t mid = start + stages[s].epoch_loss.size() / 2;
    text(img, "stage " + std::to_string(stages[s].stage), {std::max(kLeft, x_of(mid) - 25), kTop + plot_h + 20},
         kAxisColor);
  }
  const double max_loss = loss.empty() ? 1.0 : std::max(*std::max_element(loss.begin(), loss.end()), 1e-12);
  const auto polyline = [&](const std::vector<double>& v, double scale, const cv::Scalar& color) {
    std::vector<cv::Point> pts;
    for (std::size_t i = 0; i < v.size(); ++i) pts.push_back({x_of(i), y_of(v[i] / scale)});
    if (pts.size() > 1) cv::polylines(img, pts, false, color, 2, cv::LINE_AA);
    for (const auto& p : pts) cv::circle(img, p, 2, color, cv::FILLED);
  };
  polyline(loss, max_loss, kLossColor);
  if (zsi.size() == loss.size()) polyline(zsi, 1.0, kZsiColor);

  char legend[64];
  std::snprintf(legend, sizeof legend, "training loss / %.3g", max_loss);
  text(img, legend, {kLeft + 10, kTop - 15}, kLossColor, 0.5);
  text(img, "validation ZSI", {kLeft + 260, kTop - 15}, kZsiColor, 0.5);
  text(img, "epoch", {kLeft + plot_w / 2 - 20, kHeight - 12}, kAxisColor);
  if (!cv::imwrite(path.string(), img)) throw DataError("cannot write plot " + path.string());
}

}  // namespace pgu::cli
