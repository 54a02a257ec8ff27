#include "pgunet/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <iomanip>

namespace pgu {

namespace {

void check_pair(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.size() != gt.size()) {
    throw ShapeError("mask extents differ: " + std::to_string(pred.size()) + " vs " + std::to_string(gt.size()));
  }
}

std::string format_mean_std(const MeanStd& m) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f\xC2\xB1%.2f", m.mean, m.stddev);
  return buf;
}

}  // namespace

std::vector<std::vector<std::uint8_t>> argmax_classes(const Tensor& logits) {
  if (logits.rank() != 4) throw ShapeError("argmax_classes expects [N,C,R,R], got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  const auto data = logits.data();
  std::vector<std::vector<std::uint8_t>> out(n, std::vector<std::uint8_t>(plane));
  for (std::size_t b = 0; b < n; ++b) {
    const float* base = data.data() + b * c * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < c; ++k) {
        if (base[k * plane + p] > base[best * plane + p]) best = k;
      }
      out[b][p] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

BinaryMask nucleus_mask(const std::vector<std::uint8_t>& classes) {
  BinaryMask out(classes.size());
  for (std::size_t i = 0; i < classes.size(); ++i) out[i] = (classes[i] == 2 || classes[i] == 3) ? 1 : 0;
  return out;
}

std::vector<BinaryMask> binarize(const Tensor& logits) {
  std::vector<BinaryMask> out;
  for (const auto& classes : argmax_classes(logits)) out.push_back(nucleus_mask(classes));
  return out;
}

Confusion confusion(const BinaryMask& pred, const BinaryMask& gt) {
  check_pair(pred, gt);
  Confusion c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] > 1 || gt[i] > 1) throw ShapeError("binary masks must hold 0 or 1");
    c.tp += pred[i] & gt[i];
    c.fp += pred[i] & (1 - gt[i]);
    c.fn += (1 - pred[i]) & gt[i];
  }
  return c;
}

double zsi(const BinaryMask& pred, const BinaryMask& gt) {
  const Confusion c = confusion(pred, gt);
  const std::size_t denom = 2 * c.tp + c.fp + c.fn;
  return denom == 0 ? 1.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

PrecisionRecall precision_recall(const BinaryMask& pred, const BinaryMask& gt) {
  const Confusion c = confusion(pred, gt);
  PrecisionRecall pr;
  if (c.tp + c.fp > 0) pr.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  if (c.tp + c.fn > 0) pr.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  return pr;
}

MeanStd aggregate(const std::vector<double>& values) {
  if (values.empty()) throw Error("aggregate: no values");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  return {mean, std::sqrt(var / static_cast<double>(values.size()))};
}

void MetricsReport::add(const std::string& id, const BinaryMask& pred, const BinaryMask& gt) {
  const auto pr = precision_recall(pred, gt);
  ids.push_back(id);
  zsi.push_back(pgu::zsi(pred, gt));
  precision.push_back(pr.precision);
  recall.push_back(pr.recall);
}

void write_table(std::ostream& out, const std::vector<std::string>& columns,
                 const std::vector<const MetricsReport*>& reports) {
  if (columns.size() != reports.size()) throw Error("write_table: one column name per report");
  constexpr int kLabel = 10, kCell = 14;
  out << std::left << std::setw(kLabel) << "";
  for (const auto& c : columns) out << std::setw(kCell) << c;
  out << '\n';
  const char* rows[] = {"ZSI", "Precision", "Recall"};
  for (int r = 0; r < 3; ++r) {
    out << std::setw(kLabel) << rows[r];
    for (const auto* rep : reports) {
      const MeanStd m = r == 0 ? rep->zsi_summary() : (r == 1 ? rep->precision_summary() : rep->recall_summary());
      // The ± sign is two bytes but one column wide.
      out << std::setw(kCell + 1) << format_mean_std(m);
    }
    out << '\n';
  }
  out << std::right;
}

void write_key_values(std::ostream& out, const MetricsReport& report) {
  const auto z = report.zsi_summary(), p = report.precision_summary(), r = report.recall_summary();
  out << std::setprecision(17);
  out << "count=" << report.count() << '\n';
  out << "zsi_mean=" << z.mean << "\nzsi_std=" << z.stddev << '\n';
  out << "precision_mean=" << p.mean << "\nprecision_std=" << p.stddev << '\n';
  out << "recall_mean=" << r.mean << "\nrecall_std=" << r.stddev << '\n';
  for (std::size_t i = 0; i < report.count(); ++i) {
    out << "sample." << report.ids[i] << "=" << report.zsi[i] << ',' << report.precision[i] << ','
        << report.recall[i] << '\n';
  }
  out << std::setprecision(6);
}

}  // namespace pgu
