#pragma once

// Nucleus segmentation scores. Predictions and ground truth are reduced to
// binary nucleus masks (classes 2 and 3 merged) before scoring.
//
// Empty-mask conventions: zsi(empty, empty) = 1, precision = 1 when the
// prediction is empty, recall = 1 when the ground truth is empty.

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "pgunet/tensor.hpp"

namespace pgu {

using BinaryMask = std::vector<std::uint8_t>;  // row-major {0,1}, 1 = nucleus

/// Per-pixel argmax over the class axis of [N,C,R,R] logits (ties go to the
/// lower class id); 1 where the winner is class 2 or 3.
std::vector<BinaryMask> binarize(const Tensor& logits);

/// Per-pixel argmax class ids of [N,C,R,R] logits, one [R,R] grid per sample.
std::vector<std::vector<std::uint8_t>> argmax_classes(const Tensor& logits);

/// 1 where the class id is 2 or 3.
BinaryMask nucleus_mask(const std::vector<std::uint8_t>& classes);

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0;
};

Confusion confusion(const BinaryMask& pred, const BinaryMask& gt);

/// 2TP / (2TP + FP + FN).
double zsi(const BinaryMask& pred, const BinaryMask& gt);

struct PrecisionRecall {
  double precision = 1.0;
  double recall = 1.0;
};

PrecisionRecall precision_recall(const BinaryMask& pred, const BinaryMask& gt);

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;  // population
};

MeanStd aggregate(const std::vector<double>& values);

struct MetricsReport {
  std::vector<std::string> ids;
  std::vector<double> zsi, precision, recall;

  std::size_t count() const { return zsi.size(); }
  void add(const std::string& id, const BinaryMask& pred, const BinaryMask& gt);
  MeanStd zsi_summary() const { return aggregate(zsi); }
  MeanStd precision_summary() const { return aggregate(precision); }
  MeanStd recall_summary() const { return aggregate(recall); }
};

/// Rows ZSI / Precision / Recall, one "mean±std" column per named report.
void write_table(std::ostream& out, const std::vector<std::string>& columns,
                 const std::vector<const MetricsReport*>& reports);

/// key=value lines: count, <metric>_mean, <metric>_std, then per-sample rows.
void write_key_values(std::ostream& out, const MetricsReport& report);

}  // namespace pgu
