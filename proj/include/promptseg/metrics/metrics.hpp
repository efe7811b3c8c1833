#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace promptseg::metrics {

// One-vs-rest pixel counts for a single class.
struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::uint64_t total() const { return tp + fp + tn + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    return *this;
  }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

// Throws ShapeError when the grids differ in size.
ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, std::uint8_t k);

// Degenerate denominators: a class absent from both prediction and ground
// truth scores 1.0, any other zero denominator scores 0.0. For bm, a term
// whose marginal (tp+fn or tn+fp) is zero contributes 0.
double precision(const ConfusionCounts& c);  // TP / (TP + FP)
double recall(const ConfusionCounts& c);     // TP / (TP + FN)
double dice(const ConfusionCounts& c);       // 2TP / (2TP + FN + FP)
double bm(const ConfusionCounts& c);         // TP/(TP+FN) + TN/(TN+FP) - 1
double iou(const ConfusionCounts& c);        // TP / (TP + FN + FP)

struct ClassMetrics {
  std::size_t class_id = 0;
  std::string name;
  ConfusionCounts counts;
  double precision = 0, recall = 0, dice = 0, bm = 0, iou = 0;
  // Class 0 is background: reported but not a headline row.
  bool headline = true;
};

struct MetricsReport {
  std::vector<ClassMetrics> per_class;  // one entry per class id, 0..K-1
  std::vector<std::string> class_names;

  std::vector<ClassMetrics> headline() const;
  // Mean over headline classes of the chosen field.
  double mean_dice() const;

  // Columns: class_id,class_name,headline,tp,fp,tn,fn, then precision, recall,
  // dice, bm, iou as fractions, then the same five as percentages.
  std::string to_csv() const;
  nlohmann::json to_json() const;
};

MetricsReport report_from_counts(const std::vector<ConfusionCounts>& counts, const std::vector<std::string>& names);

// Metrics for every class in `class_names` over one prediction/ground-truth
// pair.
MetricsReport report(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt,
                     const std::vector<std::string>& class_names);

// Accumulates counts across many samples (pooled over pixels).
class ReportAccumulator {
 public:
  explicit ReportAccumulator(std::vector<std::string> class_names);

  void add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);
  MetricsReport finish() const { return report_from_counts(counts_, names_); }

 private:
  std::vector<std::string> names_;
  std::vector<ConfusionCounts> counts_;
};

}  // namespace promptseg::metrics
