#include "promptseg/metrics/metrics.hpp"

#include <cstdio>

#include "promptseg/error.hpp"

namespace promptseg::metrics {

namespace {

bool absent_everywhere(const ConfusionCounts& c) { return c.tp == 0 && c.fp == 0 && c.fn == 0; }

double ratio(std::uint64_t num, std::uint64_t den, const ConfusionCounts& c) {
  if (den == 0) return absent_everywhere(c) ? 1.0 : 0.0;
  return static_cast<double>(num) / static_cast<double>(den);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.8f", v);
  return buf;
}

}  // namespace

ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, std::uint8_t k) {
  if (pred.size() != gt.size()) {
    throw ShapeError("confusion: prediction has " + std::to_string(pred.size()) + " pixels, ground truth " +
                     std::to_string(gt.size()));
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == k;
    const bool g = gt[i] == k;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double precision(const ConfusionCounts& c) { return ratio(c.tp, c.tp + c.fp, c); }
double recall(const ConfusionCounts& c) { return ratio(c.tp, c.tp + c.fn, c); }
double dice(const ConfusionCounts& c) { return ratio(2 * c.tp, 2 * c.tp + c.fn + c.fp, c); }
double iou(const ConfusionCounts& c) { return ratio(c.tp, c.tp + c.fn + c.fp, c); }

double bm(const ConfusionCounts& c) {
  const double sens = (c.tp + c.fn) == 0 ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  const double spec = (c.tn + c.fp) == 0 ? 0.0 : static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
  return sens + spec - 1.0;
}

std::vector<ClassMetrics> MetricsReport::headline() const {
  std::vector<ClassMetrics> out;
  for (const auto& m : per_class) {
    if (m.headline) out.push_back(m);
  }
  return out;
}

double MetricsReport::mean_dice() const {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& m : per_class) {
    if (!m.headline) continue;
    s += m.dice;
    ++n;
  }
  return n == 0 ? 0.0 : s / static_cast<double>(n);
}

std::string MetricsReport::to_csv() const {
  std::string out =
      "class_id,class_name,headline,tp,fp,tn,fn,precision,recall,dice,bm,iou,"
      "precision_pct,recall_pct,dice_pct,bm_pct,iou_pct\n";
  for (const auto& m : per_class) {
    out += std::to_string(m.class_id) + "," + m.name + "," + (m.headline ? "1" : "0") + "," +
           std::to_string(m.counts.tp) + "," + std::to_string(m.counts.fp) + "," + std::to_string(m.counts.tn) +
           "," + std::to_string(m.counts.fn);
    for (double v : {m.precision, m.recall, m.dice, m.bm, m.iou}) out += "," + fmt(v);
    for (double v : {m.precision, m.recall, m.dice, m.bm, m.iou}) out += "," + fmt(100.0 * v);
    out += "\n";
  }
  return out;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& m : per_class) {
    nlohmann::json fractions = {{"precision", m.precision}, {"recall", m.recall}, {"dice", m.dice},
                                {"bm", m.bm},               {"iou", m.iou}};
    nlohmann::json percent = {{"precision", 100.0 * m.precision}, {"recall", 100.0 * m.recall},
                              {"dice", 100.0 * m.dice},           {"bm", 100.0 * m.bm},
                              {"iou", 100.0 * m.iou}};
    classes.push_back({{"class_id", m.class_id},
                       {"class_name", m.name},
                       {"headline", m.headline},
                       {"counts", {{"tp", m.counts.tp}, {"fp", m.counts.fp}, {"tn", m.counts.tn}, {"fn", m.counts.fn}}},
                       {"fraction", fractions},
                       {"percent", percent}});
  }
  return {{"metric_order", {"precision", "recall", "dice", "bm", "iou"}},
          {"classes", classes},
          {"mean_headline_dice", mean_dice()}};
}

MetricsReport report_from_counts(const std::vector<ConfusionCounts>& counts, const std::vector<std::string>& names) {
  if (counts.size() != names.size()) {
    throw ShapeError("report: " + std::to_string(counts.size()) + " count sets for " + std::to_string(names.size()) +
                     " class names");
  }
  MetricsReport r;
  r.class_names = names;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    ClassMetrics m;
    m.class_id = k;
    m.name = names[k];
    m.counts = counts[k];
    m.precision = precision(counts[k]);
    m.recall = recall(counts[k]);
    m.dice = dice(counts[k]);
    m.bm = bm(counts[k]);
    m.iou = iou(counts[k]);
    m.headline = k != 0;
    r.per_class.push_back(std::move(m));
  }
  return r;
}

MetricsReport report(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt,
                     const std::vector<std::string>& class_names) {
  ReportAccumulator acc(class_names);
  acc.add(pred, gt);
  return acc.finish();
}

ReportAccumulator::ReportAccumulator(std::vector<std::string> class_names)
    : names_(std::move(class_names)), counts_(names_.size()) {}

void ReportAccumulator::add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  for (std::size_t k = 0; k < names_.size(); ++k) counts_[k] += confusion(pred, gt, static_cast<std::uint8_t>(k));
}

}  // namespace promptseg::metrics
