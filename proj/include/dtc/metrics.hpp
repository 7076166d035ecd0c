#pragma once

// Overlap and surface-distance metrics on binary masks, plus per-image
// evaluation of a trained network.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dtc/data.hpp"
#include "dtc/grid.hpp"
#include "dtc/lsf.hpp"
#include "dtc/nn.hpp"

namespace dtc {

inline Mask binarize(const Image& prob, double threshold = 0.5) {
  Mask out(prob.height, prob.width, 0);
  for (std::size_t i = 0; i < prob.size(); ++i) out.cells[i] = prob.cells[i] > threshold ? 1 : 0;
  return out;
}

struct Overlap {
  double dice = 0.0;     // percent
  double jaccard = 0.0;  // percent
};

inline Overlap overlap_metrics(const Mask& pred, const Mask& gt) {
  if (!pred.same_shape(gt)) throw std::invalid_argument("overlap_metrics: mask sizes differ");
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    p += pred.cells[i] != 0;
    g += gt.cells[i] != 0;
    both += pred.cells[i] != 0 && gt.cells[i] != 0;
  }
  if (p + g == 0) return {100.0, 100.0};
  const double uni = static_cast<double>(p + g - both);
  return {200.0 * static_cast<double>(both) / static_cast<double>(p + g), 100.0 * static_cast<double>(both) / uni};
}

struct Pixel {
  std::size_t y = 0;
  std::size_t x = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
};

/// Boundary pixels of a mask, in raster order (same convention as the level
/// set transform).
inline std::vector<Pixel> surface(const Mask& mask) {
  const auto classes = classify_pixels(mask);
  std::vector<Pixel> out;
  for (std::size_t y = 0; y < mask.height; ++y)
    for (std::size_t x = 0; x < mask.width; ++x)
      if (classes(y, x) == PixelClass::boundary) out.push_back({y, x});
  return out;
}

struct SurfaceDistances {
  double asd = 0.0;
  double hd95 = 0.0;
  bool degenerate = false;
};

/// Nearest-rank percentile: the ceil(q n)-th smallest value.
inline double nearest_rank(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("nearest_rank: no values");
  std::sort(values.begin(), values.end());
  auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(values.size())));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

/// ASD and HD95 over the union of both directed surface-distance multisets.
/// One empty surface gives the image diagonal with the degenerate flag; two
/// empty surfaces give zero.
inline SurfaceDistances surface_distances(const Mask& pred, const Mask& gt) {
  if (!pred.same_shape(gt)) throw std::invalid_argument("surface_distances: mask sizes differ");
  const auto sp = surface(pred);
  const auto sg = surface(gt);
  if (sp.empty() && sg.empty()) return {};
  if (sp.empty() || sg.empty()) {
    const double diag = std::hypot(static_cast<double>(pred.height), static_cast<double>(pred.width));
    return {diag, diag, true};
  }
  auto sites_of = [&](const std::vector<Pixel>& s) {
    Grid<std::uint8_t> sites(pred.height, pred.width, 0);
    for (const Pixel& p : s) sites(p.y, p.x) = 1;
    return squared_distance_to(sites);
  };
  const auto to_gt = sites_of(sg);
  const auto to_pred = sites_of(sp);
  std::vector<double> all;
  all.reserve(sp.size() + sg.size());
  for (const Pixel& p : sp) all.push_back(std::sqrt(to_gt(p.y, p.x)));
  for (const Pixel& p : sg) all.push_back(std::sqrt(to_pred(p.y, p.x)));
  // Summing in ascending order makes the mean independent of argument order.
  std::sort(all.begin(), all.end());
  double total = 0.0;
  for (double d : all) total += d;
  return {total / static_cast<double>(all.size()), nearest_rank(std::move(all), 0.95), false};
}

struct MetricsRow {
  std::uint32_t id = 0;
  double dice = 0.0;
  double jaccard = 0.0;
  double asd = 0.0;
  double hd95 = 0.0;
  bool degenerate = false;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
};

inline MeanStd mean_std(const std::vector<double>& values) {
  if (values.empty()) return {};
  double m = 0.0;
  for (double v : values) m += v;
  m /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - m) * (v - m);
  return {m, std::sqrt(var / static_cast<double>(values.size()))};
}

struct MetricsReport {
  std::vector<MetricsRow> rows;  // ordered by id
  MeanStd dice, jaccard, asd, hd95;
  std::size_t degenerate_count = 0;

  void aggregate() {
    std::vector<double> d, j, a, h;
    degenerate_count = 0;
    for (const auto& r : rows) {
      d.push_back(r.dice);
      j.push_back(r.jaccard);
      a.push_back(r.asd);
      h.push_back(r.hd95);
      degenerate_count += r.degenerate;
    }
    dice = mean_std(d);
    jaccard = mean_std(j);
    asd = mean_std(a);
    hd95 = mean_std(h);
  }
};

inline MetricsRow score(std::uint32_t id, const Mask& pred, const Mask& gt) {
  const Overlap o = overlap_metrics(pred, gt);
  const SurfaceDistances s = surface_distances(pred, gt);
  return {id, o.dice, o.jaccard, s.asd, s.hd95, s.degenerate};
}

/// Which head produces the segmentation at inference time.
enum class InferenceHead { seg, lsf };

/// Probability maps for a list of samples, one forward pass per sample.
inline std::vector<Image> predict_probabilities(DualTaskNet& net, const std::vector<const Sample*>& samples,
                                                InferenceHead head, Sharpness k = {}) {
  std::vector<Image> out;
  for (const Sample* s : samples) {
    auto [seg, lsf] = predict(net, stack<double>({&s->image}));
    const Tensor prob = head == InferenceHead::seg ? seg : inverse_transform(lsf, k);
    out.emplace_back(s->image.height, s->image.width, prob.values());
  }
  return out;
}

inline MetricsReport evaluate(DualTaskNet& net, const std::vector<const Sample*>& test, double threshold = 0.5,
                              InferenceHead head = InferenceHead::seg, Sharpness k = {}) {
  if (test.empty()) throw std::invalid_argument("evaluate: empty test set");
  for (const Sample* s : test)
    if (!s->mask) throw std::invalid_argument("evaluate: test sample " + std::to_string(s->id) + " has no mask");
  const auto probs = predict_probabilities(net, test, head, k);
  MetricsReport report;
  for (std::size_t i = 0; i < test.size(); ++i)
    report.rows.push_back(score(test[i]->id, binarize(probs[i], threshold), *test[i]->mask));
  std::sort(report.rows.begin(), report.rows.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  report.aggregate();
  return report;
}

inline MetricsReport evaluate(DualTaskNet& net, const Dataset& ds, double threshold = 0.5,
                              InferenceHead head = InferenceHead::seg, Sharpness k = {}) {
  std::vector<const Sample*> test;
  for (std::uint32_t id : ds.test_ids) test.push_back(&ds.sample(id));
  return evaluate(net, test, threshold, head, k);
}

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

/// CSV with header id,dice,jaccard,asd,hd95,degenerate and aggregate lines
/// prefixed by '#'.
inline std::string to_csv(const MetricsReport& report) {
  std::ostringstream os;
  os << "id,dice,jaccard,asd,hd95,degenerate\n";
  for (const auto& r : report.rows)
    os << r.id << ',' << format_number(r.dice) << ',' << format_number(r.jaccard) << ',' << format_number(r.asd) << ','
       << format_number(r.hd95) << ',' << (r.degenerate ? 1 : 0) << '\n';
  os << "# mean," << format_number(report.dice.mean) << ',' << format_number(report.jaccard.mean) << ','
     << format_number(report.asd.mean) << ',' << format_number(report.hd95.mean) << ',' << report.degenerate_count
     << '\n';
  os << "# std," << format_number(report.dice.std) << ',' << format_number(report.jaccard.std) << ','
     << format_number(report.asd.std) << ',' << format_number(report.hd95.std) << ",\n";
  return os.str();
}

}  // namespace dtc
