#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "conmat/rng.hpp"
#include "conmat/tensor.hpp"
#include "conmat/util.hpp"

namespace conmat {

struct RocCurve {
  std::vector<double> thresholds;            // descending; first is +inf
  std::vector<std::pair<double, double>> points;  // (fpr, tpr), from (0,0) to (1,1)
  double auc = 0;
};

// One-vs-rest ROC for scores where larger means "positive". Thresholds are
// the unique scores; tied scores move together, so the trapezoid area gives
// ties half credit, as the rank formulation does.
inline RocCurve roc_curve(const std::vector<double>& scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw ValueError("roc: size mismatch");
  const auto P = static_cast<double>(std::count(positive.begin(), positive.end(), true));
  const auto N = static_cast<double>(positive.size()) - P;
  if (P == 0 || N == 0) throw ValueError("roc: both positives and negatives are required");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  RocCurve roc;
  roc.thresholds.push_back(std::numeric_limits<double>::infinity());
  roc.points.emplace_back(0.0, 0.0);
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    while (i < order.size() && scores[order[i]] == s) {
      (positive[order[i]] ? tp : fp) += 1;
      ++i;
    }
    roc.thresholds.push_back(s);
    roc.points.emplace_back(fp / N, tp / P);
  }
  for (std::size_t i = 1; i < roc.points.size(); ++i) {
    const auto [x0, y0] = roc.points[i - 1];
    const auto [x1, y1] = roc.points[i];
    roc.auc += (x1 - x0) * (y0 + y1) / 2;
  }
  return roc;
}

// Mann-Whitney form: fraction of (positive, negative) pairs ranked correctly, ties 1/2.
inline double auc_rank(const std::vector<double>& scores, const std::vector<bool>& positive) {
  double hits = 0, pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!positive[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (positive[j]) continue;
      pairs += 1;
      hits += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
    }
  }
  if (pairs == 0) throw ValueError("auc: both positives and negatives are required");
  return hits / pairs;
}

struct ClassConfidence {
  bool present = false;  // false when the class was never predicted
  std::size_t n = 0;
  double mean = 0;
  double half_width = 0;  // 95% interval half-width; 0 when n < 2
};

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) throw ValueError("mean of empty set");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Sample (n - 1) standard deviation.
inline double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

enum class CiMethod { normal, bootstrap };

// Max-softmax confidence grouped by predicted class. Normal method:
// 1.96 * sd / sqrt(n). Bootstrap: half the 2.5-97.5 percentile span of
// resampled means.
inline std::vector<ClassConfidence> class_confidence_intervals(const std::vector<double>& confidence,
                                                               const std::vector<std::size_t>& predicted,
                                                               std::size_t num_classes,
                                                               CiMethod method = CiMethod::normal,
                                                               std::size_t resamples = 1000, std::uint64_t seed = 0) {
  std::vector<std::vector<double>> groups(num_classes);
  for (std::size_t i = 0; i < confidence.size(); ++i) groups.at(predicted[i]).push_back(confidence[i]);
  std::vector<ClassConfidence> out(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    const auto& g = groups[c];
    if (g.empty()) continue;
    auto& o = out[c];
    o.present = true;
    o.n = g.size();
    o.mean = mean_of(g);
    if (g.size() < 2) continue;
    if (method == CiMethod::normal) {
      o.half_width = 1.96 * sample_std(g) / std::sqrt(static_cast<double>(g.size()));
    } else {
      auto rng = Rng::derive(seed, c);
      std::vector<double> means(resamples);
      for (auto& m : means) {
        double s = 0;
        for (std::size_t k = 0; k < g.size(); ++k) s += g[rng.index(g.size())];
        m = s / static_cast<double>(g.size());
      }
      std::sort(means.begin(), means.end());
      const auto lo = means[static_cast<std::size_t>(0.025 * static_cast<double>(resamples - 1))];
      const auto hi = means[static_cast<std::size_t>(std::ceil(0.975 * static_cast<double>(resamples - 1)))];
      o.half_width = (hi - lo) / 2;
    }
  }
  return out;
}

struct EvalReport {
  std::vector<std::string> class_names;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<double> precision, recall, f1;
  double macro_precision = 0, macro_recall = 0, macro_f1 = 0, accuracy = 0;
  std::size_t total = 0;
  double mean_loss = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::optional<RocCurve>> roc;  // absent when a class lacks positives or negatives
  std::vector<ClassConfidence> confidence;

  std::size_t num_classes() const { return confusion.size(); }
  std::size_t support(std::size_t c) const {
    return std::accumulate(confusion[c].begin(), confusion[c].end(), std::size_t{0});
  }
};

// Precision/recall/F1 from a confusion matrix; undefined ratios are 0.
inline void fill_class_metrics(EvalReport& r) {
  const auto k = r.confusion.size();
  r.precision.assign(k, 0);
  r.recall.assign(k, 0);
  r.f1.assign(k, 0);
  std::size_t diag = 0;
  r.total = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t col = 0, row = 0;
    for (std::size_t j = 0; j < k; ++j) {
      col += r.confusion[j][c];
      row += r.confusion[c][j];
    }
    const double tp = static_cast<double>(r.confusion[c][c]);
    r.precision[c] = col ? tp / static_cast<double>(col) : 0.0;
    r.recall[c] = row ? tp / static_cast<double>(row) : 0.0;
    const double s = r.precision[c] + r.recall[c];
    r.f1[c] = s > 0 ? 2 * r.precision[c] * r.recall[c] / s : 0.0;
    diag += r.confusion[c][c];
    r.total += row;
  }
  const double kk = static_cast<double>(k);
  r.macro_precision = std::accumulate(r.precision.begin(), r.precision.end(), 0.0) / kk;
  r.macro_recall = std::accumulate(r.recall.begin(), r.recall.end(), 0.0) / kk;
  r.macro_f1 = std::accumulate(r.f1.begin(), r.f1.end(), 0.0) / kk;
  r.accuracy = r.total ? static_cast<double>(diag) / static_cast<double>(r.total) : 0.0;
}

// probs: [N, K] softmax outputs (rows), labels: N true classes.
inline EvalReport evaluate_probs(const std::vector<std::vector<double>>& probs, const std::vector<std::size_t>& labels,
                                 std::vector<std::string> class_names, CiMethod ci = CiMethod::normal) {
  if (probs.empty()) throw ValueError("evaluate: no samples");
  if (probs.size() != labels.size()) throw ValueError("evaluate: size mismatch");
  const auto k = probs.front().size();
  if (class_names.empty())
    for (std::size_t c = 0; c < k; ++c) class_names.push_back(std::to_string(c));
  if (class_names.size() != k) throw ValueError("evaluate: class name count mismatch");
  EvalReport r;
  r.class_names = std::move(class_names);
  r.confusion.assign(k, std::vector<std::size_t>(k, 0));
  std::vector<std::size_t> pred(probs.size());
  std::vector<double> conf(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i].size() != k) throw ValueError("evaluate: ragged probability rows");
    if (labels[i] >= k) throw ValueError("evaluate: label out of range");
    pred[i] = static_cast<std::size_t>(std::max_element(probs[i].begin(), probs[i].end()) - probs[i].begin());
    conf[i] = probs[i][pred[i]];
    ++r.confusion[labels[i]][pred[i]];
  }
  fill_class_metrics(r);
  r.roc.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> s(probs.size());
    std::vector<bool> pos(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
      s[i] = probs[i][c];
      pos[i] = labels[i] == c;
    }
    const auto np = std::count(pos.begin(), pos.end(), true);
    if (np > 0 && static_cast<std::size_t>(np) < pos.size()) r.roc[c] = roc_curve(s, pos);
  }
  r.confidence = class_confidence_intervals(conf, pred, k, ci);
  return r;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["accuracy"] = r.accuracy;
  j["macro_precision"] = r.macro_precision;
  j["macro_recall"] = r.macro_recall;
  j["macro_f1"] = r.macro_f1;
  j["samples"] = r.total;
  if (!std::isnan(r.mean_loss)) j["mean_loss"] = r.mean_loss;
  auto& per = j["classes"];
  per = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < r.num_classes(); ++c) {
    nlohmann::ordered_json e;
    e["name"] = r.class_names[c];
    e["support"] = r.support(c);
    e["precision"] = r.precision[c];
    e["recall"] = r.recall[c];
    e["f1"] = r.f1[c];
    e["auc"] = r.roc[c] ? nlohmann::ordered_json(r.roc[c]->auc) : nlohmann::ordered_json(nullptr);
    const auto& ci = r.confidence[c];
    if (ci.present) {
      e["confidence_mean"] = ci.mean;
      e["confidence_half_width"] = ci.half_width;
      e["predicted"] = ci.n;
    } else {
      e["confidence_mean"] = nullptr;
      e["predicted"] = 0;
    }
    per.push_back(std::move(e));
  }
  j["confusion"] = r.confusion;
  return j;
}

inline void write_confusion_csv(std::ostream& os, const EvalReport& r) {
  os << "true\\pred";
  for (const auto& n : r.class_names) os << ',' << n;
  os << '\n';
  for (std::size_t c = 0; c < r.num_classes(); ++c) {
    os << r.class_names[c];
    for (auto v : r.confusion[c]) os << ',' << v;
    os << '\n';
  }
}

inline void write_roc_csv(std::ostream& os, const EvalReport& r) {
  os << "class,threshold,fpr,tpr\n";
  for (std::size_t c = 0; c < r.num_classes(); ++c) {
    if (!r.roc[c]) continue;
    const auto& roc = *r.roc[c];
    for (std::size_t i = 0; i < roc.points.size(); ++i)
      os << r.class_names[c] << ',' << (std::isinf(roc.thresholds[i]) ? std::string("inf") : fmt_double(roc.thresholds[i]))
         << ',' << fmt_double(roc.points[i].first) << ',' << fmt_double(roc.points[i].second) << '\n';
  }
}

}  // namespace conmat
