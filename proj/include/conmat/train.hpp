#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "conmat/data.hpp"
#include "conmat/metrics.hpp"
#include "conmat/model.hpp"
#include "conmat/stats.hpp"

namespace conmat {

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 64;
  double lr = 1e-5;
  double weight_decay = 3e-5;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  bool decoupled_weight_decay = false;  // AdamW-style when set; coupled L2 otherwise
  std::uint64_t seed = 0;
  double stop_train_acc = 0;  // end early once an epoch reaches this train accuracy; 0 disables

  void validate() const {
    if (epochs == 0) throw ConfigError("train: epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
    if (!(lr >= 0) || !(weight_decay >= 0)) throw ConfigError("train: lr and weight_decay must be non-negative");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("train: betas must lie in [0,1)");
    if (!(adam_eps > 0)) throw ConfigError("train: adam_eps must be positive");
    if (!(stop_train_acc >= 0 && stop_train_acc <= 1)) throw ConfigError("train: stop_train_acc must lie in [0,1]");
  }

  std::vector<std::pair<std::string, std::string>> to_kv() const {
    return {{"epochs", std::to_string(epochs)},
            {"batch_size", std::to_string(batch_size)},
            {"lr", fmt_double(lr)},
            {"weight_decay", fmt_double(weight_decay)},
            {"beta1", fmt_double(beta1)},
            {"beta2", fmt_double(beta2)},
            {"adam_eps", fmt_double(adam_eps)},
            {"decoupled_weight_decay", decoupled_weight_decay ? "1" : "0"},
            {"seed", std::to_string(seed)},
            {"stop_train_acc", fmt_double(stop_train_acc)}};
  }

  bool set(const std::string& key, const std::string& v) {
    if (key == "epochs") epochs = parse_size(key, v);
    else if (key == "batch_size") batch_size = parse_size(key, v);
    else if (key == "lr") lr = parse_double(key, v);
    else if (key == "weight_decay") weight_decay = parse_double(key, v);
    else if (key == "beta1") beta1 = parse_double(key, v);
    else if (key == "beta2") beta2 = parse_double(key, v);
    else if (key == "adam_eps") adam_eps = parse_double(key, v);
    else if (key == "decoupled_weight_decay") decoupled_weight_decay = parse_bool(key, v);
    else if (key == "seed") seed = static_cast<std::uint64_t>(parse_size(key, v));
    else if (key == "stop_train_acc") stop_train_acc = parse_double(key, v);
    else return false;
    return true;
  }
};

// Adam with bias correction. State is keyed by position in the parameter
// list, which must not change between steps.
template <Real T>
class Adam {
 public:
  explicit Adam(const TrainConfig& cfg) : cfg_(cfg) {}

  void step(const ParamList<T>& params) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.param->numel(), 0.0);
        v_.emplace_back(p.param->numel(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw ValueError("adam: parameter list changed between steps");
    ++t_;
    const double bc1 = 1 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i].param;
      if (p.grad.shape() != p.value.shape()) p.zero_grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < p.numel(); ++k) {
        const double theta = static_cast<double>(p.value[k]);
        double g = static_cast<double>(p.grad[k]);
        if (!cfg_.decoupled_weight_decay) g += cfg_.weight_decay * theta;
        m[k] = cfg_.beta1 * m[k] + (1 - cfg_.beta1) * g;
        v[k] = cfg_.beta2 * v[k] + (1 - cfg_.beta2) * g * g;
        double upd = cfg_.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg_.adam_eps);
        if (cfg_.decoupled_weight_decay) upd += cfg_.lr * cfg_.weight_decay * theta;
        p.value[k] = static_cast<T>(theta - upd);
      }
    }
  }

  std::size_t timestep() const { return t_; }

 private:
  TrainConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

template <Real T>
Tensor<T> sample_tensor(const Sample& s) {
  if constexpr (std::is_same_v<T, float>) return s.image;
  else return s.image.template cast<T>();
}

struct Predictions {
  std::vector<std::vector<double>> probs;
  std::vector<std::size_t> labels;
  double mean_loss = 0;
};

// Eval-mode forward passes, one sample per task, reduced in sample order.
template <Real T>
Predictions predict_samples(ConMatFormer<T>& model, const std::vector<Sample>& xs) {
  Predictions out;
  out.probs.resize(xs.size());
  out.labels.resize(xs.size());
  std::vector<double> losses(xs.size());
  parallel_for(xs.size(), [&](std::size_t i) {
    auto z = predict_logits(model, sample_tensor<T>(xs[i]));
    auto p = softmax_values<T>(z);
    out.probs[i].assign(p.begin(), p.end());
    out.labels[i] = xs[i].label;
    losses[i] = -std::log(std::max(out.probs[i].at(xs[i].label), 1e-300));
  });
  double s = 0;
  for (double l : losses) s += l;
  out.mean_loss = xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
  return out;
}

template <Real T>
EvalReport evaluate_model(ConMatFormer<T>& model, const std::vector<Sample>& xs,
                          const std::vector<std::string>& class_names, CiMethod ci = CiMethod::normal) {
  if (xs.empty()) throw DataError("evaluate: no samples");
  auto p = predict_samples(model, xs);
  auto r = evaluate_probs(p.probs, p.labels, class_names, ci);
  r.mean_loss = p.mean_loss;
  return r;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0;       // mean training loss over the epoch (training mode)
  double train_acc = 0;  // accuracy of the training-mode forward passes
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double val_acc = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_acc = std::numeric_limits<double>::quiet_NaN();
};

inline void write_history_csv(std::ostream& os, const std::vector<EpochRecord>& h) {
  os << "epoch,loss,val_acc,val_loss,train_acc\n";
  auto cell = [](double v) { return std::isnan(v) ? std::string() : fmt_double(v); };
  for (const auto& r : h)
    os << r.epoch << ',' << fmt_double(r.loss) << ',' << cell(r.val_acc) << ',' << cell(r.val_loss) << ','
       << fmt_double(r.train_acc) << '\n';
}

using EpochCallback = std::function<void(const EpochRecord&)>;

// Minibatch Adam on mean cross-entropy. Each batch is processed in waves of
// per-sample tapes on worker threads; parameter gradients are reduced in
// sample order, so results do not depend on the thread count. The weights
// with the best validation accuracy (ties: lower validation loss) are
// restored at the end; without a validation set the last epoch is kept.
template <Real T>
TrainResult train(ConMatFormer<T>& model, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) throw DataError("train: empty training split");
  const auto k = model.config().num_classes;
  for (const auto& s : train_set)
    if (s.label >= k) throw DataError("train: label " + std::to_string(s.label) + " outside model classes");
  auto params = model.parameters();
  Adam<T> opt(cfg);
  TrainResult res;
  std::vector<Tensor<T>> best;
  double best_loss = std::numeric_limits<double>::infinity();
  const std::size_t n = train_set.size();
  const std::size_t wave = std::max<std::size_t>(1, worker_threads());
  std::vector<std::size_t> order(n);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    auto shuffle_rng = Rng::derive(cfg.seed, epoch);
    shuffle_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0;
    std::size_t correct = 0;
    for (std::size_t b0 = 0; b0 < n; b0 += cfg.batch_size) {
      const std::size_t bn = std::min(cfg.batch_size, n - b0);
      model.zero_grad();
      for (std::size_t w0 = 0; w0 < bn; w0 += wave) {
        const std::size_t wn = std::min(wave, bn - w0);
        std::vector<std::unique_ptr<Tape<T>>> tapes(wn);
        std::vector<double> losses(wn);
        std::vector<char> hit(wn);
        parallel_for(wn, [&](std::size_t i) {
          const std::size_t pos = b0 + w0 + i;
          const Sample& s = train_set[order[pos]];
          tapes[i] = std::make_unique<Tape<T>>(true, true);
          auto& tape = *tapes[i];
          auto rng = Rng::derive(cfg.seed ^ 0xd50b7a11ull, (epoch - 1) * n + pos);
          Context<T> ctx{tape, true, &rng};
          auto z = model.forward_one(ctx, tape.constant(sample_tensor<T>(s)));
          const auto& zv = z.value();
          hit[i] = static_cast<std::size_t>(std::max_element(zv.data().begin(), zv.data().end()) - zv.data().begin()) ==
                   s.label;
          auto loss = cross_entropy(reshape(z, {1, k}), {s.label});
          losses[i] = static_cast<double>(loss.value()[0]);
          tape.backward(scale(loss, static_cast<T>(1.0 / static_cast<double>(bn))));
        });
        for (std::size_t i = 0; i < wn; ++i) {
          tapes[i]->flush_param_grads();
          loss_sum += losses[i];
          correct += static_cast<std::size_t>(hit[i]);
        }
      }
      for (const auto& p : params)
        if (!p.param->grad.all_finite()) throw NumericError("train: non-finite gradient in " + p.name);
      opt.step(params);
      for (const auto& p : params)
        if (!p.param->value.all_finite()) throw NumericError("train: non-finite parameter " + p.name);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(n);
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(n);
    if (!std::isfinite(rec.loss)) throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch));
    bool improved = val_set.empty();
    if (!val_set.empty()) {
      auto p = predict_samples(model, val_set);
      std::size_t ok = 0;
      for (std::size_t i = 0; i < p.probs.size(); ++i)
        ok += static_cast<std::size_t>(std::max_element(p.probs[i].begin(), p.probs[i].end()) - p.probs[i].begin()) ==
              p.labels[i];
      rec.val_acc = static_cast<double>(ok) / static_cast<double>(p.probs.size());
      rec.val_loss = p.mean_loss;
      improved = res.best_epoch == 0 || rec.val_acc > res.best_val_acc ||
                 (rec.val_acc == res.best_val_acc && rec.val_loss < best_loss);
    }
    if (improved) {
      res.best_epoch = epoch;
      res.best_val_acc = rec.val_acc;
      best_loss = rec.val_loss;
      best.clear();
      for (const auto& p : params) best.push_back(p.param->value);
    }
    res.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (cfg.stop_train_acc > 0 && rec.train_acc >= cfg.stop_train_acc) break;
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i].param->value = best[i];
  model.zero_grad();
  return res;
}

// Stratified k-fold driver. fn(fold, train, held_out) trains a fresh model
// and returns its held-out report and a model checksum.
template <typename Fn>
CvSummary kfold_cv(std::vector<Sample> xs, std::size_t num_classes, std::size_t k, std::uint64_t seed, Fn&& fn) {
  stratified_folds(xs, num_classes, k, seed);
  CvSummary s;
  for (std::size_t f = 0; f < k; ++f) {
    std::vector<Sample> tr, te;
    for (const auto& x : xs) (x.fold == static_cast<int>(f) ? te : tr).push_back(x);
    auto [report, checksum] = fn(f, tr, te);
    s.add_fold(report, checksum);
  }
  return s;
}

}  // namespace conmat
