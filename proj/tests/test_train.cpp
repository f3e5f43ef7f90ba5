#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "conmat/train.hpp"

using namespace conmat;

// ---------------------------------------------------------------------------
// Metrics

TEST(Metrics, PerfectPredictions) {
  std::vector<std::vector<double>> p = {{0.9, 0.1}, {0.2, 0.8}, {0.7, 0.3}};
  auto r = evaluate_probs(p, {0, 1, 0}, {});
  EXPECT_EQ(r.accuracy, 1.0);
  for (double f : r.f1) EXPECT_EQ(f, 1.0);
  EXPECT_EQ(r.roc[0]->auc, 1.0);
}

TEST(Metrics, OneHitOneFalsePositiveOneMiss) {
  // class 0: TP=1 (row 0 col 0), FP=1 (row 1 col 0), FN=1 (row 0 col 2)
  EvalReport r;
  r.confusion = {{1, 0, 1}, {1, 0, 0}, {0, 0, 0}};
  fill_class_metrics(r);
  EXPECT_DOUBLE_EQ(r.precision[0], 0.5);
  EXPECT_DOUBLE_EQ(r.recall[0], 0.5);
  EXPECT_DOUBLE_EQ(r.f1[0], 0.5);
  EXPECT_EQ(r.precision[2], 0.0);  // never predicted
  EXPECT_EQ(r.recall[2], 0.0);     // no support
  EXPECT_DOUBLE_EQ(r.accuracy, 1.0 / 3.0);
}

TEST(Metrics, ConfusionInvariantsOnRandomPredictions) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 5 + rng.index(40), k = 2 + rng.index(4);
    std::vector<std::vector<double>> p(n, std::vector<double>(k));
    std::vector<std::size_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (auto& v : p[i]) v = rng.uniform();
      y[i] = rng.index(k);
    }
    auto r = evaluate_probs(p, y, {});
    EXPECT_EQ(r.total, n);
    double f = 0;
    for (std::size_t c = 0; c < k; ++c) {
      f += r.f1[c];
      EXPECT_EQ(r.support(c), static_cast<std::size_t>(std::count(y.begin(), y.end(), c)));
      if (r.roc[c]) {
        EXPECT_GE(r.roc[c]->auc, 0.0);
        EXPECT_LE(r.roc[c]->auc, 1.0);
      }
    }
    EXPECT_NEAR(r.macro_f1, f / static_cast<double>(k), 1e-12);
  }
}

TEST(Roc, HandExample) {
  auto r = roc_curve({0.8, 0.4, 0.6, 0.2}, {true, true, false, false});
  EXPECT_DOUBLE_EQ(r.auc, 0.75);
  EXPECT_EQ(r.points.front(), (std::pair<double, double>{0, 0}));
  EXPECT_EQ(r.points.back(), (std::pair<double, double>{1, 1}));
  EXPECT_DOUBLE_EQ(roc_curve({0.5, 0.5, 0.5}, {true, false, true}).auc, 0.5);
  EXPECT_THROW(roc_curve({0.1, 0.2}, {true, true}), ValueError);
}

TEST(Roc, TrapezoidMatchesRankFormulation) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.index(49);
    std::vector<double> s(n);
    std::vector<bool> pos(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.index(8)) / 8.0;  // coarse grid forces ties
      pos[i] = rng.bernoulli(0.5);
    }
    pos[0] = true;
    pos[1] = false;
    EXPECT_NEAR(roc_curve(s, pos).auc, auc_rank(s, pos), 1e-12);
  }
}

TEST(Confidence, NormalInterval) {
  auto ci = class_confidence_intervals({0.8, 1.0, 0.7, 0.7, 0.7}, {0, 0, 1, 1, 1}, 3);
  EXPECT_NEAR(ci[0].mean, 0.9, 1e-12);
  EXPECT_NEAR(ci[0].half_width, 1.96 * std::sqrt(0.02) / std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(ci[0].half_width, 0.196, 1e-3);
  EXPECT_NEAR(ci[1].half_width, 0.0, 1e-15);
  EXPECT_FALSE(ci[2].present);
  auto boot = class_confidence_intervals({0.8, 1.0, 0.9, 0.85}, {0, 0, 0, 0}, 1, CiMethod::bootstrap, 500, 3);
  EXPECT_GT(boot[0].half_width, 0.0);
  EXPECT_EQ(boot[0].half_width,
            class_confidence_intervals({0.8, 1.0, 0.9, 0.85}, {0, 0, 0, 0}, 1, CiMethod::bootstrap, 500, 3)[0]
                .half_width);
}

TEST(Metrics, JsonAndCsvShapes) {
  auto r = evaluate_probs({{0.9, 0.1}, {0.4, 0.6}, {0.3, 0.7}}, {0, 1, 0}, {"a", "b"});
  auto j = to_json(r);
  EXPECT_EQ(j["classes"].size(), 2u);
  EXPECT_EQ(j["confusion"][0][1], 1);
  std::ostringstream cm, roc;
  write_confusion_csv(cm, r);
  EXPECT_EQ(cm.str(), "true\\pred,a,b\na,1,1\nb,0,1\n");
  write_roc_csv(roc, r);
  EXPECT_EQ(roc.str().substr(0, 22), "class,threshold,fpr,tp");
}

// ---------------------------------------------------------------------------
// Statistics

TEST(Stats, IncompleteBetaKnownValues) {
  EXPECT_NEAR(incomplete_beta(1, 1, 0.3), 0.3, 1e-14);
  EXPECT_NEAR(incomplete_beta(2, 3, 0.4), 0.5248, 1e-12);  // 1 - sum_{k<2} C(4,k) .4^k .6^(4-k)
  // t tables: t = 2.776, df = 4 is the two-sided 5% point; t = 3.182, df = 3 likewise
  EXPECT_NEAR(student_t_p_two_sided(2.776, 4), 0.05, 2e-4);
  EXPECT_NEAR(student_t_p_two_sided(3.182, 3), 0.05, 2e-4);
  // df = 1 is Cauchy: p = 1 - 2 atan(t) / pi
  EXPECT_NEAR(student_t_p_two_sided(1.7, 1), 1 - 2 * std::atan(1.7) / M_PI, 1e-12);
  EXPECT_NEAR(student_t_p_two_sided(0, 5), 1.0, 1e-15);
}

TEST(Stats, PairedTHandCase) {
  auto r = paired_t_test({2, 2, 2, 0}, {1, 1, 1, 1});  // d = [1,1,1,-1]
  EXPECT_NEAR(r.t, 1.0, 1e-12);
  EXPECT_EQ(r.df, 3u);
  EXPECT_NEAR(r.p, 0.391, 0.005);
  EXPECT_FALSE(r.significant());
  const double p = student_t_p_two_sided(26.449, 3);
  EXPECT_GE(p, 8e-5);
  EXPECT_LE(p, 1.6e-4);
}

TEST(Stats, PairedTProperties) {
  auto same = paired_t_test({0.9, 0.8, 0.7}, {0.9, 0.8, 0.7});
  EXPECT_EQ(same.t, 0.0);
  EXPECT_EQ(same.p, 1.0);
  EXPECT_THROW(paired_t_test({1, 2, 3}, {0, 1, 2}), ValueError);  // constant difference
  EXPECT_THROW(paired_t_test({1, 2}, {1, 2, 3}), ValueError);
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    std::vector<double> a(5), b(5);
    for (auto& v : a) v = rng.uniform();
    for (auto& v : b) v = rng.uniform();
    auto ab = paired_t_test(a, b), ba = paired_t_test(b, a);
    EXPECT_DOUBLE_EQ(ab.t, -ba.t);
    EXPECT_DOUBLE_EQ(ab.p, ba.p);
  }
}

TEST(Stats, CvSummaryMeanStd) {
  CvSummary s;
  for (double a : {0.97, 0.98, 0.975, 0.978}) {
    EvalReport r;
    r.accuracy = a;
    s.add_fold(r, "x");
  }
  EXPECT_NEAR(s.mean("accuracy"), 0.97575, 1e-12);
  EXPECT_NEAR(s.std_dev("accuracy"), std::sqrt(5.675e-5 / 3), 1e-12);  // sum of squared deviations 5.675e-5
  std::ostringstream os;
  write_cv_csv(os, s);
  const auto text = os.str();
  EXPECT_NE(text.find("\nmean,"), std::string::npos);
  EXPECT_NE(text.find("\nstd,"), std::string::npos);
  const auto path = (std::filesystem::temp_directory_path() / "conmat_cv.csv").string();
  std::ofstream(path) << text;
  auto back = read_cv_csv(path);
  EXPECT_EQ(back.column("accuracy"), s.column("accuracy"));
  EXPECT_EQ(back.checksums.size(), 4u);
}

// ---------------------------------------------------------------------------
// Optimizer and training

TEST(Adam, FirstStepHandValue) {
  Parameter<double> p(Tensor<double>({1}, 0.0));
  p.grad = Tensor<double>({1}, 1.0);
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.weight_decay = 0;
  Adam<double> opt(cfg);
  ParamList<double> ps{{"p", &p}};
  opt.step(ps);
  EXPECT_NEAR(p.value[0], -1e-3 / (1 + 1e-8), 1e-12);
}

TEST(Adam, ZeroGradientIsFixedPoint) {
  Parameter<double> p(Tensor<double>({3}, std::vector<double>{1, -2, 3}));
  p.zero_grad();
  TrainConfig cfg;
  cfg.weight_decay = 0;
  Adam<double> opt(cfg);
  ParamList<double> ps{{"p", &p}};
  for (int i = 0; i < 5; ++i) opt.step(ps);
  EXPECT_EQ(p.value.vec(), (std::vector<double>{1, -2, 3}));
}

TEST(Adam, CoupledVersusDecoupledDecay) {
  auto run = [](bool decoupled) {
    Parameter<double> p(Tensor<double>({1}, 2.0));
    p.zero_grad();
    TrainConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.5;
    cfg.decoupled_weight_decay = decoupled;
    Adam<double> opt(cfg);
    ParamList<double> ps{{"p", &p}};
    opt.step(ps);
    return p.value[0];
  };
  EXPECT_NEAR(run(false), 2.0 - 0.1, 1e-6);       // g = wd * theta > 0, normalized step = lr
  EXPECT_NEAR(run(true), 2.0 - 0.1 * 0.5 * 2.0, 1e-12);  // zero Adam step, decay only
}

namespace {

Dataset toy_blobs(std::size_t per_class, std::size_t size, std::uint64_t seed) {
  return make_blob_dataset(4, per_class, size, seed);
}

}  // namespace

TEST(Train, HistoryLengthAndDeterminism) {
  auto ds = toy_blobs(3, 32, 1);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.lr = 1e-3;
  cfg.seed = 9;
  auto run = [&] {
    Rng r(5);
    ConMatFormer<float> m(ModelConfig::toy(), r);
    auto res = train(m, ds.samples, ds.samples, cfg);
    return std::pair{res.history.size(), m.checksum()};
  };
  auto a = run();
  EXPECT_EQ(a.first, 3u);
  EXPECT_EQ(run().second, a.second);
  setenv("CMF_THREADS", "1", 1);
  auto single = run();
  unsetenv("CMF_THREADS");
  EXPECT_EQ(single.second, a.second);
}

TEST(Train, ZeroLearningRateLeavesParameters) {
  auto ds = toy_blobs(2, 32, 2);
  Rng r(6);
  auto mc = ModelConfig::toy();
  mc.dropout = 0;
  ConMatFormer<float> m(mc, r);
  const auto before = m.checksum();
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 3;
  cfg.lr = 0;
  auto res = train(m, ds.samples, {}, cfg);
  EXPECT_EQ(m.checksum(), before);
  for (const auto& e : res.history) EXPECT_NEAR(e.loss, res.history[0].loss, 1e-6);
}

TEST(Train, LossDecreasesOnToySet) {
  auto ds = toy_blobs(4, 32, 3);
  Rng r(7);
  ConMatFormer<float> m(ModelConfig::toy(), r);
  TrainConfig cfg;
  cfg.epochs = 15;
  cfg.batch_size = 8;
  cfg.lr = 2e-3;
  cfg.weight_decay = 0;
  auto res = train(m, ds.samples, {}, cfg);
  EXPECT_LT(res.history.back().loss, res.history.front().loss);
}

TEST(Train, RestoresBestValidationWeights) {
  auto ds = toy_blobs(3, 32, 4);
  Rng r(8);
  ConMatFormer<float> m(ModelConfig::toy(), r);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 6;
  cfg.lr = 1e-3;
  auto res = train(m, ds.samples, ds.samples, cfg);
  ASSERT_GE(res.best_epoch, 1u);
  double best = 0;
  for (const auto& e : res.history) best = std::max(best, e.val_acc);
  EXPECT_EQ(res.best_val_acc, best);
  auto rep = evaluate_model(m, ds.samples, ds.class_names);
  EXPECT_DOUBLE_EQ(rep.accuracy, best);
  EXPECT_THROW(train(m, {}, {}, cfg), DataError);
}

TEST(CrossValidation, ConstantPredictorMatchesPrevalence) {
  auto ds = toy_blobs(8, 8, 5);
  auto s = kfold_cv(ds.samples, 4, 4, 1, [&](std::size_t, const std::vector<Sample>&, const std::vector<Sample>& te) {
    std::vector<std::vector<double>> p(te.size(), {1.0, 0.0, 0.0, 0.0});
    std::vector<std::size_t> y;
    for (const auto& x : te) y.push_back(x.label);
    return std::pair{evaluate_probs(p, y, ds.class_names), std::string("c")};
  });
  ASSERT_EQ(s.folds.size(), 4u);
  for (double a : s.column("accuracy")) EXPECT_DOUBLE_EQ(a, 0.25);
  EXPECT_EQ(s.std_dev("accuracy"), 0.0);
}
