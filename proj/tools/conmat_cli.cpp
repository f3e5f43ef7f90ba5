// conmat: train | eval | cv | ttest | explain | gradcheck | params
//
// Diagnostics go to stderr; stdout gets one summary line per run.
// Exit codes: 1 configuration, 2 data, 3 numerical.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "conmat/config.hpp"
#include "conmat/gradcheck_suite.hpp"

using namespace conmat;
namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::string config, data, out, preset, ablation, checkpoint;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config, "key = value config file");
  app->add_option("--data", f.data, "dataset root (root/<class>/<image>)");
  app->add_option("--out", f.out, "output directory");
  app->add_option("--seed", f.seed, "random seed");
  app->add_option("--preset", f.preset, "model preset")->check(CLI::IsMember({"paper", "desk", "toy"}));
  app->add_option("--ablation", f.ablation, "baseline|cbam|danet|cbam_danet|full");
  app->add_option("--set", f.sets, "override a config key: --set key=value (repeatable)");
}

RunConfig resolve(const CommonFlags& f, std::vector<std::pair<std::string, std::string>> extra = {}) {
  std::vector<std::pair<std::string, std::string>> kv;
  if (!f.config.empty()) kv = read_config_file(f.config);
  if (!f.preset.empty()) kv.emplace_back("preset", f.preset);
  if (!f.ablation.empty()) kv.emplace_back("ablation", f.ablation);
  if (!f.data.empty()) kv.emplace_back("data", f.data);
  if (!f.checkpoint.empty()) kv.emplace_back("checkpoint", f.checkpoint);
  if (f.seed) kv.emplace_back("seed", std::to_string(*f.seed));
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    kv.emplace_back(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
  for (auto& e : extra) kv.push_back(std::move(e));
  return RunConfig::resolve(kv);
}

std::string out_dir(const CommonFlags& f, const std::string& command) {
  std::error_code ec;
  if (!f.out.empty()) {
    fs::create_directories(f.out, ec);
    if (ec) throw IoError("cannot create output directory " + f.out + ": " + ec.message());
    return f.out;
  }
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  std::ostringstream os;
  os << "runs/" << std::put_time(&tm, "%Y%m%d-%H%M%S") << '-' << command;
  fs::create_directories("runs", ec);
  // create_directory is atomic, so concurrent runs in the same second get distinct suffixes.
  for (int k = 1; k < 1000; ++k) {
    const std::string dir = k == 1 ? os.str() : os.str() + "-" + std::to_string(k);
    if (fs::create_directory(dir, ec)) return dir;
    if (ec) break;
  }
  throw IoError("cannot create a fresh output directory under runs/");
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot write " + p.string());
  os << text;
}

template <typename F>
void write_with(const fs::path& p, F&& fn) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot write " + p.string());
  fn(os);
}

std::string require_data(const RunConfig& rc) {
  if (rc.data.empty()) throw ConfigError("no data root given (--data or data = ...)");
  return rc.data;
}

Dataset load(const RunConfig& rc) {
  auto ds = load_dataset(require_data(rc), rc.model.input_size, &std::cerr);
  std::cerr << "data: " << ds.samples.size() << " images in " << ds.num_classes() << " classes";
  if (ds.skipped) std::cerr << " (" << ds.skipped << " skipped)";
  std::cerr << '\n';
  return ds;
}

std::vector<std::size_t> balance_targets(const RunConfig& rc, const std::vector<Sample>& xs,
                                         const std::vector<std::string>& names, bool validation) {
  if (rc.balance == Balance::reference)
    return targets_for(names, validation ? reference_val_targets() : reference_train_targets());
  auto counts = class_counts(xs, names.size());
  const auto top = *std::max_element(counts.begin(), counts.end());
  return std::vector<std::size_t>(names.size(), top);
}

std::vector<Sample> maybe_balance(const RunConfig& rc, std::vector<Sample> xs, const std::vector<std::string>& names,
                                  bool validation, std::uint64_t stream) {
  if (rc.balance == Balance::none || xs.empty()) return xs;
  auto targets = balance_targets(rc, xs, names, validation);
  auto out = balance_classes(xs, targets, rc.augment, Rng::derive(rc.train.seed, stream).next());
  std::cerr << (validation ? "val" : "train") << ": balanced " << xs.size() << " -> " << out.size() << " samples\n";
  return out;
}

void log_epoch(const EpochRecord& r) {
  std::cerr << "epoch " << r.epoch << " loss " << fmt_double(r.loss) << " train_acc " << fmt_double(r.train_acc);
  if (!std::isnan(r.val_acc)) std::cerr << " val_acc " << fmt_double(r.val_acc);
  std::cerr << '\n';
}

void write_eval_files(const fs::path& dir, const EvalReport& rep, nlohmann::ordered_json extra = {}) {
  auto j = to_json(rep);
  for (auto& [k, v] : extra.items()) j[k] = v;
  write_text(dir / "metrics.json", j.dump(2) + "\n");
  write_with(dir / "confusion.csv", [&](std::ostream& os) { write_confusion_csv(os, rep); });
  write_with(dir / "roc.csv", [&](std::ostream& os) { write_roc_csv(os, rep); });
}

std::string class_list(const std::vector<std::string>& names) { return join(names, ','); }

// ---------------------------------------------------------------------------

int cmd_train(const CommonFlags& f) {
  auto rc = resolve(f);
  auto ds = load(rc);
  rc.model.num_classes = ds.num_classes();
  rc.validate();
  const auto dir = out_dir(f, "train");
  write_text(fs::path(dir) / "config.resolved", rc.resolved_text());

  stratified_split(ds.samples, ds.num_classes(), rc.train.seed, rc.split);
  auto train_set = maybe_balance(rc, filter_split(ds.samples, Split::train), ds.class_names, false, 1);
  auto val_set = filter_split(ds.samples, Split::val);
  if (rc.balance_val) val_set = maybe_balance(rc, val_set, ds.class_names, true, 2);
  const auto test_set = filter_split(ds.samples, Split::test);
  std::vector<Sample> all = train_set;
  all.insert(all.end(), val_set.begin(), val_set.end());
  all.insert(all.end(), test_set.begin(), test_set.end());
  write_with(fs::path(dir) / "manifest.csv", [&](std::ostream& os) { write_manifest(os, all); });

  Rng init(rc.train.seed);
  ConMatFormer<float> model(rc.model, init);
  std::cerr << "model: " << model.num_params() << " parameters\n";
  auto res = train(model, train_set, val_set, rc.train, log_epoch);
  write_with(fs::path(dir) / "history.csv", [&](std::ostream& os) { write_history_csv(os, res.history); });
  save_checkpoint(model, (fs::path(dir) / "checkpoint.bin").string(),
                  {{"class_names", class_list(ds.class_names)}, {"best_epoch", std::to_string(res.best_epoch)}});
  auto rep = evaluate_model(model, test_set, ds.class_names, rc.ci);
  nlohmann::ordered_json extra;
  extra["split"] = "test";
  extra["best_epoch"] = res.best_epoch;
  extra["train_samples"] = train_set.size();
  extra["val_samples"] = val_set.size();
  extra["checkpoint_checksum"] = hex64(model.checksum());
  write_eval_files(dir, rep, extra);
  std::cout << "train: test_accuracy=" << fmt_double(rep.accuracy) << " macro_f1=" << fmt_double(rep.macro_f1)
            << " best_epoch=" << res.best_epoch << " out=" << dir << std::endl;
  return 0;
}

std::pair<ConMatFormer<float>, std::vector<std::string>> load_model(const RunConfig& rc) {
  if (rc.checkpoint.empty()) throw ConfigError("no checkpoint given (--checkpoint)");
  if (!fs::exists(rc.checkpoint)) throw DataError("checkpoint not found: " + rc.checkpoint);
  auto [model, hdr] = load_checkpoint<float>(rc.checkpoint);
  std::vector<std::string> names;
  if (auto it = hdr.extra.find("class_names"); it != hdr.extra.end()) names = split(it->second, ',');
  if (names.size() != model.config().num_classes) {
    names.clear();
    for (std::size_t c = 0; c < model.config().num_classes; ++c) names.push_back(std::to_string(c));
  }
  return {std::move(model), std::move(names)};
}

int cmd_eval(const CommonFlags& f) {
  auto rc = resolve(f);
  auto [model, names] = load_model(rc);
  rc.model = model.config();
  auto ds = load(rc);
  if (ds.class_names != names)
    throw DataError("dataset classes (" + class_list(ds.class_names) + ") differ from checkpoint classes (" +
                    class_list(names) + ")");
  const auto dir = out_dir(f, "eval");
  write_text(fs::path(dir) / "config.resolved", rc.resolved_text());
  std::vector<Sample> xs = ds.samples;
  if (rc.eval_split == "test") {
    stratified_split(xs, ds.num_classes(), rc.train.seed, rc.split);
    xs = filter_split(xs, Split::test);
  }
  auto rep = evaluate_model(model, xs, names, rc.ci);
  nlohmann::ordered_json extra;
  extra["split"] = rc.eval_split;
  extra["checkpoint_checksum"] = hex64(model.checksum());
  write_eval_files(dir, rep, extra);
  std::cout << "eval: accuracy=" << fmt_double(rep.accuracy) << " macro_f1=" << fmt_double(rep.macro_f1)
            << " samples=" << rep.total << " out=" << dir << std::endl;
  return 0;
}

int cmd_cv(const CommonFlags& f, std::optional<std::size_t> folds) {
  std::vector<std::pair<std::string, std::string>> extra;
  if (folds) extra.emplace_back("folds", std::to_string(*folds));
  auto rc = resolve(f, extra);
  auto ds = load(rc);
  rc.model.num_classes = ds.num_classes();
  rc.validate();
  const auto dir = out_dir(f, "cv");
  write_text(fs::path(dir) / "config.resolved", rc.resolved_text());
  auto summary = kfold_cv(ds.samples, ds.num_classes(), rc.folds, rc.train.seed,
                          [&](std::size_t fold, const std::vector<Sample>& tr, const std::vector<Sample>& te) {
                            std::cerr << "fold " << fold << ": train " << tr.size() << ", held out " << te.size() << '\n';
                            auto train_set = maybe_balance(rc, tr, ds.class_names, false, 100 + fold);
                            Rng init(Rng::derive(rc.train.seed, 1000 + fold).next());
                            ConMatFormer<float> model(rc.model, init);
                            auto tc = rc.train;
                            tc.seed = Rng::derive(rc.train.seed, 2000 + fold).next();
                            auto res = train(model, train_set, {}, tc, log_epoch);
                            write_with(fs::path(dir) / ("history_fold" + std::to_string(fold) + ".csv"),
                                       [&](std::ostream& os) { write_history_csv(os, res.history); });
                            auto rep = evaluate_model(model, te, ds.class_names, rc.ci);
                            std::cerr << "fold " << fold << ": accuracy " << fmt_double(rep.accuracy) << '\n';
                            return std::pair{rep, hex64(model.checksum())};
                          });
  write_with(fs::path(dir) / "cv.csv", [&](std::ostream& os) { write_cv_csv(os, summary); });
  std::cout << "cv: folds=" << rc.folds << " accuracy_mean=" << fmt_double(summary.mean("accuracy"))
            << " accuracy_std=" << fmt_double(summary.std_dev("accuracy")) << " out=" << dir << std::endl;
  return 0;
}

int cmd_ttest(const CommonFlags& f, const std::string& a_path, const std::string& b_path, const std::string& metric) {
  std::vector<std::pair<std::string, std::string>> extra;
  if (!metric.empty()) extra.emplace_back("ttest_metric", metric);
  auto rc = resolve(f, extra);
  auto a = read_cv_csv(a_path), b = read_cv_csv(b_path);
  const auto& m = rc.ttest_metric;
  for (const auto* s : {&a, &b})
    if (std::find(s->metrics.begin(), s->metrics.end(), m) == s->metrics.end())
      throw DataError("metric '" + m + "' missing from " + (s == &a ? a_path : b_path));
  if (a.folds.size() != b.folds.size())
    throw DataError("fold counts differ: " + a_path + " has " + std::to_string(a.folds.size()) + ", " + b_path +
                    " has " + std::to_string(b.folds.size()));
  TTestResult r;
  try {
    r = paired_t_test(a.column(m), b.column(m));
  } catch (const ValueError& e) {
    throw DataError(std::string("t-test: ") + e.what());
  }
  const auto dir = out_dir(f, "ttest");
  write_with(fs::path(dir) / "ttest.csv", [&](std::ostream& os) {
    os << "metric,n,mean_a,mean_b,mean_diff,t,df,p,significant\n";
    os << m << ',' << a.folds.size() << ',' << fmt_double(a.mean(m)) << ',' << fmt_double(b.mean(m)) << ','
       << fmt_double(r.mean_diff) << ',' << fmt_double(r.t) << ',' << r.df << ',' << fmt_double(r.p) << ','
       << (r.significant() ? "yes" : "no") << '\n';
  });
  std::cout << "ttest: metric=" << m << " t=" << fmt_double(r.t) << " df=" << r.df << " p=" << fmt_double(r.p)
            << " significant: " << (r.significant() ? "yes" : "no") << std::endl;
  return 0;
}

int cmd_explain(const CommonFlags& f, const std::string& image, const std::string& method,
                std::optional<long long> cls) {
  std::vector<std::pair<std::string, std::string>> extra;
  if (!image.empty()) extra.emplace_back("image", image);
  if (!method.empty()) extra.emplace_back("method", method);
  if (cls) extra.emplace_back("class", std::to_string(*cls));
  auto rc = resolve(f, extra);
  const auto m = parse_xai_method(rc.method);
  auto [model, names] = load_model(rc);
  if (rc.image.empty()) throw ConfigError("no image given (--image)");
  if (!fs::exists(rc.image)) throw DataError("image not found: " + rc.image);
  const auto& mc = model.config();
  auto img = resize_bilinear(load_image(rc.image), mc.input_size, mc.input_size);
  const auto logits = predict_logits(model, img);
  const auto probs = softmax_values<float>(logits);
  const auto predicted = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  if (rc.target_class >= static_cast<long long>(mc.num_classes))
    throw ConfigError("class " + std::to_string(rc.target_class) + " out of range");
  const std::size_t target = rc.target_class < 0 ? predicted : static_cast<std::size_t>(rc.target_class);

  const auto dir = fs::path(out_dir(f, "explain")) / "explanations";
  fs::create_directories(dir);
  const std::string stem = fs::path(rc.image).stem().string() + "_" + xai_method_name(m);
  nlohmann::ordered_json j;
  j["image"] = rc.image;
  j["method"] = xai_method_name(m);
  j["class"] = target;
  j["class_name"] = names[target];
  j["class_from"] = rc.target_class < 0 ? "argmax" : "requested";
  j["predicted_class"] = predicted;
  j["probabilities"] = std::vector<double>(probs.begin(), probs.end());
  Tensor<double> heat;
  if (m == XaiMethod::lime) {
    auto ex = lime_explain(model, img, target, rc.lime, rc.train.seed);
    heat = lime_saliency(ex, rc.lime.top_segments);
    j["grid"] = rc.lime.grid;
    j["samples"] = rc.lime.samples;
    j["kernel_width"] = rc.lime.kernel_width;
    j["lambda"] = rc.lime.lambda;
    j["seed"] = rc.train.seed;
    nlohmann::ordered_json coef;
    for (std::size_t s = 0; s < ex.coefficients.size(); ++s) coef[std::to_string(s)] = ex.coefficients[s];
    j["coefficients"] = coef;
    j["intercept"] = ex.intercept;
    j["fit_r2"] = ex.fit_r2;
  } else {
    auto s = gradient_saliency(model, img, target, m, rc.xai_tap);
    heat = s.upsampled;
    j["tap"] = rc.xai_tap;
    j["map_shape"] = s.map.shape();
    j["map"] = s.map.vec();
  }
  io::save_tensor((dir / (stem + ".cmft")).string(), heat);
  write_png((dir / (stem + ".png")).string(), render_overlay(img, heat));
  write_text(dir / (stem + ".json"), j.dump(2) + "\n");
  std::cout << "explain: method=" << xai_method_name(m) << " class=" << target << " (" << names[target]
            << ") out=" << (dir / (stem + ".png")).string() << std::endl;
  return 0;
}

int cmd_gradcheck(const CommonFlags& f) {
  auto rc = resolve(f);
  const auto dir = out_dir(f, "gradcheck");
  auto rows = run_gradcheck_suite(rc.model, rc.train.seed + 1);
  std::size_t passed = 0;
  double worst = 0;
  write_with(fs::path(dir) / "gradcheck.csv", [&](std::ostream& os) {
    os << "check,rel_error,tolerance,pass\n";
    for (const auto& r : rows) {
      os << r.name << ',' << fmt_double(r.error) << ',' << fmt_double(r.tolerance) << ',' << (r.pass() ? 1 : 0) << '\n';
      std::cerr << std::left << std::setw(22) << r.name << std::setw(14) << fmt_double(r.error) << " tol "
                << fmt_double(r.tolerance) << (r.pass() ? "  ok" : "  FAIL") << '\n';
      passed += r.pass();
      worst = std::max(worst, r.error);
    }
  });
  std::cout << "gradcheck: " << passed << "/" << rows.size() << " passed, worst rel_error=" << fmt_double(worst)
            << std::endl;
  return passed == rows.size() ? 0 : 3;
}

int cmd_params(const CommonFlags& f) {
  auto rc = resolve(f);
  const auto dir = out_dir(f, "params");
  Rng r(rc.train.seed);
  ConMatFormer<float> model(rc.model, r);
  auto rep = count_params_macs(model);
  const auto& ref = reference_census();
  auto ref_of = [&](const CensusRow& row) -> std::optional<std::size_t> {
    for (const auto& e : ref)
      if (row.module == e.module && row.name == e.detail) return e.params;
    return std::nullopt;
  };
  write_with(fs::path(dir) / "params.csv", [&](std::ostream& os) {
    os << "module,name,params,macs,reference_params\n";
    for (const auto& row : rep.rows) {
      const auto rp = ref_of(row);
      os << row.module << ',' << row.name << ',' << row.params << ',' << row.macs << ','
         << (rp ? std::to_string(*rp) : "") << '\n';
    }
    os << "total,," << rep.total_params << ',' << rep.total_macs << ',' << kReferenceTotalParams << '\n';
  });
  std::cerr << std::left << std::setw(10) << "module" << std::setw(14) << "name" << std::right << std::setw(12)
            << "params" << std::setw(14) << "reference" << std::setw(16) << "macs" << '\n';
  for (const auto& row : rep.rows) {
    const auto rp = ref_of(row);
    std::cerr << std::left << std::setw(10) << row.module << std::setw(14) << row.name << std::right << std::setw(12)
              << row.params << std::setw(14) << (rp ? std::to_string(*rp) : "-") << std::setw(16) << row.macs << '\n';
  }
  const double dev = 100.0 * (static_cast<double>(rep.total_params) - static_cast<double>(kReferenceTotalParams)) /
                     static_cast<double>(kReferenceTotalParams);
  std::ostringstream pct;
  pct << std::fixed << std::setprecision(2) << std::showpos << dev;
  std::cout << "params: preset=" << rc.preset << " ablation=" << rc.ablation << " total=" << rep.total_params
            << " (reference " << kReferenceTotalParams << ", " << pct.str() << "%) macs=" << rep.total_macs
            << " (reference " << kReferenceTotalMacs << ")" << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ConMatFormer: train, evaluate and explain"};
  app.require_subcommand(1);
  CommonFlags f;
  std::optional<std::size_t> folds;
  std::string a_path, b_path, metric, image, method;
  std::optional<long long> cls;

  auto* train_cmd = app.add_subcommand("train", "train on a dataset and evaluate on its test split");
  add_common(train_cmd, f);
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval_cmd, f);
  eval_cmd->add_option("--checkpoint", f.checkpoint, "checkpoint.bin");
  auto* cv_cmd = app.add_subcommand("cv", "stratified k-fold cross-validation");
  add_common(cv_cmd, f);
  cv_cmd->add_option("--folds", folds, "number of folds (default 4)");
  auto* tt_cmd = app.add_subcommand("ttest", "paired t-test of two cv.csv files");
  add_common(tt_cmd, f);
  tt_cmd->add_option("run_a", a_path, "first cv.csv")->required();
  tt_cmd->add_option("run_b", b_path, "second cv.csv")->required();
  tt_cmd->add_option("--metric", metric, "metric column (default accuracy)");
  auto* ex_cmd = app.add_subcommand("explain", "saliency for one image");
  add_common(ex_cmd, f);
  ex_cmd->add_option("--checkpoint", f.checkpoint, "checkpoint.bin");
  ex_cmd->add_option("--image", image, "input image");
  ex_cmd->add_option("--method", method, "gradcam|gradcampp|lime");
  ex_cmd->add_option("--class", cls, "target class (default: predicted)");
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  add_common(gc_cmd, f);
  auto* pa_cmd = app.add_subcommand("params", "parameter and MAC census");
  add_common(pa_cmd, f);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  try {
    if (*train_cmd) return cmd_train(f);
    if (*eval_cmd) return cmd_eval(f);
    if (*cv_cmd) return cmd_cv(f, folds);
    if (*tt_cmd) return cmd_ttest(f, a_path, b_path, metric);
    if (*ex_cmd) return cmd_explain(f, image, method, cls);
    if (*gc_cmd) return cmd_gradcheck(f);
    if (*pa_cmd) return cmd_params(f);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
