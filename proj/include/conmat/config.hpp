#pragma once

// Run configuration: one flat key = value namespace covering the model,
// training, augmentation and command options. Resolution order: preset,
// then ablation, then every other key from the config file, then flags.

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "conmat/data.hpp"
#include "conmat/model.hpp"
#include "conmat/train.hpp"
#include "conmat/xai.hpp"

namespace conmat {

enum class Balance { none, max, reference };

inline const char* balance_name(Balance b) {
  switch (b) {
    case Balance::max: return "max";
    case Balance::reference: return "reference";
    default: return "none";
  }
}

inline Balance parse_balance(const std::string& key, const std::string& v) {
  if (v == "none") return Balance::none;
  if (v == "max") return Balance::max;
  if (v == "reference") return Balance::reference;
  throw ConfigError(key + ": expected none|max|reference, got '" + v + "'");
}

struct RunConfig {
  std::string preset = "desk";
  std::string ablation = "full";
  ModelConfig model = ModelConfig::desk();
  TrainConfig train;
  AugmentSpec augment;

  std::string data;
  std::string checkpoint;
  std::string image;
  SplitRatios split;
  Balance balance = Balance::none;
  bool balance_val = false;  // also top up the validation split
  std::size_t folds = 4;
  CiMethod ci = CiMethod::normal;
  std::string eval_split = "test";  // test | all

  std::string method = "gradcam";
  long long target_class = -1;  // -1: predicted class
  std::string xai_tap = "stage4";
  LimeConfig lime;

  std::string ttest_metric = "accuracy";

  std::vector<std::pair<std::string, std::string>> to_kv() const {
    std::vector<std::pair<std::string, std::string>> kv = {{"preset", preset}, {"ablation", ablation}};
    for (auto& p : model.to_kv()) kv.push_back(p);
    for (auto& p : train.to_kv()) kv.push_back(p);
    for (auto& p : augment.to_kv())
      if (p.first != "aug_resize") kv.push_back(p);
    kv.insert(kv.end(), {{"data", data},
                         {"checkpoint", checkpoint},
                         {"image", image},
                         {"split_train", fmt_double(split.train)},
                         {"split_val", fmt_double(split.val)},
                         {"split_test", fmt_double(split.test)},
                         {"balance", balance_name(balance)},
                         {"balance_val", balance_val ? "1" : "0"},
                         {"folds", std::to_string(folds)},
                         {"ci_method", ci == CiMethod::normal ? "normal" : "bootstrap"},
                         {"eval_split", eval_split},
                         {"method", method},
                         {"class", std::to_string(target_class)},
                         {"xai_tap", xai_tap},
                         {"lime_grid", std::to_string(lime.grid)},
                         {"lime_samples", std::to_string(lime.samples)},
                         {"lime_kernel_width", fmt_double(lime.kernel_width)},
                         {"lime_lambda", fmt_double(lime.lambda)},
                         {"lime_top", std::to_string(lime.top_segments)},
                         {"ttest_metric", ttest_metric}});
    return kv;
  }

  std::string resolved_text() const {
    std::string out;
    for (const auto& [k, v] : to_kv()) out += k + " = " + v + "\n";
    return out;
  }

  void validate() const {
    model.validate();
    train.validate();
    augment.validate();
    if (split.train <= 0 || split.test <= 0) throw ConfigError("split: train and test fractions must be positive");
    if (folds < 2) throw ConfigError("folds must be >= 2");
    if (eval_split != "test" && eval_split != "all") throw ConfigError("eval_split: expected test|all");
    parse_xai_method(method);
    if (lime.grid == 0) throw ConfigError("lime_grid must be >= 1");
    if (lime.samples < lime.grid * lime.grid + 1) throw ConfigError("lime_samples must exceed lime_grid^2");
    if (!(lime.kernel_width > 0) || lime.lambda < 0) throw ConfigError("lime: kernel width > 0 and lambda >= 0 required");
  }

 private:
  bool set_other(const std::string& k, const std::string& v) {
    if (model.set(k, v) || train.set(k, v)) return true;
    if (k == "aug_resize") throw ConfigError("aug_resize follows input_size and cannot be set");
    if (augment.set(k, v)) return true;
    if (k == "data") data = v;
    else if (k == "checkpoint") checkpoint = v;
    else if (k == "image") image = v;
    else if (k == "split_train") split.train = parse_double(k, v);
    else if (k == "split_val") split.val = parse_double(k, v);
    else if (k == "split_test") split.test = parse_double(k, v);
    else if (k == "balance") balance = parse_balance(k, v);
    else if (k == "balance_val") balance_val = parse_bool(k, v);
    else if (k == "folds") folds = parse_size(k, v);
    else if (k == "ci_method") {
      if (v == "normal") ci = CiMethod::normal;
      else if (v == "bootstrap") ci = CiMethod::bootstrap;
      else throw ConfigError("ci_method: expected normal|bootstrap");
    } else if (k == "eval_split") eval_split = v;
    else if (k == "method") method = v;
    else if (k == "class") target_class = parse_int(k, v);
    else if (k == "xai_tap") xai_tap = v;
    else if (k == "lime_grid") lime.grid = parse_size(k, v);
    else if (k == "lime_samples") lime.samples = parse_size(k, v);
    else if (k == "lime_kernel_width") lime.kernel_width = parse_double(k, v);
    else if (k == "lime_lambda") lime.lambda = parse_double(k, v);
    else if (k == "lime_top") lime.top_segments = parse_size(k, v);
    else if (k == "ttest_metric") ttest_metric = v;
    else return false;
    return true;
  }

 public:
  // Later entries override earlier ones. Unknown keys are errors.
  static RunConfig resolve(const std::vector<std::pair<std::string, std::string>>& entries) {
    std::map<std::string, std::string> last;
    std::vector<std::string> order;
    for (const auto& [k, v] : entries) {
      if (!last.count(k)) order.push_back(k);
      last[k] = v;
    }
    RunConfig rc;
    if (last.count("preset")) rc.preset = last["preset"];
    rc.model = ModelConfig::preset(rc.preset);
    if (last.count("ablation")) rc.ablation = last["ablation"];
    rc.model.apply(parse_ablation(rc.ablation));
    for (const auto& k : order) {
      if (k == "preset" || k == "ablation") continue;
      if (!rc.set_other(k, last[k])) throw ConfigError("unknown config key '" + k + "'");
    }
    rc.augment.resize = rc.model.input_size;
    rc.validate();
    return rc;
  }
};

inline std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_kv_text(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace conmat
