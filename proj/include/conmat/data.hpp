#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "conmat/image.hpp"
#include "conmat/rng.hpp"
#include "conmat/util.hpp"

namespace conmat {

enum class Split { none, train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    default: return "none";
  }
}

struct Sample {
  std::string id;  // stable identifier, "<class>/<file>" for originals
  Image image;
  std::size_t label = 0;
  std::string source_path;
  std::optional<std::string> augmented_from;
  Split split = Split::none;
  int fold = -1;
};

struct Dataset {
  std::vector<std::string> class_names;
  std::vector<Sample> samples;
  std::size_t skipped = 0;  // undecodable files

  std::size_t num_classes() const { return class_names.size(); }
};

inline std::vector<std::size_t> class_counts(const std::vector<Sample>& xs, std::size_t k) {
  std::vector<std::size_t> n(k, 0);
  for (const auto& s : xs) ++n.at(s.label);
  return n;
}

inline std::vector<Sample> filter_split(const std::vector<Sample>& xs, Split sp) {
  std::vector<Sample> out;
  for (const auto& s : xs)
    if (s.split == sp) out.push_back(s);
  return out;
}

// root/<class>/<image>. Classes sorted lexicographically; files sorted by name.
// Every image is resized to `size` x `size` on load (0 keeps native size).
inline Dataset load_dataset(const std::string& root, std::size_t size, std::ostream* warn = nullptr) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw DataError("data root not found: " + root);
  Dataset ds;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) ds.class_names.push_back(e.path().filename().string());
  std::sort(ds.class_names.begin(), ds.class_names.end());
  if (ds.class_names.empty()) throw DataError(root + ": no class directories");
  for (std::size_t label = 0; label < ds.class_names.size(); ++label) {
    const auto& cls = ds.class_names[label];
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(fs::path(root) / cls))
      if (e.is_regular_file() && is_image_file(e.path().string())) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::size_t loaded = 0;
    for (const auto& f : files) {
      Image img;
      try {
        img = load_image(f.string());
      } catch (const DataError& err) {
        ++ds.skipped;
        if (warn) *warn << "warning: skipping " << err.what() << '\n';
        continue;
      }
      if (size) img = resize_bilinear(img, size, size);
      Sample s;
      s.id = cls + "/" + f.filename().string();
      s.image = std::move(img);
      s.label = label;
      s.source_path = f.string();
      ds.samples.push_back(std::move(s));
      ++loaded;
    }
    if (loaded == 0) throw DataError("class directory has no decodable images: " + (fs::path(root) / cls).string());
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Splits

struct SplitRatios {
  double train = 0.6, val = 0.2, test = 0.2;
};

// Per class: shuffle with a class-derived stream, then take round(r*n)
// for train and val; test gets the remainder.
inline void stratified_split(std::vector<Sample>& xs, std::size_t num_classes, std::uint64_t seed,
                             SplitRatios r = {}) {
  if (r.train < 0 || r.val < 0 || r.test < 0 || std::abs(r.train + r.val + r.test - 1.0) > 1e-9)
    throw ConfigError("split ratios must be non-negative and sum to 1");
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < xs.size(); ++i) by_class.at(xs[i].label).push_back(i);
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto& idx = by_class[c];
    if (idx.size() < 5)
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                      " samples; stratified split needs at least 5");
    auto rng = Rng::derive(seed, c);
    rng.shuffle(idx.begin(), idx.end());
    const double n = static_cast<double>(idx.size());
    const auto n_train = static_cast<std::size_t>(std::llround(r.train * n));
    const auto n_val = std::min(idx.size() - n_train, static_cast<std::size_t>(std::llround(r.val * n)));
    for (std::size_t k = 0; k < idx.size(); ++k)
      xs[idx[k]].split = k < n_train ? Split::train : k < n_train + n_val ? Split::val : Split::test;
  }
}

// Stratified k folds: within each class, shuffled members are dealt round-robin.
inline void stratified_folds(std::vector<Sample>& xs, std::size_t num_classes, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("folds: k must be >= 2");
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < xs.size(); ++i) by_class.at(xs[i].label).push_back(i);
  std::size_t offset = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto& idx = by_class[c];
    if (idx.size() < k)
      throw DataError("class " + std::to_string(c) + " has fewer samples than folds (" + std::to_string(k) + ")");
    auto rng = Rng::derive(seed ^ 0x5f0dull, c);
    rng.shuffle(idx.begin(), idx.end());
    // rotate the starting fold so remainders spread across folds
    for (std::size_t j = 0; j < idx.size(); ++j) xs[idx[j]].fold = static_cast<int>((j + offset) % k);
    offset += idx.size();
  }
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentSpec {
  std::size_t resize = 224;
  double hflip_p = 0.5;
  double vflip_p = 0.5;
  std::vector<double> rotation_angles{15, 30, 45, 60};
  double rotation_p = 1.0;
  bool affine = true;
  double affine_degrees = 10;
  double translate = 0.1;
  double scale_min = 0.9, scale_max = 1.1;

  void validate() const {
    auto flip_ok = [](double p) { return p == 0.0 || p == 0.2 || p == 0.5; };
    if (!flip_ok(hflip_p) || !flip_ok(vflip_p)) throw ConfigError("augment: flip probability must be 0, 0.2 or 0.5");
    for (double a : rotation_angles)
      if (a != 15 && a != 30 && a != 45 && a != 60) throw ConfigError("augment: rotation angles must come from {15,30,45,60}");
    if (rotation_p > 0 && rotation_angles.empty()) throw ConfigError("augment: rotation enabled without angles");
    if (rotation_p < 0 || rotation_p > 1) throw ConfigError("augment: rotation_p must lie in [0,1]");
    if (affine_degrees < 0 || affine_degrees > 10 || translate < 0 || translate > 0.1 || scale_min < 0.9 ||
        scale_max > 1.1 || scale_min > scale_max)
      throw ConfigError("augment: affine ranges exceed rotation 10, translate 0.1, scale [0.9,1.1]");
    if (resize == 0) throw ConfigError("augment: resize must be positive");
  }

  // No randomness: resize only.
  static AugmentSpec resize_only(std::size_t size) {
    AugmentSpec s;
    s.resize = size;
    s.hflip_p = s.vflip_p = 0;
    s.rotation_p = 0;
    s.affine = false;
    return s;
  }

  std::vector<std::pair<std::string, std::string>> to_kv() const {
    return {{"aug_resize", std::to_string(resize)},
            {"aug_hflip_p", fmt_double(hflip_p)},
            {"aug_vflip_p", fmt_double(vflip_p)},
            {"aug_rotation_angles", fmt_list(rotation_angles)},
            {"aug_rotation_p", fmt_double(rotation_p)},
            {"aug_affine", affine ? "1" : "0"},
            {"aug_affine_degrees", fmt_double(affine_degrees)},
            {"aug_translate", fmt_double(translate)},
            {"aug_scale_min", fmt_double(scale_min)},
            {"aug_scale_max", fmt_double(scale_max)}};
  }

  bool set(const std::string& key, const std::string& v) {
    if (key == "aug_resize") resize = parse_size(key, v);
    else if (key == "aug_hflip_p") hflip_p = parse_double(key, v);
    else if (key == "aug_vflip_p") vflip_p = parse_double(key, v);
    else if (key == "aug_rotation_angles") rotation_angles = parse_double_list(key, v);
    else if (key == "aug_rotation_p") rotation_p = parse_double(key, v);
    else if (key == "aug_affine") affine = parse_bool(key, v);
    else if (key == "aug_affine_degrees") affine_degrees = parse_double(key, v);
    else if (key == "aug_translate") translate = parse_double(key, v);
    else if (key == "aug_scale_min") scale_min = parse_double(key, v);
    else if (key == "aug_scale_max") scale_max = parse_double(key, v);
    else return false;
    return true;
  }
};

// resize -> hflip -> vflip -> rotation -> affine, clamped to [0, 1].
inline Image augment_image(const Image& img, const AugmentSpec& spec, Rng& rng) {
  if (img.rank() != 3 || img.dim(1) == 0 || img.dim(2) == 0) throw ShapeError("augment: degenerate image");
  Image out = resize_bilinear(img, spec.resize, spec.resize);
  if (rng.bernoulli(spec.hflip_p)) out = hflip(out);
  if (rng.bernoulli(spec.vflip_p)) out = vflip(out);
  if (spec.rotation_p > 0 && rng.bernoulli(spec.rotation_p)) {
    const double a = spec.rotation_angles[rng.index(spec.rotation_angles.size())];
    out = rotate(out, rng.bernoulli(0.5) ? a : -a);
  }
  if (spec.affine) {
    const double side = static_cast<double>(spec.resize);
    const double deg = rng.uniform(-spec.affine_degrees, spec.affine_degrees);
    const double tx = rng.uniform(-spec.translate, spec.translate) * side;
    const double ty = rng.uniform(-spec.translate, spec.translate) * side;
    const double s = rng.uniform(spec.scale_min, spec.scale_max);
    out = warp_affine(out, deg, tx, ty, s);
  }
  clamp01(out);
  return out;
}

// Tops every class of `xs` up to targets[c] with augmented copies of its
// originals, taken round-robin. Copy j of class c draws from its own stream
// derive(seed, c, j), so the result does not depend on thread count.
inline std::vector<Sample> balance_classes(const std::vector<Sample>& xs, const std::vector<std::size_t>& targets,
                                           const AugmentSpec& spec, std::uint64_t seed) {
  const auto k = targets.size();
  std::vector<std::vector<const Sample*>> originals(k);
  for (const auto& s : xs) {
    if (s.label >= k) throw DataError("balance: label outside target list");
    if (s.split == Split::test) throw DataError("balance: test samples must not be augmented");
    if (!s.augmented_from) originals[s.label].push_back(&s);
  }
  auto counts = class_counts(xs, k);
  std::vector<Sample> out = xs;
  for (std::size_t c = 0; c < k; ++c) {
    if (targets[c] < counts[c])
      throw DataError("balance: class " + std::to_string(c) + " already has " + std::to_string(counts[c]) +
                      " samples, above target " + std::to_string(targets[c]));
    const std::size_t need = targets[c] - counts[c];
    if (need == 0) continue;
    if (originals[c].empty()) throw DataError("balance: class " + std::to_string(c) + " has no originals");
    std::vector<Sample> extra(need);
    parallel_for(need, [&](std::size_t j) {
      const Sample& src = *originals[c][j % originals[c].size()];
      auto rng = Rng::derive(seed, (static_cast<std::uint64_t>(c) << 32) | j);
      Sample s;
      s.id = src.id + "#aug" + std::to_string(j);
      s.image = augment_image(src.image, spec, rng);
      s.label = c;
      s.source_path = src.source_path;
      s.augmented_from = src.id;
      s.split = src.split;
      s.fold = src.fold;
      extra[j] = std::move(s);
    });
    for (auto& s : extra) out.push_back(std::move(s));
  }
  return out;
}

// Per-class train / validation targets after augmentation in the reference
// experiment, keyed by class directory name.
inline const std::map<std::string, std::size_t>& reference_train_targets() {
  static const std::map<std::string, std::size_t> t = {
      {"none", 3036}, {"infection", 3035}, {"ischaemia", 2777}, {"both", 3034}};
  return t;
}
inline const std::map<std::string, std::size_t>& reference_val_targets() {
  static const std::map<std::string, std::size_t> t = {
      {"none", 1012}, {"infection", 1011}, {"ischaemia", 925}, {"both", 1011}};
  return t;
}

inline std::vector<std::size_t> targets_for(const std::vector<std::string>& class_names,
                                            const std::map<std::string, std::size_t>& table) {
  std::vector<std::size_t> out;
  for (const auto& c : class_names) {
    auto it = table.find(c);
    if (it == table.end()) throw ConfigError("no balancing target for class '" + c + "'");
    out.push_back(it->second);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest and shards

inline void write_manifest(std::ostream& os, const std::vector<Sample>& xs) {
  os << "path,label,split,fold,augmented_from\n";
  for (const auto& s : xs)
    os << s.id << ',' << s.label << ',' << split_name(s.split) << ',' << s.fold << ','
       << (s.augmented_from ? *s.augmented_from : "") << '\n';
}

inline std::string manifest_string(const std::vector<Sample>& xs) {
  std::ostringstream os;
  write_manifest(os, xs);
  return os.str();
}

// One archive per split: "images" [N,3,S,S] and "labels" [N].
inline void write_shard(const std::string& path, const std::vector<Sample>& xs, const std::string& header = "") {
  if (xs.empty()) throw DataError("shard: no samples");
  const auto& s0 = xs.front().image.shape();
  Tensor<float> images({xs.size(), s0[0], s0[1], s0[2]});
  Tensor<float> labels({xs.size()});
  const auto per = xs.front().image.numel();
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].image.shape() != s0) throw ShapeError("shard: images differ in shape");
    std::copy(xs[i].image.data().begin(), xs[i].image.data().end(), images.ptr() + i * per);
    labels[i] = static_cast<float>(xs[i].label);
  }
  io::Archive<float> a;
  a.header = header;
  a.entries.emplace_back("images", std::move(images));
  a.entries.emplace_back("labels", std::move(labels));
  io::save_archive(path, a);
}

// ---------------------------------------------------------------------------
// Synthetic data: each class is a colored disc on a dark noisy background,
// at a random position and radius.

inline Image blob_image(std::size_t label, std::size_t size, Rng& rng) {
  static const float colors[6][3] = {{0.9f, 0.15f, 0.1f}, {0.1f, 0.8f, 0.2f}, {0.15f, 0.25f, 0.95f},
                                     {0.9f, 0.85f, 0.1f}, {0.8f, 0.2f, 0.8f}, {0.1f, 0.85f, 0.85f}};
  const auto* col = colors[label % 6];
  Image img({3, size, size});
  const double s = static_cast<double>(size);
  const double r = s * rng.uniform(0.18, 0.3);
  const double cx = rng.uniform(r, s - r), cy = rng.uniform(r, s - r);
  for (std::size_t i = 0; i < size; ++i)
    for (std::size_t j = 0; j < size; ++j) {
      const double d = std::hypot(static_cast<double>(j) - cx, static_cast<double>(i) - cy);
      const bool in = d <= r;
      for (std::size_t c = 0; c < 3; ++c) {
        const double noise = 0.05 * rng.uniform();
        img.at(c, i, j) = static_cast<float>(in ? col[c] * (0.85 + noise) : 0.1 + noise);
      }
    }
  return img;
}

inline Dataset make_blob_dataset(std::size_t num_classes, std::size_t per_class, std::size_t size, std::uint64_t seed) {
  Dataset ds;
  for (std::size_t c = 0; c < num_classes; ++c) ds.class_names.push_back("class" + std::to_string(c));
  for (std::size_t c = 0; c < num_classes; ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      auto rng = Rng::derive(seed, c * 100003 + i);
      Sample s;
      s.id = ds.class_names[c] + "/blob" + std::to_string(i);
      s.image = blob_image(c, size, rng);
      s.label = c;
      s.source_path = s.id;
      ds.samples.push_back(std::move(s));
    }
  return ds;
}

// Writes a blob dataset as root/<class>/<n>.png for the directory loader.
inline void write_blob_dataset(const std::string& root, const std::vector<std::string>& class_names,
                               std::size_t per_class, std::size_t size, std::uint64_t seed) {
  namespace fs = std::filesystem;
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    fs::create_directories(fs::path(root) / class_names[c]);
    for (std::size_t i = 0; i < per_class; ++i) {
      auto rng = Rng::derive(seed, c * 100003 + i);
      char name[32];
      std::snprintf(name, sizeof name, "%04zu.png", i);
      write_png((fs::path(root) / class_names[c] / name).string(), blob_image(c, size, rng));
    }
  }
}

}  // namespace conmat
