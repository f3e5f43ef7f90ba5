#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace conmat {

// Error hierarchy. The CLI maps these onto exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ValueError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <typename T>
concept Real = std::is_same_v<T, float> || std::is_same_v<T, double>;

// Dense row-major array. Value semantics; copying copies the buffer.
template <Real T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size())
      throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match " +
                       std::to_string(data_.size()) + " elements");
  }

  static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const {
    if (i >= shape_.size()) throw ShapeError("tensor: axis out of range");
    return shape_[i];
  }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }
  std::vector<T>& vec() noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  T& at(std::size_t c, std::size_t i, std::size_t j) { return data_[(c * shape_[1] + i) * shape_[2] + j]; }
  const T& at(std::size_t c, std::size_t i, std::size_t j) const {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != numel())
      throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  template <Real U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <Real T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shape mismatch");
  T m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---------------------------------------------------------------------------
// Binary container: "CMFT", u16 version, u16 rank, u64 dims[rank], u8 width,
// little-endian raw data.

namespace io {

inline constexpr char kTensorMagic[4] = {'C', 'M', 'F', 'T'};
inline constexpr std::uint16_t kTensorVersion = 1;

static_assert(std::endian::native == std::endian::little, "container IO assumes a little-endian host");

template <typename U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U get(std::istream& is) {
  U v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!is) throw IoError("container: unexpected end of stream");
  return v;
}

template <Real T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write(kTensorMagic, 4);
  put<std::uint16_t>(os, kTensorVersion);
  put<std::uint16_t>(os, static_cast<std::uint16_t>(t.rank()));
  for (auto d : t.shape()) put<std::uint64_t>(os, d);
  put<std::uint8_t>(os, static_cast<std::uint8_t>(sizeof(T)));
  os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(T)));
}

// Reads a tensor stored at either element width and converts to T.
template <Real T>
Tensor<T> read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kTensorMagic, 4) != 0) throw IoError("container: bad tensor magic");
  auto version = get<std::uint16_t>(is);
  if (version != kTensorVersion) throw IoError("container: unsupported version " + std::to_string(version));
  auto rank = get<std::uint16_t>(is);
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<std::size_t>(get<std::uint64_t>(is));
  auto width = get<std::uint8_t>(is);
  const std::size_t n = shape_numel(shape);
  if (width == 4) {
    std::vector<float> buf(n);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 4));
    if (!is) throw IoError("container: truncated data");
    return Tensor<T>(shape, std::vector<T>(buf.begin(), buf.end()));
  }
  if (width == 8) {
    std::vector<double> buf(n);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 8));
    if (!is) throw IoError("container: truncated data");
    return Tensor<T>(shape, std::vector<T>(buf.begin(), buf.end()));
  }
  throw IoError("container: unsupported element width " + std::to_string(width));
}

template <Real T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_tensor(os, t);
}

template <Real T>
Tensor<T> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return read_tensor<T>(is);
}

// Named-tensor archive: "CMFK", u16 version, u32 header length, header text,
// u32 entry count, then per entry u16 name length, name, tensor record.
inline constexpr char kArchiveMagic[4] = {'C', 'M', 'F', 'K'};

template <Real T>
struct Archive {
  std::string header;
  std::vector<std::pair<std::string, Tensor<T>>> entries;

  const Tensor<T>* find(const std::string& name) const {
    for (const auto& [n, t] : entries)
      if (n == name) return &t;
    return nullptr;
  }
};

template <Real T>
void write_archive(std::ostream& os, const Archive<T>& a) {
  os.write(kArchiveMagic, 4);
  put<std::uint16_t>(os, 1);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(a.header.size()));
  os.write(a.header.data(), static_cast<std::streamsize>(a.header.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(a.entries.size()));
  for (const auto& [name, t] : a.entries) {
    put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, t);
  }
}

template <Real T>
Archive<T> read_archive(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kArchiveMagic, 4) != 0) throw IoError("archive: bad magic");
  if (get<std::uint16_t>(is) != 1) throw IoError("archive: unsupported version");
  Archive<T> a;
  a.header.resize(get<std::uint32_t>(is));
  is.read(a.header.data(), static_cast<std::streamsize>(a.header.size()));
  auto count = get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(get<std::uint16_t>(is), '\0');
    is.read(name.data(), static_cast<std::streamsize>(name.size()));
    a.entries.emplace_back(std::move(name), read_tensor<T>(is));
  }
  return a;
}

template <Real T>
void save_archive(const std::string& path, const Archive<T>& a) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_archive(os, a);
}

template <Real T>
Archive<T> load_archive(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return read_archive<T>(is);
}

}  // namespace io
}  // namespace conmat
