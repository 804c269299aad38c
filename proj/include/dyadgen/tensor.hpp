#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace dyadgen {

class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

class ParamError : public std::invalid_argument {
 public:
  explicit ParamError(const std::string& msg) : std::invalid_argument(msg) {}
};

class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Dense row-major tensor of doubles. Small and dumb on purpose; all heavy
// lifting happens in the ops that consume it.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(numel_of(shape_), 0.0);
  }
  Tensor(std::vector<int> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != static_cast<size_t>(numel_of(shape_)))
      throw ShapeError("Tensor: data size does not match shape");
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = v;
    return t;
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static long long numel_of(const std::vector<int>& shape) {
    long long n = 1;
    for (int d : shape) {
      if (d < 0) throw ShapeError("Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  long long numel() const { return static_cast<long long>(data_.size()); }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  const std::vector<int>& shape() const { return shape_; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](long long i) { return data_[static_cast<size_t>(i)]; }
  double operator[](long long i) const { return data_[static_cast<size_t>(i)]; }

  double& at2(int i, int j) { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
  double at2(int i, int j) const { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
  double& at3(int i, int j, int k) {
    return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }
  double at3(int i, int j, int k) const {
    return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor reshaped(std::vector<int> shape) const {
    if (numel_of(shape) != numel()) throw ShapeError("reshape: element count mismatch");
    return Tensor(std::move(shape), data_);
  }

  void fill(double v) {
    for (double& x : data_) x = v;
  }

  static std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch, expected " +
                     Tensor::shape_str(a.shape()) + " got " + Tensor::shape_str(b.shape()));
}

}  // namespace dyadgen
