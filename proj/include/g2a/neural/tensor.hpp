#pragma once

#include <cstddef>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "g2a/common.hpp"

namespace g2a::nn {

using Shape = std::vector<std::size_t>;

// Every buffer starts on a 64-byte boundary. Eigen's vectorized loops peel
// unaligned leading elements, so heap-dependent alignment would otherwise
// change summation order between identical runs.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& s);

/// Dense float64 array. Volumes are (N, C, Z, Y, X) with X fastest; feature
/// vectors are (N, F).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  // Volume helpers (rank 5).
  std::size_t batch() const { return shape_.at(0); }
  std::size_t channels() const { return shape_.at(1); }
  std::size_t voxels() const { return shape_.at(2) * shape_.at(3) * shape_.at(4); }
  double* sample(std::size_t n) { return data() + n * size() / batch(); }
  const double* sample(std::size_t n) const { return data() + n * size() / batch(); }
  double* channel(std::size_t n, std::size_t c) { return data() + (n * channels() + c) * voxels(); }
  const double* channel(std::size_t n, std::size_t c) const { return data() + (n * channels() + c) * voxels(); }

  bool all_finite() const;
  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  Buffer data_;
};

/// Throws NumericalError naming `where` if any entry is NaN or infinite.
void require_finite(const Tensor& t, std::string_view where);

/// Trainable array with its gradient accumulator.
struct Param {
  std::string name;
  Shape shape;
  Buffer value;
  Buffer grad;

  Param() = default;
  Param(std::string n, Shape s) : name(std::move(n)), shape(std::move(s)), value(shape_size(shape), 0.0),
                                  grad(value.size(), 0.0) {}
  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

/// He-normal fill (std = sqrt(2 / fan_in)).
void init_he(Param& p, std::size_t fan_in, Rng& rng);

}  // namespace g2a::nn
