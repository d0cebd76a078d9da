#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "nsvit/errors.hpp"

namespace nsvit {

class Graph;

namespace detail {

// 64-byte-aligned float buffer. Vectorized kernels pick code paths based on
// pointer alignment; a fixed alignment keeps arithmetic bitwise reproducible
// regardless of allocation history.
class AlignedBuf {
 public:
  AlignedBuf() = default;
  AlignedBuf(const AlignedBuf& o) { copy_from(o.ptr_, o.n_); }
  AlignedBuf& operator=(const AlignedBuf& o) {
    if (this != &o) {
      release();
      copy_from(o.ptr_, o.n_);
    }
    return *this;
  }
  AlignedBuf(AlignedBuf&& o) noexcept : ptr_(o.ptr_), n_(o.n_) {
    o.ptr_ = nullptr;
    o.n_ = 0;
  }
  AlignedBuf& operator=(AlignedBuf&& o) noexcept {
    if (this != &o) {
      release();
      ptr_ = o.ptr_;
      n_ = o.n_;
      o.ptr_ = nullptr;
      o.n_ = 0;
    }
    return *this;
  }
  ~AlignedBuf() { release(); }

  void assign(size_t n, float value);
  void copy_from(const float* src, size_t n);

  float* data() { return ptr_; }
  const float* data() const { return ptr_; }
  float& operator[](size_t i) { return ptr_[i]; }
  float operator[](size_t i) const { return ptr_[i]; }
  size_t size() const { return n_; }
  bool empty() const { return n_ == 0; }
  float* begin() { return ptr_; }
  float* end() { return ptr_ + n_; }
  const float* begin() const { return ptr_; }
  const float* end() const { return ptr_ + n_; }

 private:
  void allocate(size_t n);
  void release();
  float* ptr_ = nullptr;
  size_t n_ = 0;
};

struct TensorNode {
  std::vector<int> shape;
  AlignedBuf data;
  AlignedBuf grad;  // allocated lazily, same length as data when present
  bool requires_grad = false;
};

}  // namespace detail

// Dense row-major float32 tensor with an optional gradient buffer. Value
// semantics on the handle; the underlying buffer is shared. Tensors that do
// not carry gradient state are treated as immutable once they enter a graph.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, float value);
  static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                          bool requires_grad = false);
  static Tensor scalar(float value);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }

  // Rank-2 helpers; most model math is per-image 2-D.
  int rows() const;
  int cols() const;

  std::span<const float> data() const { return {node_->data.data(), node_->data.size()}; }
  // Direct write access. Only valid before the tensor participates in a graph.
  std::span<float> data_mut() { return {node_->data.data(), node_->data.size()}; }

  float at(std::span<const int> index) const;
  float item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v);

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  // Gradient buffer; reads as zeros when no gradient has been accumulated.
  std::span<const float> grad() const;
  // Writable gradient buffer, zero-allocated on first use.
  std::span<float> grad_mut();
  void zero_grad();
  void accumulate_grad(std::span<const float> delta);

  bool all_finite() const;

  // Deep copy of data (gradient state not copied).
  Tensor clone() const;

  // Stable identity of the underlying buffer (trace and graph bookkeeping).
  const void* id() const { return node_.get(); }

  std::string shape_str() const;

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::TensorNode> node_;
  friend class Graph;
};

// Reverse-mode tape. Operations append a node per recorded op; backward
// replays nodes in reverse insertion order, which visits every node after all
// of its consumers. Single-owner, single-threaded during a forward/backward.
class Graph {
 public:
  // backward_step reads the op output's gradient and accumulates into inputs.
  // `output` gates replay: steps whose output never received a gradient are
  // skipped.
  void record(const Tensor& output, std::function<void()> backward_step);

  // Populates grad on every requires_grad tensor reachable from loss.
  // loss must be scalar and produced through ops recorded on this graph.
  void backward(const Tensor& loss);

  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    std::shared_ptr<detail::TensorNode> output;
    std::function<void()> step;
  };
  std::vector<Node> nodes_;
};

#ifndef NDEBUG
#define NSVIT_DEBUG_CHECK_FINITE(t, what)                                   \
  do {                                                                      \
    if (!(t).all_finite()) {                                                \
      throw ::nsvit::ContractError(std::string("non-finite values in ") + (what)); \
    }                                                                       \
  } while (0)
#else
#define NSVIT_DEBUG_CHECK_FINITE(t, what) \
  do {                                    \
  } while (0)
#endif

}  // namespace nsvit
