#include "nsvit/tensor.hpp"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <numeric>

namespace nsvit {

namespace detail {

void AlignedBuf::allocate(size_t n) {
  constexpr size_t kAlign = 64;
  const size_t bytes = (n * sizeof(float) + kAlign - 1) / kAlign * kAlign;
  ptr_ = static_cast<float*>(std::aligned_alloc(kAlign, bytes));
  NSVIT_REQUIRE(ptr_ != nullptr, "tensor allocation of ", n, " floats failed");
  n_ = n;
}

void AlignedBuf::release() {
  std::free(ptr_);
  ptr_ = nullptr;
  n_ = 0;
}

void AlignedBuf::assign(size_t n, float value) {
  if (n_ != n) {
    release();
    if (n > 0) allocate(n);
  }
  std::fill(ptr_, ptr_ + n_, value);
}

void AlignedBuf::copy_from(const float* src, size_t n) {
  if (n_ != n) {
    release();
    if (n > 0) allocate(n);
  }
  if (n > 0) std::memcpy(ptr_, src, n * sizeof(float));
}

}  // namespace detail

namespace {

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    NSVIT_REQUIRE(d > 0, "tensor dimensions must be positive, got ", d);
    n *= d;
  }
  return n;
}

}  // namespace

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto node = std::make_shared<detail::TensorNode>();
  node->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0f);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::full(std::vector<int> shape, float value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.node_->data.begin(), t.node_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data,
                         bool requires_grad) {
  NSVIT_REQUIRE(shape_numel(shape) == static_cast<int64_t>(data.size()),
                "from_data: shape/data size mismatch (", shape_numel(shape), " vs ",
                data.size(), ")");
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->data.copy_from(data.data(), data.size());
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(float value) { return from_data({1}, {value}); }

int Tensor::rows() const {
  NSVIT_REQUIRE(rank() == 2, "rows(): tensor is not rank 2, shape ", shape_str());
  return node_->shape[0];
}

int Tensor::cols() const {
  NSVIT_REQUIRE(rank() == 2, "cols(): tensor is not rank 2, shape ", shape_str());
  return node_->shape[1];
}

float Tensor::at(std::span<const int> index) const {
  NSVIT_REQUIRE(index.size() == node_->shape.size(), "at(): rank mismatch");
  int64_t off = 0;
  for (size_t i = 0; i < index.size(); ++i) {
    NSVIT_REQUIRE(index[i] >= 0 && index[i] < node_->shape[i], "at(): index out of range");
    off = off * node_->shape[i] + index[i];
  }
  return node_->data[static_cast<size_t>(off)];
}

float Tensor::item() const {
  NSVIT_REQUIRE(numel() == 1, "item(): tensor is not scalar, shape ", shape_str());
  return node_->data[0];
}

void Tensor::set_requires_grad(bool v) { node_->requires_grad = v; }

std::span<const float> Tensor::grad() const {
  if (node_->grad.empty()) {
    node_->grad.assign(node_->data.size(), 0.0f);
  }
  return {node_->grad.data(), node_->grad.size()};
}

std::span<float> Tensor::grad_mut() {
  if (node_->grad.empty()) {
    node_->grad.assign(node_->data.size(), 0.0f);
  }
  return {node_->grad.data(), node_->grad.size()};
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) {
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
  }
}

void Tensor::accumulate_grad(std::span<const float> delta) {
  NSVIT_REQUIRE(delta.size() == node_->data.size(), "accumulate_grad: size mismatch");
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0f);
  float* g = node_->grad.data();
  const float* d = delta.data();
  for (size_t i = 0; i < delta.size(); ++i) g[i] += d[i];
}

bool Tensor::all_finite() const {
  for (float v : node_->data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::clone() const {
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = node_->shape;
  node->data = node_->data;
  return Tensor(std::move(node));
}

std::string Tensor::shape_str() const {
  std::string s = "[";
  for (size_t i = 0; i < node_->shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(node_->shape[i]);
  }
  return s + "]";
}

void Graph::record(const Tensor& output, std::function<void()> backward_step) {
  nodes_.push_back(Node{output.node_, std::move(backward_step)});
}

void Graph::backward(const Tensor& loss) {
  NSVIT_REQUIRE(loss.numel() == 1, "backward: loss must be scalar, shape ",
                loss.shape_str());
  loss.node_->grad.assign(1, 1.0f);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // output never contributed to loss
    it->step();
  }
}

}  // namespace nsvit
