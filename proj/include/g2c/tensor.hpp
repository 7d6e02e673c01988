#pragma once

// Dense float32 tensors (row-major, NCHW convention for images) and the
// reverse-mode differentiation tape.
//
// Tensors are immutable values once built: operations return fresh tensors and
// parameter updates swap whole buffers. A Tensor optionally carries the id of
// the tape node that produced it; ids are only meaningful for the tape whose
// serial number matches, so stale links from previous iterations are inert.
//
// The tape is define-by-run and rebuilt every forward pass. Freezing a
// parameter set is expressed by simply not watching it.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "g2c/random.hpp"

namespace g2c {

using TapeId = std::int32_t;
inline constexpr TapeId kOffTape = -1;

inline void check_arg(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

inline void check_state(bool ok, const std::string& msg) {
  if (!ok) throw std::runtime_error(msg);
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    check_arg(d > 0, "tensor dimensions must be positive, got " + shape_str(shape));
    n *= d;
  }
  return n;
}

// Global toggle for NaN/Inf detection after every op; tests switch it on.
inline bool& finite_checks_enabled() {
  static bool enabled = false;
  return enabled;
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<float>>(
            static_cast<std::size_t>(shape_numel(shape_)), 0.0f)) {}

  Tensor(std::vector<int> shape, std::vector<float> values)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<float>>(std::move(values))) {
    check_arg(static_cast<std::int64_t>(data_->size()) == shape_numel(shape_),
              "value count does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, float value) {
    Tensor t(std::move(shape));
    std::fill(t.mut()->begin(), t.mut()->end(), value);
    return t;
  }

  static Tensor scalar(float value) { return Tensor({1}, {value}); }

  static Tensor gaussian(std::vector<int> shape, Rng& rng, float stddev, float mean = 0.0f) {
    Tensor t(std::move(shape));
    for (float& v : *t.mut()) v = static_cast<float>(rng.normal(mean, stddev));
    return t;
  }

  bool defined() const { return data_ != nullptr; }
  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::int64_t numel() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

  const float* data() const { return data_->data(); }
  std::span<const float> span() const { return {data_->data(), data_->size()}; }
  float operator[](std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }
  float item() const {
    check_arg(numel() == 1, "item() requires a scalar, got " + shape_str(shape_));
    return (*data_)[0];
  }

  // Builder access. Only construction code mutates; shared tensors are value-immutable.
  std::vector<float>* mut() { return data_.get(); }

  // Same buffer under a new shape; the tape link does not survive.
  Tensor reshaped(std::vector<int> shape) const {
    check_arg(shape_numel(shape) == numel(),
              "reshape " + shape_str(shape_) + " -> " + shape_str(shape) + " changes element count");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  bool all_finite() const {
    for (float v : *data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_values(const Tensor& other) const {
    return shape_ == other.shape_ && *data_ == *other.data_;
  }

  // Tape link; kOffTape when the value is a plain constant.
  TapeId tape_id = kOffTape;
  std::uint64_t tape_serial = 0;

 private:
  std::vector<int> shape_;
  std::shared_ptr<std::vector<float>> data_;
};

inline void assert_finite(const Tensor& t, const char* where) {
  if (finite_checks_enabled() && !t.all_finite())
    throw std::runtime_error(std::string("non-finite values produced by ") + where);
}

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::span<const float> out_grad)>;

  Tape() : serial_(next_serial()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t serial() const { return serial_; }
  std::size_t node_count() const { return nodes_.size(); }

  bool on_tape(const Tensor& t) const {
    return t.tape_id != kOffTape && t.tape_serial == serial_;
  }

  // Registers a leaf value (parameter or input we want gradients for).
  TapeId watch(Tensor& t) {
    TapeId id = append("leaf", {}, t.shape(), nullptr);
    t.tape_id = id;
    t.tape_serial = serial_;
    return id;
  }

  // Records an interior node and tags the output tensor with it.
  TapeId record(const char* op, std::vector<TapeId> inputs, Tensor& out, BackwardFn backward) {
    TapeId id = append(op, std::move(inputs), out.shape(), std::move(backward));
    out.tape_id = id;
    out.tape_serial = serial_;
    return id;
  }

  TapeId id_of(const Tensor& t) const { return on_tape(t) ? t.tape_id : kOffTape; }

  // Gradient buffer for a node, zero-initialized on first touch.
  std::span<float> grad_buffer(TapeId id) {
    auto& g = grads_[static_cast<std::size_t>(id)];
    if (g.empty()) g.assign(static_cast<std::size_t>(nodes_[static_cast<std::size_t>(id)].numel), 0.0f);
    return {g.data(), g.size()};
  }

  bool has_grad(TapeId id) const {
    return id != kOffTape && !grads_[static_cast<std::size_t>(id)].empty();
  }

  // Reverse sweep from a scalar loss. Nodes no gradient reached never run.
  void backward(const Tensor& loss) {
    check_arg(loss.numel() == 1, "backward requires a scalar loss, got " + shape_str(loss.shape()));
    check_arg(on_tape(loss), "loss tensor is not recorded on this tape");
    grad_buffer(loss.tape_id)[0] += 1.0f;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      auto& node = nodes_[i];
      const auto& g = grads_[i];
      if (g.empty() || !node.backward) continue;
      node.backward(*this, {g.data(), g.size()});
    }
    ran_backward_ = true;
  }

  bool ran_backward() const { return ran_backward_; }

  // Gradient of a watched/recorded tensor; zeros when nothing reached it.
  Tensor grad(const Tensor& t) const {
    check_arg(on_tape(t), "gradient requested for a tensor not on this tape");
    check_state(ran_backward_, "gradient requested before backward()");
    const auto& g = grads_[static_cast<std::size_t>(t.tape_id)];
    if (g.empty()) return Tensor::zeros(t.shape());
    return Tensor(t.shape(), g);
  }

 private:
  struct Node {
    const char* op;
    std::vector<TapeId> inputs;
    std::int64_t numel;
    BackwardFn backward;
  };

  TapeId append(const char* op, std::vector<TapeId> inputs, const std::vector<int>& shape,
                BackwardFn backward) {
    // Topological by construction: inputs were appended before this node.
    nodes_.push_back(Node{op, std::move(inputs), shape_numel(shape), std::move(backward)});
    grads_.emplace_back();
    return static_cast<TapeId>(nodes_.size() - 1);
  }

  static std::uint64_t next_serial() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  std::uint64_t serial_;
  std::vector<Node> nodes_;
  std::vector<std::vector<float>> grads_;
  bool ran_backward_ = false;
};

}  // namespace g2c
