#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>

#include "hicd/numerics/tensor.hpp"

namespace hicd::num {

class GradTape;

// Handle to a tensor recorded on a GradTape. Cheap to copy; valid as long as
// the tape is alive.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Tensor& grad() const;
  GradTape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class GradTape;
  Var(GradTape* tape, std::size_t id) : tape_(tape), id_(id) {}

  GradTape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode gradient tape. Operations append nodes in evaluation order;
// backward() walks them in reverse. A tape is single-use per computation and
// not thread-safe.
class GradTape {
 public:
  // Called during backward with the node's output value and its gradient. It
  // must accumulate into input gradients through accumulate()/grad_buffer().
  using BackwardFn =
      std::function<void(GradTape&, const Tensor& out_value, const Tensor& out_grad)>;

  // With record_gradients == false the tape keeps values only, which is the
  // cheap path for inference.
  explicit GradTape(bool record_gradients = true) : recording_(record_gradients) {}
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);

  // Leaf that references `value` instead of copying it. `value` must outlive
  // the tape.
  Var external(const Tensor& value, bool requires_grad = true);

  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward);

  bool recording() const { return recording_; }
  bool requires_grad(Var v) const;
  const Tensor& value(Var v) const;

  // Gradient of the last backward() loss w.r.t. v. Nodes the loss does not
  // depend on hold zeros.
  const Tensor& grad(Var v) const;

  // Adds `g` into v's gradient buffer (only meaningful inside backward).
  void accumulate(Var v, const Tensor& g);
  Tensor& grad_buffer(Var v);

  // Seeds d(loss)/d(loss) = 1 and propagates. Gradients are reset first, so
  // calling backward twice yields identical results.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;

    const Tensor& value() const { return external != nullptr ? *external : owned; }
  };

  const Node& node(Var v) const;
  Node& node(Var v);
  Var push(Node n);

  std::deque<Node> nodes_;
  bool recording_;
  bool has_gradients_ = false;
};

}  // namespace hicd::num
