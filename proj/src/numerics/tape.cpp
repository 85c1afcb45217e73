#include "hicd/numerics/tape.hpp"

#include <algorithm>

#include "hicd/error.hpp"

namespace hicd::num {

const Tensor& Var::value() const {
  if (tape_ == nullptr) throw UsageError("value() on an unbound Var");
  return tape_->value(*this);
}

const Tensor& Var::grad() const {
  if (tape_ == nullptr) throw UsageError("grad() on an unbound Var");
  return tape_->grad(*this);
}

Var GradTape::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const GradTape::Node& GradTape::node(Var v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) {
    throw UsageError("tensor is not recorded on this tape");
  }
  return nodes_[v.id_];
}

GradTape::Node& GradTape::node(Var v) {
  if (v.tape_ != this || v.id_ >= nodes_.size()) {
    throw UsageError("tensor is not recorded on this tape");
  }
  return nodes_[v.id_];
}

Var GradTape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = recording_ && requires_grad;
  return push(std::move(n));
}

Var GradTape::external(const Tensor& value, bool requires_grad) {
  Node n;
  n.external = &value;
  n.requires_grad = recording_ && requires_grad;
  return push(std::move(n));
}

Var GradTape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  return record(std::move(value), std::vector<Var>(inputs), std::move(backward));
}

Var GradTape::record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
  Node n;
  n.owned = std::move(value);
  if (recording_) {
    n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                  [this](Var in) { return requires_grad(in); });
    if (n.requires_grad) n.backward = std::move(backward);
  }
  return push(std::move(n));
}

bool GradTape::requires_grad(Var v) const { return node(v).requires_grad; }

const Tensor& GradTape::value(Var v) const { return node(v).value(); }

const Tensor& GradTape::grad(Var v) const {
  const Node& n = node(v);
  if (!has_gradients_) throw UsageError("grad() requested before backward()");
  return n.grad;
}

Tensor& GradTape::grad_buffer(Var v) {
  Node& n = node(v);
  if (n.grad.shape() != n.value().shape()) n.grad = Tensor(n.value().shape());
  return n.grad;
}

void GradTape::accumulate(Var v, const Tensor& g) {
  Tensor& buf = grad_buffer(v);
  if (buf.shape() != g.shape()) {
    throw DimensionError("gradient shape " + shape_string(g.shape()) + " does not match value " +
                         shape_string(buf.shape()));
  }
  auto dst = buf.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void GradTape::backward(Var loss) {
  if (loss.tape_ != this) throw UsageError("backward(): loss was not produced on this tape");
  if (!recording_) throw UsageError("backward() on a tape created without gradient recording");
  const Node& loss_node = node(loss);
  if (loss_node.value().size() != 1) {
    throw UsageError("backward() needs a scalar loss, got shape " +
                     shape_string(loss_node.value().shape()));
  }
  for (Node& n : nodes_) n.grad = Tensor(n.value().shape());
  has_gradients_ = true;
  nodes_[loss.id_].grad[0] = 1.0;
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward) continue;
    n.backward(*this, n.value(), n.grad);
  }
}

}  // namespace hicd::num
