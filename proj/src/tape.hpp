#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace ssvep::nn {

class Tape;

// Handle to one tape node. Cheap to copy; valid until its tape is reset.
class Var {
 public:
  Var() = default;

  const Tensor& val() const;
  // Gradient accumulated by Tape::backward. Zero tensor if never touched.
  const Tensor& grad() const;
  const Shape& shape() const { return val().shape; }
  double item() const;

  bool valid() const { return tape_ != nullptr; }
  int id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  Var(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so the node
// list is topologically sorted by construction; backward() walks it once in
// reverse.
class Tape {
 public:
  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Records an op output. `backward` receives the tape and the node's own id
  // and must push gradient into the op's inputs via accumulate(). Pass an
  // empty function for non-differentiable results.
  Var emit(Tensor value, const std::vector<Var>& inputs,
           std::function<void(Tape&, int)> backward);

  // Seeds grad(loss) with 1 and runs every recorded backward rule once, in
  // reverse topological order. `loss` must be scalar.
  void backward(Var loss);

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  Tensor& grad(int id);
  bool grad_touched(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.data.empty(); }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  // grad[id] += g (length n must equal the node's size). No-op when the node
  // does not require grad.
  void accumulate(int id, const double* g, std::int64_t n);
  // As above but avoids a temporary: grad[id][i] += scale * g[i].
  void accumulate_scaled(int id, const double* g, std::int64_t n, double scale);

  void reset();
  std::size_t node_count() const { return nodes_.size(); }

 private:
  friend class Var;
  struct Node {
    Tensor value;
    Tensor grad;  // empty until first touched
    bool requires_grad = false;
    std::function<void(Tape&, int)> backward;
  };
  std::vector<Node> nodes_;
};

inline const Tensor& Var::val() const { return tape_->value(id_); }
inline double Var::item() const { return val().data.at(0); }

}  // namespace ssvep::nn
