#include "tape.hpp"

#include "errors.hpp"

namespace ssvep::nn {

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::emit(Tensor value, const std::vector<Var>& inputs,
               std::function<void(Tape&, int)> backward) {
  bool req = false;
  for (const Var& v : inputs) {
    require_data(v.valid() && v.tape() == this, "op input bound to a different tape");
    req = req || nodes_[static_cast<std::size_t>(v.id())].requires_grad;
  }
  Node n;
  n.value = std::move(value);
  n.requires_grad = req;
  if (req) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor& Tape::grad(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
  return n.grad;
}

void Tape::accumulate(int id, const double* g, std::int64_t n) {
  accumulate_scaled(id, g, n, 1.0);
}

void Tape::accumulate_scaled(int id, const double* g, std::int64_t n, double scale) {
  Node& node = nodes_[static_cast<std::size_t>(id)];
  if (!node.requires_grad) return;
  require_data(n == node.value.size(), "gradient length mismatch");
  Tensor& dst = grad(id);
  double* d = dst.ptr();
  for (std::int64_t i = 0; i < n; ++i) d[i] += scale * g[i];
}

void Tape::backward(Var loss) {
  require_data(loss.valid() && loss.tape() == this, "loss not on this tape");
  require_data(loss.val().size() == 1, "backward requires a scalar loss");
  grad(loss.id()).data[0] = 1.0;
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.backward && !n.grad.data.empty()) n.backward(*this, id);
  }
}

void Tape::reset() { nodes_.clear(); }

const Tensor& Var::grad() const {
  return tape_->grad(id_);
}

}  // namespace ssvep::nn
