#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "mssr/autodiff/tensor.hpp"

namespace mssr::ad {

// Ordered record of executed primitive ops. Recording order is a topological
// order of the graph, so backward() walks it in reverse and visits each node
// exactly once. Single-writer: one training step builds and consumes a tape
// on one thread.
class Tape {
 public:
  using Adjoint = std::function<void()>;

  // `output` is the tensor produced by the op; `adjoint` reads its gradient
  // and accumulates into the op's inputs.
  void record(std::string op, Tensor output, Adjoint adjoint);

  // Populates grad() of every requires_grad leaf reachable from `loss`.
  // Interior gradients are reset on entry; leaf gradients accumulate across
  // calls until zeroed.
  void backward(const Tensor& loss);

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }
  std::vector<std::string> op_names() const;

 private:
  struct Node {
    std::string op;
    Tensor output;
    Adjoint adjoint;
  };
  std::vector<Node> nodes_;
};

// Makes `tape` the recording target for ops issued on this thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording (finite-difference probes, inference).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// True when an op with these inputs must be recorded; marks nothing.
bool should_record(std::initializer_list<const Tensor*> inputs);

// Fault injection for gradient-check self tests: the adjoint of every node
// whose op name equals `op` sees its upstream gradient scaled by 1.01.
// An empty name disables injection.
void set_corrupted_adjoint(std::string op);
const std::string& corrupted_adjoint();

}  // namespace mssr::ad
