#include "mssr/autodiff/tape.hpp"

#include <algorithm>

#include "mssr/error.hpp"

namespace mssr::ad {
namespace {

thread_local Tape* t_active = nullptr;
std::string g_corrupted;

}  // namespace

void Tape::record(std::string op, Tensor output, Adjoint adjoint) {
  nodes_.push_back(Node{std::move(op), std::move(output), std::move(adjoint)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  const auto it = std::find_if(nodes_.rbegin(), nodes_.rend(),
                               [&](const Node& n) { return n.output.same_storage(loss); });
  if (it == nodes_.rend()) throw Error("backward: loss is not recorded on this tape");

  for (auto& node : nodes_) node.output.zero_grad();
  Tensor seed = loss;
  seed.grad()[0] = 1.0;

  for (auto n = it; n != nodes_.rend(); ++n) {
    if (!n->output.has_grad()) continue;
    if (!g_corrupted.empty() && n->op == g_corrupted) {
      for (double& g : n->output.grad()) g *= 1.01;
    }
    n->adjoint();
  }
}

std::vector<std::string> Tape::op_names() const {
  std::vector<std::string> names;
  names.reserve(nodes_.size());
  for (const auto& n : nodes_) names.push_back(n.op);
  return names;
}

TapeScope::TapeScope(Tape& tape) : previous_(t_active) { t_active = &tape; }
TapeScope::~TapeScope() { t_active = previous_; }

NoGradScope::NoGradScope() : previous_(t_active) { t_active = nullptr; }
NoGradScope::~NoGradScope() { t_active = previous_; }

Tape* active_tape() { return t_active; }

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (!t_active) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t && t->requires_grad(); });
}

void set_corrupted_adjoint(std::string op) { g_corrupted = std::move(op); }
const std::string& corrupted_adjoint() { return g_corrupted; }

}  // namespace mssr::ad
