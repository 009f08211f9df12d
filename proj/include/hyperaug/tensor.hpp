#pragma once

// Reverse-mode autodiff on a dynamic tape.
//
// Tensors are immutable value types: a shape plus a shared, never-mutated
// buffer. A tensor is either a constant (no tape link) or the output of a
// recorded node on exactly one tape. Backward rules are written in terms of
// tape operations themselves, so running backward with create_graph=true
// yields gradients that are again differentiable; that single mechanism is
// what Hessian-vector products are built from.
//
// Invariants:
//   - buffers are written once, at construction, then shared freely;
//   - node ids are append-only, so an input's id is always smaller than its
//     consumer's id and tape.size() is also the high-water node count;
//   - backward only propagates adjoints into the subgraph that can reach a
//     requested leaf, and returns exact zeros for unreachable leaves.

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hyperaug {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

struct TensorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operand shapes incompatible with the operation; message names both.
struct ShapeError : TensorError {
  using TensorError::TensorError;
};

// Invalid tensor contents or arguments (NaN magnitude, label out of range...).
struct ValueError : TensorError {
  using TensorError::TensorError;
};

// Tape misuse: mixing tapes, non-scalar backward, tensor not on tape.
struct TapeError : TensorError {
  using TensorError::TensorError;
};

// Bytes on disk that do not parse; message includes the failing offset.
struct DataError : TensorError {
  using TensorError::TensorError;
};

template <typename Real>
class Tape;

template <typename Real>
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<Real> values) {
    if (shape_numel(shape) != int64_t(values.size()))
      throw ShapeError("constant: shape " + shape_str(shape) + " wants " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<const std::vector<Real>>(std::move(values));
    return t;
  }

  static Tensor scalar(Real v) { return constant({1}, {v}); }

  static Tensor zeros(const Shape& shape) {
    return constant(shape, std::vector<Real>(size_t(shape_numel(shape)), Real(0)));
  }

  static Tensor full(const Shape& shape, Real v) {
    return constant(shape, std::vector<Real>(size_t(shape_numel(shape)), v));
  }

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int64_t numel() const { return data_ ? int64_t(data_->size()) : 0; }
  std::span<const Real> values() const { return {data_->data(), data_->size()}; }
  Real at(int64_t i) const { return (*data_)[size_t(i)]; }

  Real value() const {
    if (numel() != 1)
      throw ShapeError("value: tensor has shape " + shape_str(shape_) +
                       ", expected a single element");
    return (*data_)[0];
  }

  bool on_tape() const { return tape_ != nullptr; }
  Tape<Real>* tape() const { return tape_; }
  int64_t node() const { return node_; }

  // Same values, no tape link: gradients do not flow through the result.
  Tensor detached() const {
    Tensor t(*this);
    t.tape_ = nullptr;
    t.node_ = -1;
    return t;
  }

 private:
  friend class Tape<Real>;
  std::shared_ptr<const std::vector<Real>> data_;
  Shape shape_;
  Tape<Real>* tape_ = nullptr;
  int64_t node_ = -1;
};

// Declared here, defined with the other elementwise ops; Tape::backward needs
// it to accumulate adjoint contributions.
template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b);

// A backward rule maps the node's output adjoint to per-input adjoint
// contributions. needs[k] tells the rule whether input k's gradient will be
// consumed; rules may skip dead branches and leave those entries undefined.
template <typename Real>
using BackwardFn = std::function<std::vector<Tensor<Real>>(
    const Tensor<Real>& grad_out, std::span<const bool> needs)>;

template <typename Real>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a differentiable leaf holding v's values.
  Tensor<Real> watch(const Tensor<Real>& v) {
    Tensor<Real> leaf = v.detached();
    leaf.tape_ = this;
    leaf.node_ = int64_t(nodes_.size());
    nodes_.push_back(NodeRec{"leaf", {}, nullptr});
    return leaf;
  }

  // Records one operation. Inputs may be constants (stored as id -1).
  Tensor<Real> emplace(const char* op, Shape shape, std::vector<Real> values,
                       std::span<const Tensor<Real>> inputs,
                       BackwardFn<Real> backward) {
    Tensor<Real> out = Tensor<Real>::constant(std::move(shape), std::move(values));
    out.tape_ = this;
    out.node_ = int64_t(nodes_.size());
    NodeRec rec;
    rec.op = op;
    rec.inputs.reserve(inputs.size());
    for (const auto& t : inputs)
      rec.inputs.push_back(t.tape() == this ? t.node() : -1);
    rec.backward = std::move(backward);
    nodes_.push_back(std::move(rec));
    return out;
  }

  size_t size() const { return nodes_.size(); }
  bool recording() const { return suspend_ == 0; }

  // Suspends recording for its lifetime; ops then return plain constants.
  class NoRecordGuard {
   public:
    explicit NoRecordGuard(Tape& t) : t_(&t) { ++t_->suspend_; }
    ~NoRecordGuard() { --t_->suspend_; }
    NoRecordGuard(const NoRecordGuard&) = delete;
    NoRecordGuard& operator=(const NoRecordGuard&) = delete;

   private:
    Tape* t_;
  };

  // Gradient of a scalar output with respect to each tensor in wrt.
  // With create_graph the returned gradients are tape-linked and themselves
  // differentiable; without it they are constants and nothing is recorded.
  // Repeated calls on one tape are independent (adjoints are local).
  std::vector<Tensor<Real>> backward(const Tensor<Real>& output,
                                     std::span<const Tensor<Real>> wrt,
                                     bool create_graph = false) {
    if (output.numel() != 1)
      throw TapeError("backward: output must be scalar, got shape " +
                      shape_str(output.shape()));
    std::array<Tensor<Real>, 1> outs{output};
    std::array<Tensor<Real>, 1> seeds{Tensor<Real>::scalar(Real(1))};
    return backward_seeded(outs, seeds, wrt, create_graph);
  }

  // Vector-Jacobian product: gradient of sum_i <seeds[i], outputs[i]> with
  // respect to wrt. Equivalent to seeding each output's adjoint instead of
  // forming the dot product on the tape, so repeated products (e.g. the
  // terms of a Neumann series) leave the tape untouched. Off-tape outputs
  // contribute nothing and are skipped.
  std::vector<Tensor<Real>> backward_seeded(std::span<const Tensor<Real>> outputs,
                                            std::span<const Tensor<Real>> seeds,
                                            std::span<const Tensor<Real>> wrt,
                                            bool create_graph = false) {
    if (outputs.size() != seeds.size())
      throw TapeError("backward_seeded: " + std::to_string(outputs.size()) +
                      " outputs vs " + std::to_string(seeds.size()) + " seeds");
    int64_t root = -1;
    for (size_t i = 0; i < outputs.size(); ++i) {
      if (!outputs[i].on_tape()) continue;
      if (outputs[i].tape() != this)
        throw TapeError("backward: output is not on this tape");
      if (seeds[i].shape() != outputs[i].shape())
        throw ShapeError("backward: seed shape " + shape_str(seeds[i].shape()) +
                         " != output shape " + shape_str(outputs[i].shape()));
      root = std::max(root, outputs[i].node());
    }
    for (const auto& w : wrt)
      if (w.tape() != this)
        throw TapeError("backward: wrt tensor is not on this tape");
    if (root < 0) {
      std::vector<Tensor<Real>> out;
      out.reserve(wrt.size());
      for (const auto& w : wrt) out.push_back(Tensor<Real>::zeros(w.shape()));
      return out;
    }

    // reach[i]: node i's value depends on at least one wrt leaf.
    std::vector<char> reach(size_t(root) + 1, 0);
    for (const auto& w : wrt)
      if (w.node() <= root) reach[size_t(w.node())] = 1;
    for (int64_t id = 0; id <= root; ++id) {
      if (reach[size_t(id)]) continue;
      for (int64_t j : nodes_[size_t(id)].inputs) {
        if (j >= 0 && reach[size_t(j)]) {
          reach[size_t(id)] = 1;
          break;
        }
      }
    }

    std::optional<NoRecordGuard> guard;
    if (!create_graph) guard.emplace(*this);

    std::vector<Tensor<Real>> adj(size_t(root) + 1);
    for (size_t i = 0; i < outputs.size(); ++i) {
      if (!outputs[i].on_tape()) continue;
      Tensor<Real>& slot = adj[size_t(outputs[i].node())];
      slot = slot.defined() ? hyperaug::add(slot, seeds[i]) : seeds[i];
    }

    for (int64_t id = root; id >= 0; --id) {
      if (!reach[size_t(id)] || !adj[size_t(id)].defined()) continue;
      const NodeRec& rec = nodes_[size_t(id)];
      if (!rec.backward) continue;  // leaf
      std::unique_ptr<bool[]> needs(new bool[rec.inputs.size()]());
      bool any = false;
      for (size_t k = 0; k < rec.inputs.size(); ++k) {
        int64_t j = rec.inputs[k];
        if (j >= 0 && reach[size_t(j)]) {
          needs[k] = true;
          any = true;
        }
      }
      if (!any) continue;
      std::vector<Tensor<Real>> grads = rec.backward(
          adj[size_t(id)],
          std::span<const bool>(needs.get(), rec.inputs.size()));
      if (grads.size() != rec.inputs.size())
        throw TapeError(std::string("backward rule for ") + rec.op +
                        " returned wrong arity");
      for (size_t k = 0; k < grads.size(); ++k) {
        int64_t j = rec.inputs[k];
        if (j < 0 || !needs[k] || !grads[k].defined()) continue;
        Tensor<Real>& slot = adj[size_t(j)];
        slot = slot.defined() ? hyperaug::add(slot, grads[k]) : grads[k];
      }
    }

    std::vector<Tensor<Real>> out;
    out.reserve(wrt.size());
    for (const auto& w : wrt) {
      if (w.node() <= root && adj[size_t(w.node())].defined())
        out.push_back(adj[size_t(w.node())]);
      else
        out.push_back(Tensor<Real>::zeros(w.shape()));
    }
    return out;
  }

 private:
  struct NodeRec {
    const char* op;
    std::vector<int64_t> inputs;
    BackwardFn<Real> backward;
  };
  // deque: appends during a create_graph backward must not move
  // the NodeRec whose rule is executing.
  std::deque<NodeRec> nodes_;
  int suspend_ = 0;
};

namespace detail {

// The single tape shared by tape-linked operands, or nullptr if all are
// constants. Mixing tapes is an error.
template <typename Real>
Tape<Real>* merge_tapes(std::initializer_list<const Tensor<Real>*> ts,
                        const char* op) {
  Tape<Real>* tape = nullptr;
  for (const Tensor<Real>* t : ts) {
    if (!t->on_tape()) continue;
    if (tape && tape != t->tape())
      throw TapeError(std::string(op) + ": operands live on different tapes");
    tape = t->tape();
  }
  return tape;
}

}  // namespace detail

}  // namespace hyperaug
