#pragma once

#include <algorithm>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "reff/error.hpp"

namespace reff {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

template <std::floating_point T>
class Tape;

/// Dense row-major array. Copies share storage; a tensor optionally refers to
/// a node on a Tape, in which case operations on it are recorded.
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(numel(shape_), fill)) {}
  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
    if (values.size() != numel(shape_))
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " +
                       to_string(shape_));
    data_ = std::make_shared<std::vector<T>>(std::move(values));
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  bool defined() const noexcept { return data_ != nullptr; }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_ ? data_->size() : 0; }

  std::span<const T> data() const noexcept { return {data_->data(), data_->size()}; }
  // Mutable access is reserved for owners of untracked storage (initializers,
  // optimizers, loaders). Never mutate a tensor that a live tape has captured.
  std::span<T> mutable_data() noexcept { return {data_->data(), data_->size()}; }

  T operator[](std::size_t i) const { return (*data_)[i]; }
  T item() const {
    if (size() != 1) throw ShapeError("item: tensor of shape " + to_string(shape_) + " is not scalar");
    return (*data_)[0];
  }

  Tape<T>* tape() const noexcept { return tape_; }
  int node() const noexcept { return node_; }
  bool tracked() const noexcept { return tape_ != nullptr && node_ >= 0; }
  bool requires_grad() const noexcept;

  /// Same storage, no tape link.
  Tensor detach() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }
  /// Fresh storage, no tape link.
  Tensor clone() const {
    Tensor t(shape_);
    std::copy(data_->begin(), data_->end(), t.data_->begin());
    return t;
  }

  bool same_storage(const Tensor& o) const noexcept { return data_ == o.data_; }

 private:
  friend class Tape<T>;
  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  Tape<T>* tape_ = nullptr;
  int node_ = -1;
};

enum class TapeMode { FirstOrder, HigherOrder };

/// Ordered record of primitive operations. Nodes are appended in execution
/// order so node ids are a topological order of the graph.
template <std::floating_point T>
class Tape {
 public:
  // Gradient of the op output -> gradients for each recorded input (undefined
  // tensor where no gradient flows).
  using BackwardFn = std::function<std::vector<Tensor<T>>(const Tensor<T>&)>;

  struct Node {
    std::string op;
    std::vector<int> inputs;
    Shape shape;
    BackwardFn backward;
    bool leaf = false;
  };

  explicit Tape(TapeMode mode = TapeMode::FirstOrder) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  TapeMode mode() const noexcept { return mode_; }
  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }

  /// Register `value` as a differentiable leaf. Storage is shared.
  Tensor<T> variable(const Tensor<T>& value) {
    if (!value.defined()) throw TapeError("variable: undefined tensor");
    Tensor<T> t = value.detach();
    t.tape_ = this;
    t.node_ = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{"leaf", {}, value.shape(), {}, true});
    return t;
  }

  /// Called by operations. Returns `out` linked to a new node when recording
  /// and at least one input is tracked on this tape; otherwise `out` as is.
  Tensor<T> record(std::string_view op, Tensor<T> out, std::initializer_list<const Tensor<T>*> inputs,
                   BackwardFn backward) {
    std::vector<int> ids;
    ids.reserve(inputs.size());
    bool any = false;
    for (const Tensor<T>* in : inputs) {
      if (in->tracked()) {
        if (in->tape() != this) throw TapeError(std::string(op) + ": inputs live on different tapes");
        any = true;
        ids.push_back(in->node());
      } else {
        ids.push_back(-1);
      }
    }
    if (!any || !recording_) return out;
    out.tape_ = this;
    out.node_ = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{std::string(op), std::move(ids), out.shape(), std::move(backward), false});
    return out;
  }

  /// Gradients of scalar `output` with respect to each tensor in `wrt`.
  /// With `create_graph` the gradient computation is itself recorded, so the
  /// returned tensors are tracked and can be differentiated again. Tensors in
  /// `wrt` that `output` does not depend on receive zeros.
  std::vector<Tensor<T>> grad(const Tensor<T>& output, std::span<const Tensor<T>> wrt,
                              bool create_graph) {
    if (output.size() != 1)
      throw TapeError("backward: output of shape " + to_string(output.shape()) + " is not scalar");
    if (!output.tracked() || output.tape() != this) throw TapeError("backward: output is not on this tape");
    for (const auto& w : wrt)
      if (!w.tracked() || w.tape() != this)
        throw TapeError("backward: differentiation target is not on this tape");
    if (create_graph && mode_ != TapeMode::HigherOrder)
      throw TapeError("backward: create_graph requires a HigherOrder tape");

    const int out_id = output.node();
    // Nodes on a path target -> output. Forward pass marks dependents of any target.
    std::vector<char> depends(static_cast<std::size_t>(out_id) + 1, 0);
    std::vector<char> target(static_cast<std::size_t>(out_id) + 1, 0);
    for (const auto& w : wrt)
      if (w.node() <= out_id) depends[static_cast<std::size_t>(w.node())] = target[static_cast<std::size_t>(w.node())] = 1;
    for (int i = 0; i <= out_id; ++i) {
      auto& d = depends[static_cast<std::size_t>(i)];
      if (d) continue;
      for (int in : nodes_[static_cast<std::size_t>(i)].inputs)
        if (in >= 0 && depends[static_cast<std::size_t>(in)]) {
          d = 1;
          break;
        }
    }

    std::vector<Tensor<T>> acc(static_cast<std::size_t>(out_id) + 1);
    {
      Tensor<T> seed(output.shape(), T(1));
      acc[static_cast<std::size_t>(out_id)] = seed;
    }

    RecordingGuard guard(*this, create_graph);
    for (int i = out_id; i >= 0; --i) {
      const auto ui = static_cast<std::size_t>(i);
      if (!depends[ui] || !acc[ui].defined()) continue;
      const Node& n = nodes_[ui];
      if (n.leaf) continue;
      // Targets that are intermediate results only propagate further if some
      // other target lies below them.
      const bool feeds = std::any_of(n.inputs.begin(), n.inputs.end(),
                                     [&](int in) { return in >= 0 && depends[static_cast<std::size_t>(in)]; });
      if (!feeds) continue;
      // `n` may be invalidated by node appends inside backward; copy what we need.
      std::vector<int> inputs = n.inputs;
      BackwardFn fn = n.backward;
      std::vector<Tensor<T>> gins = fn(acc[ui]);
      if (gins.size() != inputs.size())
        throw TapeError("backward: op '" + nodes_[ui].op + "' returned wrong gradient count");
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        const int in = inputs[k];
        if (in < 0 || !depends[static_cast<std::size_t>(in)] || !gins[k].defined()) continue;
        auto& slot = acc[static_cast<std::size_t>(in)];
        slot = slot.defined() ? accumulate(slot, gins[k]) : gins[k];
      }
      if (!create_graph && !target[ui]) acc[ui] = Tensor<T>();
    }

    std::vector<Tensor<T>> result;
    result.reserve(wrt.size());
    for (const auto& w : wrt) {
      const auto id = static_cast<std::size_t>(w.node());
      if (id < acc.size() && acc[id].defined())
        result.push_back(acc[id]);
      else
        result.push_back(Tensor<T>(w.shape()));
    }
    return result;
  }

  std::vector<Tensor<T>> grad(const Tensor<T>& output, std::span<const Tensor<T>> wrt) {
    return grad(output, wrt, mode_ == TapeMode::HigherOrder);
  }
  std::vector<Tensor<T>> grad(const Tensor<T>& output, std::initializer_list<Tensor<T>> wrt) {
    std::vector<Tensor<T>> v(wrt);
    return grad(output, std::span<const Tensor<T>>(v));
  }

  /// Gradient map keyed by node id for every leaf variable on the tape.
  std::unordered_map<int, Tensor<T>> backward(const Tensor<T>& output) {
    std::vector<Tensor<T>> leaves;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].leaf) {
        Tensor<T> t(nodes_[i].shape);
        t.tape_ = this;
        t.node_ = static_cast<int>(i);
        leaves.push_back(t);
      }
    auto g = grad(output, std::span<const Tensor<T>>(leaves));
    std::unordered_map<int, Tensor<T>> out;
    for (std::size_t i = 0; i < leaves.size(); ++i) out.emplace(leaves[i].node(), g[i]);
    return out;
  }

  /// Suspends recording for its lifetime; ops executed inside produce plain tensors.
  class RecordingGuard {
   public:
    RecordingGuard(Tape& t, bool enabled) : tape_(t), prev_(t.recording_) { t.recording_ = enabled; }
    ~RecordingGuard() { tape_.recording_ = prev_; }
    RecordingGuard(const RecordingGuard&) = delete;
    RecordingGuard& operator=(const RecordingGuard&) = delete;

   private:
    Tape& tape_;
    bool prev_;
  };

 private:
  Tensor<T> accumulate(const Tensor<T>& a, const Tensor<T>& b);

  TapeMode mode_;
  bool recording_ = true;
  std::vector<Node> nodes_;
};

template <std::floating_point T>
bool Tensor<T>::requires_grad() const noexcept {
  return tracked();
}

}  // namespace reff

#include "reff/ops.hpp"

namespace reff {

template <std::floating_point T>
Tensor<T> Tape<T>::accumulate(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}

}  // namespace reff
