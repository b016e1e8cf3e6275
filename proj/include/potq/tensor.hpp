#pragma once

// Dense row-major tensors with tape-based reverse-mode autodiff.
//
// TensorT is a cheap handle onto shared storage. Ops (see ops.hpp) compute
// eagerly and, when a tape is active and an input requires gradients, push a
// node with a backward closure onto the tape. GraphT::backward replays the
// nodes in exact reverse recording order, which fixes the reduction order and
// makes gradients bit-reproducible for a given seed.
//
// The library is templated on the scalar type: float is the working
// precision, double instantiations exist for finite-difference gradchecks.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace potq {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {
inline uint64_t next_tensor_id() {
  static uint64_t counter = 0;  // single logical training thread
  return ++counter;
}
}  // namespace detail

template <class S>
class TensorT;

// Opt-in NaN/Inf guard; ops call check_finite on their outputs.
inline bool& finite_checks_enabled() {
  static bool enabled = false;
  return enabled;
}

template <class S>
struct StorageT {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // empty until backward first touches it
  bool requires_grad = false;
  uint64_t id = detail::next_tensor_id();
};

template <class S>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    TensorT t;
    t.st_ = std::make_shared<StorageT<S>>();
    t.st_->data.assign(size_t(numel_of(shape)), S(0));
    t.st_->shape = std::move(shape);
    t.st_->requires_grad = requires_grad;
    return t;
  }

  static TensorT from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
    if (numel_of(shape) != int64_t(data.size()))
      throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match data length " +
                                  std::to_string(data.size()));
    TensorT t;
    t.st_ = std::make_shared<StorageT<S>>();
    t.st_->shape = std::move(shape);
    t.st_->data = std::move(data);
    t.st_->requires_grad = requires_grad;
    return t;
  }

  static TensorT scalar(S v) { return from_data({}, {v}); }

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return st_->shape; }
  int64_t ndim() const { return int64_t(st_->shape.size()); }
  int64_t dim(int64_t i) const { return st_->shape[size_t(i)]; }
  int64_t numel() const { return int64_t(st_->data.size()); }
  uint64_t id() const { return st_->id; }

  S* data() { return st_->data.data(); }
  const S* data() const { return st_->data.data(); }
  std::vector<S>& vec() { return st_->data; }
  const std::vector<S>& vec() const { return st_->data; }

  S item() const {
    if (numel() != 1) throw std::logic_error("item: tensor is not a scalar, shape " + shape_str(shape()));
    return st_->data[0];
  }

  bool requires_grad() const { return st_ && st_->requires_grad; }
  TensorT& set_requires_grad(bool b) {
    st_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return st_ && !st_->grad.empty(); }
  std::vector<S>& grad() {
    if (st_->grad.empty()) st_->grad.assign(st_->data.size(), S(0));
    return st_->grad;
  }
  const std::vector<S>& grad() const { return st_->grad; }
  void zero_grad() {
    if (!st_->grad.empty()) std::fill(st_->grad.begin(), st_->grad.end(), S(0));
  }

  // Value copy that does not participate in autodiff.
  TensorT detach() const {
    TensorT t;
    t.st_ = std::make_shared<StorageT<S>>();
    t.st_->shape = st_->shape;
    t.st_->data = st_->data;
    t.st_->requires_grad = false;
    return t;
  }

  std::shared_ptr<StorageT<S>> storage() const { return st_; }

 private:
  std::shared_ptr<StorageT<S>> st_;
};

template <class S>
void check_finite(const TensorT<S>& t, const char* op) {
  if (!finite_checks_enabled()) return;
  for (const S v : t.vec())
    if (!std::isfinite(double(v))) throw std::runtime_error(std::string(op) + ": produced a non-finite value");
}

// Tape of recorded ops. Nodes are appended in forward order; backward walks
// them strictly in reverse, so every node's inputs were recorded before it.
template <class S>
class GraphT {
 public:
  struct Node {
    const char* op;
    std::vector<uint64_t> inputs;
    uint64_t output;
    std::function<void()> backward;
  };

  void record(const char* op, std::vector<uint64_t> inputs, uint64_t output, std::function<void()> backward) {
    nodes_.push_back(Node{op, std::move(inputs), output, std::move(backward)});
  }

  size_t node_count() const { return nodes_.size(); }
  const Node& node(size_t i) const { return nodes_[i]; }
  bool consumed() const { return consumed_; }

  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

  void backward(const TensorT<S>& loss) {
    if (loss.numel() != 1) throw std::logic_error("backward: root must be a scalar, got " + shape_str(loss.shape()));
    if (consumed_) throw std::logic_error("backward: tape already consumed; reset() before reuse");
    consumed_ = true;
    auto st = loss.storage();
    st->grad.assign(1, S(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
      if (it->backward) it->backward();
  }

 private:
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

template <class S>
inline GraphT<S>*& active_graph() {
  thread_local GraphT<S>* g = nullptr;
  return g;
}

template <class S>
class TapeScopeT {
 public:
  explicit TapeScopeT(GraphT<S>& g) : prev_(active_graph<S>()) { active_graph<S>() = &g; }
  ~TapeScopeT() { active_graph<S>() = prev_; }
  TapeScopeT(const TapeScopeT&) = delete;
  TapeScopeT& operator=(const TapeScopeT&) = delete;

 private:
  GraphT<S>* prev_;
};

using Tensor = TensorT<float>;
using Graph = GraphT<float>;
using TapeScope = TapeScopeT<float>;

namespace detail {

template <class S>
bool should_record(std::initializer_list<const TensorT<S>*> inputs) {
  if (active_graph<S>() == nullptr) return false;
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

}  // namespace detail

}  // namespace potq
