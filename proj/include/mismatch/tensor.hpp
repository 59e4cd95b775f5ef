#pragma once

// Dense tensors with a reverse-mode gradient tape.
//
// A Tensor is a shared handle onto a contiguous row-major buffer of doubles.
// Leaves created with `Tensor::parameter` (or `set_requires_grad(true)`)
// receive gradients; every op applied while a `Tape` is active on the current
// thread records a node whose backward closure pushes gradients to its
// inputs. Without an active tape ops only compute values.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mismatch::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct NodeRef {
  std::uint64_t tape_id = 0;
  std::size_t index = 0;
};

namespace detail {
struct TensorImpl;
}

class Tape;

/// Backward closure of a recorded node. `grad_in[i]` is null when input i
/// does not need a gradient, otherwise a buffer of input i's size to
/// accumulate into.
struct BackwardFn {
  std::function<void(std::span<const double> grad_out, std::span<double* const> grad_in)> fn;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor scalar(double value) { return Tensor(Shape{1}, value); }
  static Tensor parameter(Shape shape, std::vector<double> values);

  bool defined() const noexcept { return impl_ != nullptr; }

  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Writable view; only allowed on tensors that are not tape outputs.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);

  bool has_grad() const;
  /// Gradient buffer; throws ContractError when none has been populated.
  std::span<const double> grad() const;
  /// Resets the gradient to zeros and re-arms the tensor for a fresh backward.
  void zero_grad();

  std::optional<NodeRef> tape_node() const;
  /// True when gradients can flow through this tensor (leaf parameter or taped).
  bool tracks_grad() const;

  /// Deep copy of the values; keeps `requires_grad`, drops grad and tape link.
  Tensor clone() const;

  const detail::TensorImpl& impl() const;
  detail::TensorImpl& impl();
  const std::shared_ptr<detail::TensorImpl>& handle() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  friend Tensor record_op(std::string_view, std::vector<Tensor>, Shape, std::vector<double>,
                          BackwardFn);

  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::optional<NodeRef> node;
  // Tape that last wrote `grad` on a leaf; 0 once zero_grad() re-arms it.
  std::uint64_t grad_writer = 0;
};
}  // namespace detail

/// Builds a result tensor and, when a tape is active and some input tracks
/// gradients, records a node for it. All ops funnel through here.
Tensor record_op(std::string_view kind, std::vector<Tensor> inputs, Shape shape,
                 std::vector<double> values, BackwardFn backward);

/// Gradient tape. Constructing one makes it the active tape of the calling
/// thread until it is destroyed (tapes nest as a stack).
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() noexcept;

  /// Reverse pass from a scalar loss. May run once per tape; leaves that
  /// still hold gradients from another tape must be zero_grad()-ed first.
  void backward(const Tensor& loss);

  std::uint64_t id() const noexcept { return id_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  std::string_view kind(std::size_t index) const { return nodes_.at(index).kind; }
  std::size_t count(std::string_view kind) const;
  bool consumed() const noexcept { return consumed_; }

 private:
  friend Tensor record_op(std::string_view, std::vector<Tensor>, Shape, std::vector<double>,
                          BackwardFn);

  struct Node {
    std::string kind;
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::shared_ptr<detail::TensorImpl> output;
    BackwardFn backward;
  };

  std::uint64_t id_;
  std::vector<Node> nodes_;
  bool consumed_ = false;
  Tape* previous_;
};

}  // namespace mismatch::ad
