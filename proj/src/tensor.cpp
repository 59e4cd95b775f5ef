#include "mismatch/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <functional>
#include <numeric>
#include <sstream>

#include "mismatch/errors.hpp"

namespace mismatch::ad {

namespace {

thread_local Tape* g_active_tape = nullptr;
std::atomic<std::uint64_t> g_next_tape_id{1};

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

static void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
  }
}

Tensor::Tensor(Shape shape, double fill) {
  check_shape(shape);
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->data.assign(ad::numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
  check_shape(shape);
  if (values.size() != ad::numel(shape)) {
    throw DimensionError("tensor of shape " + to_string(shape) + " needs " +
                         std::to_string(ad::numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t(std::move(shape), std::move(values));
  t.impl_->requires_grad = true;
  return t;
}

const detail::TensorImpl& Tensor::impl() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return *impl_;
}

detail::TensorImpl& Tensor::impl() {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + to_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return impl().data.size(); }

std::span<const double> Tensor::data() const { return impl().data; }

std::span<double> Tensor::mutable_data() {
  auto& i = impl();
  if (i.node) throw ContractError("cannot mutate a tensor recorded on a tape");
  return i.data;
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape()));
  return data()[0];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }

void Tensor::set_requires_grad(bool on) {
  auto& i = impl();
  if (i.node) throw ContractError("requires_grad can only be set on leaf tensors");
  i.requires_grad = on;
}

bool Tensor::has_grad() const { return !impl().grad.empty(); }

std::span<const double> Tensor::grad() const {
  const auto& i = impl();
  if (i.grad.empty()) throw ContractError("tensor has no gradient");
  return i.grad;
}

void Tensor::zero_grad() {
  auto& i = impl();
  i.grad.assign(i.data.size(), 0.0);
  i.grad_writer = 0;
}

std::optional<NodeRef> Tensor::tape_node() const { return impl().node; }

bool Tensor::tracks_grad() const {
  const auto& i = impl();
  return i.requires_grad || i.node.has_value();
}

Tensor Tensor::clone() const {
  const auto& i = impl();
  Tensor t(i.shape, i.data);
  t.impl_->requires_grad = i.requires_grad;
  return t;
}

Tensor record_op(std::string_view kind, std::vector<Tensor> inputs, Shape shape,
                 std::vector<double> values, BackwardFn backward) {
  Tensor out(std::move(shape), std::move(values));
  Tape* tape = Tape::active();
  if (tape == nullptr) return out;

  bool any = false;
  for (const auto& in : inputs) {
    const auto& impl = in.impl();
    if (impl.node && impl.node->tape_id != tape->id()) {
      throw ContractError("op '" + std::string(kind) +
                          "' received a tensor recorded on a different tape");
    }
    any = any || in.tracks_grad();
  }
  if (!any) return out;
  if (tape->consumed()) {
    throw ContractError("op '" + std::string(kind) + "' recorded on a tape after backward");
  }

  Tape::Node node;
  node.kind = std::string(kind);
  node.inputs.reserve(inputs.size());
  for (auto& in : inputs) node.inputs.push_back(in.handle());
  node.output = out.handle();
  node.backward = std::move(backward);
  out.impl_->node = NodeRef{tape->id(), tape->nodes_.size()};
  tape->nodes_.push_back(std::move(node));
  return out;
}

Tape::Tape() : id_(g_next_tape_id.fetch_add(1)), previous_(g_active_tape) {
  g_active_tape = this;
}

Tape::~Tape() {
  g_active_tape = previous_;
  // Intermediate tensors may outlive the tape; cut their links to it.
  for (auto& node : nodes_) node.output->node.reset();
}

Tape* Tape::active() noexcept { return g_active_tape; }

std::size_t Tape::count(std::string_view kind) const {
  return static_cast<std::size_t>(std::count_if(
      nodes_.begin(), nodes_.end(), [&](const Node& n) { return n.kind == kind; }));
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw ContractError("backward already ran on this tape");
  if (loss.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  const auto& ref = loss.impl().node;
  if (!ref || ref->tape_id != id_) throw ContractError("loss is not recorded on this tape");

  for (const auto& node : nodes_) {
    for (const auto& in : node.inputs) {
      if (in->requires_grad && !in->node && in->grad_writer != 0) {
        throw ContractError(
            "gradient accumulation across backward calls is not allowed; call zero_grad() first");
      }
    }
  }
  consumed_ = true;

  auto ensure_grad = [this](detail::TensorImpl& t) -> double* {
    if (t.grad.size() != t.data.size()) t.grad.assign(t.data.size(), 0.0);
    if (!t.node) t.grad_writer = id_;
    return t.grad.data();
  };

  // Leaves seen on this tape always end up with a (possibly zero) gradient.
  for (const auto& node : nodes_) {
    for (const auto& in : node.inputs) {
      if (in->requires_grad && !in->node) ensure_grad(*in);
    }
  }

  auto& root = *nodes_[ref->index].output;
  ensure_grad(root);
  root.grad[0] = 1.0;

  std::vector<double*> slots;
  for (std::size_t k = ref->index + 1; k-- > 0;) {
    auto& node = nodes_[k];
    if (node.output->grad.empty()) continue;
    slots.clear();
    for (const auto& in : node.inputs) {
      const bool wants = in->requires_grad || (in->node && in->node->tape_id == id_);
      slots.push_back(wants ? ensure_grad(*in) : nullptr);
    }
    node.backward.fn(node.output->grad, slots);
  }
}

}  // namespace mismatch::ad
