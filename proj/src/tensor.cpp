#include "hmt/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <sstream>

#include "hmt/error.hpp"
#include "hmt/rng.hpp"

namespace hmt {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

std::atomic<NodeId> next_id{1};
thread_local Tape* current_tape = nullptr;

using NodePtr = std::shared_ptr<detail::Node>;

std::vector<double>& grad_of(detail::Node& n) {
  if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0);
  return n.grad;
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (current_tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->tracked()) return true;
  }
  return false;
}

// Attaches a backward closure when recording. The closure receives the output
// node (whose grad is populated) and must accumulate into input grads.
template <typename Backward>
Tensor finish(Primitive op, std::initializer_list<const Tensor*> inputs, Tensor out,
              Backward&& fn) {
  if (!should_record(inputs)) return out;
  const NodePtr& out_node = out.node();
  out_node->tracked = true;
  TapeEntry entry;
  entry.op = op;
  for (const Tensor* t : inputs) entry.inputs.push_back(t->node());
  entry.output = out_node;
  detail::Node* raw = out_node.get();
  entry.backward = [raw, fn = std::forward<Backward>(fn)]() mutable { fn(*raw); };
  current_tape->record(std::move(entry));
  return out;
}

std::string shapes(const Tensor& a, const Tensor& b) {
  return shape_str(a.shape()) + " vs " + shape_str(b.shape());
}

void require_2d(const Tensor& a, const char* op) {
  HMT_CHECK(a.defined() && a.rank() == 2,
            std::string(op) + ": expected rank-2 tensor, got " +
                (a.defined() ? shape_str(a.shape()) : std::string("<undefined>")));
}

enum class Broadcast { kSame, kRow, kScalar };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  HMT_CHECK(a.defined() && b.defined(), std::string(op) + ": undefined input");
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (b.numel() == 1 && b.rank() <= 1) return Broadcast::kScalar;
  if (b.rank() == 1 && a.rank() >= 1 && a.shape().back() == b.dim(0)) return Broadcast::kRow;
  throw ContractViolation(std::string(op) + ": shape mismatch " + shapes(a, b));
}

// Calls f(i, j) for output element i and its broadcast source j.
template <typename F>
inline void for_each_pair(Broadcast k, std::size_t n, std::size_t bn, F&& f) {
  switch (k) {
    case Broadcast::kSame:
      for (std::size_t i = 0; i < n; ++i) f(i, i);
      break;
    case Broadcast::kRow:
      for (std::size_t i = 0, j = 0; i < n; ++i) {
        f(i, j);
        if (++j == bn) j = 0;
      }
      break;
    case Broadcast::kScalar:
      for (std::size_t i = 0; i < n; ++i) f(i, 0);
      break;
  }
}

// Rows/columns of the last axis for row-wise primitives.
std::pair<std::size_t, std::size_t> row_view(const Tensor& a) {
  const std::size_t cols = a.rank() == 0 ? 1 : a.shape().back();
  return {cols == 0 ? 0 : a.numel() / cols, cols};
}

}  // namespace

// ---- shapes and tensor handles ------------------------------------------

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor make_output(Shape shape, std::vector<double> data) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->id = next_id.fetch_add(1, std::memory_order_relaxed);
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return make_output(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
  for (std::size_t e : shape) {
    if (e == 0) throw ContractViolation("tensor extents must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ContractViolation("data length " + std::to_string(data.size()) +
                            " does not match shape " + shape_str(shape));
  }
  return make_output(std::move(shape), std::move(data));
}

Tensor Tensor::scalar(double value) { return make_output({}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
  Tensor t = from_data(std::move(shape), std::move(data));
  t.node_->tracked = true;
  t.node_->leaf = true;
  return t;
}

NodeId Tensor::id() const {
  HMT_CHECK(defined(), "id of undefined tensor");
  return node_->id;
}

const Shape& Tensor::shape() const {
  HMT_CHECK(defined(), "shape of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  HMT_CHECK(axis < rank(), "axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return shape()[axis];
}

std::span<const double> Tensor::data() const {
  HMT_CHECK(defined(), "data of undefined tensor");
  return node_->data;
}

bool Tensor::tracked() const { return defined() && node_->tracked; }

double Tensor::item() const {
  HMT_CHECK(numel() == 1, "item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  require_2d(*this, "at");
  HMT_CHECK(r < dim(0) && c < dim(1), "at(): index out of range");
  return node_->data[r * dim(1) + c];
}

Tensor Tensor::detach() const { return make_output(shape(), node_->data); }

std::span<double> Tensor::mutable_data() {
  HMT_CHECK(defined(), "mutable_data of undefined tensor");
  return node_->data;
}

// ---- tape -----------------------------------------------------------------

TapeScope::TapeScope(Tape& tape) : previous_(current_tape) { current_tape = &tape; }
TapeScope::~TapeScope() { current_tape = previous_; }
NoTapeScope::NoTapeScope() : previous_(current_tape) { current_tape = nullptr; }
NoTapeScope::~NoTapeScope() { current_tape = previous_; }
Tape* active_tape() { return current_tape; }

GradientMap backward(const Tensor& loss, Tape& tape) {
  HMT_CHECK(loss.defined() && loss.numel() == 1,
          "backward: loss must be scalar, got " +
              (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  GradientMap out;
  tape.visits_ = 0;
  if (!loss.tracked()) return out;
  if (loss.node()->leaf) {
    out.emplace(loss.id(), Tensor::from_data(loss.shape(), {1.0}));
    return out;
  }
  for (auto& e : tape.entries_) {
    e.output->grad.clear();
    for (auto& in : e.inputs) in->grad.clear();
  }
  grad_of(*loss.node())[0] = 1.0;
  for (auto it = tape.entries_.rbegin(); it != tape.entries_.rend(); ++it) {
    ++tape.visits_;
    if (it->output->grad.empty()) continue;
    it->backward();
  }
  for (auto& e : tape.entries_) {
    for (auto& in : e.inputs) {
      if (in->leaf && !in->grad.empty() && !out.contains(in->id)) {
        out.emplace(in->id, make_output(in->shape, std::move(in->grad)));
      }
      in->grad.clear();
      in->grad.shrink_to_fit();
    }
    e.output->grad.clear();
    e.output->grad.shrink_to_fit();
  }
  return out;
}

std::string_view primitive_name(Primitive op) {
  switch (op) {
    case Primitive::kMatmul: return "matmul";
    case Primitive::kAdd: return "add";
    case Primitive::kMul: return "mul";
    case Primitive::kConcat: return "concat";
    case Primitive::kReshape: return "reshape";
    case Primitive::kEmbeddingGather: return "embedding-gather";
    case Primitive::kSoftmax: return "softmax";
    case Primitive::kLogSoftmax: return "log-softmax";
    case Primitive::kLayerNorm: return "layer-norm";
    case Primitive::kRelu: return "relu";
    case Primitive::kGelu: return "gelu";
    case Primitive::kDropout: return "dropout-mask-apply";
    case Primitive::kReduceSum: return "reduce-sum";
    case Primitive::kReduceMean: return "reduce-mean";
    case Primitive::kSub: return "sub";
    case Primitive::kScale: return "scale";
    case Primitive::kMatmulNT: return "matmul-nt";
    case Primitive::kTranspose: return "transpose";
    case Primitive::kSliceRows: return "slice-rows";
    case Primitive::kSliceCols: return "slice-cols";
    case Primitive::kSpaceToDepth: return "space-to-depth";
    case Primitive::kDepthToSpace: return "depth-to-space";
  }
  return "?";
}

Primitive primitive_from_name(std::string_view name) {
  for (int i = 0; i <= static_cast<int>(Primitive::kDepthToSpace); ++i) {
    const auto op = static_cast<Primitive>(i);
    if (primitive_name(op) == name) return op;
  }
  throw ConfigError("unknown primitive '" + std::string(name) + "'");
}

// ---- linear algebra -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  HMT_CHECK(a.dim(1) == b.dim(0), "matmul: shape mismatch " + shapes(a, b));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  MMap(out.data(), m, n).noalias() = CMap(a.data().data(), m, k) * CMap(b.data().data(), k, n);
  auto an = a.node(), bn = b.node();
  return finish(Primitive::kMatmul, {&a, &b}, make_output({m, n}, std::move(out)),
                [an, bn, m, k, n](detail::Node& o) {
                  CMap g(o.grad.data(), m, n);
                  if (an->tracked) {
                    MMap(grad_of(*an).data(), m, k).noalias() += g * CMap(bn->data.data(), k, n).transpose();
                  }
                  if (bn->tracked) {
                    MMap(grad_of(*bn).data(), k, n).noalias() += CMap(an->data.data(), m, k).transpose() * g;
                  }
                });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul_nt");
  require_2d(b, "matmul_nt");
  HMT_CHECK(a.dim(1) == b.dim(1), "matmul_nt: shape mismatch " + shapes(a, b));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<double> out(m * n);
  MMap(out.data(), m, n).noalias() =
      CMap(a.data().data(), m, k) * CMap(b.data().data(), n, k).transpose();
  auto an = a.node(), bn = b.node();
  return finish(Primitive::kMatmulNT, {&a, &b}, make_output({m, n}, std::move(out)),
                [an, bn, m, k, n](detail::Node& o) {
                  CMap g(o.grad.data(), m, n);
                  if (an->tracked) {
                    MMap(grad_of(*an).data(), m, k).noalias() += g * CMap(bn->data.data(), n, k);
                  }
                  if (bn->tracked) {
                    MMap(grad_of(*bn).data(), n, k).noalias() += g.transpose() * CMap(an->data.data(), m, k);
                  }
                });
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  MMap(out.data(), n, m) = CMap(a.data().data(), m, n).transpose();
  auto an = a.node();
  return finish(Primitive::kTranspose, {&a}, make_output({n, m}, std::move(out)),
                [an, m, n](detail::Node& o) {
                  MMap(grad_of(*an).data(), m, n) += CMap(o.grad.data(), n, m).transpose();
                });
}

// ---- elementwise --------------------------------------------------------------

namespace {

Tensor binary(Primitive op, const Tensor& a, const Tensor& b, const char* name) {
  const Broadcast kind = broadcast_kind(a, b, name);
  const auto av = a.data();
  const auto bv = b.data();
  const std::size_t n = av.size(), bn_ = bv.size();
  std::vector<double> out(n);
  double* o = out.data();
  const double* x = av.data();
  const double* y = bv.data();
  switch (op) {
    case Primitive::kAdd:
      for_each_pair(kind, n, bn_, [&](std::size_t i, std::size_t j) { o[i] = x[i] + y[j]; });
      break;
    case Primitive::kSub:
      for_each_pair(kind, n, bn_, [&](std::size_t i, std::size_t j) { o[i] = x[i] - y[j]; });
      break;
    default:
      for_each_pair(kind, n, bn_, [&](std::size_t i, std::size_t j) { o[i] = x[i] * y[j]; });
      break;
  }
  auto an = a.node(), bnode = b.node();
  return finish(op, {&a, &b}, make_output(a.shape(), std::move(out)),
                [op, kind, an, bnode, n, bn_](detail::Node& o) {
                  const auto& g = o.grad;
                  const bool is_mul = op == Primitive::kMul || op == Primitive::kDropout;
                  if (an->tracked) {
                    auto& ga = grad_of(*an);
                    if (is_mul) {
                      const auto& bd = bnode->data;
                      for_each_pair(kind, n, bn_, [&](std::size_t i, std::size_t j) { ga[i] += g[i] * bd[j]; });
                    } else {
                      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                    }
                  }
                  if (bnode->tracked) {
                    auto& gb = grad_of(*bnode);
                    const double sign = op == Primitive::kSub ? -1.0 : 1.0;
                    if (is_mul) {
                      const auto& ad = an->data;
                      for_each_pair(kind, n, bn_, [&](std::size_t i, std::size_t j) { gb[j] += g[i] * ad[i]; });
                    } else {
                      for_each_pair(kind, n, bn_, [&](std::size_t i, std::size_t j) { gb[j] += sign * g[i]; });
                    }
                  }
                });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(Primitive::kAdd, a, b, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(Primitive::kSub, a, b, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(Primitive::kMul, a, b, "mul"); }

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= factor;
  auto an = a.node();
  return finish(Primitive::kScale, {&a}, make_output(a.shape(), std::move(out)),
                [an, factor](detail::Node& o) {
                  auto& ga = grad_of(*an);
                  for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += factor * o.grad[i];
                });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  auto an = a.node();
  return finish(Primitive::kRelu, {&a}, make_output(a.shape(), std::move(out)),
                [an](detail::Node& o) {
                  auto& ga = grad_of(*an);
                  for (std::size_t i = 0; i < ga.size(); ++i) {
                    if (an->data[i] > 0.0) ga[i] += o.grad[i];
                  }
                });
}

Tensor gelu(const Tensor& a) {
  // tanh approximation
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double x = av[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x)));
  }
  auto an = a.node();
  return finish(Primitive::kGelu, {&a}, make_output(a.shape(), std::move(out)),
                [an](detail::Node& o) {
                  auto& ga = grad_of(*an);
                  for (std::size_t i = 0; i < ga.size(); ++i) {
                    const double x = an->data[i];
                    const double u = c * (x + k * x * x * x);
                    const double t = std::tanh(u);
                    const double du = c * (1.0 + 3.0 * k * x * x);
                    ga[i] += o.grad[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                  }
                });
}

Tensor dropout(const Tensor& x, const Tensor& mask) {
  HMT_CHECK(mask.defined() && mask.shape() == x.shape(),
          "dropout: mask shape mismatch " + shapes(x, mask));
  HMT_CHECK(!mask.tracked(), "dropout: mask must be untracked");
  return binary(Primitive::kDropout, x, mask, "dropout");
}

Tensor dropout_mask(const Shape& shape, double p, Rng& rng) {
  HMT_CHECK(p >= 0.0 && p < 1.0, "dropout probability must lie in [0, 1)");
  const std::size_t n = shape_numel(shape);
  std::vector<double> m(n, 1.0);
  if (p > 0.0) {
    const double keep = 1.0 / (1.0 - p);
    for (double& v : m) v = rng.uniform() < p ? 0.0 : keep;
  }
  return make_output(shape, std::move(m));
}

// ---- reductions ---------------------------------------------------------------

Tensor reduce_sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto an = a.node();
  return finish(Primitive::kReduceSum, {&a}, make_output({}, {s}), [an](detail::Node& o) {
    auto& ga = grad_of(*an);
    for (double& g : ga) g += o.grad[0];
  });
}

Tensor reduce_mean(const Tensor& a) {
  const double n = static_cast<double>(a.numel());
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto an = a.node();
  return finish(Primitive::kReduceMean, {&a}, make_output({}, {s / n}),
                [an, n](detail::Node& o) {
                  auto& ga = grad_of(*an);
                  const double g = o.grad[0] / n;
                  for (double& x : ga) x += g;
                });
}

// ---- structural ---------------------------------------------------------------

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  HMT_CHECK(!parts.empty(), "concat: no inputs");
  const Tensor& first = parts.front();
  HMT_CHECK(first.defined() && first.rank() >= 1, "concat: inputs must have rank >= 1");
  std::vector<const Tensor*> ptrs;
  bool record = false;
  for (const Tensor& p : parts) {
    ptrs.push_back(&p);
    record = record || p.tracked();
  }
  Shape out_shape = first.shape();
  std::vector<double> out;
  std::vector<std::size_t> offsets;
  if (axis == 0) {
    out_shape[0] = 0;
    for (const Tensor& p : parts) {
      HMT_CHECK(p.rank() == first.rank() &&
                  std::equal(p.shape().begin() + 1, p.shape().end(), first.shape().begin() + 1),
              "concat: shape mismatch " + shapes(first, p));
      offsets.push_back(out.size());
      out.insert(out.end(), p.data().begin(), p.data().end());
      out_shape[0] += p.dim(0);
    }
  } else {
    HMT_CHECK(axis == 1, "concat: axis must be 0 or 1");
    const std::size_t rows = first.dim(0);
    std::size_t cols = 0;
    for (const Tensor& p : parts) {
      HMT_CHECK(p.rank() == 2 && p.dim(0) == rows, "concat: shape mismatch " + shapes(first, p));
      offsets.push_back(cols);
      cols += p.dim(1);
    }
    out.resize(rows * cols);
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      const auto pv = parts[pi].data();
      const std::size_t pc = parts[pi].dim(1);
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(pv.begin() + r * pc, pc, out.begin() + r * cols + offsets[pi]);
      }
    }
    out_shape = {rows, cols};
  }
  Tensor result = make_output(std::move(out_shape), std::move(out));
  if (current_tape == nullptr || !record) return result;
  std::vector<NodePtr> nodes;
  for (const Tensor& p : parts) nodes.push_back(p.node());
  const auto& on = result.node();
  on->tracked = true;
  TapeEntry entry{Primitive::kConcat, nodes, on, {}};
  detail::Node* raw = on.get();
  const std::size_t total_cols = axis == 1 ? raw->shape[1] : 0;
  entry.backward = [raw, nodes, offsets, axis, total_cols]() {
    for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
      auto& n = *nodes[pi];
      if (!n.tracked) continue;
      auto& g = grad_of(n);
      if (axis == 0) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += raw->grad[offsets[pi] + i];
      } else {
        const std::size_t rows = n.shape[0], pc = n.shape[1];
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < pc; ++c) g[r * pc + c] += raw->grad[r * total_cols + offsets[pi] + c];
        }
      }
    }
  };
  current_tape->record(std::move(entry));
  return result;
}

Tensor reshape(const Tensor& a, Shape shape) {
  HMT_CHECK(shape_numel(shape) == a.numel(),
          "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  auto an = a.node();
  return finish(Primitive::kReshape, {&a},
                make_output(std::move(shape), std::vector<double>(a.data().begin(), a.data().end())),
                [an](detail::Node& o) {
                  auto& ga = grad_of(*an);
                  for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i];
                });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  HMT_CHECK(a.defined() && a.rank() >= 1, "slice_rows: rank >= 1 required");
  HMT_CHECK(begin < end && end <= a.dim(0), "slice_rows: range [" + std::to_string(begin) + ", " +
                                              std::to_string(end) + ") out of " + shape_str(a.shape()));
  const std::size_t stride = a.numel() / a.dim(0);
  Shape s = a.shape();
  s[0] = end - begin;
  std::vector<double> out(a.data().begin() + begin * stride, a.data().begin() + end * stride);
  auto an = a.node();
  return finish(Primitive::kSliceRows, {&a}, make_output(std::move(s), std::move(out)),
                [an, begin, stride](detail::Node& o) {
                  auto& ga = grad_of(*an);
                  for (std::size_t i = 0; i < o.grad.size(); ++i) ga[begin * stride + i] += o.grad[i];
                });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_2d(a, "slice_cols");
  HMT_CHECK(begin < end && end <= a.dim(1), "slice_cols: range out of bounds for " + shape_str(a.shape()));
  const std::size_t rows = a.dim(0), cols = a.dim(1), w = end - begin;
  std::vector<double> out(rows * w);
  const auto av = a.data();
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(av.begin() + r * cols + begin, w, out.begin() + r * w);
  auto an = a.node();
  return finish(Primitive::kSliceCols, {&a}, make_output({rows, w}, std::move(out)),
                [an, rows, cols, begin, w](detail::Node& o) {
                  auto& ga = grad_of(*an);
                  for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < w; ++c) ga[r * cols + begin + c] += o.grad[r * w + c];
                  }
                });
}

Tensor embedding_gather(const Tensor& table, std::span<const int> ids) {
  require_2d(table, "embedding_gather");
  HMT_CHECK(!ids.empty(), "embedding_gather: empty id list");
  const std::size_t rows = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  const auto tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw ContractViolation("embedding_gather: id " + std::to_string(ids[i]) +
                              " outside table of " + std::to_string(rows) + " rows");
    }
    std::copy_n(tv.begin() + ids[i] * d, d, out.begin() + i * d);
  }
  auto tn = table.node();
  std::vector<int> idv(ids.begin(), ids.end());
  return finish(Primitive::kEmbeddingGather, {&table}, make_output({ids.size(), d}, std::move(out)),
                [tn, idv = std::move(idv), d](detail::Node& o) {
                  auto& g = grad_of(*tn);
                  for (std::size_t i = 0; i < idv.size(); ++i) {
                    for (std::size_t c = 0; c < d; ++c) g[idv[i] * d + c] += o.grad[i * d + c];
                  }
                });
}

// ---- normalizations -----------------------------------------------------------

Tensor softmax(const Tensor& a) {
  const auto [rows, cols] = row_view(a);
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * cols;
    double* y = out.data() + r * cols;
    const double m = *std::max_element(x, x + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += (y[c] = std::exp(x[c] - m));
    for (std::size_t c = 0; c < cols; ++c) y[c] /= s;
  }
  auto an = a.node();
  return finish(Primitive::kSoftmax, {&a}, make_output(a.shape(), std::move(out)),
                [an, rows, cols](detail::Node& o) {
                  auto& ga = grad_of(*an);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* y = o.data.data() + r * cols;
                    const double* g = o.grad.data() + r * cols;
                    double dot = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
                    for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += y[c] * (g[c] - dot);
                  }
                });
}

Tensor log_softmax(const Tensor& a) {
  const auto [rows, cols] = row_view(a);
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * cols;
    double* y = out.data() + r * cols;
    const double m = *std::max_element(x, x + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(x[c] - m);
    const double lse = m + std::log(s);
    for (std::size_t c = 0; c < cols; ++c) y[c] = x[c] - lse;
  }
  auto an = a.node();
  return finish(Primitive::kLogSoftmax, {&a}, make_output(a.shape(), std::move(out)),
                [an, rows, cols](detail::Node& o) {
                  auto& ga = grad_of(*an);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* y = o.data.data() + r * cols;
                    const double* g = o.grad.data() + r * cols;
                    double gs = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) gs += g[c];
                    for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += g[c] - std::exp(y[c]) * gs;
                  }
                });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const auto [rows, cols] = row_view(x);
  HMT_CHECK(gamma.defined() && beta.defined() && gamma.numel() == cols && beta.numel() == cols,
          "layer_norm: gain/bias must have " + std::to_string(cols) + " elements");
  const auto xv = x.data(), gv = gamma.data(), bv = beta.data();
  std::vector<double> out(xv.size()), xhat(xv.size()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(cols);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (xr[c] - mu) * rstd[r];
      xhat[r * cols + c] = h;
      out[r * cols + c] = h * gv[c] + bv[c];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return finish(Primitive::kLayerNorm, {&x, &gamma, &beta}, make_output(x.shape(), std::move(out)),
                [xn, gn, bn, rows, cols, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node& o) {
                  const double n = static_cast<double>(cols);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* g = o.grad.data() + r * cols;
                    const double* h = xhat.data() + r * cols;
                    if (gn->tracked) {
                      auto& gg = grad_of(*gn);
                      for (std::size_t c = 0; c < cols; ++c) gg[c] += g[c] * h[c];
                    }
                    if (bn->tracked) {
                      auto& gb = grad_of(*bn);
                      for (std::size_t c = 0; c < cols; ++c) gb[c] += g[c];
                    }
                    if (xn->tracked) {
                      auto& gx = grad_of(*xn);
                      double s1 = 0.0, s2 = 0.0;
                      for (std::size_t c = 0; c < cols; ++c) {
                        const double dh = g[c] * gn->data[c];
                        s1 += dh;
                        s2 += dh * h[c];
                      }
                      for (std::size_t c = 0; c < cols; ++c) {
                        const double dh = g[c] * gn->data[c];
                        gx[r * cols + c] += rstd[r] / n * (n * dh - s1 - h[c] * s2);
                      }
                    }
                  }
                });
}

// ---- image layout -------------------------------------------------------------

namespace {

// Maps output index -> input index for space_to_depth on [B, H, W, C].
std::vector<std::size_t> s2d_index(const Shape& in, std::size_t b) {
  const std::size_t B = in[0], H = in[1], W = in[2], C = in[3];
  const std::size_t h = H / b, w = W / b, oc = b * b * C;
  std::vector<std::size_t> idx(B * h * w * oc);
  std::size_t o = 0;
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t dy = 0; dy < b; ++dy)
          for (std::size_t dx = 0; dx < b; ++dx)
            for (std::size_t c = 0; c < C; ++c)
              idx[o++] = ((n * H + y * b + dy) * W + x * b + dx) * C + c;
  return idx;
}

}  // namespace

Tensor space_to_depth(const Tensor& x, std::size_t block) {
  HMT_CHECK(x.defined() && x.rank() == 4, "space_to_depth: expected [B, H, W, C]");
  HMT_CHECK(block >= 1 && x.dim(1) % block == 0 && x.dim(2) % block == 0,
          "space_to_depth: extents of " + shape_str(x.shape()) + " not divisible by " +
              std::to_string(block));
  auto idx = s2d_index(x.shape(), block);
  const auto xv = x.data();
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = xv[idx[i]];
  Shape s{x.dim(0), x.dim(1) / block, x.dim(2) / block, block * block * x.dim(3)};
  auto xn = x.node();
  return finish(Primitive::kSpaceToDepth, {&x}, make_output(std::move(s), std::move(out)),
                [xn, idx = std::move(idx)](detail::Node& o) {
                  auto& g = grad_of(*xn);
                  for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += o.grad[i];
                });
}

Tensor depth_to_space(const Tensor& x, std::size_t block) {
  HMT_CHECK(x.defined() && x.rank() == 4, "depth_to_space: expected [B, h, w, C]");
  HMT_CHECK(block >= 1 && x.dim(3) % (block * block) == 0,
          "depth_to_space: channels of " + shape_str(x.shape()) + " not divisible by block^2");
  Shape s{x.dim(0), x.dim(1) * block, x.dim(2) * block, x.dim(3) / (block * block)};
  // Inverse permutation of space_to_depth on the output shape.
  auto idx = s2d_index(s, block);
  const auto xv = x.data();
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[idx[i]] = xv[i];
  auto xn = x.node();
  return finish(Primitive::kDepthToSpace, {&x}, make_output(std::move(s), std::move(out)),
                [xn, idx = std::move(idx)](detail::Node& o) {
                  auto& g = grad_of(*xn);
                  for (std::size_t i = 0; i < idx.size(); ++i) g[i] += o.grad[idx[i]];
                });
}

// ---- dispatch -----------------------------------------------------------------

Tensor apply_primitive(Primitive op, std::span<const Tensor> in, const PrimitiveAttrs& attrs) {
  auto arity = [&](std::size_t n) {
    if (in.size() != n) {
      throw ContractViolation(std::string(primitive_name(op)) + " expects " + std::to_string(n) +
                              " inputs, got " + std::to_string(in.size()));
    }
  };
  switch (op) {
    case Primitive::kMatmul: arity(2); return matmul(in[0], in[1]);
    case Primitive::kAdd: arity(2); return add(in[0], in[1]);
    case Primitive::kMul: arity(2); return mul(in[0], in[1]);
    case Primitive::kConcat: return concat(in, attrs.axis);
    case Primitive::kReshape: arity(1); return reshape(in[0], attrs.shape);
    case Primitive::kEmbeddingGather: {
      arity(2);
      std::vector<int> ids;
      for (double v : in[1].data()) ids.push_back(static_cast<int>(v));
      return embedding_gather(in[0], ids);
    }
    case Primitive::kSoftmax: arity(1); return softmax(in[0]);
    case Primitive::kLogSoftmax: arity(1); return log_softmax(in[0]);
    case Primitive::kLayerNorm: arity(3); return layer_norm(in[0], in[1], in[2], attrs.eps);
    case Primitive::kRelu: arity(1); return relu(in[0]);
    case Primitive::kGelu: arity(1); return gelu(in[0]);
    case Primitive::kDropout: arity(2); return dropout(in[0], in[1]);
    case Primitive::kReduceSum: arity(1); return reduce_sum(in[0]);
    case Primitive::kReduceMean: arity(1); return reduce_mean(in[0]);
    case Primitive::kSub: arity(2); return sub(in[0], in[1]);
    case Primitive::kMatmulNT: arity(2); return matmul_nt(in[0], in[1]);
    case Primitive::kTranspose: arity(1); return transpose(in[0]);
    default:
      throw ConfigError("primitive '" + std::string(primitive_name(op)) +
                        "' needs typed attributes; call it directly");
  }
}

}  // namespace hmt
