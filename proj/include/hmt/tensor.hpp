#pragma once

// Reverse-mode differentiable tensors over 64-bit floats.
//
// A Tensor is an immutable, reference-counted value. Applying a primitive to
// a tracked tensor while a Tape is active records the application; backward()
// replays the tape once in reverse and returns gradients for tracked leaves.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace hmt {

class Rng;

using Shape = std::vector<std::size_t>;
using NodeId = std::uint64_t;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until backward touches the node
  NodeId id = 0;
  bool tracked = false;
  bool leaf = false;
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from_data(Shape shape, std::vector<double> data);
  static Tensor scalar(double value);
  // Tracked leaf; gradients are reported for it by backward().
  static Tensor parameter(Shape shape, std::vector<double> data);

  bool defined() const { return node_ != nullptr; }
  NodeId id() const;
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return data().size(); }
  std::span<const double> data() const;
  bool tracked() const;

  double item() const;
  double at(std::size_t r, std::size_t c) const;

  // Untracked copy; gradients never flow through it.
  Tensor detach() const;
  // Parameter storage, for optimizers and checkpoint loaders only.
  std::span<double> mutable_data();

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  friend Tensor make_output(Shape, std::vector<double>);
  std::shared_ptr<detail::Node> node_;
};

Tensor make_output(Shape shape, std::vector<double> data);

enum class Primitive {
  kMatmul,
  kAdd,
  kMul,
  kConcat,
  kReshape,
  kEmbeddingGather,
  kSoftmax,
  kLogSoftmax,
  kLayerNorm,
  kRelu,
  kGelu,
  kDropout,
  kReduceSum,
  kReduceMean,
  // Auxiliary primitives used by the model code.
  kSub,
  kScale,
  kMatmulNT,
  kTranspose,
  kSliceRows,
  kSliceCols,
  kSpaceToDepth,
  kDepthToSpace,
};

std::string_view primitive_name(Primitive op);
// Throws ConfigError on an unknown name.
Primitive primitive_from_name(std::string_view name);

struct TapeEntry {
  Primitive op;
  std::vector<std::shared_ptr<detail::Node>> inputs;
  std::shared_ptr<detail::Node> output;
  std::function<void()> backward;
};

class Tape {
 public:
  void record(TapeEntry entry) { entries_.push_back(std::move(entry)); }
  std::size_t size() const { return entries_.size(); }
  const TapeEntry& entry(std::size_t i) const { return entries_[i]; }
  void clear() { entries_.clear(); }
  // Entries visited by the most recent backward pass.
  std::size_t last_visits() const { return visits_; }

 private:
  friend std::unordered_map<NodeId, Tensor> backward(const Tensor&, Tape&);
  std::vector<TapeEntry> entries_;
  std::size_t visits_ = 0;
};

// Makes a tape the recording target for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording for the current thread (evaluation passes).
class NoTapeScope {
 public:
  NoTapeScope();
  ~NoTapeScope();
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

using GradientMap = std::unordered_map<NodeId, Tensor>;

// Gradients of a scalar loss with respect to every tracked leaf it reaches.
GradientMap backward(const Tensor& loss, Tape& tape);

// ---- primitives ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// a · bᵀ
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// Elementwise with broadcasting of b when b is a scalar or a row vector
// matching a's last extent.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor concat(std::span<const Tensor> parts, std::size_t axis = 0);
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor embedding_gather(const Tensor& table, std::span<const int> ids);
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
// mask holds 0 or 1/(1-p) per element.
Tensor dropout(const Tensor& x, const Tensor& mask);
Tensor dropout_mask(const Shape& shape, double p, Rng& rng);
Tensor reduce_sum(const Tensor& a);
Tensor reduce_mean(const Tensor& a);
// [B, H, W, C] -> [B, H/b, W/b, b*b*C] and back.
Tensor space_to_depth(const Tensor& x, std::size_t block);
Tensor depth_to_space(const Tensor& x, std::size_t block);

struct PrimitiveAttrs {
  Shape shape;            // reshape target
  std::size_t axis = 0;   // concat axis
  double eps = 1e-5;      // layer-norm epsilon
};

// Name-dispatched entry point over the core primitive set. Embedding ids are
// passed as the second input tensor holding integral values.
Tensor apply_primitive(Primitive op, std::span<const Tensor> inputs,
                       const PrimitiveAttrs& attrs = {});

}  // namespace hmt
