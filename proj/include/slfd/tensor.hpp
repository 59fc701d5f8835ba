#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "slfd/common.hpp"

namespace slfd {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::int64_t numel(const Shape& s);

// ---------------------------------------------------------------------------
// Tensor: dense row-major float64 array. A tensor either lives off-tape
// (constant) or is registered on the active tape, in which case node_id
// identifies its record there. Off-tape tensors are immutable by convention
// once shared; the optimizer mutates its own parameter buffers between tapes.
// ---------------------------------------------------------------------------

class Tape;

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    Tape* tape = nullptr;  // owning tape when registered
    int node_id = -1;      // index into tape->nodes, -1 if constant
};

class Tensor {
public:
    Tensor() = default;

    static Tensor from(std::vector<double> data, Shape shape);
    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::int64_t size() const { return static_cast<std::int64_t>(impl_->data.size()); }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    bool is_scalar() const { return impl_->data.size() == 1; }

    const std::vector<double>& data() const { return impl_->data; }
    std::vector<double>& mutable_data() { return impl_->data; }
    double item() const;
    double at(std::int64_t i) const { return impl_->data[static_cast<std::size_t>(i)]; }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    Tape* tape() const { return impl_ ? impl_->tape : nullptr; }
    int node_id() const { return impl_ ? impl_->node_id : -1; }

    // Copy of the values with no tape association.
    Tensor detach() const;

    TensorImpl* impl() const { return impl_.get(); }

private:
    friend class Tape;
    std::shared_ptr<TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Op kinds. The public set is what forward_op accepts; kinds below the
// internal marker exist so every backward rule is itself expressible as tape
// operations (which is what makes second-order derivatives fall out of a
// second backward walk).
// ---------------------------------------------------------------------------

enum class OpKind {
    // public surface
    Add,
    Sub,
    Mul,
    Matmul,
    Relu,
    Conv2d3x3,
    Avgpool2,
    Affine,
    SoftmaxLastdim,
    Log,
    Exp,
    Sum,
    Mean,
    Dot,
    L2Norm,
    LogsumexpLastdim,
    Broadcast,
    Reshape,
    Concat,
    // internal kinds, needed for backward closure and the generator
    Leaf,
    Reciprocal,
    Transpose2d,
    Conv2d1x1,
    ConvInputGrad,
    ConvWeightGrad,
    Upsample2,
    Slice,
    Tanh,
};

const char* op_name(OpKind k);
OpKind op_kind_from_name(std::string_view name);

struct OpAttrs {
    Shape target_shape;  // Reshape / Broadcast
    int axis = 0;        // Concat / Slice
    int start = 0;       // Slice
    int length = 0;      // Slice
    int ksize = 3;       // conv family
};

struct TapeNode {
    OpKind kind = OpKind::Leaf;
    OpAttrs attrs;
    std::vector<Tensor> inputs;
    Tensor output;
};

// ---------------------------------------------------------------------------
// Tape: ordered operation records in topological order. One tape per
// optimization step; leaves are registered with watch(). Recording is
// thread-local: ops record onto the active tape when any input is tracked.
// ---------------------------------------------------------------------------

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    ~Tape();

    // Registers t as a trainable leaf of this tape.
    void watch(Tensor& t);

    int record(OpKind kind, OpAttrs attrs, std::vector<Tensor> inputs, Tensor& out);

    const std::vector<TapeNode>& nodes() const { return nodes_; }
    const std::vector<int>& leaf_ids() const { return leaf_ids_; }

    // Recomputes every non-leaf node from its stored inputs. Returns true when
    // all outputs are reproduced bit-identically.
    bool replay_check() const;

    static Tape* active();

private:
    friend class TapeScope;
    std::vector<TapeNode> nodes_;
    std::vector<int> leaf_ids_;
};

// RAII activation of a tape on this thread.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

// Temporarily disables recording (used for backward passes that do not build
// a second-order graph).
class NoRecordGuard {
public:
    NoRecordGuard();
    ~NoRecordGuard();
    static bool recording_enabled();

private:
    bool previous_;
};

// ---------------------------------------------------------------------------
// Operations. Free functions over tensors; each records itself on the active
// tape when any input is tracked. Shape mismatches throw ShapeError naming
// the op and offending shapes.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
Tensor conv2d3x3(const Tensor& x, const Tensor& w);   // pad 1, same spatial size
Tensor conv2d1x1(const Tensor& x, const Tensor& w);
Tensor avgpool2(const Tensor& x);
Tensor upsample2(const Tensor& x);
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor softmax_lastdim(const Tensor& x);
Tensor logsumexp_lastdim(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor reciprocal(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor dot(const Tensor& a, const Tensor& b);
Tensor l2norm(const Tensor& x);
Tensor broadcast_to(const Tensor& x, Shape target);
Tensor reshape(const Tensor& x, Shape target);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int start, int length);
Tensor transpose2d(const Tensor& x);

// String-dispatch wrapper over the public op set.
Tensor forward_op(std::string_view kind, const std::vector<Tensor>& inputs,
                  const OpAttrs& attrs = {});

// ---------------------------------------------------------------------------
// Reverse-mode differentiation. grad() walks the tape from `loss` and returns
// d loss / d leaf for each requested leaf. With create_graph the backward
// computations are themselves recorded, so the results stay differentiable.
// ---------------------------------------------------------------------------

std::vector<Tensor> grad(const Tensor& loss, const std::vector<Tensor>& leaves,
                         bool create_graph = false);

// Second-order mixed derivative of a scalar built from create_graph gradients.
Tensor grad_of_grad(const Tensor& outer, const Tensor& leaf);

}  // namespace slfd
