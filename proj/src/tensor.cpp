#include "slfd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>

namespace slfd {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

std::int64_t numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::from(std::vector<double> data, Shape shape) {
    if (static_cast<std::int64_t>(data.size()) != numel(shape)) {
        throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    }
    for (int d : shape) {
        if (d <= 0) throw ShapeError("tensor: nonpositive dimension in " + shape_str(shape));
    }
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    return t;
}

Tensor Tensor::zeros(Shape shape) {
    return from(std::vector<double>(static_cast<std::size_t>(numel(shape)), 0.0),
                std::move(shape));
}

Tensor Tensor::full(Shape shape, double value) {
    return from(std::vector<double>(static_cast<std::size_t>(numel(shape)), value),
                std::move(shape));
}

Tensor Tensor::scalar(double value) { return from({value}, Shape{}); }

double Tensor::item() const {
    if (impl_->data.size() != 1) {
        throw ShapeError("item: tensor of shape " + shape_str(impl_->shape) +
                         " is not a scalar");
    }
    return impl_->data[0];
}

Tensor Tensor::detach() const {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    return t;
}

// ---------------------------------------------------------------------------
// Tape machinery
// ---------------------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
thread_local bool g_recording = true;
}  // namespace

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoRecordGuard::NoRecordGuard() : previous_(g_recording) { g_recording = false; }
NoRecordGuard::~NoRecordGuard() { g_recording = previous_; }
bool NoRecordGuard::recording_enabled() { return g_recording; }

Tape::~Tape() {
    // Unregister surviving tensors so a later tape at the same address can
    // never be mistaken for this one.
    for (auto& node : nodes_) {
        for (auto& in : node.inputs) {
            if (in.impl() && in.impl()->tape == this) {
                in.impl()->tape = nullptr;
                in.impl()->node_id = -1;
                in.impl()->requires_grad = false;
            }
        }
        if (node.output.impl() && node.output.impl()->tape == this) {
            node.output.impl()->tape = nullptr;
            node.output.impl()->node_id = -1;
            node.output.impl()->requires_grad = false;
        }
    }
}

void Tape::watch(Tensor& t) {
    if (!t.defined()) throw TapeError("watch: undefined tensor");
    if (t.impl()->tape == this) return;
    if (t.impl()->tape != nullptr) {
        throw TapeError("watch: tensor already registered on another tape");
    }
    TapeNode node;
    node.kind = OpKind::Leaf;
    node.output = t;
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(std::move(node));
    leaf_ids_.push_back(id);
    t.impl()->tape = this;
    t.impl()->node_id = id;
    t.impl()->requires_grad = true;
}

int Tape::record(OpKind kind, OpAttrs attrs, std::vector<Tensor> inputs, Tensor& out) {
    TapeNode node;
    node.kind = kind;
    node.attrs = std::move(attrs);
    node.inputs = std::move(inputs);
    node.output = out;
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(std::move(node));
    out.impl()->tape = this;
    out.impl()->node_id = id;
    out.impl()->requires_grad = true;
    return id;
}

// ---------------------------------------------------------------------------
// Raw kernels
// ---------------------------------------------------------------------------

namespace {

void matmul_kernel(const double* a, const double* b, double* c, int m, int k, int n) {
    std::fill(c, c + static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        double* crow = c + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// y[n,co,i,j] = sum_{ci,di,dj} x[n,ci,i+di-p,j+dj-p] * w[co,ci,di,dj]
void conv_forward_kernel(const double* x, const double* w, double* y, int N, int Ci,
                         int H, int W, int Co, int k) {
    const int p = (k - 1) / 2;
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    std::fill(y, y + static_cast<std::size_t>(N) * Co * hw, 0.0);
    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Co; ++co) {
            double* yplane = y + (static_cast<std::size_t>(n) * Co + co) * hw;
            for (int ci = 0; ci < Ci; ++ci) {
                const double* xplane = x + (static_cast<std::size_t>(n) * Ci + ci) * hw;
                const double* wk = w + (static_cast<std::size_t>(co) * Ci + ci) * k * k;
                for (int di = 0; di < k; ++di) {
                    for (int dj = 0; dj < k; ++dj) {
                        const double wv = wk[di * k + dj];
                        if (wv == 0.0) continue;
                        const int i0 = std::max(0, p - di);
                        const int i1 = std::min(H, H + p - di);
                        for (int i = i0; i < i1; ++i) {
                            const int si = i + di - p;
                            const int j0 = std::max(0, p - dj);
                            const int j1 = std::min(W, W + p - dj);
                            const double* xr = xplane + static_cast<std::size_t>(si) * W;
                            double* yr = yplane + static_cast<std::size_t>(i) * W;
                            for (int j = j0; j < j1; ++j) yr[j] += wv * xr[j + dj - p];
                        }
                    }
                }
            }
        }
    }
}

// dx[n,ci,a,b] = sum_{co,di,dj} g[n,co,a-di+p,b-dj+p] * w[co,ci,di,dj]
void conv_input_grad_kernel(const double* g, const double* w, double* dx, int N,
                            int Ci, int H, int W, int Co, int k) {
    const int p = (k - 1) / 2;
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    std::fill(dx, dx + static_cast<std::size_t>(N) * Ci * hw, 0.0);
    for (int n = 0; n < N; ++n) {
        for (int ci = 0; ci < Ci; ++ci) {
            double* dxplane = dx + (static_cast<std::size_t>(n) * Ci + ci) * hw;
            for (int co = 0; co < Co; ++co) {
                const double* gplane = g + (static_cast<std::size_t>(n) * Co + co) * hw;
                const double* wk = w + (static_cast<std::size_t>(co) * Ci + ci) * k * k;
                for (int di = 0; di < k; ++di) {
                    for (int dj = 0; dj < k; ++dj) {
                        const double wv = wk[di * k + dj];
                        if (wv == 0.0) continue;
                        const int a0 = std::max(0, di - p);
                        const int a1 = std::min(H, H + di - p);
                        for (int a = a0; a < a1; ++a) {
                            const int gi = a - di + p;
                            const int b0 = std::max(0, dj - p);
                            const int b1 = std::min(W, W + dj - p);
                            const double* gr = gplane + static_cast<std::size_t>(gi) * W;
                            double* dr = dxplane + static_cast<std::size_t>(a) * W;
                            for (int b = b0; b < b1; ++b) dr[b] += wv * gr[b - dj + p];
                        }
                    }
                }
            }
        }
    }
}

// dw[co,ci,di,dj] = sum_{n,i,j} g[n,co,i,j] * x[n,ci,i+di-p,j+dj-p]
void conv_weight_grad_kernel(const double* x, const double* g, double* dw, int N,
                             int Ci, int H, int W, int Co, int k) {
    const int p = (k - 1) / 2;
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    std::fill(dw, dw + static_cast<std::size_t>(Co) * Ci * k * k, 0.0);
    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Co; ++co) {
            const double* gplane = g + (static_cast<std::size_t>(n) * Co + co) * hw;
            for (int ci = 0; ci < Ci; ++ci) {
                const double* xplane = x + (static_cast<std::size_t>(n) * Ci + ci) * hw;
                double* wk = dw + (static_cast<std::size_t>(co) * Ci + ci) * k * k;
                for (int di = 0; di < k; ++di) {
                    for (int dj = 0; dj < k; ++dj) {
                        double acc = 0.0;
                        const int i0 = std::max(0, p - di);
                        const int i1 = std::min(H, H + p - di);
                        for (int i = i0; i < i1; ++i) {
                            const int si = i + di - p;
                            const int j0 = std::max(0, p - dj);
                            const int j1 = std::min(W, W + p - dj);
                            const double* gr = gplane + static_cast<std::size_t>(i) * W;
                            const double* xr = xplane + static_cast<std::size_t>(si) * W;
                            for (int j = j0; j < j1; ++j) acc += gr[j] * xr[j + dj - p];
                        }
                        wk[di * k + dj] += acc;
                    }
                }
            }
        }
    }
}

bool is_trailing_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    const std::size_t off = big.size() - small.size();
    for (std::size_t i = 0; i < small.size(); ++i) {
        if (small[i] != big[off + i]) return false;
    }
    return true;
}

void require_conv_shapes(const char* op, const Tensor& x, const Tensor& w, int k) {
    if (x.rank() != 4) {
        throw ShapeError(std::string(op) + ": input must be 4-d [N,C,H,W], got " +
                         shape_str(x.shape()));
    }
    if (w.rank() != 4 || w.shape()[2] != k || w.shape()[3] != k) {
        throw ShapeError(std::string(op) + ": weights must be [Co,Ci," +
                         std::to_string(k) + "," + std::to_string(k) + "], got " +
                         shape_str(w.shape()));
    }
    if (w.shape()[1] != x.shape()[1]) {
        throw ShapeError(std::string(op) + ": channel mismatch between input " +
                         shape_str(x.shape()) + " and weights " + shape_str(w.shape()));
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Raw forward computation shared by op wrappers and tape replay.
// ---------------------------------------------------------------------------

namespace detail {

Shape infer_shape(OpKind kind, const OpAttrs& attrs, const std::vector<Tensor>& in) {
    switch (kind) {
        case OpKind::Add:
        case OpKind::Sub:
        case OpKind::Mul:
            return in[0].shape();  // canonicalized to equal shapes before record
        case OpKind::Matmul:
            return Shape{in[0].shape()[0], in[1].shape()[1]};
        case OpKind::Relu:
        case OpKind::Log:
        case OpKind::Exp:
        case OpKind::Tanh:
        case OpKind::Reciprocal:
            return in[0].shape();
        case OpKind::Conv2d3x3:
        case OpKind::Conv2d1x1:
            return Shape{in[0].shape()[0], in[1].shape()[0], in[0].shape()[2],
                         in[0].shape()[3]};
        case OpKind::ConvInputGrad:
            return Shape{in[0].shape()[0], in[1].shape()[1], in[0].shape()[2],
                         in[0].shape()[3]};
        case OpKind::ConvWeightGrad:
            return Shape{in[1].shape()[1], in[0].shape()[1], attrs.ksize, attrs.ksize};
        case OpKind::Avgpool2:
            return Shape{in[0].shape()[0], in[0].shape()[1], in[0].shape()[2] / 2,
                         in[0].shape()[3] / 2};
        case OpKind::Upsample2:
            return Shape{in[0].shape()[0], in[0].shape()[1], in[0].shape()[2] * 2,
                         in[0].shape()[3] * 2};
        case OpKind::SoftmaxLastdim:
            return in[0].shape();
        case OpKind::LogsumexpLastdim: {
            Shape s = in[0].shape();
            s.pop_back();
            return s;
        }
        case OpKind::Sum:
        case OpKind::Mean:
        case OpKind::Dot:
        case OpKind::L2Norm:
            return Shape{};
        case OpKind::Broadcast:
        case OpKind::Reshape:
            return attrs.target_shape;
        case OpKind::Concat: {
            Shape s = in[0].shape();
            int total = 0;
            for (const auto& t : in) total += t.shape()[static_cast<std::size_t>(attrs.axis)];
            s[static_cast<std::size_t>(attrs.axis)] = total;
            return s;
        }
        case OpKind::Slice: {
            Shape s = in[0].shape();
            s[static_cast<std::size_t>(attrs.axis)] = attrs.length;
            return s;
        }
        case OpKind::Transpose2d:
            return Shape{in[0].shape()[1], in[0].shape()[0]};
        default:
            throw TapeError("infer_shape: unsupported kind");
    }
}

std::vector<double> compute_raw(OpKind kind, const OpAttrs& attrs,
                                const std::vector<Tensor>& in) {
    const Shape out_shape = infer_shape(kind, attrs, in);
    std::vector<double> out(static_cast<std::size_t>(numel(out_shape)));
    switch (kind) {
        case OpKind::Add: {
            const auto& a = in[0].data();
            const auto& b = in[1].data();
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
            break;
        }
        case OpKind::Sub: {
            const auto& a = in[0].data();
            const auto& b = in[1].data();
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
            break;
        }
        case OpKind::Mul: {
            const auto& a = in[0].data();
            const auto& b = in[1].data();
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
            break;
        }
        case OpKind::Matmul:
            matmul_kernel(in[0].data().data(), in[1].data().data(), out.data(),
                          in[0].shape()[0], in[0].shape()[1], in[1].shape()[1]);
            break;
        case OpKind::Relu: {
            const auto& a = in[0].data();
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
            break;
        }
        case OpKind::Conv2d3x3:
        case OpKind::Conv2d1x1:
            conv_forward_kernel(in[0].data().data(), in[1].data().data(), out.data(),
                                in[0].shape()[0], in[0].shape()[1], in[0].shape()[2],
                                in[0].shape()[3], in[1].shape()[0], attrs.ksize);
            break;
        case OpKind::ConvInputGrad:
            conv_input_grad_kernel(in[0].data().data(), in[1].data().data(), out.data(),
                                   in[0].shape()[0], in[1].shape()[1], in[0].shape()[2],
                                   in[0].shape()[3], in[0].shape()[1], attrs.ksize);
            break;
        case OpKind::ConvWeightGrad:
            conv_weight_grad_kernel(in[0].data().data(), in[1].data().data(), out.data(),
                                    in[0].shape()[0], in[0].shape()[1], in[0].shape()[2],
                                    in[0].shape()[3], in[1].shape()[1], attrs.ksize);
            break;
        case OpKind::Avgpool2: {
            const auto& x = in[0].data();
            const int N = in[0].shape()[0], C = in[0].shape()[1];
            const int H = in[0].shape()[2], W = in[0].shape()[3];
            const int Ho = H / 2, Wo = W / 2;
            for (int nc = 0; nc < N * C; ++nc) {
                const double* xp = x.data() + static_cast<std::size_t>(nc) * H * W;
                double* yp = out.data() + static_cast<std::size_t>(nc) * Ho * Wo;
                for (int i = 0; i < Ho; ++i) {
                    for (int j = 0; j < Wo; ++j) {
                        const double* r0 = xp + static_cast<std::size_t>(2 * i) * W + 2 * j;
                        const double* r1 = r0 + W;
                        yp[i * Wo + j] = 0.25 * (r0[0] + r0[1] + r1[0] + r1[1]);
                    }
                }
            }
            break;
        }
        case OpKind::Upsample2: {
            const auto& x = in[0].data();
            const int N = in[0].shape()[0], C = in[0].shape()[1];
            const int H = in[0].shape()[2], W = in[0].shape()[3];
            for (int nc = 0; nc < N * C; ++nc) {
                const double* xp = x.data() + static_cast<std::size_t>(nc) * H * W;
                double* yp = out.data() + static_cast<std::size_t>(nc) * 4 * H * W;
                for (int i = 0; i < 2 * H; ++i) {
                    for (int j = 0; j < 2 * W; ++j) {
                        yp[i * 2 * W + j] = xp[(i / 2) * W + j / 2];
                    }
                }
            }
            break;
        }
        case OpKind::SoftmaxLastdim: {
            const auto& x = in[0].data();
            const int C = in[0].shape().back();
            const std::size_t rows = out.size() / static_cast<std::size_t>(C);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* xr = x.data() + r * C;
                double* yr = out.data() + r * C;
                double m = xr[0];
                for (int c = 1; c < C; ++c) m = std::max(m, xr[c]);
                double s = 0.0;
                for (int c = 0; c < C; ++c) {
                    yr[c] = std::exp(xr[c] - m);
                    s += yr[c];
                }
                for (int c = 0; c < C; ++c) yr[c] /= s;
            }
            break;
        }
        case OpKind::LogsumexpLastdim: {
            const auto& x = in[0].data();
            const int C = in[0].shape().back();
            const std::size_t rows = out.size();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* xr = x.data() + r * C;
                double m = xr[0];
                for (int c = 1; c < C; ++c) m = std::max(m, xr[c]);
                double s = 0.0;
                for (int c = 0; c < C; ++c) s += std::exp(xr[c] - m);
                out[r] = m + std::log(s);
            }
            break;
        }
        case OpKind::Log: {
            const auto& a = in[0].data();
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a[i]);
            break;
        }
        case OpKind::Exp: {
            const auto& a = in[0].data();
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a[i]);
            break;
        }
        case OpKind::Tanh: {
            const auto& a = in[0].data();
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a[i]);
            break;
        }
        case OpKind::Reciprocal: {
            const auto& a = in[0].data();
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / a[i];
            break;
        }
        case OpKind::Sum: {
            double s = 0.0;
            for (double v : in[0].data()) s += v;
            out[0] = s;
            break;
        }
        case OpKind::Mean: {
            double s = 0.0;
            for (double v : in[0].data()) s += v;
            out[0] = s / static_cast<double>(in[0].data().size());
            break;
        }
        case OpKind::Dot: {
            const auto& a = in[0].data();
            const auto& b = in[1].data();
            double s = 0.0;
            for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
            out[0] = s;
            break;
        }
        case OpKind::L2Norm: {
            double s = 0.0;
            for (double v : in[0].data()) s += v * v;
            out[0] = std::sqrt(s);
            break;
        }
        case OpKind::Broadcast: {
            const auto& x = in[0].data();
            const std::size_t nx = x.size();
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i % nx];
            break;
        }
        case OpKind::Reshape:
            out = in[0].data();
            break;
        case OpKind::Concat: {
            // iterate over the outer index, copying each input's slab
            const Shape& s0 = in[0].shape();
            std::int64_t outer = 1;
            for (int i = 0; i < attrs.axis; ++i) outer *= s0[static_cast<std::size_t>(i)];
            std::int64_t inner = 1;
            for (std::size_t i = static_cast<std::size_t>(attrs.axis) + 1; i < s0.size(); ++i)
                inner *= s0[i];
            std::int64_t out_axis = 0;
            for (const auto& t : in) out_axis += t.shape()[static_cast<std::size_t>(attrs.axis)];
            std::int64_t off = 0;
            for (const auto& t : in) {
                const std::int64_t ax = t.shape()[static_cast<std::size_t>(attrs.axis)];
                const double* src = t.data().data();
                for (std::int64_t o = 0; o < outer; ++o) {
                    std::memcpy(out.data() + (o * out_axis + off) * inner,
                                src + o * ax * inner,
                                static_cast<std::size_t>(ax * inner) * sizeof(double));
                }
                off += ax;
            }
            break;
        }
        case OpKind::Slice: {
            const Shape& s0 = in[0].shape();
            std::int64_t outer = 1;
            for (int i = 0; i < attrs.axis; ++i) outer *= s0[static_cast<std::size_t>(i)];
            std::int64_t inner = 1;
            for (std::size_t i = static_cast<std::size_t>(attrs.axis) + 1; i < s0.size(); ++i)
                inner *= s0[i];
            const std::int64_t ax = s0[static_cast<std::size_t>(attrs.axis)];
            const double* src = in[0].data().data();
            for (std::int64_t o = 0; o < outer; ++o) {
                std::memcpy(out.data() + o * attrs.length * inner,
                            src + (o * ax + attrs.start) * inner,
                            static_cast<std::size_t>(attrs.length * inner) * sizeof(double));
            }
            break;
        }
        case OpKind::Transpose2d: {
            const int m = in[0].shape()[0], n = in[0].shape()[1];
            const double* src = in[0].data().data();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    out[static_cast<std::size_t>(j) * m + i] =
                        src[static_cast<std::size_t>(i) * n + j];
            break;
        }
        default:
            throw TapeError("compute_raw: unsupported kind");
    }
    return out;
}

}  // namespace detail

bool Tape::replay_check() const {
    for (const auto& node : nodes_) {
        if (node.kind == OpKind::Leaf) continue;
        const auto recomputed = detail::compute_raw(node.kind, node.attrs, node.inputs);
        if (recomputed.size() != node.output.data().size()) return false;
        if (std::memcmp(recomputed.data(), node.output.data().data(),
                        recomputed.size() * sizeof(double)) != 0)
            return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Op wrappers
// ---------------------------------------------------------------------------

namespace {

Tensor run_op(OpKind kind, OpAttrs attrs, std::vector<Tensor> inputs) {
    Tensor out = Tensor::from(detail::compute_raw(kind, attrs, inputs),
                              detail::infer_shape(kind, attrs, inputs));
    Tape* tp = Tape::active();
    if (tp && NoRecordGuard::recording_enabled()) {
        bool track = false;
        for (const auto& in : inputs) {
            if (in.requires_grad() && in.tape() == tp) {
                track = true;
                break;
            }
        }
        if (track) tp->record(kind, std::move(attrs), std::move(inputs), out);
    }
    return out;
}

// Canonicalizes elementwise operands: broadcasts the smaller side (scalar or
// trailing suffix) up to the larger one's shape.
std::pair<Tensor, Tensor> align_elementwise(const char* op, const Tensor& a,
                                            const Tensor& b) {
    if (a.shape() == b.shape()) return {a, b};
    if (a.size() == 1 || is_trailing_suffix(a.shape(), b.shape()))
        return {broadcast_to(a, b.shape()), b};
    if (b.size() == 1 || is_trailing_suffix(b.shape(), a.shape()))
        return {a, broadcast_to(b, a.shape())};
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
}

Tensor elementwise(OpKind kind, const char* op, const Tensor& a, const Tensor& b) {
    auto [ca, cb] = align_elementwise(op, a, b);
    return run_op(kind, {}, {ca, cb});
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(OpKind::Add, "add", a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(OpKind::Sub, "sub", a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(OpKind::Mul, "mul", a, b); }

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    return run_op(OpKind::Matmul, {}, {a, b});
}

Tensor relu(const Tensor& x) { return run_op(OpKind::Relu, {}, {x}); }

Tensor conv2d3x3(const Tensor& x, const Tensor& w) {
    require_conv_shapes("conv2d-3x3", x, w, 3);
    OpAttrs attrs;
    attrs.ksize = 3;
    return run_op(OpKind::Conv2d3x3, attrs, {x, w});
}

Tensor conv2d1x1(const Tensor& x, const Tensor& w) {
    require_conv_shapes("conv2d-1x1", x, w, 1);
    OpAttrs attrs;
    attrs.ksize = 1;
    return run_op(OpKind::Conv2d1x1, attrs, {x, w});
}

Tensor avgpool2(const Tensor& x) {
    if (x.rank() != 4 || x.shape()[2] % 2 != 0 || x.shape()[3] % 2 != 0) {
        throw ShapeError("avgpool2: input must be [N,C,H,W] with even H,W, got " +
                         shape_str(x.shape()));
    }
    return run_op(OpKind::Avgpool2, {}, {x});
}

Tensor upsample2(const Tensor& x) {
    if (x.rank() != 4) {
        throw ShapeError("upsample2: input must be 4-d, got " + shape_str(x.shape()));
    }
    return run_op(OpKind::Upsample2, {}, {x});
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || x.shape()[1] != w.shape()[0] ||
        w.shape()[1] != b.shape()[0]) {
        throw ShapeError("affine: incompatible shapes " + shape_str(x.shape()) + ", " +
                         shape_str(w.shape()) + ", " + shape_str(b.shape()));
    }
    return add(matmul(x, w), b);
}

Tensor softmax_lastdim(const Tensor& x) {
    if (x.rank() < 1) throw ShapeError("softmax-lastdim: input must have rank >= 1");
    return run_op(OpKind::SoftmaxLastdim, {}, {x});
}

Tensor logsumexp_lastdim(const Tensor& x) {
    if (x.rank() < 1) throw ShapeError("logsumexp-lastdim: input must have rank >= 1");
    return run_op(OpKind::LogsumexpLastdim, {}, {x});
}

Tensor log(const Tensor& x) { return run_op(OpKind::Log, {}, {x}); }
Tensor exp(const Tensor& x) { return run_op(OpKind::Exp, {}, {x}); }
Tensor tanh(const Tensor& x) { return run_op(OpKind::Tanh, {}, {x}); }
Tensor reciprocal(const Tensor& x) { return run_op(OpKind::Reciprocal, {}, {x}); }
Tensor sum(const Tensor& x) { return run_op(OpKind::Sum, {}, {x}); }
Tensor mean(const Tensor& x) { return run_op(OpKind::Mean, {}, {x}); }

Tensor dot(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) {
        throw ShapeError("dot: size mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    return run_op(OpKind::Dot, {}, {a, b});
}

Tensor l2norm(const Tensor& x) { return run_op(OpKind::L2Norm, {}, {x}); }

Tensor broadcast_to(const Tensor& x, Shape target) {
    if (x.shape() == target) return x;
    if (x.size() != 1 && !is_trailing_suffix(x.shape(), target)) {
        throw ShapeError("broadcast: cannot broadcast " + shape_str(x.shape()) + " to " +
                         shape_str(target));
    }
    OpAttrs attrs;
    attrs.target_shape = std::move(target);
    return run_op(OpKind::Broadcast, attrs, {x});
}

Tensor reshape(const Tensor& x, Shape target) {
    if (numel(target) != x.size()) {
        throw ShapeError("reshape: cannot reshape " + shape_str(x.shape()) + " to " +
                         shape_str(target));
    }
    OpAttrs attrs;
    attrs.target_shape = std::move(target);
    return run_op(OpKind::Reshape, attrs, {x});
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
    if (xs.empty()) throw ShapeError("concat: no inputs");
    const Shape& s0 = xs[0].shape();
    if (axis < 0 || axis >= static_cast<int>(s0.size())) {
        throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(s0));
    }
    for (const auto& t : xs) {
        if (t.rank() != static_cast<int>(s0.size()))
            throw ShapeError("concat: rank mismatch " + shape_str(t.shape()) + " vs " +
                             shape_str(s0));
        for (std::size_t i = 0; i < s0.size(); ++i) {
            if (static_cast<int>(i) != axis && t.shape()[i] != s0[i])
                throw ShapeError("concat: shape mismatch " + shape_str(t.shape()) + " vs " +
                                 shape_str(s0));
        }
    }
    OpAttrs attrs;
    attrs.axis = axis;
    return run_op(OpKind::Concat, attrs, xs);
}

Tensor slice(const Tensor& x, int axis, int start, int length) {
    if (axis < 0 || axis >= x.rank() || start < 0 || length <= 0 ||
        start + length > x.shape()[static_cast<std::size_t>(axis)]) {
        throw ShapeError("slice: invalid range [" + std::to_string(start) + "," +
                         std::to_string(start + length) + ") on axis " +
                         std::to_string(axis) + " of " + shape_str(x.shape()));
    }
    OpAttrs attrs;
    attrs.axis = axis;
    attrs.start = start;
    attrs.length = length;
    return run_op(OpKind::Slice, attrs, {x});
}

Tensor transpose2d(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("transpose2d: input must be 2-d, got " +
                                        shape_str(x.shape()));
    return run_op(OpKind::Transpose2d, {}, {x});
}

// ---------------------------------------------------------------------------
// forward_op string dispatch (the public op surface)
// ---------------------------------------------------------------------------

const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Matmul: return "matmul";
        case OpKind::Relu: return "relu";
        case OpKind::Conv2d3x3: return "conv2d-3x3";
        case OpKind::Avgpool2: return "avgpool2";
        case OpKind::Affine: return "affine";
        case OpKind::SoftmaxLastdim: return "softmax-lastdim";
        case OpKind::Log: return "log";
        case OpKind::Exp: return "exp";
        case OpKind::Sum: return "sum";
        case OpKind::Mean: return "mean";
        case OpKind::Dot: return "dot";
        case OpKind::L2Norm: return "l2norm";
        case OpKind::LogsumexpLastdim: return "logsumexp-lastdim";
        case OpKind::Broadcast: return "broadcast";
        case OpKind::Reshape: return "reshape";
        case OpKind::Concat: return "concat";
        case OpKind::Leaf: return "leaf";
        case OpKind::Reciprocal: return "reciprocal";
        case OpKind::Transpose2d: return "transpose2d";
        case OpKind::Conv2d1x1: return "conv2d-1x1";
        case OpKind::ConvInputGrad: return "conv-input-grad";
        case OpKind::ConvWeightGrad: return "conv-weight-grad";
        case OpKind::Upsample2: return "upsample2";
        case OpKind::Slice: return "slice";
        case OpKind::Tanh: return "tanh";
    }
    return "?";
}

Tensor forward_op(std::string_view kind, const std::vector<Tensor>& in,
                  const OpAttrs& attrs) {
    auto want = [&](std::size_t n) {
        if (in.size() != n) {
            throw ShapeError(std::string(kind) + ": expected " + std::to_string(n) +
                             " inputs, got " + std::to_string(in.size()));
        }
    };
    if (kind == "add") { want(2); return add(in[0], in[1]); }
    if (kind == "sub") { want(2); return sub(in[0], in[1]); }
    if (kind == "mul") { want(2); return mul(in[0], in[1]); }
    if (kind == "matmul") { want(2); return matmul(in[0], in[1]); }
    if (kind == "relu") { want(1); return relu(in[0]); }
    if (kind == "conv2d-3x3") { want(2); return conv2d3x3(in[0], in[1]); }
    if (kind == "avgpool2") { want(1); return avgpool2(in[0]); }
    if (kind == "affine") { want(3); return affine(in[0], in[1], in[2]); }
    if (kind == "softmax-lastdim") { want(1); return softmax_lastdim(in[0]); }
    if (kind == "log") { want(1); return log(in[0]); }
    if (kind == "exp") { want(1); return exp(in[0]); }
    if (kind == "sum") { want(1); return sum(in[0]); }
    if (kind == "mean") { want(1); return mean(in[0]); }
    if (kind == "dot") { want(2); return dot(in[0], in[1]); }
    if (kind == "l2norm") { want(1); return l2norm(in[0]); }
    if (kind == "logsumexp-lastdim") { want(1); return logsumexp_lastdim(in[0]); }
    if (kind == "broadcast") { want(1); return broadcast_to(in[0], attrs.target_shape); }
    if (kind == "reshape") { want(1); return reshape(in[0], attrs.target_shape); }
    if (kind == "concat") { return concat(in, attrs.axis); }
    throw ShapeError("forward_op: unknown op kind '" + std::string(kind) + "'");
}

// ---------------------------------------------------------------------------
// Reverse mode
// ---------------------------------------------------------------------------

namespace {

Tensor ones_const(Shape s) { return Tensor::full(std::move(s), 1.0); }

Tensor neg(const Tensor& x) { return mul(x, Tensor::scalar(-1.0)); }

// Sums g (shaped like the broadcast target) back down to `shape`.
Tensor reduce_to(const Tensor& g, const Shape& shape) {
    const std::int64_t nx = numel(shape);
    if (nx == 1) return reshape(sum(g), shape);
    const std::int64_t lead = g.size() / nx;
    if (lead == 1) return reshape(g, shape);
    Tensor g2 = reshape(g, {static_cast<int>(lead), static_cast<int>(nx)});
    Tensor r = matmul(ones_const({1, static_cast<int>(lead)}), g2);
    return reshape(r, shape);
}

// Expands g ([R] over rows) to [R, C] columns.
Tensor expand_cols(const Tensor& g, int cols) {
    Tensor g2 = reshape(g, {static_cast<int>(g.size()), 1});
    return matmul(g2, ones_const({1, cols}));
}

// Per-input gradient contributions for one tape node.
void backprop_node(const TapeNode& node, const Tensor& g,
                   std::vector<Tensor>& contrib) {
    const auto& in = node.inputs;
    contrib.assign(in.size(), Tensor{});
    auto needs = [&](std::size_t i) { return in[i].requires_grad(); };
    switch (node.kind) {
        case OpKind::Add:
            if (needs(0)) contrib[0] = g;
            if (needs(1)) contrib[1] = g;
            break;
        case OpKind::Sub:
            if (needs(0)) contrib[0] = g;
            if (needs(1)) contrib[1] = neg(g);
            break;
        case OpKind::Mul:
            if (needs(0)) contrib[0] = mul(g, in[1]);
            if (needs(1)) contrib[1] = mul(g, in[0]);
            break;
        case OpKind::Matmul:
            if (needs(0)) contrib[0] = matmul(g, transpose2d(in[1]));
            if (needs(1)) contrib[1] = matmul(transpose2d(in[0]), g);
            break;
        case OpKind::Relu: {
            if (needs(0)) {
                std::vector<double> mask(in[0].data().size());
                for (std::size_t i = 0; i < mask.size(); ++i)
                    mask[i] = in[0].data()[i] > 0.0 ? 1.0 : 0.0;
                contrib[0] = mul(g, Tensor::from(std::move(mask), in[0].shape()));
            }
            break;
        }
        case OpKind::Conv2d3x3:
        case OpKind::Conv2d1x1: {
            OpAttrs a;
            a.ksize = node.attrs.ksize;
            if (needs(0)) contrib[0] = run_op(OpKind::ConvInputGrad, a, {g, in[1]});
            if (needs(1)) contrib[1] = run_op(OpKind::ConvWeightGrad, a, {in[0], g});
            break;
        }
        case OpKind::ConvInputGrad: {
            OpAttrs a;
            a.ksize = node.attrs.ksize;
            if (needs(0))
                contrib[0] = run_op(node.attrs.ksize == 3 ? OpKind::Conv2d3x3
                                                          : OpKind::Conv2d1x1,
                                    a, {g, in[1]});
            if (needs(1)) contrib[1] = run_op(OpKind::ConvWeightGrad, a, {g, in[0]});
            break;
        }
        case OpKind::ConvWeightGrad: {
            OpAttrs a;
            a.ksize = node.attrs.ksize;
            if (needs(0)) contrib[0] = run_op(OpKind::ConvInputGrad, a, {in[1], g});
            if (needs(1))
                contrib[1] = run_op(node.attrs.ksize == 3 ? OpKind::Conv2d3x3
                                                          : OpKind::Conv2d1x1,
                                    a, {in[0], g});
            break;
        }
        case OpKind::Avgpool2:
            if (needs(0)) contrib[0] = mul(upsample2(g), Tensor::scalar(0.25));
            break;
        case OpKind::Upsample2:
            if (needs(0)) contrib[0] = mul(avgpool2(g), Tensor::scalar(4.0));
            break;
        case OpKind::SoftmaxLastdim: {
            if (needs(0)) {
                const int C = in[0].shape().back();
                const int R = static_cast<int>(in[0].size() / C);
                Tensor y2 = reshape(node.output, {R, C});
                Tensor g2 = reshape(g, {R, C});
                Tensor gy = mul(g2, y2);
                Tensor rs = matmul(gy, ones_const({C, 1}));   // [R,1]
                Tensor rs_b = matmul(rs, ones_const({1, C})); // [R,C]
                contrib[0] = reshape(mul(y2, sub(g2, rs_b)), in[0].shape());
            }
            break;
        }
        case OpKind::LogsumexpLastdim: {
            if (needs(0)) {
                const int C = in[0].shape().back();
                const int R = static_cast<int>(in[0].size() / C);
                Tensor sm = softmax_lastdim(in[0]);
                Tensor gb = reshape(expand_cols(reshape(g, {R}), C), in[0].shape());
                contrib[0] = mul(gb, sm);
            }
            break;
        }
        case OpKind::Log:
            if (needs(0)) contrib[0] = mul(g, reciprocal(in[0]));
            break;
        case OpKind::Exp:
            if (needs(0)) contrib[0] = mul(g, node.output);
            break;
        case OpKind::Tanh:
            if (needs(0))
                contrib[0] = mul(g, sub(Tensor::scalar(1.0),
                                        mul(node.output, node.output)));
            break;
        case OpKind::Reciprocal:
            if (needs(0))
                contrib[0] = neg(mul(g, mul(node.output, node.output)));
            break;
        case OpKind::Sum:
            if (needs(0)) contrib[0] = broadcast_to(g, in[0].shape());
            break;
        case OpKind::Mean:
            if (needs(0))
                contrib[0] = broadcast_to(
                    mul(g, Tensor::scalar(1.0 / static_cast<double>(in[0].size()))),
                    in[0].shape());
            break;
        case OpKind::Dot:
            if (needs(0)) contrib[0] = reshape(mul(in[1], g), in[0].shape());
            if (needs(1)) contrib[1] = reshape(mul(in[0], g), in[1].shape());
            break;
        case OpKind::L2Norm:
            if (needs(0)) contrib[0] = mul(in[0], mul(g, reciprocal(node.output)));
            break;
        case OpKind::Broadcast:
            if (needs(0)) contrib[0] = reduce_to(g, in[0].shape());
            break;
        case OpKind::Reshape:
            if (needs(0)) contrib[0] = reshape(g, in[0].shape());
            break;
        case OpKind::Concat: {
            int off = 0;
            for (std::size_t i = 0; i < in.size(); ++i) {
                const int len = in[i].shape()[static_cast<std::size_t>(node.attrs.axis)];
                if (needs(i)) contrib[i] = slice(g, node.attrs.axis, off, len);
                off += len;
            }
            break;
        }
        case OpKind::Slice: {
            if (needs(0)) {
                const int axis = node.attrs.axis;
                const int total = in[0].shape()[static_cast<std::size_t>(axis)];
                std::vector<Tensor> parts;
                if (node.attrs.start > 0) {
                    Shape s = in[0].shape();
                    s[static_cast<std::size_t>(axis)] = node.attrs.start;
                    parts.push_back(Tensor::zeros(s));
                }
                parts.push_back(g);
                const int tail = total - node.attrs.start - node.attrs.length;
                if (tail > 0) {
                    Shape s = in[0].shape();
                    s[static_cast<std::size_t>(axis)] = tail;
                    parts.push_back(Tensor::zeros(s));
                }
                contrib[0] = parts.size() == 1 ? parts[0] : concat(parts, axis);
            }
            break;
        }
        case OpKind::Transpose2d:
            if (needs(0)) contrib[0] = transpose2d(g);
            break;
        case OpKind::Leaf:
            break;
        default:
            throw TapeError("backward: unsupported kind");
    }
}

}  // namespace

std::vector<Tensor> grad(const Tensor& loss, const std::vector<Tensor>& leaves,
                         bool create_graph) {
    if (!loss.defined() || loss.tape() == nullptr) {
        throw TapeError("grad: loss is not on the active tape");
    }
    if (!loss.is_scalar()) {
        throw ShapeError("grad: loss must be scalar, got " + shape_str(loss.shape()));
    }
    Tape* tp = loss.tape();
    for (const auto& leaf : leaves) {
        if (!leaf.defined() || leaf.tape() != tp) {
            throw TapeError("grad: leaf is not registered on the loss tape");
        }
    }
    if (tp != Tape::active()) {
        throw TapeError("grad: loss tape is not the active tape");
    }

    std::vector<Tensor> adjoint(static_cast<std::size_t>(loss.node_id()) + 1);
    adjoint[static_cast<std::size_t>(loss.node_id())] =
        Tensor::full(loss.shape(), 1.0);

    std::optional<NoRecordGuard> guard;
    if (!create_graph) guard.emplace();

    std::vector<Tensor> contrib;
    for (int id = loss.node_id(); id >= 0; --id) {
        Tensor g = adjoint[static_cast<std::size_t>(id)];
        if (!g.defined()) continue;
        // nodes_ may grow (and reallocate) while recording backward ops
        const TapeNode node = tp->nodes()[static_cast<std::size_t>(id)];
        if (node.kind == OpKind::Leaf) continue;
        backprop_node(node, g, contrib);
        for (std::size_t i = 0; i < node.inputs.size(); ++i) {
            if (!contrib[i].defined()) continue;
            const int in_id = node.inputs[i].node_id();
            if (in_id < 0 || node.inputs[i].tape() != tp) continue;
            auto& slot = adjoint[static_cast<std::size_t>(in_id)];
            slot = slot.defined() ? add(slot, contrib[i]) : contrib[i];
        }
    }

    std::vector<Tensor> out;
    out.reserve(leaves.size());
    for (const auto& leaf : leaves) {
        const auto& slot = adjoint[static_cast<std::size_t>(
            std::min<int>(leaf.node_id(), loss.node_id()))];
        if (leaf.node_id() <= loss.node_id() && slot.defined() &&
            leaf.node_id() >= 0 &&
            adjoint[static_cast<std::size_t>(leaf.node_id())].defined()) {
            out.push_back(adjoint[static_cast<std::size_t>(leaf.node_id())]);
        } else {
            out.push_back(Tensor::zeros(leaf.shape()));
        }
    }
    return out;
}

Tensor grad_of_grad(const Tensor& outer, const Tensor& leaf) {
    if (!outer.defined() || outer.tape() == nullptr) {
        throw TapeError(
            "grad_of_grad: outer scalar is not on the tape; the first-order "
            "pass must be run with create_graph");
    }
    return grad(outer, {leaf}, false)[0];
}

}  // namespace slfd
