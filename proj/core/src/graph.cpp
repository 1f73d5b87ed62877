#include "decontext/graph.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <cblas.h>

#include "decontext/errors.hpp"

namespace decontext {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kMultiply: return "multiply";
    case OpKind::kScale: return "scale";
    case OpKind::kTransposeLastTwo: return "transpose-last-two";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kReshape: return "reshape";
    case OpKind::kSoftmaxLastAxis: return "softmax-last-axis";
    case OpKind::kLayerNormLastAxis: return "layer-normalize-last-axis";
    case OpKind::kGelu: return "gelu";
    case OpKind::kMean: return "mean";
    case OpKind::kSum: return "sum";
    case OpKind::kSquaredError: return "squared-error";
    case OpKind::kRepeatRows: return "repeat-rows";
    case OpKind::kGather: return "gather";
  }
  return "unknown";
}

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

[[noreturn]] void shape_fail(OpKind kind, const std::string& detail) {
  throw ShapeError(std::string(op_name(kind)) + ": " + detail);
}

template <typename T>
std::string shapes_of(std::span<const BasicTensor<T>* const> ts) {
  std::string s;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    if (i) s += ", ";
    s += shape_to_string(ts[i]->shape());
  }
  return s;
}

void expect_arity(OpKind kind, std::size_t got, std::size_t want) {
  if (got != want) {
    shape_fail(kind, "expected " + std::to_string(want) + " inputs, got " + std::to_string(got));
  }
}

// C[M,N] (+)= A[M,K] * B[K,N], row-major, batched over `batch` leading blocks.
// C += op(A) op(B) for row-major batches; op(A) is [m, k], op(B) is [k, n].
void gemm(bool ta, bool tb, std::size_t batch, std::size_t m, std::size_t n, std::size_t k, const float* a,
          const float* b, float* c) {
  const auto ia = static_cast<blasint>(m), in = static_cast<blasint>(n), ik = static_cast<blasint>(k);
  for (std::size_t p = 0; p < batch; ++p) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, ia, in, ik, 1.0f,
                a + p * m * k, ta ? ia : ik, b + p * k * n, tb ? ik : in, 1.0f, c + p * m * n, in);
  }
}

void gemm(bool ta, bool tb, std::size_t batch, std::size_t m, std::size_t n, std::size_t k, const double* a,
          const double* b, double* c) {
  const auto ia = static_cast<blasint>(m), in = static_cast<blasint>(n), ik = static_cast<blasint>(k);
  for (std::size_t p = 0; p < batch; ++p) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, ia, in, ik, 1.0,
                a + p * m * k, ta ? ia : ik, b + p * k * n, tb ? ik : in, 1.0, c + p * m * n, in);
  }
}

template <typename T>
void transpose_into(const T* src, T* dst, std::size_t batch, std::size_t rows, std::size_t cols) {
  for (std::size_t p = 0; p < batch; ++p) {
    const T* s = src + p * rows * cols;
    T* d = dst + p * rows * cols;
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) d[j * rows + i] = s[i * cols + j];
    }
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <typename T>
BasicTensor<T> forward_op(OpKind kind, std::span<const BasicTensor<T>* const> in, const OpAttrs& at,
                          std::vector<T>& aux) {
  using TensorT = BasicTensor<T>;
  switch (kind) {
    case OpKind::kLeaf:
      shape_fail(kind, "leaves are created with input() or constant()");

    case OpKind::kMatMul: {
      expect_arity(kind, in.size(), 2);
      const auto& a = in[0]->shape();
      const auto& b = in[1]->shape();
      if (a.size() < 2 || a.size() != b.size() ||
          !std::equal(a.begin(), a.end() - 2, b.begin()) || a[a.size() - 1] != b[b.size() - 2]) {
        shape_fail(kind, "cannot multiply " + shapes_of<T>(in));
      }
      const std::size_t m = a[a.size() - 2], k = a.back(), n = b.back();
      Shape out = a;
      out.back() = n;
      TensorT c(out);
      gemm(false, false, shape_numel(a) / (m * k), m, n, k, in[0]->data().data(), in[1]->data().data(), c.data().data());
      return c;
    }

    case OpKind::kAdd:
    case OpKind::kMultiply: {
      expect_arity(kind, in.size(), 2);
      if (in[0]->shape() != in[1]->shape()) shape_fail(kind, "operand shapes differ: " + shapes_of<T>(in));
      TensorT c(in[0]->shape());
      auto x = in[0]->data();
      auto y = in[1]->data();
      auto z = c.data();
      if (kind == OpKind::kAdd) {
        for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] + y[i];
      } else {
        for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] * y[i];
      }
      return c;
    }

    case OpKind::kScale: {
      expect_arity(kind, in.size(), 1);
      TensorT c(in[0]->shape());
      const T f = static_cast<T>(at.factor);
      auto x = in[0]->data();
      auto z = c.data();
      for (std::size_t i = 0; i < z.size(); ++i) z[i] = f * x[i];
      return c;
    }

    case OpKind::kTransposeLastTwo: {
      expect_arity(kind, in.size(), 1);
      const auto& s = in[0]->shape();
      if (s.size() < 2) shape_fail(kind, "needs rank >= 2, got " + shapes_of<T>(in));
      Shape out = s;
      std::swap(out[out.size() - 1], out[out.size() - 2]);
      TensorT c(out);
      const std::size_t r = s[s.size() - 2], cols = s.back();
      transpose_into(in[0]->data().data(), c.data().data(), shape_numel(s) / (r * cols), r, cols);
      return c;
    }

    case OpKind::kConcat: {
      if (in.empty()) shape_fail(kind, "needs at least one input");
      const auto& s0 = in[0]->shape();
      if (at.axis >= s0.size()) shape_fail(kind, "axis " + std::to_string(at.axis) + " out of range for " + shapes_of<T>(in));
      Shape out = s0;
      out[at.axis] = 0;
      for (const auto* t : in) {
        const auto& s = t->shape();
        bool ok = s.size() == s0.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == at.axis || s[d] == s0[d];
        if (!ok) shape_fail(kind, "incompatible shapes along axis " + std::to_string(at.axis) + ": " + shapes_of<T>(in));
        out[at.axis] += s[at.axis];
      }
      TensorT c(out);
      const auto split = split_at(out, at.axis);
      T* dst = c.data().data();
      for (std::size_t o = 0; o < split.outer; ++o) {
        for (const auto* t : in) {
          const std::size_t chunk = t->shape()[at.axis] * split.inner;
          const T* src = t->data().data() + o * chunk;
          dst = std::copy(src, src + chunk, dst);
        }
      }
      return c;
    }

    case OpKind::kSlice: {
      expect_arity(kind, in.size(), 1);
      const auto& s = in[0]->shape();
      if (at.axis >= s.size() || at.length == 0 || at.start + at.length > s[at.axis]) {
        shape_fail(kind, "range [" + std::to_string(at.start) + ", " + std::to_string(at.start + at.length) +
                             ") on axis " + std::to_string(at.axis) + " invalid for " + shapes_of<T>(in));
      }
      Shape out = s;
      out[at.axis] = at.length;
      TensorT c(out);
      const auto split = split_at(s, at.axis);
      const T* src = in[0]->data().data();
      T* dst = c.data().data();
      for (std::size_t o = 0; o < split.outer; ++o) {
        const T* from = src + (o * split.extent + at.start) * split.inner;
        dst = std::copy(from, from + at.length * split.inner, dst);
      }
      return c;
    }

    case OpKind::kReshape: {
      expect_arity(kind, in.size(), 1);
      if (shape_numel(at.shape) != in[0]->numel() || std::count(at.shape.begin(), at.shape.end(), 0u) > 0) {
        shape_fail(kind, "cannot view " + shapes_of<T>(in) + " as " + shape_to_string(at.shape));
      }
      return in[0]->reshaped(at.shape);
    }

    case OpKind::kSoftmaxLastAxis: {
      expect_arity(kind, in.size(), 1);
      const auto& s = in[0]->shape();
      if (s.empty()) shape_fail(kind, "needs rank >= 1");
      TensorT c(s);
      const std::size_t n = s.back(), rows = in[0]->numel() / n;
      const T* x = in[0]->data().data();
      T* y = c.data().data();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x + r * n;
        T* yr = y + r * n;
        const T mx = *std::max_element(xr, xr + n);
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          yr[j] = std::exp(xr[j] - mx);
          total += yr[j];
        }
        const T inv = static_cast<T>(1.0 / total);
        for (std::size_t j = 0; j < n; ++j) yr[j] *= inv;
      }
      return c;
    }

    case OpKind::kLayerNormLastAxis: {
      expect_arity(kind, in.size(), 1);
      const auto& s = in[0]->shape();
      if (s.empty()) shape_fail(kind, "needs rank >= 1");
      TensorT c(s);
      const std::size_t n = s.back(), rows = in[0]->numel() / n;
      aux.assign(rows, T{0});
      const T* x = in[0]->data().data();
      T* y = c.data().data();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x + r * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += xr[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(n);
        const double rstd = 1.0 / std::sqrt(var + at.factor);
        aux[r] = static_cast<T>(rstd);
        for (std::size_t j = 0; j < n; ++j) y[r * n + j] = static_cast<T>((xr[j] - mu) * rstd);
      }
      return c;
    }

    case OpKind::kGelu: {
      expect_arity(kind, in.size(), 1);
      TensorT c(in[0]->shape());
      auto x = in[0]->data();
      auto y = c.data();
      for (std::size_t i = 0; i < y.size(); ++i) {
        const T v = x[i];
        const T u = static_cast<T>(kGeluC) * (v + static_cast<T>(kGeluA) * v * v * v);
        y[i] = T{0.5} * v * (T{1} + std::tanh(u));
      }
      return c;
    }

    case OpKind::kMean:
    case OpKind::kSum: {
      expect_arity(kind, in.size(), 1);
      double total = 0.0;
      for (T v : in[0]->data()) total += v;
      if (kind == OpKind::kMean) total /= static_cast<double>(in[0]->numel());
      return TensorT::scalar(static_cast<T>(total));
    }

    case OpKind::kSquaredError: {
      expect_arity(kind, in.size(), 2);
      if (in[0]->shape() != in[1]->shape()) shape_fail(kind, "operand shapes differ: " + shapes_of<T>(in));
      auto x = in[0]->data();
      auto y = in[1]->data();
      double total = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = static_cast<double>(x[i]) - static_cast<double>(y[i]);
        total += d * d;
      }
      return TensorT::scalar(static_cast<T>(total / static_cast<double>(x.size())));
    }

    case OpKind::kRepeatRows: {
      expect_arity(kind, in.size(), 1);
      const auto& s = in[0]->shape();
      if (s.size() != 2 || s[0] != 1 || at.length == 0) {
        shape_fail(kind, "needs a [1, n] row and a positive count, got " + shapes_of<T>(in));
      }
      TensorT c(Shape{at.length, s[1]});
      auto src = in[0]->data();
      T* dst = c.data().data();
      for (std::size_t r = 0; r < at.length; ++r) dst = std::copy(src.begin(), src.end(), dst);
      return c;
    }

    case OpKind::kGather: {
      expect_arity(kind, in.size(), 1);
      if (!at.index || at.index->size() != shape_numel(at.shape)) {
        shape_fail(kind, "index length does not match output shape " + shape_to_string(at.shape));
      }
      TensorT c(at.shape);
      auto src = in[0]->data();
      auto dst = c.data();
      const auto& idx = *at.index;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= src.size()) shape_fail(kind, "index " + std::to_string(idx[i]) + " out of range for " + shapes_of<T>(in));
        dst[i] = src[idx[i]];
      }
      return c;
    }
  }
  shape_fail(kind, "unsupported");
}

}  // namespace

template <typename T>
typename Graph<T>::Var Graph<T>::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

template <typename T>
void Graph<T>::check_owner(Var v) const {
  if (!v.valid() || &v.graph() != this || v.id() >= nodes_.size()) {
    throw GraphError("variable does not belong to this graph");
  }
}

template <typename T>
typename Graph<T>::Var Graph<T>::input(TensorT& tensor) {
  tensor.check_finite("graph input");
  Node n;
  n.external = &tensor;
  n.needs_grad = tensor.requires_grad();
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::Var Graph<T>::constant(TensorT tensor) {
  tensor.check_finite("graph constant");
  Node n;
  n.value = std::move(tensor);
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::Var Graph<T>::apply(OpKind kind, std::span<const Var> inputs, const OpAttrs& attrs) {
  if (backward_done_) throw GraphError("graph already consumed by backward");
  std::vector<const TensorT*> vals;
  vals.reserve(inputs.size());
  Node n;
  n.kind = kind;
  n.attrs = attrs;
  for (const auto& v : inputs) {
    check_owner(v);
    vals.push_back(&node_value(nodes_[v.id()]));
    n.inputs.push_back(v.id());
    n.needs_grad = n.needs_grad || nodes_[v.id()].needs_grad;
  }
  n.value = forward_op<T>(kind, std::span<const TensorT* const>(vals), attrs, n.aux);
  n.value.check_finite(op_name(kind));
  return push(std::move(n));
}

template <typename T>
const BasicTensor<T>& Graph<T>::value(Var v) const {
  check_owner(v);
  return node_value(nodes_[v.id()]);
}

template <typename T>
bool Graph<T>::requires_grad(Var v) const {
  check_owner(v);
  return nodes_[v.id()].needs_grad;
}

template <typename T>
std::vector<T>& Graph<T>::grad_buffer(std::size_t id) {
  auto& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(node_value(n).numel(), T{0});
  return n.grad;
}

template <typename T>
std::vector<T> Graph<T>::grad(Var v) const {
  check_owner(v);
  const auto& n = nodes_[v.id()];
  if (n.grad.empty()) return std::vector<T>(node_value(n).numel(), T{0});
  return n.grad;
}

template <typename T>
void Graph<T>::backward(Var loss) {
  check_owner(loss);
  if (backward_done_) throw GraphError("backward called twice on the same graph");
  if (value(loss).numel() != 1) {
    throw GraphError("backward needs a scalar loss, got shape " + shape_to_string(value(loss).shape()));
  }
  backward_done_ = true;
  if (!nodes_[loss.id()].needs_grad) return;
  grad_buffer(loss.id())[0] = T{1};
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    auto& n = nodes_[id];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (!values_finite(std::span<const T>(n.grad))) {
      throw NonFiniteError(std::string("non-finite gradient at ") + std::string(op_name(n.kind)));
    }
    if (n.kind == OpKind::kLeaf) {
      if (n.external) {
        auto dst = n.external->grad_mut();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
      }
      continue;
    }
    backward_node(id);
  }
}

template <typename T>
void Graph<T>::backward_node(std::size_t id) {
  // Copy what we need: grad_buffer() may reallocate other nodes' storage but
  // never the node vector itself.
  Node& n = nodes_[id];
  const std::vector<T>& gy = n.grad;
  const OpAttrs& at = n.attrs;
  auto wants = [&](std::size_t slot) { return nodes_[n.inputs[slot]].needs_grad; };
  auto in_val = [&](std::size_t slot) -> const TensorT& { return node_value(nodes_[n.inputs[slot]]); };

  switch (n.kind) {
    case OpKind::kLeaf:
      break;

    case OpKind::kMatMul: {
      const auto& a = in_val(0);
      const auto& b = in_val(1);
      const auto& sa = a.shape();
      const std::size_t m = sa[sa.size() - 2], k = sa.back(), nn = b.shape().back();
      const std::size_t batch = a.numel() / (m * k);
      if (wants(0)) {
        // dA = dC * B^T
        gemm(false, true, batch, m, k, nn, gy.data(), b.data().data(), grad_buffer(n.inputs[0]).data());
      }
      if (wants(1)) {
        // dB = A^T * dC
        gemm(true, false, batch, k, nn, m, a.data().data(), gy.data(), grad_buffer(n.inputs[1]).data());
      }
      break;
    }

    case OpKind::kAdd:
      for (std::size_t s = 0; s < 2; ++s) {
        if (!wants(s)) continue;
        auto& g = grad_buffer(n.inputs[s]);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
      }
      break;

    case OpKind::kMultiply:
      for (std::size_t s = 0; s < 2; ++s) {
        if (!wants(s)) continue;
        auto other = in_val(1 - s).data();
        auto& g = grad_buffer(n.inputs[s]);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * other[i];
      }
      break;

    case OpKind::kScale: {
      if (!wants(0)) break;
      const T f = static_cast<T>(at.factor);
      auto& g = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += f * gy[i];
      break;
    }

    case OpKind::kTransposeLastTwo: {
      if (!wants(0)) break;
      const auto& s = n.value.shape();  // output shape
      const std::size_t r = s[s.size() - 2], c = s.back();
      std::vector<T> tmp(gy.size());
      transpose_into(gy.data(), tmp.data(), gy.size() / (r * c), r, c);
      auto& g = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += tmp[i];
      break;
    }

    case OpKind::kConcat: {
      const auto split = split_at(n.value.shape(), at.axis);
      std::size_t offset = 0;  // offset along the concat axis within one outer block
      for (std::size_t s = 0; s < n.inputs.size(); ++s) {
        const std::size_t chunk = in_val(s).shape()[at.axis] * split.inner;
        if (wants(s)) {
          auto& g = grad_buffer(n.inputs[s]);
          for (std::size_t o = 0; o < split.outer; ++o) {
            const T* src = gy.data() + o * split.extent * split.inner + offset;
            T* dst = g.data() + o * chunk;
            for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
          }
        }
        offset += chunk;
      }
      break;
    }

    case OpKind::kSlice: {
      if (!wants(0)) break;
      const auto split = split_at(in_val(0).shape(), at.axis);
      auto& g = grad_buffer(n.inputs[0]);
      const std::size_t chunk = at.length * split.inner;
      for (std::size_t o = 0; o < split.outer; ++o) {
        T* dst = g.data() + (o * split.extent + at.start) * split.inner;
        const T* src = gy.data() + o * chunk;
        for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
      }
      break;
    }

    case OpKind::kReshape: {
      if (!wants(0)) break;
      auto& g = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
      break;
    }

    case OpKind::kSoftmaxLastAxis: {
      if (!wants(0)) break;
      const std::size_t cols = n.value.shape().back(), rows = n.value.numel() / cols;
      const T* y = n.value.data().data();
      auto& g = grad_buffer(n.inputs[0]);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* yr = y + r * cols;
        const T* gr = gy.data() + r * cols;
        double dot = 0.0;
        for (std::size_t j = 0; j < cols; ++j) dot += static_cast<double>(gr[j]) * yr[j];
        const T d = static_cast<T>(dot);
        T* out = g.data() + r * cols;
        for (std::size_t j = 0; j < cols; ++j) out[j] += yr[j] * (gr[j] - d);
      }
      break;
    }

    case OpKind::kLayerNormLastAxis: {
      if (!wants(0)) break;
      const std::size_t cols = n.value.shape().back(), rows = n.value.numel() / cols;
      const T* y = n.value.data().data();
      auto& g = grad_buffer(n.inputs[0]);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* yr = y + r * cols;
        const T* gr = gy.data() + r * cols;
        double mg = 0.0, mgy = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
          mg += gr[j];
          mgy += static_cast<double>(gr[j]) * yr[j];
        }
        mg /= static_cast<double>(cols);
        mgy /= static_cast<double>(cols);
        const double rstd = n.aux[r];
        T* out = g.data() + r * cols;
        for (std::size_t j = 0; j < cols; ++j) out[j] += static_cast<T>(rstd * (gr[j] - mg - yr[j] * mgy));
      }
      break;
    }

    case OpKind::kGelu: {
      if (!wants(0)) break;
      auto x = in_val(0).data();
      auto& g = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = x[i];
        const T u = static_cast<T>(kGeluC) * (v + static_cast<T>(kGeluA) * v * v * v);
        const T th = std::tanh(u);
        const T du = static_cast<T>(kGeluC) * (T{1} + static_cast<T>(3.0 * kGeluA) * v * v);
        g[i] += gy[i] * (T{0.5} * (T{1} + th) + T{0.5} * v * (T{1} - th * th) * du);
      }
      break;
    }

    case OpKind::kMean:
    case OpKind::kSum: {
      if (!wants(0)) break;
      auto& g = grad_buffer(n.inputs[0]);
      T d = gy[0];
      if (n.kind == OpKind::kMean) d /= static_cast<T>(g.size());
      for (auto& v : g) v += d;
      break;
    }

    case OpKind::kSquaredError: {
      auto x = in_val(0).data();
      auto y = in_val(1).data();
      const T f = static_cast<T>(2.0 / static_cast<double>(x.size())) * gy[0];
      for (std::size_t s = 0; s < 2; ++s) {
        if (!wants(s)) continue;
        auto& g = grad_buffer(n.inputs[s]);
        const T sign = s == 0 ? T{1} : T{-1};
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * f * (x[i] - y[i]);
      }
      break;
    }

    case OpKind::kRepeatRows: {
      if (!wants(0)) break;
      auto& g = grad_buffer(n.inputs[0]);
      const std::size_t cols = g.size();
      for (std::size_t r = 0; r < at.length; ++r) {
        for (std::size_t j = 0; j < cols; ++j) g[j] += gy[r * cols + j];
      }
      break;
    }

    case OpKind::kGather: {
      if (!wants(0)) break;
      auto& g = grad_buffer(n.inputs[0]);
      const auto& idx = *at.index;
      for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += gy[i];
      break;
    }
  }
}

// ---- typed front-ends ------------------------------------------------------

namespace {
template <typename T>
BasicVar<T> apply1(OpKind kind, BasicVar<T> a, const OpAttrs& at = {}) {
  const BasicVar<T> in[] = {a};
  return a.graph().apply(kind, in, at);
}
template <typename T>
BasicVar<T> apply2(OpKind kind, BasicVar<T> a, BasicVar<T> b) {
  const BasicVar<T> in[] = {a, b};
  return a.graph().apply(kind, in);
}
}  // namespace

template <typename T> BasicVar<T> matmul(BasicVar<T> a, BasicVar<T> b) { return apply2(OpKind::kMatMul, a, b); }
template <typename T> BasicVar<T> add(BasicVar<T> a, BasicVar<T> b) { return apply2(OpKind::kAdd, a, b); }
template <typename T> BasicVar<T> sub(BasicVar<T> a, BasicVar<T> b) { return add(a, scale(b, -1.0)); }
template <typename T> BasicVar<T> multiply(BasicVar<T> a, BasicVar<T> b) { return apply2(OpKind::kMultiply, a, b); }

template <typename T>
BasicVar<T> scale(BasicVar<T> a, double factor) {
  OpAttrs at;
  at.factor = factor;
  return apply1(OpKind::kScale, a, at);
}

template <typename T> BasicVar<T> transpose(BasicVar<T> a) { return apply1(OpKind::kTransposeLastTwo, a); }

template <typename T>
BasicVar<T> concat(std::span<const BasicVar<T>> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: needs at least one input");
  OpAttrs at;
  at.axis = axis;
  return parts[0].graph().apply(OpKind::kConcat, parts, at);
}

template <typename T>
BasicVar<T> concat(std::initializer_list<BasicVar<T>> parts, std::size_t axis) {
  return concat(std::span<const BasicVar<T>>(parts.begin(), parts.size()), axis);
}

template <typename T>
BasicVar<T> slice(BasicVar<T> a, std::size_t axis, std::size_t start, std::size_t length) {
  OpAttrs at;
  at.axis = axis;
  at.start = start;
  at.length = length;
  return apply1(OpKind::kSlice, a, at);
}

template <typename T>
BasicVar<T> reshape(BasicVar<T> a, Shape shape) {
  OpAttrs at;
  at.shape = std::move(shape);
  return apply1(OpKind::kReshape, a, at);
}

template <typename T> BasicVar<T> softmax(BasicVar<T> a) { return apply1(OpKind::kSoftmaxLastAxis, a); }

template <typename T>
BasicVar<T> layer_norm(BasicVar<T> a, double eps) {
  OpAttrs at;
  at.factor = eps;
  return apply1(OpKind::kLayerNormLastAxis, a, at);
}

template <typename T> BasicVar<T> gelu(BasicVar<T> a) { return apply1(OpKind::kGelu, a); }
template <typename T> BasicVar<T> mean(BasicVar<T> a) { return apply1(OpKind::kMean, a); }
template <typename T> BasicVar<T> sum(BasicVar<T> a) { return apply1(OpKind::kSum, a); }
template <typename T> BasicVar<T> squared_error(BasicVar<T> a, BasicVar<T> b) { return apply2(OpKind::kSquaredError, a, b); }

template <typename T>
BasicVar<T> repeat_rows(BasicVar<T> a, std::size_t rows) {
  OpAttrs at;
  at.length = rows;
  return apply1(OpKind::kRepeatRows, a, at);
}

template <typename T>
BasicVar<T> gather(BasicVar<T> a, std::shared_ptr<const std::vector<std::uint32_t>> index, Shape shape) {
  OpAttrs at;
  at.index = std::move(index);
  at.shape = std::move(shape);
  return apply1(OpKind::kGather, a, at);
}

template <typename T>
double finite_diff_check(const GraphFunction<T>& f, const BasicTensor<T>& x, double h) {
  if (!(h > 0.0 && h <= 0.1)) throw RangeError("finite difference step must lie in (0, 0.1]");

  BasicTensor<T> probe = x;
  probe.set_requires_grad(true);
  probe.clear_grad();
  Graph<T> g;
  auto out = f(g, g.input(probe));
  if (out.value().numel() != 1) {
    throw GraphError("finite_diff_check needs a scalar function, got shape " + shape_to_string(out.shape()));
  }
  g.backward(out);
  std::vector<T> analytic(probe.numel(), T{0});
  if (probe.has_grad()) {
    auto gr = probe.grad();
    analytic.assign(gr.begin(), gr.end());
  }

  auto eval = [&](const BasicTensor<T>& at) {
    BasicTensor<T> copy = at;
    copy.set_requires_grad(false);
    Graph<T> ge;
    return static_cast<double>(f(ge, ge.input(copy)).value().item());
  };

  double worst = 0.0;
  BasicTensor<T> moved = x;
  moved.set_requires_grad(false);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T orig = moved[i];
    moved[i] = static_cast<T>(orig + h);
    const double up = eval(moved);
    moved[i] = static_cast<T>(orig - h);
    const double down = eval(moved);
    moved[i] = orig;
    const double step = (static_cast<double>(static_cast<T>(orig + h)) - static_cast<double>(static_cast<T>(orig - h)));
    const double numeric = (up - down) / step;
    const double err = std::abs(static_cast<double>(analytic[i]) - numeric) / (std::abs(static_cast<double>(analytic[i])) + 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

#define DECONTEXT_INSTANTIATE(T)                                                              \
  template class Graph<T>;                                                                     \
  template BasicVar<T> matmul(BasicVar<T>, BasicVar<T>);                                       \
  template BasicVar<T> add(BasicVar<T>, BasicVar<T>);                                          \
  template BasicVar<T> sub(BasicVar<T>, BasicVar<T>);                                          \
  template BasicVar<T> multiply(BasicVar<T>, BasicVar<T>);                                     \
  template BasicVar<T> scale(BasicVar<T>, double);                                             \
  template BasicVar<T> transpose(BasicVar<T>);                                                 \
  template BasicVar<T> concat(std::span<const BasicVar<T>>, std::size_t);                      \
  template BasicVar<T> concat(std::initializer_list<BasicVar<T>>, std::size_t);                \
  template BasicVar<T> slice(BasicVar<T>, std::size_t, std::size_t, std::size_t);              \
  template BasicVar<T> reshape(BasicVar<T>, Shape);                                            \
  template BasicVar<T> softmax(BasicVar<T>);                                                   \
  template BasicVar<T> layer_norm(BasicVar<T>, double);                                        \
  template BasicVar<T> gelu(BasicVar<T>);                                                      \
  template BasicVar<T> mean(BasicVar<T>);                                                      \
  template BasicVar<T> sum(BasicVar<T>);                                                       \
  template BasicVar<T> squared_error(BasicVar<T>, BasicVar<T>);                                \
  template BasicVar<T> repeat_rows(BasicVar<T>, std::size_t);                                  \
  template BasicVar<T> gather(BasicVar<T>, std::shared_ptr<const std::vector<std::uint32_t>>, Shape); \
  template double finite_diff_check(const GraphFunction<T>&, const BasicTensor<T>&, double);

DECONTEXT_INSTANTIATE(float)
DECONTEXT_INSTANTIATE(double)

#undef DECONTEXT_INSTANTIATE

}  // namespace decontext
