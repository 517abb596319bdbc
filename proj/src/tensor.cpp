#include "advdistill/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "advdistill/errors.hpp"

namespace advdistill {

namespace detail {

struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Receives the gradient of the node's output and accumulates into inputs.
  std::function<void(const std::vector<double>&)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> node;
};

}  // namespace detail

using detail::Node;
using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

void accumulate(TensorImpl& impl, std::size_t i, double v) {
  impl.grad[i] += v;
}

// Ensures the grad buffer exists; returns false when the tensor does not take
// part in differentiation.
bool prepare_grad(TensorImpl& impl) {
  if (!impl.requires_grad) return false;
  if (impl.grad.size() != impl.data.size()) impl.grad.assign(impl.data.size(), 0.0);
  return true;
}

}  // namespace

struct TensorAccess {
  static Tensor wrap(ImplPtr impl) { return Tensor(std::move(impl)); }

  // Builds an op result. When grad mode is on and any input participates, the
  // result gets a node running `backward`.
  static Tensor result(Shape shape, std::vector<double> data, std::vector<ImplPtr> inputs,
                       std::function<void(const std::vector<double>&)> backward) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    bool tracked = g_grad_enabled &&
                   std::any_of(inputs.begin(), inputs.end(),
                               [](const ImplPtr& p) { return p && p->requires_grad; });
    if (tracked) {
      auto node = std::make_shared<Node>();
      node->inputs = std::move(inputs);
      node->backward = std::move(backward);
      impl->node = std::move(node);
      impl->requires_grad = true;
    }
    return Tensor(std::move(impl));
  }
};

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// ---- Tensor ----

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                         " values but " + std::to_string(data.size()) + " were given");
  }
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return Tensor(shape, std::vector<double>(shape_numel(shape), 0.0), requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  return Tensor(shape, std::vector<double>(shape_numel(shape), value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
  shape();
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  shape();
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!is_leaf()) throw ContractError("requires_grad can only be changed on leaf tensors");
  impl_->requires_grad = flag;
  if (!flag) impl_->grad.clear();
}

bool Tensor::is_leaf() const {
  shape();
  return impl_->node == nullptr;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape();
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const { return detach(); }

void Tensor::backward() const {
  if (numel() != 1) throw ContractError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  if (!impl_->requires_grad) throw ContractError("backward() on a tensor that is not on the gradient tape");
  GradTape::record(*this).run_backward(*this);
}

// ---- GradTape ----

GradTape GradTape::record(const Tensor& loss) {
  GradTape tape;
  std::unordered_set<const TensorImpl*> visited;
  // Iterative post-order DFS: (impl, next input index).
  std::vector<std::pair<ImplPtr, std::size_t>> stack;
  auto root = loss.impl();
  if (!root) throw ContractError("backward() on an undefined tensor");
  stack.emplace_back(root, 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    const auto* node = impl->node.get();
    if (node && next < node->inputs.size()) {
      const auto& in = node->inputs[next++];
      if (in && in->requires_grad && visited.insert(in.get()).second) stack.emplace_back(in, 0);
      continue;
    }
    tape.order_.push_back(impl);
    stack.pop_back();
  }
  return tape;
}

bool GradTape::is_topological() const {
  std::unordered_set<const TensorImpl*> seen;
  for (const auto& impl : order_) {
    if (impl->node) {
      for (const auto& in : impl->node->inputs) {
        if (in && in->requires_grad && !seen.count(in.get())) return false;
      }
    }
    seen.insert(impl.get());
  }
  return true;
}

void GradTape::run_backward(const Tensor& loss) const {
  // Intermediate buffers restart from zero so repeated passes over one graph
  // only accumulate into leaves.
  for (const auto& impl : order_) {
    if (impl->node) impl->grad.assign(impl->data.size(), 0.0);
  }
  auto root = loss.impl();
  prepare_grad(*root);
  root->grad[0] += 1.0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    const auto& impl = *it;
    if (!impl->node) continue;
    for (const auto& in : impl->node->inputs) {
      if (in) prepare_grad(*in);
    }
    impl->node->backward(impl->grad);
  }
}

// ---- grad mode ----

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- operations ----

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

// Elementwise unary op with derivative computed from (x, y).
template <typename F, typename D>
Tensor unary(const Tensor& t, F f, D dfdx) {
  auto x = t.impl();
  std::vector<double> out(x->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x->data[i]);
  auto y = std::make_shared<std::vector<double>>(out);
  return TensorAccess::result(x->shape, std::move(out), {x}, [x, y, dfdx](const std::vector<double>& g) {
    if (!x->requires_grad) return;
    for (std::size_t i = 0; i < g.size(); ++i) accumulate(*x, i, g[i] * dfdx(x->data[i], (*y)[i]));
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto ai = a.impl();
  auto bi = b.impl();
  std::vector<double> out(m * n);
  MutMap(out.data(), m, n).noalias() = ConstMap(ai->data.data(), m, k) * ConstMap(bi->data.data(), k, n);
  return TensorAccess::result({m, n}, std::move(out), {ai, bi}, [ai, bi, m, k, n](const std::vector<double>& g) {
    ConstMap gm(g.data(), m, n);
    if (ai->requires_grad) {
      MutMap(ai->grad.data(), m, k).noalias() += gm * ConstMap(bi->data.data(), k, n).transpose();
    }
    if (bi->requires_grad) {
      MutMap(bi->grad.data(), k, n).noalias() += ConstMap(ai->data.data(), m, k).transpose() * gm;
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto ai = a.impl(), bi = b.impl();
  std::vector<double> out(ai->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ai->data[i] + bi->data[i];
  return TensorAccess::result(ai->shape, std::move(out), {ai, bi}, [ai, bi](const std::vector<double>& g) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (ai->requires_grad) accumulate(*ai, i, g[i]);
      if (bi->requires_grad) accumulate(*bi, i, g[i]);
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto ai = a.impl(), bi = b.impl();
  std::vector<double> out(ai->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ai->data[i] - bi->data[i];
  return TensorAccess::result(ai->shape, std::move(out), {ai, bi}, [ai, bi](const std::vector<double>& g) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (ai->requires_grad) accumulate(*ai, i, g[i]);
      if (bi->requires_grad) accumulate(*bi, i, -g[i]);
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto ai = a.impl(), bi = b.impl();
  std::vector<double> out(ai->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ai->data[i] * bi->data[i];
  return TensorAccess::result(ai->shape, std::move(out), {ai, bi}, [ai, bi](const std::vector<double>& g) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (ai->requires_grad) accumulate(*ai, i, g[i] * bi->data[i]);
      if (bi->requires_grad) accumulate(*bi, i, g[i] * ai->data[i]);
    }
  });
}

Tensor add_row(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_row");
  const std::size_t n = x.dim(0), m = x.dim(1);
  if (bias.numel() != m) {
    throw DimensionError("add_row: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
  }
  auto xi = x.impl(), bi = bias.impl();
  std::vector<double> out(xi->data);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] += bi->data[c];
  return TensorAccess::result(xi->shape, std::move(out), {xi, bi}, [xi, bi, n, m](const std::vector<double>& g) {
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < m; ++c) {
        if (xi->requires_grad) accumulate(*xi, r * m + c, g[r * m + c]);
        if (bi->requires_grad) accumulate(*bi, c, g[r * m + c]);
      }
    }
  });
}

Tensor add_channel(const Tensor& x, const Tensor& bias) {
  require_rank(x, 4, "add_channel");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (bias.numel() != c) {
    throw DimensionError("add_channel: bias " + shape_str(bias.shape()) + " does not match " +
                         shape_str(x.shape()));
  }
  auto xi = x.impl(), bi = bias.impl();
  std::vector<double> out(xi->data);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) out[(s * c + ch) * hw + p] += bi->data[ch];
  return TensorAccess::result(xi->shape, std::move(out), {xi, bi}, [xi, bi, n, c, hw](const std::vector<double>& g) {
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t p = 0; p < hw; ++p) {
          const std::size_t i = (s * c + ch) * hw + p;
          if (xi->requires_grad) accumulate(*xi, i, g[i]);
          if (bi->requires_grad) accumulate(*bi, ch, g[i]);
        }
      }
    }
  });
}

Tensor scale(const Tensor& t, double factor) {
  return unary(t, [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& t, double value) {
  return unary(t, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& t) { return scale(t, -1.0); }

Tensor square(const Tensor& t) {
  return unary(t, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor abs(const Tensor& t) {
  return unary(
      t, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor sum(const Tensor& t) {
  auto x = t.impl();
  double s = 0.0;
  for (double v : x->data) s += v;
  return TensorAccess::result({1}, {s}, {x}, [x](const std::vector<double>& g) {
    for (std::size_t i = 0; i < x->data.size(); ++i) accumulate(*x, i, g[0]);
  });
}

Tensor mean(const Tensor& t) { return scale(sum(t), 1.0 / static_cast<double>(t.numel())); }

Tensor row_sum(const Tensor& t) {
  require_rank(t, 2, "row_sum");
  const std::size_t n = t.dim(0), m = t.dim(1);
  auto x = t.impl();
  std::vector<double> out(n, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) out[r] += x->data[r * m + c];
  return TensorAccess::result({n, 1}, std::move(out), {x}, [x, n, m](const std::vector<double>& g) {
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < m; ++c) accumulate(*x, r * m + c, g[r]);
  });
}

Tensor reshape(const Tensor& t, const Shape& shape) {
  if (shape_numel(shape) != t.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(t.shape()) + " as " + shape_str(shape));
  }
  auto x = t.impl();
  return TensorAccess::result(shape, x->data, {x}, [x](const std::vector<double>& g) {
    for (std::size_t i = 0; i < g.size(); ++i) accumulate(*x, i, g[i]);
  });
}

Tensor flatten(const Tensor& t) {
  const std::size_t n = t.dim(0);
  return reshape(t, {n, t.numel() / n});
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t cols = parts.front().numel() / parts.front().dim(0);
  std::size_t rows = 0;
  std::vector<ImplPtr> inputs;
  std::vector<double> out;
  for (const auto& p : parts) {
    if (p.numel() / p.dim(0) != cols) {
      throw DimensionError("concat_rows: row width mismatch " + shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()));
    }
    rows += p.dim(0);
    inputs.push_back(p.impl());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Shape shape = parts.front().shape();
  shape[0] = rows;
  return TensorAccess::result(shape, std::move(out), inputs, [inputs](const std::vector<double>& g) {
    std::size_t offset = 0;
    for (const auto& in : inputs) {
      if (in->requires_grad) {
        for (std::size_t i = 0; i < in->data.size(); ++i) accumulate(*in, i, g[offset + i]);
      }
      offset += in->data.size();
    }
  });
}

Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
  if (begin >= end || end > t.dim(0)) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for " + shape_str(t.shape()));
  }
  const std::size_t cols = t.numel() / t.dim(0);
  auto x = t.impl();
  std::vector<double> out(x->data.begin() + begin * cols, x->data.begin() + end * cols);
  Shape shape = x->shape;
  shape[0] = end - begin;
  return TensorAccess::result(shape, std::move(out), {x}, [x, begin, cols](const std::vector<double>& g) {
    for (std::size_t i = 0; i < g.size(); ++i) accumulate(*x, begin * cols + i, g[i]);
  });
}

Tensor relu(const Tensor& t) {
  return unary(t, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& t) {
  // Kept strictly inside (0, 1) even where exp under/overflows.
  constexpr double lo = std::numeric_limits<double>::min();
  const double hi = std::nextafter(1.0, 0.0);
  return unary(
      t,
      [lo, hi](double x) {
        double y = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        return std::clamp(y, lo, hi);
      },
      [](double, double y) { return y * (1.0 - y); });
}

namespace {

void require_temperature(double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ConfigError("softmax temperature must be positive, got " + std::to_string(temperature));
  }
}

}  // namespace

Tensor softmax(const Tensor& t, double temperature) {
  require_temperature(temperature);
  require_rank(t, 2, "softmax");
  const std::size_t n = t.dim(0), c = t.dim(1);
  auto x = t.impl();
  std::vector<double> out(n * c);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = &x->data[r * c];
    double mx = *std::max_element(row, row + c) / temperature;
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += out[r * c + j] = std::exp(row[j] / temperature - mx);
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] /= z;
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return TensorAccess::result({n, c}, std::move(out), {x}, [x, y, n, c, temperature](const std::vector<double>& g) {
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * (*y)[r * c + j];
      for (std::size_t j = 0; j < c; ++j) {
        accumulate(*x, r * c + j, (*y)[r * c + j] * (g[r * c + j] - dot) / temperature);
      }
    }
  });
}

Tensor log_softmax(const Tensor& t, double temperature) {
  require_temperature(temperature);
  require_rank(t, 2, "log_softmax");
  const std::size_t n = t.dim(0), c = t.dim(1);
  auto x = t.impl();
  std::vector<double> out(n * c);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = &x->data[r * c];
    double mx = *std::max_element(row, row + c) / temperature;
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] / temperature - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = row[j] / temperature - lz;
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return TensorAccess::result({n, c}, std::move(out), {x}, [x, y, n, c, temperature](const std::vector<double>& g) {
    for (std::size_t r = 0; r < n; ++r) {
      double gsum = 0.0;
      for (std::size_t j = 0; j < c; ++j) gsum += g[r * c + j];
      for (std::size_t j = 0; j < c; ++j) {
        accumulate(*x, r * c + j, (g[r * c + j] - std::exp((*y)[r * c + j]) * gsum) / temperature);
      }
    }
  });
}

Tensor clamp(const Tensor& t, double lo, double hi) {
  return unary(
      t, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor log(const Tensor& t, double floor) {
  return unary(
      t, [floor](double x) { return std::log(std::max(x, floor)); },
      [floor](double x, double) { return x >= floor ? 1.0 / x : 0.0; });
}

std::size_t conv_output_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  require_rank(input, 4, "conv2d");
  require_rank(kernel, 4, "conv2d");
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t f = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != c) {
    throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) + " expects " + std::to_string(kernel.dim(1)) +
                         " channels, input " + shape_str(input.shape()) + " has " + std::to_string(c));
  }
  if (kh > h + 2 * padding || kw > w + 2 * padding) {
    throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) + " larger than padded input " +
                         shape_str(input.shape()) + " with padding " + std::to_string(padding));
  }
  const std::size_t oh = conv_output_size(h, kh, stride, padding);
  const std::size_t ow = conv_output_size(w, kw, stride, padding);
  auto xi = input.impl(), ki = kernel.impl();
  const auto pad = static_cast<std::ptrdiff_t>(padding);

  // Visits every (output, input, kernel) index triple that touches real input.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t fo = 0; fo < f; ++fo)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::size_t oi = ((s * f + fo) * oh + oy) * ow + ox;
            for (std::size_t ch = 0; ch < c; ++ch)
              for (std::size_t ky = 0; ky < kh; ++ky) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                  const std::size_t ii = ((s * c + ch) * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix);
                  const std::size_t ki_ = ((fo * c + ch) * kh + ky) * kw + kx;
                  fn(oi, ii, ki_);
                }
              }
          }
  };

  std::vector<double> out(n * f * oh * ow, 0.0);
  for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t k) { out[oi] += xi->data[ii] * ki->data[k]; });
  return TensorAccess::result({n, f, oh, ow}, std::move(out), {xi, ki}, [xi, ki, for_each_tap](const std::vector<double>& g) {
    const bool gx = xi->requires_grad, gk = ki->requires_grad;
    for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t k) {
      if (gx) xi->grad[ii] += g[oi] * ki->data[k];
      if (gk) ki->grad[k] += g[oi] * xi->data[ii];
    });
  });
}

Tensor avg_pool2d(const Tensor& input, std::size_t kernel, std::size_t stride) {
  require_rank(input, 4, "avg_pool2d");
  if (kernel == 0 || stride == 0) throw ConfigError("avg_pool2d: kernel and stride must be positive");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (kernel > h || kernel > w) {
    throw DimensionError("avg_pool2d: window " + std::to_string(kernel) + " larger than input " +
                         shape_str(input.shape()));
  }
  const std::size_t oh = conv_output_size(h, kernel, stride, 0);
  const std::size_t ow = conv_output_size(w, kernel, stride, 0);
  const double inv = 1.0 / static_cast<double>(kernel * kernel);
  auto xi = input.impl();
  std::vector<double> out(n * c * oh * ow, 0.0);
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::size_t ky = 0; ky < kernel; ++ky)
          for (std::size_t kx = 0; kx < kernel; ++kx) acc += xi->data[(p * h + oy * stride + ky) * w + ox * stride + kx];
        out[(p * oh + oy) * ow + ox] = acc * inv;
      }
  return TensorAccess::result({n, c, oh, ow}, std::move(out), {xi},
                              [xi, n, c, h, w, oh, ow, kernel, stride, inv](const std::vector<double>& g) {
                                for (std::size_t p = 0; p < n * c; ++p)
                                  for (std::size_t oy = 0; oy < oh; ++oy)
                                    for (std::size_t ox = 0; ox < ow; ++ox) {
                                      const double go = g[(p * oh + oy) * ow + ox] * inv;
                                      for (std::size_t ky = 0; ky < kernel; ++ky)
                                        for (std::size_t kx = 0; kx < kernel; ++kx)
                                          xi->grad[(p * h + oy * stride + ky) * w + ox * stride + kx] += go;
                                    }
                              });
}

Tensor global_avg_pool(const Tensor& input) {
  require_rank(input, 4, "global_avg_pool");
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  const double inv = 1.0 / static_cast<double>(hw);
  auto xi = input.impl();
  std::vector<double> out(n * c, 0.0);
  for (std::size_t p = 0; p < n * c; ++p) {
    double acc = 0.0;
    for (std::size_t q = 0; q < hw; ++q) acc += xi->data[p * hw + q];
    out[p] = acc * inv;
  }
  return TensorAccess::result({n, c}, std::move(out), {xi}, [xi, n, c, hw, inv](const std::vector<double>& g) {
    for (std::size_t p = 0; p < n * c; ++p)
      for (std::size_t q = 0; q < hw; ++q) xi->grad[p * hw + q] += g[p] * inv;
  });
}

Tensor dropout(const Tensor& t, double rate, Mode mode, std::mt19937_64* rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  if (mode == Mode::eval || rate == 0.0) return t;
  if (rng == nullptr) throw ContractError("train-mode dropout needs a random generator");
  auto x = t.impl();
  const double keep_scale = 1.0 / (1.0 - rate);
  std::bernoulli_distribution keep(1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(x->data.size());
  std::vector<double> out(x->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = keep(*rng) ? keep_scale : 0.0;
    out[i] = x->data[i] * (*mask)[i];
  }
  return TensorAccess::result(x->shape, std::move(out), {x}, [x, mask](const std::vector<double>& g) {
    for (std::size_t i = 0; i < g.size(); ++i) accumulate(*x, i, g[i] * (*mask)[i]);
  });
}

}  // namespace advdistill
