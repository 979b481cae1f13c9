#include "semtok/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace semtok {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

std::atomic<std::uint64_t> g_next_id{1};

std::shared_ptr<detail::Node> make_node(Shape shape, std::vector<double> data) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

// Wraps forward output; attaches history only when some input needs a gradient.
Tensor finish(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
              std::function<void(detail::Node&)> backward) {
  auto node = make_node(std::move(shape), std::move(data));
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    node->requires_grad = true;
    for (auto& in : inputs) node->parents.push_back(in.node());
    node->backward_fn = std::move(backward);
  }
  return Tensor(std::move(node));
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor");
}

std::size_t row_count(const Shape& s) {
  if (s.empty()) return 1;
  std::size_t rows = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) rows *= s[i];
  return rows;
}

std::size_t last_extent(const Shape& s) { return s.empty() ? 1 : s.back(); }

// Broadcast bookkeeping for binary elementwise ops.
struct Broadcast {
  Shape out;
  // When both are empty, an operand of size n_a (n_b) repeats cyclically
  // along the output; the general case stores explicit offsets.
  std::vector<std::size_t> a_offset;
  std::vector<std::size_t> b_offset;
  std::size_t a_period = 0;
  std::size_t b_period = 0;

  std::size_t a_at(std::size_t i) const { return a_offset.empty() ? i % a_period : a_offset[i]; }
  std::size_t b_at(std::size_t i) const { return b_offset.empty() ? i % b_period : b_offset[i]; }
};

// True when `small` left-padded with 1s equals the trailing axes of `big`.
bool is_suffix_of(const Shape& small, const Shape& big) {
  std::size_t lead = 0;
  while (lead < small.size() && small[lead] == 1) ++lead;
  const std::size_t rest = small.size() - lead;
  if (rest > big.size()) return false;
  return std::equal(small.begin() + lead, small.end(), big.end() - rest);
}

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

Broadcast plan_broadcast(const Shape& sa, const Shape& sb, const char* op) {
  Broadcast plan;
  if (sa == sb || (is_suffix_of(sb, sa) && sa.size() >= sb.size())) {
    plan.out = sa;
    plan.a_period = shape_numel(sa);
    plan.b_period = shape_numel(sb);
    return plan;
  }
  if (is_suffix_of(sa, sb) && sb.size() >= sa.size()) {
    plan.out = sb;
    plan.a_period = shape_numel(sa);
    plan.b_period = shape_numel(sb);
    return plan;
  }
  const std::size_t r = std::max(sa.size(), sb.size());
  Shape pa(r - sa.size(), 1), pb(r - sb.size(), 1);
  pa.insert(pa.end(), sa.begin(), sa.end());
  pb.insert(pb.end(), sb.begin(), sb.end());
  plan.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] == pb[i] || pb[i] == 1) {
      plan.out[i] = pa[i];
    } else if (pa[i] == 1) {
      plan.out[i] = pb[i];
    } else {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(sa) + " with " +
                           shape_str(sb));
    }
  }
  const auto sta = strides_of(pa), stb = strides_of(pb);
  const std::size_t n = shape_numel(plan.out);
  plan.a_offset.resize(n);
  plan.b_offset.resize(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t lin = 0; lin < n; ++lin) {
    plan.a_offset[lin] = oa;
    plan.b_offset[lin] = ob;
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      if (pa[ax] != 1) oa += sta[ax];
      if (pb[ax] != 1) ob += stb[ax];
      if (idx[ax] < plan.out[ax]) break;
      if (pa[ax] != 1) oa -= sta[ax] * idx[ax];
      if (pb[ax] != 1) ob -= stb[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  return plan;
}

template <class Fn>
Tensor unary(const Tensor& x, Fn&& fn, std::function<void(detail::Node&)> backward) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fn(in[i]);
  return finish(x.shape(), std::move(out), {x}, std::move(backward));
}

}  // namespace

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

std::vector<double>& detail::Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  auto node = make_node(std::move(shape), std::vector<double>(n, value));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("Tensor::from: shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto node = make_node(std::move(shape), std::move(values));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_str(node_->shape));
  }
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->data.size(); }

std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw DimensionError("at(): rank mismatch for " + shape_str(s));
  std::size_t off = 0, ax = 0;
  for (std::size_t i : index) {
    if (i >= s[ax]) throw DimensionError("at(): index out of range for " + shape_str(s));
    off = off * s[ax] + i;
    ++ax;
  }
  return node_->data[off];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool value) { node_->requires_grad = value; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
std::span<double> Tensor::mutable_grad() { return node_->grad_buffer(); }
void Tensor::zero_grad() { node_->grad.clear(); }

void Tensor::backward() const {
  if (numel() != 1) {
    throw DimensionError("backward() requires a single-element tensor, got " +
                         shape_str(shape()));
  }
  if (!requires_grad()) return;

  // Tape: every reachable node that carries history, in creation order.
  std::vector<detail::Node*> tape;
  std::unordered_set<const detail::Node*> seen;
  std::vector<detail::Node*> stack{node_.get()};
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    tape.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad) stack.push_back(p.get());
    }
  }
  std::sort(tape.begin(), tape.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });

  node_->grad_buffer()[0] += 1.0;
  for (detail::Node* n : tape) {
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

Tensor Tensor::detach() const {
  return Tensor(make_node(shape(), node_->data));
}

Tensor Tensor::clone() const {
  auto node = make_node(shape(), node_->data);
  node->requires_grad = node_->requires_grad;
  return Tensor(std::move(node));
}

Mask Mask::from(Shape shape, std::vector<std::uint8_t> values) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("Mask::from: shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  return Mask{std::move(shape), std::move(values)};
}

// ---------------------------------------------------------------------------
// Products

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MutMap(out.data(), m, n).noalias() =
      ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  return finish({a.dim(0), b.dim(1)}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    ConstMap g(self.grad.data(), m, n);
    if (pa.requires_grad) {
      MutMap(pa.grad_buffer().data(), m, k).noalias() +=
          g * ConstMap(pb.data.data(), k, n).transpose();
    }
    if (pb.requires_grad) {
      MutMap(pb.grad_buffer().data(), k, n).noalias() +=
          ConstMap(pa.data.data(), m, k).transpose() * g;
    }
  });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  require_defined(a, "bmm");
  require_defined(b, "bmm");
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != (transpose_b ? b.dim(2) : b.dim(1))) {
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + (transpose_b ? " (transposed)" : ""));
  }
  const std::size_t batch = a.dim(0);
  const auto m = static_cast<Eigen::Index>(a.dim(1));
  const auto k = static_cast<Eigen::Index>(a.dim(2));
  const auto n = static_cast<Eigen::Index>(transpose_b ? b.dim(1) : b.dim(2));
  const std::size_t sa = m * k, sb = k * n, sc = m * n;
  std::vector<double> out(batch * sc);
  for (std::size_t i = 0; i < batch; ++i) {
    MutMap c(out.data() + i * sc, m, n);
    ConstMap ai(a.data().data() + i * sa, m, k);
    if (transpose_b) {
      c.noalias() = ai * ConstMap(b.data().data() + i * sb, n, k).transpose();
    } else {
      c.noalias() = ai * ConstMap(b.data().data() + i * sb, k, n);
    }
  }
  return finish({batch, std::size_t(m), std::size_t(n)}, std::move(out), {a, b},
                [=](detail::Node& self) {
                  auto& pa = *self.parents[0];
                  auto& pb = *self.parents[1];
                  double* ga = pa.requires_grad ? pa.grad_buffer().data() : nullptr;
                  double* gb = pb.requires_grad ? pb.grad_buffer().data() : nullptr;
                  for (std::size_t i = 0; i < batch; ++i) {
                    ConstMap g(self.grad.data() + i * sc, m, n);
                    ConstMap ai(pa.data.data() + i * sa, m, k);
                    if (transpose_b) {
                      ConstMap bi(pb.data.data() + i * sb, n, k);
                      if (ga) MutMap(ga + i * sa, m, k).noalias() += g * bi;
                      if (gb) MutMap(gb + i * sb, n, k).noalias() += g.transpose() * ai;
                    } else {
                      ConstMap bi(pb.data.data() + i * sb, k, n);
                      if (ga) MutMap(ga + i * sa, m, k).noalias() += g * bi.transpose();
                      if (gb) MutMap(gb + i * sb, k, n).noalias() += ai.transpose() * g;
                    }
                  }
                });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

enum class BinOp { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  require_defined(a, name);
  require_defined(b, name);
  auto plan = std::make_shared<Broadcast>(plan_broadcast(a.shape(), b.shape(), name));
  const std::size_t n = shape_numel(plan->out);
  const auto da = a.data(), db = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = da[plan->a_at(i)];
    const double y = db[plan->b_at(i)];
    switch (op) {
      case BinOp::Add: out[i] = x + y; break;
      case BinOp::Sub: out[i] = x - y; break;
      case BinOp::Mul: out[i] = x * y; break;
    }
  }
  return finish(plan->out, std::move(out), {a, b}, [plan, op, n](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& g = self.grad;
    if (pa.requires_grad) {
      auto& ga = pa.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const double scale = op == BinOp::Mul ? pb.data[plan->b_at(i)] : 1.0;
        ga[plan->a_at(i)] += g[i] * scale;
      }
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        double scale = 1.0;
        if (op == BinOp::Sub) scale = -1.0;
        if (op == BinOp::Mul) scale = pa.data[plan->a_at(i)];
        gb[plan->b_at(i)] += g[i] * scale;
      }
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul, "mul"); }

Tensor scale(const Tensor& x, double factor) {
  return unary(x, [factor](double v) { return v * factor; }, [factor](detail::Node& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](detail::Node& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.data[i];
  });
}

Tensor ln(const Tensor& x) {
  return unary(x, [](double v) { return std::log(v); }, [](detail::Node& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / p.data[i];
  });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](detail::Node& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (p.data[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

Tensor clamp_max(const Tensor& x, double upper) {
  return unary(x, [upper](double v) { return std::min(v, upper); }, [upper](detail::Node& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (p.data[i] < upper) g[i] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and row-wise ops

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return finish({}, {acc}, {x}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (double& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  require_defined(x, "mean");
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor layer_norm(const Tensor& x, double eps) {
  require_defined(x, "layer_norm");
  const std::size_t rows = row_count(x.shape()), n = last_extent(x.shape());
  const auto in = x.data();
  std::vector<double> out(in.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = (row[j] - mu) * is;
  }
  return finish(x.shape(), std::move(out), {x}, [rows, n, inv_std](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * n;
      const double* dy = self.grad.data() + r * n;
      double mdy = 0.0, mdyy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        mdy += dy[j];
        mdyy += dy[j] * y[j];
      }
      mdy /= static_cast<double>(n);
      mdyy /= static_cast<double>(n);
      for (std::size_t j = 0; j < n; ++j) {
        g[r * n + j] += (*inv_std)[r] * (dy[j] - mdy - y[j] * mdyy);
      }
    }
  });
}

Tensor cumsum_lastdim(const Tensor& x) {
  require_defined(x, "cumsum_lastdim");
  const std::size_t rows = row_count(x.shape()), n = last_extent(x.shape());
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      acc += in[r * n + j];
      out[r * n + j] = acc;
    }
  }
  return finish(x.shape(), std::move(out), {x}, [rows, n](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (std::size_t j = n; j-- > 0;) {
        acc += self.grad[r * n + j];
        g[r * n + j] += acc;
      }
    }
  });
}

Tensor normalize_rows(const Tensor& x) {
  require_defined(x, "normalize_rows");
  const std::size_t rows = row_count(x.shape()), n = last_extent(x.shape());
  const auto in = x.data();
  std::vector<double> out(in.size());
  auto norms = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (std::size_t j = 0; j < n; ++j) sq += in[r * n + j] * in[r * n + j];
    const double nrm = std::sqrt(sq);
    if (nrm == 0.0) throw std::domain_error("normalize_rows: zero-norm row " + std::to_string(r));
    (*norms)[r] = nrm;
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = in[r * n + j] / nrm;
  }
  return finish(x.shape(), std::move(out), {x}, [rows, n, norms](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * n;
      const double* dy = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += (dy[j] - y[j] * dot) / (*norms)[r];
    }
  });
}

Tensor softmax_lastdim(const Tensor& x, const Mask* mask) {
  require_defined(x, "softmax_lastdim");
  const std::size_t rows = row_count(x.shape()), n = last_extent(x.shape());
  std::size_t mask_rows = 0;
  if (mask) {
    const std::size_t mlast = mask->shape.empty() ? 1 : mask->shape.back();
    mask_rows = row_count(mask->shape);
    if (mlast != n || mask_rows == 0 || rows % mask_rows != 0) {
      throw DimensionError("softmax_lastdim: mask " + shape_str(mask->shape) +
                           " not broadcastable to " + shape_str(x.shape()));
    }
  }
  const std::size_t block = mask ? rows / mask_rows : rows;
  const auto in = x.data();
  std::vector<double> out(in.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::uint8_t* valid = mask ? mask->values.data() + (r / block) * n : nullptr;
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (!valid || valid[j]) {
        mx = any ? std::max(mx, in[r * n + j]) : in[r * n + j];
        any = true;
      }
    }
    if (!any) {
      throw std::domain_error("softmax_lastdim: row " + std::to_string(r) +
                              " has no unmasked entry");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!valid || valid[j]) {
        out[r * n + j] = std::exp(in[r * n + j] - mx);
        z += out[r * n + j];
      }
    }
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= z;
  }
  return finish(x.shape(), std::move(out), {x}, [rows, n](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * n;
      const double* dy = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (dy[j] - dot);
    }
  });
}

Tensor log_softmax_lastdim(const Tensor& x) {
  require_defined(x, "log_softmax_lastdim");
  const std::size_t rows = row_count(x.shape()), n = last_extent(x.shape());
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const double lz = std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = row[j] - mx - lz;
  }
  return finish(x.shape(), std::move(out), {x}, [rows, n](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * n;
      const double* dy = self.grad.data() + r * n;
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) total += dy[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += dy[j] - std::exp(y[j]) * total;
    }
  });
}

// ---------------------------------------------------------------------------
// Layout ops

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw DimensionError("concat: axis out of range for " + shape_str(ref));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == ref[i];
    if (!ok) {
      throw DimensionError("concat: shape " + shape_str(s) + " incompatible with " +
                           shape_str(ref) + " along axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
  const std::size_t out_row = out_shape[axis] * inner;
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t chunk = p.shape()[axis] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().data() + o * chunk, chunk, out.data() + o * out_row + off);
    }
    off += chunk;
  }
  return finish(out_shape, std::move(out), parts,
                [outer, inner, out_row, offsets, axis](detail::Node& self) {
                  for (std::size_t k = 0; k < self.parents.size(); ++k) {
                    auto& p = *self.parents[k];
                    if (!p.requires_grad) continue;
                    auto& g = p.grad_buffer();
                    const std::size_t chunk = p.shape[axis] * inner;
                    for (std::size_t o = 0; o < outer; ++o) {
                      for (std::size_t j = 0; j < chunk; ++j) {
                        g[o * chunk + j] += self.grad[o * out_row + offsets[k] + j];
                      }
                    }
                  }
                });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  require_defined(x, "slice");
  const Shape& s = x.shape();
  if (axis >= s.size() || begin > end || end > s[axis]) {
    throw DimensionError("slice: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") on axis " + std::to_string(axis) + " of " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  const std::size_t in_row = s[axis] * inner, chunk = (end - begin) * inner,
                    start = begin * inner;
  std::vector<double> out(outer * chunk);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.data().data() + o * in_row + start, chunk, out.data() + o * chunk);
  }
  return finish(out_shape, std::move(out), {x}, [=](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t j = 0; j < chunk; ++j) g[o * in_row + start + j] += self.grad[o * chunk + j];
    }
  });
}

Tensor transpose(const Tensor& x) {
  require_defined(x, "transpose");
  if (x.rank() != 2) throw DimensionError("transpose: expected 2-D, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return finish(std::move(shape), std::move(out), {x}, [](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  require_defined(x, "permute");
  const Shape& s = x.shape();
  const std::size_t r = s.size();
  std::vector<bool> used(r, false);
  bool ok = order.size() == r;
  for (std::size_t i = 0; ok && i < r; ++i) {
    ok = order[i] < r && !used[order[i]];
    if (ok) used[order[i]] = true;
  }
  if (!ok) throw DimensionError("permute: invalid axis order for " + shape_str(s));

  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = s[order[i]];
  const auto in_strides = strides_of(s);
  // source offset for every output element, in output order
  auto src = std::make_shared<std::vector<std::size_t>>(x.numel());
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t lin = 0; lin < src->size(); ++lin) {
    (*src)[lin] = off;
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      off += in_strides[order[ax]];
      if (idx[ax] < out_shape[ax]) break;
      off -= in_strides[order[ax]] * idx[ax];
      idx[ax] = 0;
    }
  }
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[(*src)[i]];
  return finish(out_shape, std::move(out), {x}, [src](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < src->size(); ++i) g[(*src)[i]] += self.grad[i];
  });
}

Tensor diagonal(const Tensor& x) {
  require_defined(x, "diagonal");
  if (x.rank() != 2 || x.dim(0) != x.dim(1)) {
    throw DimensionError("diagonal: expected square 2-D, got " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = x.data()[i * n + i];
  return finish({n}, std::move(out), {x}, [n](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) g[i * n + i] += self.grad[i];
  });
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
  require_defined(table, "embedding");
  if (table.rank() != 2) {
    throw DimensionError("embedding: table must be 2-D, got " + shape_str(table.shape()));
  }
  const std::size_t rows = table.dim(0), width = table.dim(1);
  auto index = std::make_shared<std::vector<std::size_t>>(ids.begin(), ids.end());
  std::vector<double> out(index->size() * width);
  for (std::size_t i = 0; i < index->size(); ++i) {
    if ((*index)[i] >= rows) {
      throw DimensionError("embedding: id " + std::to_string((*index)[i]) + " >= " +
                           std::to_string(rows));
    }
    std::copy_n(table.data().data() + (*index)[i] * width, width, out.data() + i * width);
  }
  return finish({index->size(), width}, std::move(out), {table}, [index, width](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < index->size(); ++i) {
      for (std::size_t j = 0; j < width; ++j) g[(*index)[i] * width + j] += self.grad[i * width + j];
    }
  });
}

Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows) {
  return embedding(x, rows);
}

Tensor take_nonzero(const Tensor& table, std::span<const std::uint8_t> index, Shape out_shape) {
  require_defined(table, "take_nonzero");
  if (table.rank() != 1 || shape_numel(out_shape) != index.size()) {
    throw DimensionError("take_nonzero: table " + shape_str(table.shape()) + ", index size " +
                         std::to_string(index.size()) + ", output " + shape_str(out_shape));
  }
  auto idx = std::make_shared<std::vector<std::uint8_t>>(index.begin(), index.end());
  std::vector<double> out(idx->size(), 0.0);
  for (std::size_t i = 0; i < idx->size(); ++i) {
    const std::uint8_t k = (*idx)[i];
    if (k >= table.numel()) {
      throw DimensionError("take_nonzero: index " + std::to_string(k) + " >= " +
                           std::to_string(table.numel()));
    }
    if (k != 0) out[i] = table.data()[k];
  }
  return finish(std::move(out_shape), std::move(out), {table}, [idx](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < idx->size(); ++i) {
      if ((*idx)[i] != 0) g[(*idx)[i]] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                           double step, double tol, double floor) {
  GradCheckReport report;
  for (auto& p : params) p.zero_grad();
  f().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.numel(), 0.0);
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = f().item();
      values[i] = saved - step;
      const double down = f().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[k][i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), floor});
      ++report.coordinates;
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel >= report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = std::to_string(k) + "[" + std::to_string(i) + "]";
      }
    }
  }
  for (auto& p : params) p.zero_grad();
  report.passed = report.max_rel_error < tol;
  return report;
}

}  // namespace semtok
