#pragma once

#include <Eigen/Dense>
#include <functional>
#include <limits>
#include <sstream>
#include <utility>

#include "canon3d/common.hpp"

namespace canon3d {

// Storage for tensor payloads. Keeping every buffer at Eigen's maximum
// packet alignment pins the vectorized kernels to one code path per
// shape, so results never depend on where the allocator happened to
// place the data.
using AlignedDoubles = std::vector<double, Eigen::aligned_allocator<double>>;

// Dense row-major float64 matrix. Vectors are n x 1 or 1 x n; scalars 1 x 1.
struct Tensor {
  int rows = 0, cols = 0;
  AlignedDoubles v;

  Tensor() = default;
  Tensor(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0.0) {}

  static Tensor zeros(int r, int c) { return Tensor(r, c); }
  static Tensor scalar(double x) {
    Tensor t(1, 1);
    t.v[0] = x;
    return t;
  }

  double& at(int i, int j) { return v[static_cast<size_t>(i) * cols + j]; }
  double at(int i, int j) const { return v[static_cast<size_t>(i) * cols + j]; }
  size_t size() const { return v.size(); }
  bool empty() const { return v.empty(); }
};

using EigenMap = Eigen::Map<
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstEigenMap = Eigen::Map<
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline EigenMap as_eigen(Tensor& t) { return EigenMap(t.v.data(), t.rows, t.cols); }
inline ConstEigenMap as_eigen(const Tensor& t) {
  return ConstEigenMap(t.v.data(), t.rows, t.cols);
}

// Reverse-mode differentiation graph. Nodes are appended in evaluation
// order (so creation order is already a topological order); backward
// walks the node list once in reverse.
class Graph {
 public:
  int leaf(Tensor t, bool requires_grad) {
    nodes_.push_back(Node{std::move(t), Tensor(), requires_grad, {}});
    return static_cast<int>(nodes_.size()) - 1;
  }
  int constant(Tensor t) { return leaf(std::move(t), false); }

  const Tensor& val(int id) const { return nodes_[id].val; }
  int rows(int id) const { return nodes_[id].val.rows; }
  int cols(int id) const { return nodes_[id].val.cols; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  Tensor& grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor::zeros(n.val.rows, n.val.cols);
    return n.grad;
  }

  void backward(int loss_id) {
    const Tensor& l = nodes_[loss_id].val;
    check(l.rows == 1 && l.cols == 1, "backward: loss must be scalar");
    grad(loss_id).v[0] = 1.0;
    for (int id = loss_id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward();
    }
  }

  size_t node_count() const { return nodes_.size(); }

  // ---- op helpers -------------------------------------------------------

  int binary_pointwise(const char* name, int a, int b,
                       double (*fwd)(double, double),
                       void (*bwd)(double, double, double, double&, double&)) {
    same_shape(name, a, b);
    Tensor out(rows(a), cols(a));
    const Tensor &ta = val_(a), &tb = val_(b);
    for (size_t i = 0; i < out.size(); ++i) out.v[i] = fwd(ta.v[i], tb.v[i]);
    int id = result(std::move(out), {a, b});
    if (requires_grad(id))
      nodes_[id].backward = [this, id, a, b, bwd] {
        const Tensor& g = nodes_[id].grad;
        const Tensor &ta = val_(a), &tb = val_(b);
        Tensor &ga = grad(a), &gb = grad(b);
        for (size_t i = 0; i < g.size(); ++i)
          bwd(ta.v[i], tb.v[i], g.v[i], ga.v[i], gb.v[i]);
      };
    return id;
  }

  int add(int a, int b) {
    return binary_pointwise(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double, double g, double& gx, double& gy) {
          gx += g;
          gy += g;
        });
  }

  int sub(int a, int b) {
    return binary_pointwise(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double, double g, double& gx, double& gy) {
          gx += g;
          gy -= g;
        });
  }

  int mul(int a, int b) {
    return binary_pointwise(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double x, double y, double g, double& gx, double& gy) {
          gx += g * y;
          gy += g * x;
        });
  }

  int div(int a, int b) {
    return binary_pointwise(
        "div", a, b, [](double x, double y) { return x / y; },
        [](double x, double y, double g, double& gx, double& gy) {
          gx += g / y;
          gy -= g * x / (y * y);
        });
  }

  int scale(int a, double c) {
    Tensor out = val_(a);
    for (double& x : out.v) x *= c;
    int id = result(std::move(out), {a});
    if (requires_grad(id))
      nodes_[id].backward = [this, id, a, c] {
        const Tensor& g = nodes_[id].grad;
        Tensor& ga = grad(a);
        for (size_t i = 0; i < g.size(); ++i) ga.v[i] += c * g.v[i];
      };
    return id;
  }

  int add_scalar(int a, double c) {
    Tensor out = val_(a);
    for (double& x : out.v) x += c;
    int id = result(std::move(out), {a});
    if (requires_grad(id))
      nodes_[id].backward = [this, id, a] {
        const Tensor& g = nodes_[id].grad;
        Tensor& ga = grad(a);
        for (size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i];
      };
    return id;
  }

  int matmul(int a, int b) {
    check(cols(a) == rows(b), shape_msg("matmul", a, b));
    Tensor out(rows(a), cols(b));
    as_eigen(out).noalias() = as_eigen(val_(a)) * as_eigen(val_(b));
    int id = result(std::move(out), {a, b});
    if (requires_grad(id))
      nodes_[id].backward = [this, id, a, b] {
        const Tensor& g = nodes_[id].grad;
        if (requires_grad(a))
          as_eigen(grad(a)).noalias() += as_eigen(g) * as_eigen(val_(b)).transpose();
        if (requires_grad(b))
          as_eigen(grad(b)).noalias() += as_eigen(val_(a)).transpose() * as_eigen(g);
      };
    return id;
  }

  int transpose(int a) {
    Tensor out(cols(a), rows(a));
    as_eigen(out) = as_eigen(val_(a)).transpose();
    int id = result(std::move(out), {a});
    if (requires_grad(id))
      nodes_[id].backward = [this, id, a] {
        as_eigen(grad(a)) += as_eigen(nodes_[id].grad).transpose();
      };
    return id;
  }

  int concat_rows(const std::vector<int>& parts) {
    check(!parts.empty(), "concat_rows: empty input");
    int c = cols(parts[0]), r = 0;
    for (int p : parts) {
      check(cols(p) == c, shape_msg("concat_rows", parts[0], p));
      r += rows(p);
    }
    Tensor out(r, c);
    size_t off = 0;
    for (int p : parts) {
      const Tensor& t = val_(p);
      std::copy(t.v.begin(), t.v.end(), out.v.begin() + off);
      off += t.size();
    }
    int id = result(std::move(out), parts);
    if (requires_grad(id))
      nodes_[id].backward = [this, id, parts] {
        const Tensor& g = nodes_[id].grad;
        size_t off = 0;
        for (int p : parts) {
          size_t n = val_(p).size();
          if (requires_grad(p)) {
            Tensor& gp = grad(p);
            for (size_t i = 0; i < n; ++i) gp.v[i] += g.v[off + i];
          }
          off += n;
        }
      };
    return id;
  }

  int concat_cols(const std::vector<int>& parts) {
    check(!parts.empty(), "concat_cols: empty input");
    int r = rows(parts[0]), c = 0;
    for (int p : parts) {
      check(rows(p) == r, shape_msg("concat_cols", parts[0], p));
      c += cols(p);
    }
    Tensor out(r, c);
    int coff = 0;
    for (int p : parts) {
      const Tensor& t = val_(p);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < t.cols; ++j) out.at(i, coff + j) = t.at(i, j);
      coff += t.cols;
    }
    int id = result(std::move(out), parts);
    if (requires_grad(id))
      nodes_[id].backward = [this, id, parts, r] {
        const Tensor& g = nodes_[id].grad;
        int coff = 0;
        for (int p : parts) {
          int pc = val_(p).cols;
          if (requires_grad(p)) {
            Tensor& gp = grad(p);
            for (int i = 0; i < r; ++i)
              for (int j = 0; j < pc; ++j) gp.at(i, j) += g.at(i, coff + j);
          }
          coff += pc;
        }
      };
    return id;
  }

  int gather_rows(int a, std::vector<int> idx) {
    for (int i : idx)
      check(i >= 0 && i < rows(a), "gather_rows: index out of range");
    Tensor out(static_cast<int>(idx.size()), cols(a));
    const Tensor& t = val_(a);
    for (size_t i = 0; i < idx.size(); ++i)
      for (int j = 0; j < t.cols; ++j) out.at(static_cast<int>(i), j) = t.at(idx[i], j);
    int id = result(std::move(out), {a});
    if (requires_grad(id))
      nodes_[id].backward = [this, id, a, idx = std::move(idx)] {
        const Tensor& g = nodes_[id].grad;
        Tensor& ga = grad(a);
        for (size_t i = 0; i < idx.size(); ++i)
          for (int j = 0; j < g.cols; ++j)
            ga.at(idx[i], j) += g.at(static_cast<int>(i), j);
      };
    return id;
  }

  int row_sum(int a) { return row_reduce(a, false); }
  int row_mean(int a) { return row_reduce(a, true); }

  int col_sum(int a) {
    Tensor out(1, cols(a));
    const Tensor& t = val_(a);
    for (int i = 0; i < t.rows; ++i)
      for (int j = 0; j < t.cols; ++j) out.v[j] += t.at(i, j);
    int id = result(std::move(out), {a});
    if (requires_grad(id))
      nodes_[id].backward = [this, id, a] {
        const Tensor& g = nodes_[id].grad;
        Tensor& ga = grad(a);
        for (int i = 0; i < ga.rows; ++i)
          for (int j = 0; j < ga.cols; ++j) ga.at(i, j) += g.v[j];
      };
    return id;
  }

  int sum_all(int a) { return all_reduce(a, false); }
  int mean_all(int a) { return all_reduce(a, true); }

  // Per-row Euclidean norm: K x C -> K x 1.
  int rows_l2norm(int a) {
    Tensor out(rows(a), 1);
    const Tensor& t = val_(a);
    for (int i = 0; i < t.rows; ++i) {
      double s = 0;
      for (int j = 0; j < t.cols; ++j) s += t.at(i, j) * t.at(i, j);
      out.v[i] = std::sqrt(s);
    }
    int id = result(std::move(out), {a});
    if (requires_grad(id))
      nodes_[id].backward = [this, id, a] {
        const Tensor& g = nodes_[id].grad;
        const Tensor& t = val_(a);
        const Tensor& o = nodes_[id].val;
        Tensor& ga = grad(a);
        for (int i = 0; i < t.rows; ++i) {
          if (o.v[i] == 0.0) continue;  // subgradient 0 at the cone point
          double s = g.v[i] / o.v[i];
          for (int j = 0; j < t.cols; ++j) ga.at(i, j) += s * t.at(i, j);
        }
      };
    return id;
  }

  int squared_sum(int a) {
    double s = 0;
    for (double x : val_(a).v) s += x * x;
    int id = result(Tensor::scalar(s), {a});
    if (requires_grad(id))
      nodes_[id].backward = [this, id, a] {
        double g = nodes_[id].grad.v[0];
        const Tensor& t = val_(a);
        Tensor& ga = grad(a);
        for (size_t i = 0; i < t.size(); ++i) ga.v[i] += 2.0 * g * t.v[i];
      };
    return id;
  }

  int dot_all(int a, int b) {
    same_shape("dot_all", a, b);
    double s = 0;
    const Tensor &ta = val_(a), &tb = val_(b);
    for (size_t i = 0; i < ta.size(); ++i) s += ta.v[i] * tb.v[i];
    int id = result(Tensor::scalar(s), {a, b});
    if (requires_grad(id))
      nodes_[id].backward = [this, id, a, b] {
        double g = nodes_[id].grad.v[0];
        const Tensor &ta = val_(a), &tb = val_(b);
        if (requires_grad(a)) {
          Tensor& ga = grad(a);
          for (size_t i = 0; i < ta.size(); ++i) ga.v[i] += g * tb.v[i];
        }
        if (requires_grad(b)) {
          Tensor& gb = grad(b);
          for (size_t i = 0; i < tb.size(); ++i) gb.v[i] += g * ta.v[i];
        }
      };
    return id;
  }

  int abs_sum(int a) {
    double s = 0;
    for (double x : val_(a).v) s += std::abs(x);
    int id = result(Tensor::scalar(s), {a});
    if (requires_grad(id))
      nodes_[id].backward = [this, id, a] {
        double g = nodes_[id].grad.v[0];
        const Tensor& t = val_(a);
        Tensor& ga = grad(a);
        for (size_t i = 0; i < t.size(); ++i)
          ga.v[i] += g * (t.v[i] > 0 ? 1.0 : (t.v[i] < 0 ? -1.0 : 0.0));
      };
    return id;
  }

  int relu(int a) {
    Tensor out = val_(a);
    for (double& x : out.v) x = std::max(0.0, x);
    int id = result(std::move(out), {a});
    if (requires_grad(id))
      nodes_[id].backward = [this, id, a] {
        const Tensor& g = nodes_[id].grad;
        const Tensor& t = val_(a);
        Tensor& ga = grad(a);
        for (size_t i = 0; i < t.size(); ++i)
          if (t.v[i] > 0) ga.v[i] += g.v[i];
      };
    return id;
  }

  int clamp_min(int a, double lo) {
    Tensor out = val_(a);
    for (double& x : out.v) x = std::max(lo, x);
    int id = result(std::move(out), {a});
    if (requires_grad(id))
      nodes_[id].backward = [this, id, a, lo] {
        const Tensor& g = nodes_[id].grad;
        const Tensor& t = val_(a);
        Tensor& ga = grad(a);
        for (size_t i = 0; i < t.size(); ++i)
          if (t.v[i] > lo) ga.v[i] += g.v[i];
      };
    return id;
  }

  int sqrt_elem(int a) {
    Tensor out = val_(a);
    for (double& x : out.v) x = std::sqrt(x);
    int id = result(std::move(out), {a});
    if (requires_grad(id))
      nodes_[id].backward = [this, id, a] {
        const Tensor& g = nodes_[id].grad;
        const Tensor& o = nodes_[id].val;
        Tensor& ga = grad(a);
        for (size_t i = 0; i < o.size(); ++i)
          if (o.v[i] > 0) ga.v[i] += 0.5 * g.v[i] / o.v[i];
      };
    return id;
  }

  // Row-wise softmax with the full Jacobian-vector product in backward.
  int softmax_rows(int a) {
    Tensor out = val_(a);
    for (int i = 0; i < out.rows; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < out.cols; ++j) mx = std::max(mx, out.at(i, j));
      double z = 0;
      for (int j = 0; j < out.cols; ++j) {
        out.at(i, j) = std::exp(out.at(i, j) - mx);
        z += out.at(i, j);
      }
      for (int j = 0; j < out.cols; ++j) out.at(i, j) /= z;
    }
    int id = result(std::move(out), {a});
    if (requires_grad(id))
      nodes_[id].backward = [this, id, a] {
        const Tensor& g = nodes_[id].grad;
        const Tensor& s = nodes_[id].val;
        Tensor& ga = grad(a);
        for (int i = 0; i < s.rows; ++i) {
          double dot = 0;
          for (int j = 0; j < s.cols; ++j) dot += g.at(i, j) * s.at(i, j);
          for (int j = 0; j < s.cols; ++j)
            ga.at(i, j) += s.at(i, j) * (g.at(i, j) - dot);
        }
      };
    return id;
  }

  // Subtracts the column-wise mean (the centroid of a K x 3 cloud).
  int mean_center_rows(int a) {
    Tensor out = val_(a);
    const int r = out.rows, c = out.cols;
    for (int j = 0; j < c; ++j) {
      double m = 0;
      for (int i = 0; i < r; ++i) m += out.at(i, j);
      m /= r;
      for (int i = 0; i < r; ++i) out.at(i, j) -= m;
    }
    int id = result(std::move(out), {a});
    if (requires_grad(id))
      nodes_[id].backward = [this, id, a, r, c] {
        const Tensor& g = nodes_[id].grad;
        Tensor& ga = grad(a);
        for (int j = 0; j < c; ++j) {
          double m = 0;
          for (int i = 0; i < r; ++i) m += g.at(i, j);
          m /= r;
          for (int i = 0; i < r; ++i) ga.at(i, j) += g.at(i, j) - m;
        }
      };
    return id;
  }

  int add_rowvec(int a, int rvec) {
    check(rows(rvec) == 1 && cols(rvec) == cols(a), shape_msg("add_rowvec", a, rvec));
    Tensor out = val_(a);
    const Tensor& rv = val_(rvec);
    for (int i = 0; i < out.rows; ++i)
      for (int j = 0; j < out.cols; ++j) out.at(i, j) += rv.v[j];
    int id = result(std::move(out), {a, rvec});
    if (requires_grad(id))
      nodes_[id].backward = [this, id, a, rvec] {
        const Tensor& g = nodes_[id].grad;
        if (requires_grad(a)) {
          Tensor& ga = grad(a);
          for (size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i];
        }
        if (requires_grad(rvec)) {
          Tensor& gr = grad(rvec);
          for (int i = 0; i < g.rows; ++i)
            for (int j = 0; j < g.cols; ++j) gr.v[j] += g.at(i, j);
        }
      };
    return id;
  }

  int add_colvec(int a, int cvec) {
    check(cols(cvec) == 1 && rows(cvec) == rows(a), shape_msg("add_colvec", a, cvec));
    Tensor out = val_(a);
    const Tensor& cv = val_(cvec);
    for (int i = 0; i < out.rows; ++i)
      for (int j = 0; j < out.cols; ++j) out.at(i, j) += cv.v[i];
    int id = result(std::move(out), {a, cvec});
    if (requires_grad(id))
      nodes_[id].backward = [this, id, a, cvec] {
        const Tensor& g = nodes_[id].grad;
        if (requires_grad(a)) {
          Tensor& ga = grad(a);
          for (size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i];
        }
        if (requires_grad(cvec)) {
          Tensor& gc = grad(cvec);
          for (int i = 0; i < g.rows; ++i)
            for (int j = 0; j < g.cols; ++j) gc.v[i] += g.at(i, j);
        }
      };
    return id;
  }

  int div_rowvec(int a, int rvec) {
    check(rows(rvec) == 1 && cols(rvec) == cols(a), shape_msg("div_rowvec", a, rvec));
    Tensor out = val_(a);
    const Tensor& rv = val_(rvec);
    for (int i = 0; i < out.rows; ++i)
      for (int j = 0; j < out.cols; ++j) out.at(i, j) /= rv.v[j];
    int id = result(std::move(out), {a, rvec});
    if (requires_grad(id))
      nodes_[id].backward = [this, id, a, rvec] {
        const Tensor& g = nodes_[id].grad;
        const Tensor& ta = val_(a);
        const Tensor& rv = val_(rvec);
        if (requires_grad(a)) {
          Tensor& ga = grad(a);
          for (int i = 0; i < g.rows; ++i)
            for (int j = 0; j < g.cols; ++j) ga.at(i, j) += g.at(i, j) / rv.v[j];
        }
        if (requires_grad(rvec)) {
          Tensor& gr = grad(rvec);
          for (int i = 0; i < g.rows; ++i)
            for (int j = 0; j < g.cols; ++j)
              gr.v[j] -= g.at(i, j) * ta.at(i, j) / (rv.v[j] * rv.v[j]);
        }
      };
    return id;
  }

  // Applies a constant (ob x ib) map to each per-point block of ib rows:
  // x is (K*ib) x C, result (K*ob) x C.
  int block_linear(int x, const Tensor& a) {
    const int ib = a.cols, ob = a.rows;
    check(rows(x) % ib == 0, "block_linear: rows not divisible by block size");
    const int k = rows(x) / ib, c = cols(x);
    Tensor out(k * ob, c);
    ConstEigenMap am(a.v.data(), ob, ib);
    for (int i = 0; i < k; ++i) {
      ConstEigenMap xi(val_(x).v.data() + static_cast<size_t>(i) * ib * c, ib, c);
      EigenMap oi(out.v.data() + static_cast<size_t>(i) * ob * c, ob, c);
      oi.noalias() = am * xi;
    }
    int id = result(std::move(out), {x});
    if (requires_grad(id))
      nodes_[id].backward = [this, id, x, a, ib, ob, k, c] {
        const Tensor& g = nodes_[id].grad;
        Tensor& gx = grad(x);
        ConstEigenMap am(a.v.data(), ob, ib);
        for (int i = 0; i < k; ++i) {
          ConstEigenMap gi(g.v.data() + static_cast<size_t>(i) * ob * c, ob, c);
          EigenMap gxi(gx.v.data() + static_cast<size_t>(i) * ib * c, ib, c);
          gxi.noalias() += am.transpose() * gi;
        }
      };
    return id;
  }

  // Per-block max over points: x is (K*b) x C (K point blocks of b rows);
  // result b x C with out[d, c] = max_i x[i*b + d, c]. The winner index is
  // recorded and routes the gradient (subgradient of max).
  int max_blocks(int x, int block_rows) {
    const int b = block_rows;
    check(rows(x) % b == 0, "max_blocks: rows not divisible by block size");
    const int k = rows(x) / b, c = cols(x);
    check(k >= 1, "max_blocks: empty input");
    Tensor out(b, c);
    std::vector<int> argmax(static_cast<size_t>(b) * c, 0);
    const Tensor& t = val_(x);
    for (int d = 0; d < b; ++d)
      for (int j = 0; j < c; ++j) {
        double best = t.at(d, j);
        int bi = 0;
        for (int i = 1; i < k; ++i) {
          double cand = t.at(i * b + d, j);
          if (cand > best) {
            best = cand;
            bi = i;
          }
        }
        out.at(d, j) = best;
        argmax[static_cast<size_t>(d) * c + j] = bi;
      }
    int id = result(std::move(out), {x});
    if (requires_grad(id))
      nodes_[id].backward = [this, id, x, b, c, argmax = std::move(argmax)] {
        const Tensor& g = nodes_[id].grad;
        Tensor& gx = grad(x);
        for (int d = 0; d < b; ++d)
          for (int j = 0; j < c; ++j)
            gx.at(argmax[static_cast<size_t>(d) * c + j] * b + d, j) += g.at(d, j);
      };
    return id;
  }

  // Extension point for ops defined outside this header (the equivariant
  // layers register gather/contract kernels this way): record a computed
  // result with its parents, then attach the adjoint.
  int custom(Tensor out, const std::vector<int>& parents) {
    return result(std::move(out), parents);
  }
  void set_backward(int id, std::function<void()> fn) {
    if (nodes_[id].requires_grad) nodes_[id].backward = std::move(fn);
  }

 private:
  struct Node {
    Tensor val;
    Tensor grad;
    bool requires_grad = false;
    std::function<void()> backward;
  };

  const Tensor& val_(int id) const { return nodes_[id].val; }

  int result(Tensor out, const std::vector<int>& parents) {
    bool rg = false;
    for (int p : parents) rg = rg || nodes_[p].requires_grad;
    nodes_.push_back(Node{std::move(out), Tensor(), rg, {}});
    return static_cast<int>(nodes_.size()) - 1;
  }

  int row_reduce(int a, bool mean) {
    Tensor out(rows(a), 1);
    const Tensor& t = val_(a);
    const double s = mean ? 1.0 / t.cols : 1.0;
    for (int i = 0; i < t.rows; ++i) {
      double acc = 0;
      for (int j = 0; j < t.cols; ++j) acc += t.at(i, j);
      out.v[i] = acc * s;
    }
    int id = result(std::move(out), {a});
    if (requires_grad(id))
      nodes_[id].backward = [this, id, a, s] {
        const Tensor& g = nodes_[id].grad;
        Tensor& ga = grad(a);
        for (int i = 0; i < ga.rows; ++i)
          for (int j = 0; j < ga.cols; ++j) ga.at(i, j) += s * g.v[i];
      };
    return id;
  }

  int all_reduce(int a, bool mean) {
    const Tensor& t = val_(a);
    const double s = mean ? 1.0 / static_cast<double>(t.size()) : 1.0;
    double acc = 0;
    for (double x : t.v) acc += x;
    int id = result(Tensor::scalar(acc * s), {a});
    if (requires_grad(id))
      nodes_[id].backward = [this, id, a, s] {
        double g = nodes_[id].grad.v[0] * s;
        Tensor& ga = grad(a);
        for (double& x : ga.v) x += g;
      };
    return id;
  }

  std::string shape_msg(const char* op, int a, int b) const {
    std::ostringstream os;
    os << op << ": incompatible shapes (" << rows(a) << "x" << cols(a) << ") vs ("
       << rows(b) << "x" << cols(b) << ")";
    return os.str();
  }

  void same_shape(const char* op, int a, int b) const {
    check(rows(a) == rows(b) && cols(a) == cols(b), shape_msg(op, a, b));
  }

  std::vector<Node> nodes_;
};

// Max over all parameter entries of the relative disagreement between the
// analytic gradient and central finite differences:
//   |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
// scalar_fn(params) evaluates the loss (pure, deterministic);
// grads_fn(params, grads) fills the analytic gradient per parameter.
template <typename LossFn, typename GradFn>
double grad_check(LossFn&& scalar_fn, GradFn&& grads_fn,
                  std::vector<Tensor>& params, double eps = 1e-5) {
  std::vector<Tensor> grads(params.size());
  for (size_t p = 0; p < params.size(); ++p)
    grads[p] = Tensor::zeros(params[p].rows, params[p].cols);
  grads_fn(params, grads);
  double worst = 0.0;
  for (size_t p = 0; p < params.size(); ++p) {
    for (size_t i = 0; i < params[p].size(); ++i) {
      const double keep = params[p].v[i];
      params[p].v[i] = keep + eps;
      double up = scalar_fn(params);
      params[p].v[i] = keep - eps;
      double dn = scalar_fn(params);
      params[p].v[i] = keep;
      double numeric = (up - dn) / (2.0 * eps);
      double analytic = grads[p].v[i];
      if (std::isnan(numeric) || std::isnan(analytic))
        return std::numeric_limits<double>::infinity();
      double err = std::abs(analytic - numeric) /
                   std::max(1e-8, std::abs(analytic) + std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace canon3d
