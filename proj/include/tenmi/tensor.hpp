#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

// Dense N-way tensors with an explicit missingness mask, matricization, and
// the CP (rank-decomposition) plumbing shared by the fitting and sampling
// layers.
//
// Conventions, fixed across the library:
//  * storage is linear with the mode-1 index varying fastest:
//      lin = i_1 + I_1*(i_2 + I_2*(i_3 + ...))          (0-based internally)
//  * mode-n matricization X_(n) is I_n x prod_{k!=n} I_k with column
//      j = sum_{k!=n} i_k * J_k,  J_k = prod_{m<k, m!=n} I_m
//    so the smallest remaining mode varies fastest across columns.
//  * kronecker(A, B) places the first argument's index slowest:
//      out(i*Jb + j, ...) = A(i, ...) * B(j, ...).
//  * khatri_rao(A, B) is the columnwise Kronecker product under the same
//    convention, and design chains are built largest mode first, so that
//      X_(n) = U^n * khatri_rao(U^N, ..., U^{n+1}, U^{n-1}, ..., U^1)^T.
//  * external interfaces (files, CLI) are 1-based; everything in here is
//    0-based.

namespace tenmi {

using Index = Eigen::Index;
using Dims = std::vector<Index>;

inline constexpr int kMaxOrder = 8;

inline Index num_elements(const Dims& dims) {
  if (dims.empty() || dims.size() > kMaxOrder)
    throw std::invalid_argument("tensor order must be in [1, 8]");
  Index n = 1;
  for (Index d : dims) {
    if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive");
    n *= d;
  }
  return n;
}

inline Index to_linear(const Dims& dims, const std::vector<Index>& idx) {
  if (idx.size() != dims.size())
    throw std::invalid_argument("multi-index order mismatch");
  Index lin = 0;
  Index stride = 1;
  for (std::size_t k = 0; k < dims.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= dims[k])
      throw std::out_of_range("multi-index out of range");
    lin += idx[k] * stride;
    stride *= dims[k];
  }
  return lin;
}

inline void from_linear(const Dims& dims, Index lin, std::vector<Index>& idx) {
  idx.resize(dims.size());
  for (std::size_t k = 0; k < dims.size(); ++k) {
    idx[k] = lin % dims[k];
    lin /= dims[k];
  }
}

struct Tensor {
  Dims dims;
  Eigen::VectorXd values;

  Tensor() = default;

  explicit Tensor(Dims d) : dims(std::move(d)) {
    values = Eigen::VectorXd::Zero(num_elements(dims));
  }

  Tensor(Dims d, Eigen::VectorXd v) : dims(std::move(d)), values(std::move(v)) {
    if (values.size() != num_elements(dims))
      throw std::invalid_argument("value count does not match dimensions");
  }

  Index size() const { return values.size(); }
  int order() const { return static_cast<int>(dims.size()); }

  double& at(const std::vector<Index>& idx) { return values[to_linear(dims, idx)]; }
  double at(const std::vector<Index>& idx) const { return values[to_linear(dims, idx)]; }
};

// Observed entries must be finite; masked entries are forced to the NaN
// sentinel so nothing downstream can read a held-out value by accident.
struct MaskedTensor {
  Tensor data;
  std::vector<Index> missing;      // sorted, unique linear indices
  std::vector<char> missing_flag;  // O(1) lookup, size == data.size()

  MaskedTensor() = default;

  MaskedTensor(Tensor t, std::vector<Index> miss)
      : data(std::move(t)), missing(std::move(miss)) {
    std::sort(missing.begin(), missing.end());
    missing.erase(std::unique(missing.begin(), missing.end()), missing.end());
    missing_flag.assign(static_cast<std::size_t>(data.size()), 0);
    for (Index m : missing) {
      if (m < 0 || m >= data.size())
        throw std::out_of_range("mask index out of range");
      missing_flag[static_cast<std::size_t>(m)] = 1;
      data.values[m] = std::numeric_limits<double>::quiet_NaN();
    }
    for (Index i = 0; i < data.size(); ++i) {
      if (!missing_flag[static_cast<std::size_t>(i)] && !std::isfinite(data.values[i]))
        throw std::invalid_argument("observed entry is not finite at linear index " +
                                    std::to_string(i));
    }
  }

  const Dims& dims() const { return data.dims; }
  Index size() const { return data.size(); }
  Index n_missing() const { return static_cast<Index>(missing.size()); }
  Index n_observed() const { return data.size() - n_missing(); }
  bool is_missing(Index lin) const { return missing_flag[static_cast<std::size_t>(lin)] != 0; }
};

// inner/outer stride split makes matricize/fold O(1) per element.
inline Eigen::MatrixXd matricize(const Tensor& t, int mode) {
  const int N = t.order();
  if (mode < 0 || mode >= N) throw std::invalid_argument("matricize: bad mode");
  Index stride = 1;
  for (int m = 0; m < mode; ++m) stride *= t.dims[m];
  const Index in = t.dims[mode];
  const Index cols = t.size() / in;
  Eigen::MatrixXd out(in, cols);
  for (Index lin = 0; lin < t.size(); ++lin) {
    const Index inner = lin % stride;
    const Index rest = lin / stride;
    const Index row = rest % in;
    const Index outer = rest / in;
    out(row, inner + outer * stride) = t.values[lin];
  }
  return out;
}

inline Tensor fold(const Eigen::MatrixXd& m, const Dims& dims, int mode) {
  const int N = static_cast<int>(dims.size());
  if (mode < 0 || mode >= N) throw std::invalid_argument("fold: bad mode");
  Tensor t(dims);
  Index stride = 1;
  for (int k = 0; k < mode; ++k) stride *= dims[k];
  const Index in = dims[mode];
  if (m.rows() != in || m.cols() != t.size() / in)
    throw std::invalid_argument("fold: matrix shape does not match dimensions");
  for (Index lin = 0; lin < t.size(); ++lin) {
    const Index inner = lin % stride;
    const Index rest = lin / stride;
    const Index row = rest % in;
    const Index outer = rest / in;
    t.values[lin] = m(row, inner + outer * stride);
  }
  return t;
}

inline Eigen::MatrixXd kronecker(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

inline Eigen::MatrixXd khatri_rao(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.cols() != b.cols())
    throw std::invalid_argument("khatri_rao: column counts differ");
  Eigen::MatrixXd out(a.rows() * b.rows(), a.cols());
  for (Index r = 0; r < a.cols(); ++r)
    for (Index i = 0; i < a.rows(); ++i)
      out.col(r).segment(i * b.rows(), b.rows()) = a(i, r) * b.col(r);
  return out;
}

inline Eigen::MatrixXd hadamard(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("hadamard: shape mismatch");
  return a.cwiseProduct(b);
}

struct CPModel {
  std::vector<Eigen::MatrixXd> factors;  // factors[n] is I_n x R

  CPModel() = default;

  explicit CPModel(std::vector<Eigen::MatrixXd> f) : factors(std::move(f)) {
    if (factors.empty()) throw std::invalid_argument("CPModel: no factors");
    const Index r = factors[0].cols();
    if (r < 1) throw std::invalid_argument("CPModel: rank must be >= 1");
    for (const auto& u : factors) {
      if (u.cols() != r) throw std::invalid_argument("CPModel: rank mismatch across modes");
      if (u.rows() < 1) throw std::invalid_argument("CPModel: empty mode");
      if (!u.allFinite()) throw std::invalid_argument("CPModel: non-finite factor entry");
    }
  }

  Index rank() const { return factors.empty() ? 0 : factors[0].cols(); }
  int order() const { return static_cast<int>(factors.size()); }
  Dims dims() const {
    Dims d(factors.size());
    for (std::size_t n = 0; n < factors.size(); ++n) d[n] = factors[n].rows();
    return d;
  }

  // Unit-norm columns in every mode, scales collected in lambda.  A zero
  // column yields lambda_r = 0 with the column left as e_1.
  struct Normalized {
    std::vector<Eigen::MatrixXd> factors;
    Eigen::VectorXd lambda;
  };

  Normalized normalized() const {
    Normalized out;
    out.factors = factors;
    out.lambda = Eigen::VectorXd::Ones(rank());
    for (auto& u : out.factors) {
      for (Index r = 0; r < rank(); ++r) {
        const double nrm = u.col(r).norm();
        if (nrm > 0.0) {
          u.col(r) /= nrm;
          out.lambda[r] *= nrm;
        } else {
          u.col(r).setZero();
          u(0, r) = 1.0;
          out.lambda[r] = 0.0;
        }
      }
    }
    return out;
  }
};

// Khatri-Rao design chain omitting `skip`, largest mode first, so that
// matricize(X, skip) = U^skip * design^T for an exact CP tensor.
inline Eigen::MatrixXd design_matrix(const std::vector<Eigen::MatrixXd>& factors, int skip) {
  const int N = static_cast<int>(factors.size());
  if (skip < 0 || skip >= N) throw std::invalid_argument("design_matrix: bad mode");
  Eigen::MatrixXd chain;
  bool first = true;
  for (int k = N - 1; k >= 0; --k) {
    if (k == skip) continue;
    chain = first ? factors[k] : khatri_rao(chain, factors[k]).eval();
    first = false;
  }
  if (first) chain = Eigen::MatrixXd::Ones(1, factors[skip].cols());
  return chain;
}

inline Tensor cp_reconstruct(const CPModel& model) {
  const Eigen::MatrixXd a = design_matrix(model.factors, 0);
  return fold(model.factors[0] * a.transpose(), model.dims(), 0);
}

inline Tensor cp_reconstruct(const CPModel::Normalized& nf) {
  std::vector<Eigen::MatrixXd> f = nf.factors;
  f[0] = f[0] * nf.lambda.asDiagonal();
  return cp_reconstruct(CPModel(std::move(f)));
}

// Mode-k tensor-times-matrix: result dims swap I_k for m.rows().
inline Tensor ttm(const Tensor& t, const Eigen::MatrixXd& m, int mode) {
  if (m.cols() != t.dims[mode]) throw std::invalid_argument("ttm: shape mismatch");
  Dims d = t.dims;
  d[mode] = m.rows();
  return fold(m * matricize(t, mode), d, mode);
}

// Centering over observed entries only.  The original tensor is the inverse's
// source of truth for observed values: floating-point add-back cannot be
// bit-exact, pinning from the source is.
struct CenteredTensor {
  MaskedTensor data;
  double offset = 0.0;
};

inline CenteredTensor center_observed(const MaskedTensor& t) {
  double sum = 0.0;
  Index n = 0;
  for (Index i = 0; i < t.size(); ++i) {
    if (!t.is_missing(i)) {
      sum += t.data.values[i];
      ++n;
    }
  }
  if (n == 0) throw std::invalid_argument("center_observed: no observed entries");
  CenteredTensor out;
  out.offset = sum / static_cast<double>(n);
  Tensor c = t.data;
  for (Index i = 0; i < t.size(); ++i)
    if (!t.is_missing(i)) c.values[i] -= out.offset;
  out.data = MaskedTensor(std::move(c), t.missing);
  return out;
}

inline MaskedTensor uncenter(const CenteredTensor& c, const MaskedTensor& original) {
  if (original.dims() != c.data.dims())
    throw std::invalid_argument("uncenter: dimension mismatch");
  Tensor t = c.data.data;
  for (Index i = 0; i < t.size(); ++i) {
    if (original.is_missing(i)) {
      if (!c.data.is_missing(i)) t.values[i] += c.offset;
    } else {
      t.values[i] = original.data.values[i];
    }
  }
  return MaskedTensor(std::move(t), c.data.missing);
}

}  // namespace tenmi
