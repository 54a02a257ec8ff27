#include "pgunet/tensor_ops.hpp"

#include <Eigen/Core>

namespace pgu {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

const char* op_name(ElementwiseOp op) {
  switch (op) {
    case ElementwiseOp::kAdd: return "add";
    case ElementwiseOp::kSub: return "sub";
    case ElementwiseOp::kMul: return "mul";
  }
  return "elementwise";
}

}  // namespace

template <typename T>
BasicTensor<T> elementwise(ElementwiseOp op, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op_name(op)) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  auto x = a.data();
  auto y = b.data();
  std::vector<T> out(x.size());
  switch (op) {
    case ElementwiseOp::kAdd:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
      break;
    case ElementwiseOp::kSub:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
      break;
    case ElementwiseOp::kMul:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
      break;
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return detail::make_result<T>(
      a.shape(), std::move(out), op_name(op), {ai, bi}, [op, ai, bi](const TensorImpl<T>& res) {
        const auto& g = res.grad;
        if (ai->requires_grad) {
          auto& ga = ai->grad_buffer();
          if (op == ElementwiseOp::kMul) {
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->data[i];
          } else {
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
          }
        }
        if (bi->requires_grad) {
          auto& gb = bi->grad_buffer();
          switch (op) {
            case ElementwiseOp::kAdd:
              for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
              break;
            case ElementwiseOp::kSub:
              for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
              break;
            case ElementwiseOp::kMul:
              for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->data[i];
              break;
          }
        }
      });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (T& v : out) v *= factor;
  auto ai = a.impl();
  return detail::make_result<T>(a.shape(), std::move(out), "scale", {ai},
                                [ai, factor](const TensorImpl<T>& res) {
                                  auto& ga = ai->grad_buffer();
                                  for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += factor * res.grad[i];
                                });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  T total = T(0);
  for (T v : a.data()) total += v;
  auto ai = a.impl();
  return detail::make_result<T>({1}, {total}, "sum", {ai}, [ai](const TensorImpl<T>& res) {
    auto& ga = ai->grad_buffer();
    for (T& g : ga) g += res.grad[0];
  });
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<T> out(static_cast<std::size_t>(m * n));
  MatrixMap<T>(out.data(), m, n).noalias() =
      ConstMatrixMap<T>(a.data().data(), m, k) * ConstMatrixMap<T>(b.data().data(), k, n);
  auto ai = a.impl();
  auto bi = b.impl();
  return detail::make_result<T>(
      {a.dim(0), b.dim(1)}, std::move(out), "matmul", {ai, bi},
      [ai, bi, m, k, n](const TensorImpl<T>& res) {
        ConstMatrixMap<T> dy(res.grad.data(), m, n);
        if (ai->requires_grad) {
          MatrixMap<T>(ai->grad_buffer().data(), m, k).noalias() +=
              dy * ConstMatrixMap<T>(bi->data.data(), k, n).transpose();
        }
        if (bi->requires_grad) {
          MatrixMap<T>(bi->grad_buffer().data(), k, n).noalias() +=
              ConstMatrixMap<T>(ai->data.data(), m, k).transpose() * dy;
        }
      });
}

#define PGU_INSTANTIATE(T)                                                                  \
  template BasicTensor<T> elementwise<T>(ElementwiseOp, const BasicTensor<T>&,               \
                                         const BasicTensor<T>&);                              \
  template BasicTensor<T> scale<T>(const BasicTensor<T>&, T);                                 \
  template BasicTensor<T> sum<T>(const BasicTensor<T>&);                                      \
  template BasicTensor<T> matmul<T>(const BasicTensor<T>&, const BasicTensor<T>&);

PGU_INSTANTIATE(float)
PGU_INSTANTIATE(double)

#undef PGU_INSTANTIATE

}  // namespace pgu
