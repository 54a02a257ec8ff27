#include "pgunet/nn_ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <utility>

namespace pgu {

namespace {

std::atomic<bool> g_conv_fault{false};

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;
using OuterStride = Eigen::OuterStride<>;
template <typename T>
using StridedMap = Eigen::Map<RowMatrix<T>, 0, OuterStride>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMatrix<T>, 0, OuterStride>;

// Upper bound on patch-matrix elements materialized at once.
constexpr std::size_t kPatchBudget = std::size_t{1} << 21;

void require_image(const Shape& s, const char* op) {
  if (s.size() != 4) throw ShapeError(std::string(op) + ": expected [N,C,H,W], got " + shape_str(s));
}

struct ConvGeometry {
  std::size_t n, c_in, h, w, c_out, k, stride, pad, h_out, w_out;
  std::size_t patch() const { return c_in * k * k; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
  std::size_t rows_per_chunk() const {
    return std::max<std::size_t>(1, std::min(h_out, kPatchBudget / std::max<std::size_t>(1, patch() * w_out)));
  }
};

// Patch matrix rows [c*k*k + ki*k + kj], columns over output pixels in rows [r0, r1).
template <typename T>
void im2col(const T* image, const ConvGeometry& g, std::size_t r0, std::size_t r1, T* col) {
  const std::size_t cols = (r1 - r0) * g.w_out;
  for (std::size_t c = 0; c < g.c_in; ++c) {
    const T* plane = image + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        T* row = col + ((c * g.k + ki) * g.k + kj) * cols;
        for (std::size_t r = r0; r < r1; ++r) {
          const auto y = static_cast<std::ptrdiff_t>(r * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + (r - r0) * g.w_out;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.w_out, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(y) * g.w;
          for (std::size_t j = 0; j < g.w_out; ++j) {
            const auto x = static_cast<std::ptrdiff_t>(j * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            dst[j] = (x < 0 || x >= static_cast<std::ptrdiff_t>(g.w)) ? T(0) : src[x];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, std::size_t r0, std::size_t r1, T* image) {
  const std::size_t cols = (r1 - r0) * g.w_out;
  for (std::size_t c = 0; c < g.c_in; ++c) {
    T* plane = image + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const T* row = col + ((c * g.k + ki) * g.k + kj) * cols;
        for (std::size_t r = r0; r < r1; ++r) {
          const auto y = static_cast<std::ptrdiff_t>(r * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h)) continue;
          const T* src = row + (r - r0) * g.w_out;
          T* dst = plane + static_cast<std::size_t>(y) * g.w;
          for (std::size_t j = 0; j < g.w_out; ++j) {
            const auto x = static_cast<std::ptrdiff_t>(j * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            if (x >= 0 && x < static_cast<std::ptrdiff_t>(g.w)) dst[x] += src[j];
          }
        }
      }
    }
  }
}

}  // namespace

namespace testing {
void set_conv2d_backward_fault(bool enabled) { g_conv_fault.store(enabled); }
bool conv2d_backward_fault() { return g_conv_fault.load(); }
}  // namespace testing

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const Conv2dParams<T>& params) {
  require_image(input.shape(), "conv2d");
  const Shape& ws = params.weight.shape();
  if (ws.size() != 4 || ws[2] != ws[3]) {
    throw ShapeError("conv2d: weight must be [C_out,C_in,k,k], got " + shape_str(ws));
  }
  if (ws[1] != input.dim(1)) {
    throw ShapeError("conv2d: input has " + std::to_string(input.dim(1)) + " channels, weight expects " +
                     std::to_string(ws[1]));
  }
  if (params.bias.shape() != Shape{ws[0]}) {
    throw ShapeError("conv2d: bias must be [" + std::to_string(ws[0]) + "]");
  }
  if (params.stride == 0) throw ShapeError("conv2d: stride must be positive");
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), ws[0], ws[2], params.stride,
                 params.padding, 0, 0};
  if (g.h + 2 * g.pad < g.k || g.w + 2 * g.pad < g.k) {
    throw ShapeError("conv2d: kernel does not fit input " + shape_str(input.shape()));
  }
  g.h_out = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.w_out = (g.w + 2 * g.pad - g.k) / g.stride + 1;

  const std::size_t in_plane = g.c_in * g.h * g.w;
  const std::size_t out_pixels = g.h_out * g.w_out;
  const auto co = static_cast<Eigen::Index>(g.c_out);
  const auto kk = static_cast<Eigen::Index>(g.patch());
  std::vector<T> out(g.n * g.c_out * out_pixels);
  ConstMatrixMap<T> weight(params.weight.data().data(), co, kk);
  const auto bias = params.bias.data();

  std::vector<T> col;
  for (std::size_t n = 0; n < g.n; ++n) {
    const T* image = input.data().data() + n * in_plane;
    T* dst = out.data() + n * g.c_out * out_pixels;
    if (g.pointwise()) {
      MatrixMap<T>(dst, co, static_cast<Eigen::Index>(out_pixels)).noalias() =
          weight * ConstMatrixMap<T>(image, kk, static_cast<Eigen::Index>(out_pixels));
    } else {
      const std::size_t step = g.rows_per_chunk();
      col.resize(g.patch() * step * g.w_out);
      for (std::size_t r0 = 0; r0 < g.h_out; r0 += step) {
        const std::size_t r1 = std::min(g.h_out, r0 + step);
        const auto cols = static_cast<Eigen::Index>((r1 - r0) * g.w_out);
        im2col(image, g, r0, r1, col.data());
        StridedMap<T>(dst + r0 * g.w_out, co, cols, OuterStride(static_cast<Eigen::Index>(out_pixels)))
            .noalias() = weight * ConstMatrixMap<T>(col.data(), kk, cols);
      }
    }
    for (std::size_t c = 0; c < g.c_out; ++c) {
      T* plane = dst + c * out_pixels;
      for (std::size_t i = 0; i < out_pixels; ++i) plane[i] += bias[c];
    }
  }

  auto xi = input.impl();
  auto wi = params.weight.impl();
  auto bi = params.bias.impl();
  return detail::make_result<T>(
      {g.n, g.c_out, g.h_out, g.w_out}, std::move(out), "conv2d", {xi, wi, bi},
      [xi, wi, bi, g](const TensorImpl<T>& res) {
        const std::size_t in_plane = g.c_in * g.h * g.w;
        const std::size_t out_pixels = g.h_out * g.w_out;
        const auto co = static_cast<Eigen::Index>(g.c_out);
        const auto kk = static_cast<Eigen::Index>(g.patch());
        ConstMatrixMap<T> weight(wi->data.data(), co, kk);
        T* dweight = wi->requires_grad ? wi->grad_buffer().data() : nullptr;
        T* dbias = bi->requires_grad ? bi->grad_buffer().data() : nullptr;
        T* dinput = xi->requires_grad ? xi->grad_buffer().data() : nullptr;

        RowMatrix<T> dw_acc;
        if (dweight) dw_acc = RowMatrix<T>::Zero(co, kk);
        std::vector<T> col;
        std::vector<T> dcol;
        for (std::size_t n = 0; n < g.n; ++n) {
          const T* dy = res.grad.data() + n * g.c_out * out_pixels;
          const T* image = xi->data.data() + n * in_plane;
          if (dbias) {
            for (std::size_t c = 0; c < g.c_out; ++c) {
              T acc = T(0);
              for (std::size_t i = 0; i < out_pixels; ++i) acc += dy[c * out_pixels + i];
              dbias[c] += acc;
            }
          }
          if (g.pointwise()) {
            const auto pixels = static_cast<Eigen::Index>(out_pixels);
            ConstMatrixMap<T> dy_mat(dy, co, pixels);
            if (dweight) dw_acc.noalias() += dy_mat * ConstMatrixMap<T>(image, kk, pixels).transpose();
            if (dinput) MatrixMap<T>(dinput + n * in_plane, kk, pixels).noalias() += weight.transpose() * dy_mat;
            continue;
          }
          const std::size_t step = g.rows_per_chunk();
          col.resize(g.patch() * step * g.w_out);
          if (dinput) dcol.resize(col.size());
          for (std::size_t r0 = 0; r0 < g.h_out; r0 += step) {
            const std::size_t r1 = std::min(g.h_out, r0 + step);
            const auto cols = static_cast<Eigen::Index>((r1 - r0) * g.w_out);
            ConstStridedMap<T> dy_chunk(dy + r0 * g.w_out, co, cols,
                                        OuterStride(static_cast<Eigen::Index>(out_pixels)));
            if (dweight) {
              im2col(image, g, r0, r1, col.data());
              dw_acc.noalias() += dy_chunk * ConstMatrixMap<T>(col.data(), kk, cols).transpose();
            }
            if (dinput) {
              MatrixMap<T>(dcol.data(), kk, cols).noalias() = weight.transpose() * dy_chunk;
              col2im_add(dcol.data(), g, r0, r1, dinput + n * in_plane);
            }
          }
        }
        if (dweight) {
          if (g_conv_fault.load()) dw_acc *= T(1.5);
          MatrixMap<T>(dweight, co, kk) += dw_acc;
        }
      });
}

template <typename T>
BasicTensor<T> maxpool2(const BasicTensor<T>& input) {
  require_image(input.shape(), "maxpool2");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2 || w % 2) throw ShapeError("maxpool2: spatial extents must be even, got " + shape_str(input.shape()));
  const std::size_t ho = h / 2, wo = w / 2;
  std::vector<T> out(n * c * ho * wo);
  std::vector<std::uint32_t> argmax(out.size());
  const T* x = input.data().data();
  for (std::size_t p = 0; p < n * c; ++p) {
    const std::size_t in_base = p * h * w;
    const std::size_t out_base = p * ho * wo;
    for (std::size_t i = 0; i < ho; ++i) {
      for (std::size_t j = 0; j < wo; ++j) {
        const std::size_t candidates[4] = {in_base + 2 * i * w + 2 * j, in_base + 2 * i * w + 2 * j + 1,
                                           in_base + (2 * i + 1) * w + 2 * j, in_base + (2 * i + 1) * w + 2 * j + 1};
        std::size_t best = candidates[0];
        for (int q = 1; q < 4; ++q) {
          if (x[candidates[q]] > x[best]) best = candidates[q];
        }
        out[out_base + i * wo + j] = x[best];
        argmax[out_base + i * wo + j] = static_cast<std::uint32_t>(best);
      }
    }
  }
  if (auto* pattern = detail::active_pattern()) {
    for (std::uint32_t index : argmax) pattern->mix(index);
  }
  auto xi = input.impl();
  return detail::make_result<T>({n, c, ho, wo}, std::move(out), "maxpool2", {xi},
                                [xi, argmax = std::move(argmax)](const TensorImpl<T>& res) {
                                  auto& gx = xi->grad_buffer();
                                  for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += res.grad[i];
                                });
}

template <typename T>
BasicTensor<T> avgpool2(const BasicTensor<T>& input) {
  require_image(input.shape(), "avgpool2");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2 || w % 2) throw ShapeError("avgpool2: spatial extents must be even, got " + shape_str(input.shape()));
  const std::size_t ho = h / 2, wo = w / 2;
  std::vector<T> out(n * c * ho * wo);
  const T* x = input.data().data();
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* plane = x + p * h * w;
    T* dst = out.data() + p * ho * wo;
    for (std::size_t i = 0; i < ho; ++i) {
      for (std::size_t j = 0; j < wo; ++j) {
        const T* top = plane + 2 * i * w + 2 * j;
        dst[i * wo + j] = (top[0] + top[1] + top[w] + top[w + 1]) * T(0.25);
      }
    }
  }
  auto xi = input.impl();
  return detail::make_result<T>({n, c, ho, wo}, std::move(out), "avgpool2", {xi},
                                [xi, h, w, ho, wo](const TensorImpl<T>& res) {
                                  auto& gx = xi->grad_buffer();
                                  const std::size_t planes = gx.size() / (h * w);
                                  for (std::size_t p = 0; p < planes; ++p) {
                                    for (std::size_t i = 0; i < ho; ++i) {
                                      for (std::size_t j = 0; j < wo; ++j) {
                                        const T g = res.grad[p * ho * wo + i * wo + j] * T(0.25);
                                        T* top = gx.data() + p * h * w + 2 * i * w + 2 * j;
                                        top[0] += g;
                                        top[1] += g;
                                        top[w] += g;
                                        top[w + 1] += g;
                                      }
                                    }
                                  }
                                });
}

template <typename T>
BasicTensor<T> upsample2_nearest(const BasicTensor<T>& input) {
  require_image(input.shape(), "upsample2_nearest");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t ho = 2 * h, wo = 2 * w;
  std::vector<T> out(n * c * ho * wo);
  const T* x = input.data().data();
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* plane = x + p * h * w;
    T* dst = out.data() + p * ho * wo;
    for (std::size_t i = 0; i < ho; ++i) {
      const T* src = plane + (i / 2) * w;
      T* row = dst + i * wo;
      for (std::size_t j = 0; j < wo; ++j) row[j] = src[j / 2];
    }
  }
  auto xi = input.impl();
  return detail::make_result<T>({n, c, ho, wo}, std::move(out), "upsample2_nearest", {xi},
                                [xi, h, w, ho, wo](const TensorImpl<T>& res) {
                                  auto& gx = xi->grad_buffer();
                                  const std::size_t planes = gx.size() / (h * w);
                                  for (std::size_t p = 0; p < planes; ++p) {
                                    const T* g = res.grad.data() + p * ho * wo;
                                    T* dst = gx.data() + p * h * w;
                                    for (std::size_t i = 0; i < ho; ++i) {
                                      for (std::size_t j = 0; j < wo; ++j) dst[(i / 2) * w + j / 2] += g[i * wo + j];
                                    }
                                  }
                                });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
  std::vector<T> out(input.data().begin(), input.data().end());
  for (T& v : out) v = v > T(0) ? v : T(0);
  if (auto* pattern = detail::active_pattern()) {
    std::uint64_t word = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      word = (word << 1) | (out[i] > T(0) ? 1u : 0u);
      if (i % 64 == 63) pattern->mix(std::exchange(word, 0));
    }
    pattern->mix(word);
  }
  auto xi = input.impl();
  return detail::make_result<T>(input.shape(), std::move(out), "relu", {xi}, [xi](const TensorImpl<T>& res) {
    auto& gx = xi->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (xi->data[i] > T(0)) gx[i] += res.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_image(a.shape(), "concat_channels");
  require_image(b.shape(), "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: batch/spatial mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  std::vector<T> out(n * (ca + cb) * hw);
  for (std::size_t s = 0; s < n; ++s) {
    auto dst = out.begin() + static_cast<std::ptrdiff_t>(s * (ca + cb) * hw);
    dst = std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(s * ca * hw), ca * hw, dst);
    std::copy_n(b.data().begin() + static_cast<std::ptrdiff_t>(s * cb * hw), cb * hw, dst);
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return detail::make_result<T>(
      {n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), "concat_channels", {ai, bi},
      [ai, bi, n, ca, cb, hw](const TensorImpl<T>& res) {
        for (std::size_t s = 0; s < n; ++s) {
          const T* g = res.grad.data() + s * (ca + cb) * hw;
          if (ai->requires_grad) {
            T* ga = ai->grad_buffer().data() + s * ca * hw;
            for (std::size_t i = 0; i < ca * hw; ++i) ga[i] += g[i];
          }
          if (bi->requires_grad) {
            T* gb = bi->grad_buffer().data() + s * cb * hw;
            for (std::size_t i = 0; i < cb * hw; ++i) gb[i] += g[ca * hw + i];
          }
        }
      });
}

template <typename T>
BasicTensor<T> slice_channels(const BasicTensor<T>& input, std::size_t begin, std::size_t end) {
  require_image(input.shape(), "slice_channels");
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  if (begin >= end || end > c) throw ShapeError("slice_channels: invalid channel range");
  const std::size_t cs = end - begin;
  std::vector<T> out(n * cs * hw);
  for (std::size_t s = 0; s < n; ++s) {
    std::copy_n(input.data().begin() + static_cast<std::ptrdiff_t>((s * c + begin) * hw), cs * hw,
                out.begin() + static_cast<std::ptrdiff_t>(s * cs * hw));
  }
  auto xi = input.impl();
  return detail::make_result<T>({n, cs, input.dim(2), input.dim(3)}, std::move(out), "slice_channels", {xi},
                                [xi, n, c, cs, begin, hw](const TensorImpl<T>& res) {
                                  auto& gx = xi->grad_buffer();
                                  for (std::size_t s = 0; s < n; ++s) {
                                    for (std::size_t i = 0; i < cs * hw; ++i) {
                                      gx[(s * c + begin) * hw + i] += res.grad[s * cs * hw + i];
                                    }
                                  }
                                });
}

template <typename T>
BasicTensor<T> softmax_ce_loss(const BasicTensor<T>& logits, std::span<const std::uint8_t> labels) {
  require_image(logits.shape(), "softmax_ce_loss");
  const std::size_t n = logits.dim(0), c = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  if (labels.size() != n * hw) {
    throw ShapeError("softmax_ce_loss: label count " + std::to_string(labels.size()) + " does not match " +
                     std::to_string(n * hw) + " pixels");
  }
  for (std::uint8_t label : labels) {
    if (label >= c) throw ShapeError("softmax_ce_loss: label " + std::to_string(label) + " out of range");
  }
  const T* x = logits.data().data();
  std::vector<T> probs(logits.numel());
  double total = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t p = 0; p < hw; ++p) {
      const T* base = x + s * c * hw + p;
      T* pb = probs.data() + s * c * hw + p;
      T peak = base[0];
      for (std::size_t k = 1; k < c; ++k) peak = std::max(peak, base[k * hw]);
      T denom = T(0);
      for (std::size_t k = 0; k < c; ++k) {
        pb[k * hw] = std::exp(base[k * hw] - peak);
        denom += pb[k * hw];
      }
      for (std::size_t k = 0; k < c; ++k) pb[k * hw] /= denom;
      const std::size_t label = labels[s * hw + p];
      total += static_cast<double>(std::log(denom) - (base[label * hw] - peak));
    }
  }
  const T pixel_count = static_cast<T>(n * hw);
  const T loss = static_cast<T>(total / static_cast<double>(n * hw));
  std::vector<std::uint8_t> label_copy(labels.begin(), labels.end());
  auto xi = logits.impl();
  return detail::make_result<T>(
      {1}, {loss}, "softmax_ce_loss", {xi},
      [xi, probs = std::move(probs), label_copy = std::move(label_copy), n, c, hw, pixel_count](
          const TensorImpl<T>& res) {
        auto& gx = xi->grad_buffer();
        const T scale = res.grad[0] / pixel_count;
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t k = 0; k < c; ++k) {
            const std::size_t base = (s * c + k) * hw;
            for (std::size_t p = 0; p < hw; ++p) {
              const T target = label_copy[s * hw + p] == k ? T(1) : T(0);
              gx[base + p] += scale * (probs[base + p] - target);
            }
          }
        }
      });
}

#define PGU_INSTANTIATE(T)                                                                      \
  template BasicTensor<T> conv2d<T>(const BasicTensor<T>&, const Conv2dParams<T>&);               \
  template BasicTensor<T> maxpool2<T>(const BasicTensor<T>&);                                     \
  template BasicTensor<T> avgpool2<T>(const BasicTensor<T>&);                                     \
  template BasicTensor<T> upsample2_nearest<T>(const BasicTensor<T>&);                            \
  template BasicTensor<T> relu<T>(const BasicTensor<T>&);                                         \
  template BasicTensor<T> concat_channels<T>(const BasicTensor<T>&, const BasicTensor<T>&);       \
  template BasicTensor<T> slice_channels<T>(const BasicTensor<T>&, std::size_t, std::size_t);     \
  template BasicTensor<T> softmax_ce_loss<T>(const BasicTensor<T>&, std::span<const std::uint8_t>);

PGU_INSTANTIATE(float)
PGU_INSTANTIATE(double)

#undef PGU_INSTANTIATE

}  // namespace pgu
