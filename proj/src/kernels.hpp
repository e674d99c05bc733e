#pragma once

#include <cstddef>

// Inner loops shared by forward and backward. Every reduction runs in a fixed
// order that does not depend on batch size, so repeated evaluation is bitwise
// reproducible.
namespace dfba::kernels {

/// Eight-lane dot product; lanes are combined pairwise at the end.
float dot(const float* a, const float* b, std::size_t n);

/// y += a * x
void axpy(float a, const float* x, float* y, std::size_t n);

/// Unfolds one CxHxW sample into a (C*kh*kw) x (oh*ow) column matrix.
void im2col(const float* x, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw, float* col);

/// Adjoint of im2col: accumulates columns back into a CxHxW gradient.
void col2im(const float* col, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw, float* dx);

} // namespace dfba::kernels
