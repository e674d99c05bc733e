#include "kernels.hpp"

namespace dfba::kernels {

float dot(const float* a, const float* b, std::size_t n)
{
    float lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (std::size_t k = 0; k < 8; ++k) lane[k] += a[i + k] * b[i + k];
    for (std::size_t k = 0; i < n; ++i, ++k) lane[k] += a[i] * b[i];
    return ((lane[0] + lane[1]) + (lane[2] + lane[3])) + ((lane[4] + lane[5]) + (lane[6] + lane[7]));
}

void axpy(float a, const float* x, float* y, std::size_t n)
{
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void im2col(const float* x, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw, float* col)
{
    const std::size_t oh = h - kh + 1;
    const std::size_t ow = w - kw + 1;
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < kh; ++i)
            for (std::size_t j = 0; j < kw; ++j) {
                float* row = col + ((ch * kh + i) * kw + j) * oh * ow;
                for (std::size_t r = 0; r < oh; ++r) {
                    const float* src = x + (ch * h + r + i) * w + j;
                    for (std::size_t q = 0; q < ow; ++q) row[r * ow + q] = src[q];
                }
            }
}

void col2im(const float* col, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw, float* dx)
{
    const std::size_t oh = h - kh + 1;
    const std::size_t ow = w - kw + 1;
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < kh; ++i)
            for (std::size_t j = 0; j < kw; ++j) {
                const float* row = col + ((ch * kh + i) * kw + j) * oh * ow;
                for (std::size_t r = 0; r < oh; ++r) {
                    float* dst = dx + (ch * h + r + i) * w + j;
                    for (std::size_t q = 0; q < ow; ++q) dst[q] += row[r * ow + q];
                }
            }
}

} // namespace dfba::kernels
