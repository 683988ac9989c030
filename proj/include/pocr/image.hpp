#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "pocr/common.hpp"
#include "pocr/tensor.hpp"

namespace pocr {

// 8-bit image, HWC interleaved, c in {1,3}.
struct Image8 {
    int h = 0, w = 0, c = 0;
    std::vector<uint8_t> px;

    Image8() = default;
    Image8(int h_, int w_, int c_, uint8_t fill = 0)
        : h(h_), w(w_), c(c_), px(static_cast<size_t>(h_) * w_ * c_, fill) {}

    uint8_t& at(int y, int x, int ch) { return px[(static_cast<size_t>(y) * w + x) * c + ch]; }
    uint8_t at(int y, int x, int ch) const { return px[(static_cast<size_t>(y) * w + x) * c + ch]; }
    size_t size() const { return px.size(); }
    bool same_shape(const Image8& o) const { return h == o.h && w == o.w && c == o.c; }
};

// Double image in [0,1] (not enforced), HWC.
struct ImageF {
    int h = 0, w = 0, c = 0;
    std::vector<double> px;

    ImageF() = default;
    ImageF(int h_, int w_, int c_, double fill = 0.0)
        : h(h_), w(w_), c(c_), px(static_cast<size_t>(h_) * w_ * c_, fill) {}

    double& at(int y, int x, int ch) { return px[(static_cast<size_t>(y) * w + x) * c + ch]; }
    double at(int y, int x, int ch) const { return px[(static_cast<size_t>(y) * w + x) * c + ch]; }
};

inline ImageF to_float(const Image8& img) {
    ImageF out(img.h, img.w, img.c);
    for (size_t i = 0; i < img.px.size(); ++i) out.px[i] = img.px[i] / 255.0;
    return out;
}

inline Image8 to_u8(const ImageF& img) {
    Image8 out(img.h, img.w, img.c);
    for (size_t i = 0; i < img.px.size(); ++i) {
        double v = std::min(1.0, std::max(0.0, img.px[i]));
        out.px[i] = static_cast<uint8_t>(std::lround(v * 255.0));
    }
    return out;
}

inline Tensor to_tensor(const ImageF& img) {
    return Tensor::from_data({img.h, img.w, img.c}, img.px);
}

inline ImageF from_tensor(const Tensor& t) {
    POCR_CHECK(t.ndim() == 3, "from_tensor: expects HWC tensor");
    ImageF out(static_cast<int>(t.dim(0)), static_cast<int>(t.dim(1)), static_cast<int>(t.dim(2)));
    out.px = t.values();
    return out;
}

// BT.601 luma on the 8-bit scale (result in [0,255], not rounded).
inline std::vector<double> luma601(const Image8& img) {
    POCR_CHECK(img.c == 3 || img.c == 1, "luma601: expects RGB or gray image");
    std::vector<double> out(static_cast<size_t>(img.h) * img.w);
    if (img.c == 1) {
        for (size_t i = 0; i < out.size(); ++i) out[i] = img.px[i];
        return out;
    }
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = 0.299 * img.px[3 * i] + 0.587 * img.px[3 * i + 1] + 0.114 * img.px[3 * i + 2];
    return out;
}

// 2x box downsample (exact mean of each 2x2 block); dims must be even.
inline ImageF downsample_half(const ImageF& img) {
    POCR_CHECK(img.h % 2 == 0 && img.w % 2 == 0, "downsample_half: dims must be even");
    ImageF out(img.h / 2, img.w / 2, img.c);
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x)
            for (int ch = 0; ch < img.c; ++ch)
                out.at(y, x, ch) = 0.25 * (img.at(2 * y, 2 * x, ch) + img.at(2 * y, 2 * x + 1, ch) +
                                           img.at(2 * y + 1, 2 * x, ch) + img.at(2 * y + 1, 2 * x + 1, ch));
    return out;
}

// Nearest-neighbor downsample by an integer factor; keeps binary masks binary.
inline ImageF downsample_nearest(const ImageF& img, int factor) {
    POCR_CHECK(factor >= 1 && img.h % factor == 0 && img.w % factor == 0,
               "downsample_nearest: factor must divide dims");
    ImageF out(img.h / factor, img.w / factor, img.c);
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x)
            for (int ch = 0; ch < img.c; ++ch) out.at(y, x, ch) = img.at(y * factor, x * factor, ch);
    return out;
}

}  // namespace pocr
