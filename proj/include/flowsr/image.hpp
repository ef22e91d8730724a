#pragma once

// Image conventions: an image is a TensorT<T> of shape [H, W, C] with values
// in [0, 1]. PNG I/O is 8-bit RGB only; loading divides by 255, saving
// multiplies by 255 and rounds half away from zero.

#include <cmath>
#include <string>

#include "flowsr/tensor.hpp"

namespace flowsr {

Tensor load_png(const std::string& path);
void save_png(const std::string& path, const Tensor& img);

template <typename T>
void require_image(const TensorT<T>& x, const char* op) {
    if (x.ndim() != 3 || x.dim(2) < 1)
        throw std::invalid_argument(std::string(op) + ": expected an HxWxC image, got " +
                                    x.shape_str());
}

template <typename T>
void require_unit_range(const TensorT<T>& x, const char* op) {
    for (const T& v : x.data)
        if (!(v >= T(0) && v <= T(1)))
            throw std::invalid_argument(std::string(op) + ": pixel values outside [0,1]");
}

// Mean of channels; the luminance reduction used by all spectral analysis.
template <typename T>
TensorT<T> luminance(const TensorT<T>& img) {
    require_image(img, "luminance");
    const int H = img.dim(0), W = img.dim(1), C = img.dim(2);
    TensorT<T> out({H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            T s = 0;
            for (int c = 0; c < C; ++c) s += img.at(y, x, c);
            out.at(y, x) = s / static_cast<T>(C);
        }
    return out;
}

template <typename T>
TensorT<T> clamp01(TensorT<T> img) {
    for (auto& v : img.data) v = std::min(T(1), std::max(T(0), v));
    return img;
}

namespace imgdetail {

// Catmull-Rom kernel (a = -0.5)
inline double cubic_weight(double x) {
    x = std::abs(x);
    if (x < 1.0) return 1.5 * x * x * x - 2.5 * x * x + 1.0;
    if (x < 2.0) return -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0;
    return 0.0;
}

}  // namespace imgdetail

// Separable bicubic resize with clamped borders. Used to lift LR inputs to
// the HR grid before latent encoding and as the identity/upsample baseline.
template <typename T>
TensorT<T> resize_bicubic(const TensorT<T>& img, int out_h, int out_w) {
    require_image(img, "resize_bicubic");
    const int H = img.dim(0), W = img.dim(1), C = img.dim(2);
    auto clampi = [](int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); };

    // horizontal pass
    TensorT<T> tmp({H, out_w, C});
    const double sx = static_cast<double>(W) / out_w;
    for (int ox = 0; ox < out_w; ++ox) {
        const double center = (ox + 0.5) * sx - 0.5;
        const int base = static_cast<int>(std::floor(center)) - 1;
        double wgt[4], wsum = 0.0;
        for (int k = 0; k < 4; ++k) {
            wgt[k] = imgdetail::cubic_weight(center - (base + k));
            wsum += wgt[k];
        }
        for (int k = 0; k < 4; ++k) wgt[k] /= wsum;
        for (int y = 0; y < H; ++y)
            for (int c = 0; c < C; ++c) {
                double acc = 0.0;
                for (int k = 0; k < 4; ++k)
                    acc += wgt[k] * img.at(y, clampi(base + k, 0, W - 1), c);
                tmp.at(y, ox, c) = static_cast<T>(acc);
            }
    }
    // vertical pass
    TensorT<T> out({out_h, out_w, C});
    const double sy = static_cast<double>(H) / out_h;
    for (int oy = 0; oy < out_h; ++oy) {
        const double center = (oy + 0.5) * sy - 0.5;
        const int base = static_cast<int>(std::floor(center)) - 1;
        double wgt[4], wsum = 0.0;
        for (int k = 0; k < 4; ++k) {
            wgt[k] = imgdetail::cubic_weight(center - (base + k));
            wsum += wgt[k];
        }
        for (int k = 0; k < 4; ++k) wgt[k] /= wsum;
        for (int ox = 0; ox < out_w; ++ox)
            for (int c = 0; c < C; ++c) {
                double acc = 0.0;
                for (int k = 0; k < 4; ++k)
                    acc += wgt[k] * tmp.at(clampi(base + k, 0, H - 1), ox, c);
                out.at(oy, ox, c) = static_cast<T>(acc);
            }
    }
    return out;
}

// Integer-factor nearest upsample; used for display composites.
template <typename T>
TensorT<T> upsample_nearest(const TensorT<T>& img, int factor) {
    require_image(img, "upsample_nearest");
    const int H = img.dim(0), W = img.dim(1), C = img.dim(2);
    TensorT<T> out({H * factor, W * factor, C});
    for (int y = 0; y < H * factor; ++y)
        for (int x = 0; x < W * factor; ++x)
            for (int c = 0; c < C; ++c) out.at(y, x, c) = img.at(y / factor, x / factor, c);
    return out;
}

// Side-by-side composite with a 2px white gutter; inputs must share height.
template <typename T>
TensorT<T> hconcat_images(const std::vector<TensorT<T>>& imgs) {
    if (imgs.empty()) throw std::invalid_argument("hconcat_images: empty input");
    const int H = imgs[0].dim(0), C = imgs[0].dim(2);
    const int gutter = 2;
    int W = 0;
    for (const auto& im : imgs) {
        if (im.dim(0) != H || im.dim(2) != C)
            throw std::invalid_argument("hconcat_images: height/channel mismatch");
        W += im.dim(1);
    }
    W += gutter * (static_cast<int>(imgs.size()) - 1);
    TensorT<T> out = TensorT<T>::full({H, W, C}, T(1));
    int x0 = 0;
    for (const auto& im : imgs) {
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < im.dim(1); ++x)
                for (int c = 0; c < C; ++c) out.at(y, x0 + x, c) = im.at(y, x, c);
        x0 += im.dim(1) + gutter;
    }
    return out;
}

}  // namespace flowsr
