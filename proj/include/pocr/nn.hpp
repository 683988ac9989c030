#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "pocr/common.hpp"
#include "pocr/tensor.hpp"

namespace pocr {

// Named registry of trainable tensors. std::map keeps iteration order stable
// for checkpoints and the optimizer.
struct ParamStore {
    std::map<std::string, Tensor> params;

    Tensor make(const std::string& name, Shape shape) {
        POCR_CHECK(!params.count(name), "duplicate parameter name: " + name);
        Tensor t = Tensor::zeros(std::move(shape), /*requires_grad=*/true);
        params.emplace(name, t);
        return t;
    }

    Tensor& at(const std::string& name) {
        auto it = params.find(name);
        POCR_CHECK(it != params.end(), "unknown parameter: " + name);
        return it->second;
    }

    int64_t total_count() const {
        int64_t n = 0;
        for (const auto& [k, v] : params) n += v.numel();
        return n;
    }

    void zero_grads() {
        for (auto& [k, v] : params) v.zero_grad();
    }

    void set_requires_grad(bool rg) {
        for (auto& [k, v] : params) v.set_requires_grad(rg);
    }
};

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

struct LinearLayer {
    Tensor w, b;  // w: [in, out]

    LinearLayer() = default;
    LinearLayer(ParamStore& ps, const std::string& prefix, int64_t in, int64_t out)
        : w(ps.make(prefix + ".w", {in, out})), b(ps.make(prefix + ".b", {out})) {}

    Tensor operator()(const Tensor& x) const { return linear(x, w, b); }
};

struct LayerNormLayer {
    Tensor gamma, beta;

    LayerNormLayer() = default;
    LayerNormLayer(ParamStore& ps, const std::string& prefix, int64_t dim)
        : gamma(ps.make(prefix + ".g", {dim})), beta(ps.make(prefix + ".b", {dim})) {}

    Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

struct Conv2dLayer {
    Tensor w, b;  // w: [kh,kw,cin,cout]

    Conv2dLayer() = default;
    Conv2dLayer(ParamStore& ps, const std::string& prefix, int64_t k, int64_t cin, int64_t cout)
        : w(ps.make(prefix + ".w", {k, k, cin, cout})), b(ps.make(prefix + ".b", {cout})) {}

    Tensor operator()(const Tensor& x) const { return conv2d(x, w, b); }
};

// ---------------------------------------------------------------------------
// Index maps for space<->depth moves and window handling. All spatial
// rearrangement goes through gather_rows, so backward paths need no extra code.
// ---------------------------------------------------------------------------
namespace geom {

// [h,w,c] -> [h/r, w/r, r*r*c]: row indices over input pixels.
inline std::vector<int64_t> space_to_depth_rows(int64_t h, int64_t w, int64_t r) {
    std::vector<int64_t> idx;
    idx.reserve(static_cast<size_t>(h * w));
    for (int64_t y = 0; y < h / r; ++y)
        for (int64_t x = 0; x < w / r; ++x)
            for (int64_t ky = 0; ky < r; ++ky)
                for (int64_t kx = 0; kx < r; ++kx) idx.push_back((y * r + ky) * w + (x * r + kx));
    return idx;
}

// [h,w,c] -> [r*h, r*w, c/(r*r)]: rows are the r*r sub-pieces of each pixel.
inline std::vector<int64_t> depth_to_space_rows(int64_t h, int64_t w, int64_t r) {
    std::vector<int64_t> idx;
    idx.reserve(static_cast<size_t>(h * w * r * r));
    for (int64_t y = 0; y < h * r; ++y)
        for (int64_t x = 0; x < w * r; ++x)
            idx.push_back(((y / r) * w + (x / r)) * r * r + (y % r) * r + (x % r));
    return idx;
}

// Geometry of one windowed pass: symmetric zero padding to a window multiple
// plus optional cyclic shift folded into the partition map.
struct WindowPlan {
    int64_t h, w;            // unpadded feature size
    int64_t ph, pw;          // padded size
    int64_t pad_top, pad_left;
    int64_t win;             // effective window
    int64_t shift_y, shift_x;
    int64_t n_win, tokens;   // windows, win*win
    std::vector<int64_t> partition;  // [n_win*tokens] -> input pixel row or -1
    std::vector<int64_t> reverse;    // [h*w] -> window-element row
    std::vector<double> mask;        // [n_win, tokens, tokens], empty if no shift
};

inline WindowPlan make_window_plan(int64_t h, int64_t w, int64_t window, bool shifted) {
    WindowPlan p;
    p.h = h;
    p.w = w;
    p.win = std::min<int64_t>(window, std::max(h, w));
    p.ph = (h + p.win - 1) / p.win * p.win;
    p.pw = (w + p.win - 1) / p.win * p.win;
    p.pad_top = (p.ph - h) / 2;
    p.pad_left = (p.pw - w) / 2;
    p.shift_y = (shifted && h > p.win) ? p.win / 2 : 0;
    p.shift_x = (shifted && w > p.win) ? p.win / 2 : 0;
    p.tokens = p.win * p.win;
    int64_t wy = p.ph / p.win, wx = p.pw / p.win;
    p.n_win = wy * wx;

    p.partition.resize(static_cast<size_t>(p.n_win * p.tokens));
    for (int64_t n = 0; n < p.n_win; ++n) {
        int64_t wy0 = (n / wx) * p.win, wx0 = (n % wx) * p.win;
        for (int64_t iy = 0; iy < p.win; ++iy)
            for (int64_t ix = 0; ix < p.win; ++ix) {
                int64_t py = (wy0 + iy + p.shift_y) % p.ph;
                int64_t px = (wx0 + ix + p.shift_x) % p.pw;
                int64_t sy = py - p.pad_top, sx = px - p.pad_left;
                p.partition[static_cast<size_t>(n * p.tokens + iy * p.win + ix)] =
                    (sy < 0 || sy >= h || sx < 0 || sx >= w) ? -1 : sy * w + sx;
            }
    }
    p.reverse.resize(static_cast<size_t>(h * w));
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            int64_t py = y + p.pad_top, px = x + p.pad_left;
            int64_t sy = (py - p.shift_y + p.ph) % p.ph;
            int64_t sx = (px - p.shift_x + p.pw) % p.pw;
            int64_t n = (sy / p.win) * wx + (sx / p.win);
            p.reverse[static_cast<size_t>(y * w + x)] =
                n * p.tokens + (sy % p.win) * p.win + (sx % p.win);
        }

    if (p.shift_y > 0 || p.shift_x > 0) {
        // Region ids over the padded canvas; cross-region attention is masked.
        auto region = [&](int64_t v, int64_t extent, int64_t shift) -> int64_t {
            if (shift == 0) return 0;
            if (v < extent - p.win) return 0;
            if (v < extent - shift) return 1;
            return 2;
        };
        std::vector<int64_t> ids(static_cast<size_t>(p.n_win * p.tokens));
        for (int64_t n = 0; n < p.n_win; ++n) {
            int64_t wy0 = (n / wx) * p.win, wx0 = (n % wx) * p.win;
            for (int64_t iy = 0; iy < p.win; ++iy)
                for (int64_t ix = 0; ix < p.win; ++ix) {
                    int64_t py = (wy0 + iy + p.shift_y) % p.ph;
                    int64_t px = (wx0 + ix + p.shift_x) % p.pw;
                    ids[static_cast<size_t>(n * p.tokens + iy * p.win + ix)] =
                        region(py, p.ph, p.shift_y) * 3 + region(px, p.pw, p.shift_x);
                }
        }
        p.mask.assign(static_cast<size_t>(p.n_win * p.tokens * p.tokens), 0.0);
        for (int64_t n = 0; n < p.n_win; ++n)
            for (int64_t t1 = 0; t1 < p.tokens; ++t1)
                for (int64_t t2 = 0; t2 < p.tokens; ++t2)
                    if (ids[static_cast<size_t>(n * p.tokens + t1)] != ids[static_cast<size_t>(n * p.tokens + t2)])
                        p.mask[static_cast<size_t>((n * p.tokens + t1) * p.tokens + t2)] = -100.0;
    }
    return p;
}

// Relative-position index (t1, t2) -> row of the (2W-1)^2 bias table. Indices
// are computed against the configured window so the table covers any
// effective window not larger than it.
inline std::vector<int64_t> relative_bias_rows(int64_t eff_win, int64_t cfg_win) {
    int64_t t = eff_win * eff_win;
    std::vector<int64_t> idx(static_cast<size_t>(t * t));
    for (int64_t a = 0; a < t; ++a) {
        int64_t ay = a / eff_win, ax = a % eff_win;
        for (int64_t b = 0; b < t; ++b) {
            int64_t by = b / eff_win, bx = b % eff_win;
            int64_t dy = ay - by + cfg_win - 1;
            int64_t dx = ax - bx + cfg_win - 1;
            idx[static_cast<size_t>(a * t + b)] = dy * (2 * cfg_win - 1) + dx;
        }
    }
    return idx;
}

}  // namespace geom

// ---------------------------------------------------------------------------
// Swin v2 style windowed attention: scaled cosine similarity with a learnable
// per-head temperature (log-scale, clamped) and a relative position bias
// table, followed by residual post-normalization.
// ---------------------------------------------------------------------------

struct WindowAttention {
    LinearLayer qkv, proj;
    Tensor logit_scale;  // [heads], log scale, clamped at ln(100)
    Tensor bias_table;   // [(2W-1)^2, heads]
    int64_t heads = 0, cfg_window = 0, dim = 0;

    WindowAttention() = default;
    WindowAttention(ParamStore& ps, const std::string& prefix, int64_t dim_, int64_t heads_,
                    int64_t window)
        : qkv(ps, prefix + ".qkv", dim_, 3 * dim_),
          proj(ps, prefix + ".proj", dim_, dim_),
          logit_scale(ps.make(prefix + ".logit_scale", {heads_})),
          bias_table(ps.make(prefix + ".bias_table", {(2 * window - 1) * (2 * window - 1), heads_})),
          heads(heads_),
          cfg_window(window),
          dim(dim_) {}

    // x_windows: [nW, T, C]; mask: [nW, 1, T, T] or undefined.
    Tensor operator()(const Tensor& x_windows, const Tensor& mask, int64_t eff_win) const {
        int64_t n_win = x_windows.dim(0), t = x_windows.dim(1), c = x_windows.dim(2);
        int64_t d = c / heads;
        Tensor qkv_out = qkv(x_windows);  // [nW, T, 3C]

        // Slice q/k/v: rows of length C at stride 3 over [nW*T, 3, C].
        Tensor qkv3 = reshape(qkv_out, {n_win * t, 3, c});
        auto head_split = [&](int64_t which) {
            std::vector<int64_t> idx(static_cast<size_t>(n_win * t));
            for (int64_t i = 0; i < n_win * t; ++i) idx[static_cast<size_t>(i)] = i * 3 + which;
            Tensor s = gather_rows(qkv3, c, std::move(idx), {n_win, t, heads, d});
            return reshape(permute(s, {0, 2, 1, 3}), {n_win * heads, t, d});
        };
        Tensor q = head_split(0), k = head_split(1), v = head_split(2);

        Tensor attn = bmm_tb(l2_normalize_rows(q), l2_normalize_rows(k));  // [nW*h, T, T]
        attn = reshape(attn, {n_win, heads, t, t});
        Tensor temp = exp_val(clamp_max(logit_scale, std::log(100.0)));
        attn = mul_bcast(attn, reshape(temp, {1, heads, 1, 1}));

        Tensor bias = gather_rows(bias_table, heads, geom::relative_bias_rows(eff_win, cfg_window),
                                  {t, t, heads});
        attn = add_bcast(attn, reshape(permute(bias, {2, 0, 1}), {1, heads, t, t}));
        if (mask.defined()) attn = add_bcast(attn, mask);

        Tensor p = softmax_rows(attn);
        Tensor out = bmm(reshape(p, {n_win * heads, t, t}), v);  // [nW*h, T, d]
        out = reshape(permute(reshape(out, {n_win, heads, t, d}), {0, 2, 1, 3}), {n_win, t, c});
        return proj(out);
    }
};

struct SwinBlock {
    WindowAttention attn;
    LayerNormLayer norm1, norm2;
    LinearLayer fc1, fc2;
    int64_t window = 0;
    bool shifted = false;

    SwinBlock() = default;
    SwinBlock(ParamStore& ps, const std::string& prefix, int64_t dim, int64_t heads, int64_t window_,
              double mlp_ratio, bool shifted_)
        : attn(ps, prefix + ".attn", dim, heads, window_),
          norm1(ps, prefix + ".norm1", dim),
          norm2(ps, prefix + ".norm2", dim),
          fc1(ps, prefix + ".mlp.fc1", dim, static_cast<int64_t>(mlp_ratio * static_cast<double>(dim))),
          fc2(ps, prefix + ".mlp.fc2", static_cast<int64_t>(mlp_ratio * static_cast<double>(dim)), dim),
          window(window_),
          shifted(shifted_) {}

    // x: [h, w, c]
    Tensor operator()(const Tensor& x) const {
        int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
        geom::WindowPlan plan = geom::make_window_plan(h, w, window, shifted);

        Tensor xw = gather_rows(x, c, plan.partition, {plan.n_win, plan.tokens, c});
        Tensor mask;
        if (!plan.mask.empty())
            mask = Tensor::from_data({plan.n_win, 1, plan.tokens, plan.tokens}, plan.mask);
        Tensor aw = attn(xw, mask, plan.win);
        Tensor a = gather_rows(reshape(aw, {plan.n_win * plan.tokens, c}), c, plan.reverse, {h, w, c});
        Tensor y = add(x, norm1(a));

        Tensor m = fc2(gelu(fc1(y)));
        return add(y, norm2(m));
    }
};

// Space-to-depth downsample by r followed by a linear projection.
struct PatchEmbed {
    LinearLayer lin;
    int64_t ratio = 1;

    PatchEmbed() = default;
    PatchEmbed(ParamStore& ps, const std::string& prefix, int64_t ratio_, int64_t cin, int64_t cout)
        : lin(ps, prefix, ratio_ * ratio_ * cin, cout), ratio(ratio_) {}

    Tensor operator()(const Tensor& x) const {
        int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
        POCR_CHECK(h % ratio == 0 && w % ratio == 0,
                   "patch_embed: spatial size " + shape_str(x.shape()) + " not divisible by ratio " +
                       std::to_string(ratio));
        Tensor f = gather_rows(x, c, geom::space_to_depth_rows(h, w, ratio),
                               {h / ratio, w / ratio, ratio * ratio * c});
        return lin(f);
    }
};

// Depth-to-space upsample by r followed by a linear projection.
struct PatchSplit {
    LinearLayer lin;
    int64_t ratio = 1;

    PatchSplit() = default;
    PatchSplit(ParamStore& ps, const std::string& prefix, int64_t ratio_, int64_t cin, int64_t cout)
        : lin(ps, prefix, cin / (ratio_ * ratio_), cout), ratio(ratio_) {
        POCR_CHECK(cin % (ratio_ * ratio_) == 0,
                   "patch_split: channel count " + std::to_string(cin) + " not divisible by r^2");
    }

    Tensor operator()(const Tensor& x) const {
        int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
        POCR_CHECK(c % (ratio * ratio) == 0,
                   "patch_split: channel count " + std::to_string(c) + " not divisible by r^2");
        Tensor f = gather_rows(x, c / (ratio * ratio), geom::depth_to_space_rows(h, w, ratio),
                               {h * ratio, w * ratio, c / (ratio * ratio)});
        return lin(f);
    }
};

// Encoder-to-decoder shortcut: 1x1 (c) -> 3x3 (2c) -> 3x3 (2c) -> 1x1 (c),
// GELU between convolutions, then element-wise addition into the decoder path.
struct LateralConnection {
    Conv2dLayer c1, c2, c3, c4;

    LateralConnection() = default;
    LateralConnection(ParamStore& ps, const std::string& prefix, int64_t c)
        : c1(ps, prefix + ".conv1", 1, c, c),
          c2(ps, prefix + ".conv2", 3, c, 2 * c),
          c3(ps, prefix + ".conv3", 3, 2 * c, 2 * c),
          c4(ps, prefix + ".conv4", 1, 2 * c, c) {}

    Tensor operator()(const Tensor& enc_feat, const Tensor& dec_feat) const {
        POCR_CHECK(enc_feat.shape() == dec_feat.shape(),
                   "lateral_fuse: shape mismatch " + shape_str(enc_feat.shape()) + " vs " +
                       shape_str(dec_feat.shape()));
        Tensor y = c4(gelu(c3(gelu(c2(gelu(c1(enc_feat)))))));
        return add(y, dec_feat);
    }
};

}  // namespace pocr
