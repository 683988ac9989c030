#pragma once

#include <array>
#include <string>
#include <vector>

#include "pocr/checkpoint.hpp"
#include "pocr/codec.hpp"
#include "pocr/common.hpp"
#include "pocr/image.hpp"
#include "pocr/nn.hpp"
#include "pocr/rng.hpp"
#include "pocr/tensor.hpp"

namespace pocr {

// Scale order everywhere in this module: index 0 = quarter, 1 = half, 2 = full.
using ScaleTriple = std::array<Tensor, 3>;

struct LossConfig {
    std::array<double, 3> alpha{5.0, 6.0, 10.0};  // quarter, half, full
    std::array<double, 3> beta{0.8, 1.0, 2.0};
    double per_weight = 0.01;
    double sty_weight = 120.0;
    double smooth_delta = 0.1;

    void validate() const {
        for (double a : alpha) POCR_CHECK(a > 0, "loss config: alpha weights must be positive");
        for (double b : beta) POCR_CHECK(b > 0, "loss config: beta weights must be positive");
        POCR_CHECK(per_weight > 0 && sty_weight > 0 && smooth_delta > 0,
                   "loss config: coefficients must be positive");
    }
};

// Binary box mask at full / half / quarter scale; downscaling is nearest
// neighbor so every pyramid level stays exactly binary.
struct MaskPyramid {
    ScaleTriple masks;  // each [h, w, 1]

    static MaskPyramid from_mask(const Mask& box_mask) {
        POCR_CHECK(box_mask.c == 1, "mask pyramid: expects single-channel mask");
        POCR_CHECK(box_mask.h % 4 == 0 && box_mask.w % 4 == 0,
                   "mask pyramid: mask dims must be divisible by 4");
        ImageF full(box_mask.h, box_mask.w, 1);
        for (size_t i = 0; i < box_mask.px.size(); ++i) {
            POCR_CHECK(box_mask.px[i] <= 1, "mask pyramid: mask values must be 0 or 1");
            full.px[i] = box_mask.px[i];
        }
        ImageF half = downsample_nearest(full, 2);
        ImageF quarter = downsample_nearest(full, 4);
        MaskPyramid p;
        p.masks = {to_tensor(quarter), to_tensor(half), to_tensor(full)};
        return p;
    }
};

// Ground-truth image at the three supervision scales (half/quarter are exact
// 2x2 box means of the full-resolution target).
inline ScaleTriple target_pyramid(const ImageF& gt) {
    POCR_CHECK(gt.h % 4 == 0 && gt.w % 4 == 0, "target pyramid: dims must be divisible by 4");
    ImageF half = downsample_half(gt);
    ImageF quarter = downsample_half(half);
    return {to_tensor(quarter), to_tensor(half), to_tensor(gt)};
}

// ---------------------------------------------------------------------------
// Pixel losses
// ---------------------------------------------------------------------------

// Text removal: mean-reduced L1 weighted alpha inside the text boxes and beta
// outside, summed over the three scales.
inline Tensor pixel_loss_removal(const ScaleTriple& outs, const ScaleTriple& gts,
                                 const MaskPyramid& masks, const LossConfig& cfg) {
    Tensor total = Tensor::scalar(0.0);
    for (int i = 0; i < 3; ++i) {
        POCR_CHECK(outs[i].shape() == gts[i].shape(),
                   "pixel_loss_removal: scale " + std::to_string(i) + " shape mismatch " +
                       shape_str(outs[i].shape()) + " vs " + shape_str(gts[i].shape()));
        const Tensor& m = masks.masks[i];
        POCR_CHECK(m.dim(0) == outs[i].dim(0) && m.dim(1) == outs[i].dim(1),
                   "pixel_loss_removal: mask scale " + std::to_string(i) + " shape mismatch");
        Tensor diff = abs_val(sub(outs[i], gts[i]));
        Tensor inv_m = sub(Tensor::filled(m.shape(), 1.0), m);
        Tensor inside = mean_all(mul_bcast(diff, m));
        Tensor outside = mean_all(mul_bcast(diff, inv_m));
        total = add(total, add(mul_scalar(inside, cfg.alpha[i]), mul_scalar(outside, cfg.beta[i])));
    }
    return total;
}

// Segmentation-style tasks: mean-reduced smooth L1 per scale, weighted alpha.
inline Tensor pixel_loss_seg(const ScaleTriple& outs, const ScaleTriple& gts, const LossConfig& cfg) {
    Tensor total = Tensor::scalar(0.0);
    for (int i = 0; i < 3; ++i) {
        POCR_CHECK(outs[i].shape() == gts[i].shape(),
                   "pixel_loss_seg: scale " + std::to_string(i) + " shape mismatch " +
                       shape_str(outs[i].shape()) + " vs " + shape_str(gts[i].shape()));
        Tensor l = mean_all(smooth_l1(sub(outs[i], gts[i]), cfg.smooth_delta));
        total = add(total, mul_scalar(l, cfg.alpha[i]));
    }
    return total;
}

// Prediction inside the text boxes stitched with the input outside them.
inline Tensor composite_image(const Tensor& out, const Tensor& inp, const Tensor& mask) {
    POCR_CHECK(out.shape() == inp.shape(), "composite_image: shape mismatch");
    POCR_CHECK(mask.ndim() == 3 && mask.dim(0) == out.dim(0) && mask.dim(1) == out.dim(1),
               "composite_image: mask shape mismatch");
    Tensor inv_m = sub(Tensor::filled(mask.shape(), 1.0), mask);
    return add(mul_bcast(out, mask), mul_bcast(inp, inv_m));
}

// Gram matrix G = F^T F / (h*w*c) with F the (h*w) x c flattening.
inline Tensor gram(const Tensor& feat) {
    POCR_CHECK(feat.ndim() == 3, "gram: expects HWC feature map");
    int64_t h = feat.dim(0), w = feat.dim(1), c = feat.dim(2);
    Tensor ft = permute(reshape(feat, {h * w, c}), {1, 0});  // [c, hw]
    return mul_scalar(matmul_tb(ft, ft), 1.0 / static_cast<double>(h * w * c));
}

// ---------------------------------------------------------------------------
// Fixed convolutional feature stack standing in for the usual pretrained
// perceptual network: 7 convolutions and 3 max-pool stages; the three exposed
// feature maps are the pooling outputs. Weights are frozen and derived
// deterministically from a seed, or loaded from a file.
// ---------------------------------------------------------------------------
class FeatureExtractor {
public:
    static constexpr int kTaps = 3;

    // channels per conv layer in the [c,c,P,c,c,P,c,c,c,P] layout
    static FeatureExtractor make_default(uint64_t seed = 2024) {
        return FeatureExtractor({24, 24, 40, 40, 64, 64, 64}, seed);
    }

    FeatureExtractor(std::vector<int> channels, uint64_t seed) : channels_(std::move(channels)) {
        POCR_CHECK(channels_.size() == 7, "feature extractor: expects 7 conv layers");
        Rng rng(seed);
        int cin = 3;
        for (size_t i = 0; i < channels_.size(); ++i) {
            convs_.emplace_back(params_, "conv" + std::to_string(i + 1), 3, cin, channels_[i]);
            // He-scaled normal keeps activation magnitudes stable through relu.
            double std = std::sqrt(2.0 / (9.0 * cin));
            for (auto& v : convs_.back().w.values()) v = rng.normal() * std;
            cin = channels_[i];
        }
        params_.set_requires_grad(false);
    }

    static FeatureExtractor from_file(const std::string& path) {
        ckpt::File file = ckpt::load(path);
        POCR_CHECK_DATA(file.header.contains("channels"),
                        "feature extractor: file missing 'channels' header: " + path);
        std::vector<int> channels = file.header["channels"].get<std::vector<int>>();
        FeatureExtractor ex(channels, 0);
        ckpt::unpack_params(file, ex.params_, /*strict=*/true);
        return ex;
    }

    void save(const std::string& path) const {
        ckpt::File file;
        file.header = {{"channels", channels_}};
        ckpt::pack_params(file, params_);
        ckpt::save(path, file);
    }

    // image: [h,w,3] in [0,1]. Returns pool1/pool2/pool3 feature maps.
    std::array<Tensor, kTaps> operator()(const Tensor& image) const {
        POCR_CHECK(image.ndim() == 3 && image.dim(2) == 3, "feature extractor: expects HxWx3 input");
        Tensor x = image;
        std::array<Tensor, kTaps> taps;
        int conv_idx = 0;
        int tap_idx = 0;
        for (int group = 0; group < 3; ++group) {
            int convs_in_group = group == 2 ? 3 : 2;
            for (int i = 0; i < convs_in_group; ++i)
                x = relu(convs_[static_cast<size_t>(conv_idx++)](x));
            x = max_pool2(x);
            taps[static_cast<size_t>(tap_idx++)] = x;
        }
        return taps;
    }

    // Concatenated spatial means of the three taps; used as the default
    // embedding for distribution metrics. Dimension = sum of tap channels.
    std::vector<double> embed(const ImageF& image) const {
        NoGradGuard ng;
        auto taps = (*this)(to_tensor(image));
        std::vector<double> out;
        for (const auto& t : taps) {
            Tensor m = mean_rows(reshape(t, {t.dim(0) * t.dim(1), t.dim(2)}), t.dim(2));
            out.insert(out.end(), m.values().begin(), m.values().end());
        }
        return out;
    }

    int64_t embed_dim() const { return channels_[1] + channels_[3] + channels_[6]; }
    const std::vector<int>& channels() const { return channels_; }
    const std::vector<Conv2dLayer>& conv_layers() const { return convs_; }

private:
    std::vector<int> channels_;
    ParamStore params_;
    std::vector<Conv2dLayer> convs_;
};

// ---------------------------------------------------------------------------
// Feature loss (removal task): perceptual + style terms over the extractor
// taps, evaluated for both the raw prediction and the box-composited one.
// ---------------------------------------------------------------------------
// Raw (unweighted) perceptual and style terms.
inline std::pair<Tensor, Tensor> feature_loss_terms(const Tensor& out, const Tensor& out_star,
                                                    const Tensor& gt,
                                                    const FeatureExtractor& extractor) {
    static_assert(FeatureExtractor::kTaps == 3);
    auto phi_out = extractor(out);
    auto phi_star = extractor(out_star);
    auto phi_gt = extractor(gt);
    Tensor l_per = Tensor::scalar(0.0);
    Tensor l_sty = Tensor::scalar(0.0);
    for (int i = 0; i < 3; ++i) {
        l_per = add(l_per, mean_all(abs_val(sub(phi_out[i], phi_gt[i]))));
        l_per = add(l_per, mean_all(abs_val(sub(phi_star[i], phi_gt[i]))));
        Tensor g_gt = gram(phi_gt[i]);
        l_sty = add(l_sty, mean_all(abs_val(sub(gram(phi_out[i]), g_gt))));
        l_sty = add(l_sty, mean_all(abs_val(sub(gram(phi_star[i]), g_gt))));
    }
    return {l_per, l_sty};
}

inline Tensor feature_loss(const Tensor& out, const Tensor& out_star, const Tensor& gt,
                           const FeatureExtractor& extractor, const LossConfig& cfg) {
    auto [l_per, l_sty] = feature_loss_terms(out, out_star, gt, extractor);
    return add(mul_scalar(l_per, cfg.per_weight), mul_scalar(l_sty, cfg.sty_weight));
}

// ---------------------------------------------------------------------------
// Per-sample total loss
// ---------------------------------------------------------------------------

struct LossBreakdown {
    double l_pix = 0.0;
    double l_per = 0.0;   // weighted perceptual contribution
    double l_sty = 0.0;   // weighted style contribution
    double l_total = 0.0;
    Tensor total;         // graph root for backward
};

// input_full is the network input at full resolution (used to build the
// composite image); mask must be present exactly for removal samples.
inline LossBreakdown total_loss(TaskId task, const ScaleTriple& outs, const ScaleTriple& gts,
                                const Tensor& input_full, const MaskPyramid* masks,
                                const FeatureExtractor& extractor, const LossConfig& cfg) {
    LossBreakdown bd;
    if (task == TaskId::removal) {
        POCR_CHECK(masks != nullptr, "total_loss: removal sample requires a box mask");
        Tensor pix = pixel_loss_removal(outs, gts, *masks, cfg);
        Tensor star = composite_image(outs[2], input_full, masks->masks[2]);
        auto [l_per, l_sty] = feature_loss_terms(outs[2], star, gts[2], extractor);
        Tensor per_w = mul_scalar(l_per, cfg.per_weight);
        Tensor sty_w = mul_scalar(l_sty, cfg.sty_weight);
        bd.total = add(pix, add(per_w, sty_w));
        bd.l_pix = pix.value();
        bd.l_per = per_w.value();
        bd.l_sty = sty_w.value();
    } else {
        Tensor pix = pixel_loss_seg(outs, gts, cfg);
        bd.total = pix;
        bd.l_pix = pix.value();
    }
    bd.l_total = bd.total.value();
    return bd;
}

}  // namespace pocr
