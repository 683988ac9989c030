#pragma once

#include <array>
#include <string>

#include "pocr/common.hpp"
#include "pocr/image.hpp"

namespace pocr {

// Task indices are part of the checkpoint format; never reorder.
enum class TaskId : int { removal = 0, segmentation = 1, tamper = 2 };

constexpr int kNumTasks = 3;

inline std::string task_name(TaskId t) {
    switch (t) {
        case TaskId::removal: return "removal";
        case TaskId::segmentation: return "segmentation";
        case TaskId::tamper: return "tamper";
    }
    throw ValueError("unknown task id");
}

inline TaskId task_from_name(const std::string& s) {
    if (s == "removal") return TaskId::removal;
    if (s == "segmentation") return TaskId::segmentation;
    if (s == "tamper") return TaskId::tamper;
    throw ValueError("unknown task name: " + s);
}

// Output color conventions shared by the target encoder and all decoders.
struct ColorMap {
    std::array<uint8_t, 3> seg_fg{255, 255, 255};
    std::array<uint8_t, 3> seg_bg{0, 0, 0};
    std::array<uint8_t, 3> tamper{255, 0, 0};
    std::array<uint8_t, 3> real{0, 255, 0};
    std::array<uint8_t, 3> background{0, 0, 255};
    double seg_threshold = 0.4;
};

// Tamper classes: 0 = tampered, 1 = real text, 2 = background.
enum class TamperClass : uint8_t { tampered = 0, real = 1, background = 2 };

// Binary stroke/box mask: single channel, values in {0,1}.
using Mask = Image8;
// Per-pixel class map, values in {0,1,2}.
using ClassMap = Image8;

// ---------------------------------------------------------------------------
// Target encoding: map task ground truth into the shared RGB output space.
// ---------------------------------------------------------------------------

inline Image8 encode_removal_target(const Image8& erased_rgb) {
    POCR_CHECK(erased_rgb.c == 3, "encode_removal_target: expects RGB ground truth");
    return erased_rgb;  // pass-through
}

inline Image8 encode_segmentation_target(const Mask& stroke_mask, const ColorMap& cm = {}) {
    POCR_CHECK(stroke_mask.c == 1, "encode_segmentation_target: expects single-channel mask");
    Image8 out(stroke_mask.h, stroke_mask.w, 3);
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x) {
            uint8_t v = stroke_mask.at(y, x, 0);
            POCR_CHECK(v <= 1, "encode_segmentation_target: mask values must be 0 or 1");
            const auto& color = v ? cm.seg_fg : cm.seg_bg;
            for (int ch = 0; ch < 3; ++ch) out.at(y, x, ch) = color[static_cast<size_t>(ch)];
        }
    return out;
}

inline Image8 encode_tamper_target(const ClassMap& classes, const ColorMap& cm = {}) {
    POCR_CHECK(classes.c == 1, "encode_tamper_target: expects single-channel class map");
    Image8 out(classes.h, classes.w, 3);
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x) {
            uint8_t v = classes.at(y, x, 0);
            POCR_CHECK(v <= 2, "encode_tamper_target: class value " + std::to_string(v) +
                                   " outside {0,1,2}");
            const auto& color = v == 0 ? cm.tamper : (v == 1 ? cm.real : cm.background);
            for (int ch = 0; ch < 3; ++ch) out.at(y, x, ch) = color[static_cast<size_t>(ch)];
        }
    return out;
}

// ---------------------------------------------------------------------------
// Prediction decoding (inputs are predicted RGB images on the [0,1] scale).
// ---------------------------------------------------------------------------

// Identity up to clamping into [0,1].
inline ImageF decode_removal(const ImageF& pred) {
    POCR_CHECK(pred.c == 3, "decode_removal: expects RGB prediction");
    ImageF out = pred;
    for (auto& v : out.px) v = std::min(1.0, std::max(0.0, v));
    return out;
}

// Foreground iff the channel mean exceeds the threshold (strict >).
inline Mask decode_segmentation(const ImageF& pred, const ColorMap& cm = {}) {
    POCR_CHECK(pred.c == 3, "decode_segmentation: expects RGB prediction");
    Mask out(pred.h, pred.w, 1);
    for (int y = 0; y < pred.h; ++y)
        for (int x = 0; x < pred.w; ++x) {
            double m = 0.0;
            for (int ch = 0; ch < 3; ++ch) m += std::min(1.0, std::max(0.0, pred.at(y, x, ch)));
            out.at(y, x, 0) = (m / 3.0 > cm.seg_threshold) ? 1 : 0;
        }
    return out;
}

// Per-pixel argmax over (R,G,B) -> (tampered, real, background); ties resolved
// in fixed R > G > B order.
inline ClassMap decode_tamper(const ImageF& pred) {
    POCR_CHECK(pred.c == 3, "decode_tamper: expects RGB prediction");
    ClassMap out(pred.h, pred.w, 1);
    for (int y = 0; y < pred.h; ++y)
        for (int x = 0; x < pred.w; ++x) {
            double r = pred.at(y, x, 0), g = pred.at(y, x, 1), b = pred.at(y, x, 2);
            uint8_t cls = 2;
            if (r >= g && r >= b)
                cls = 0;
            else if (g >= b)
                cls = 1;
            out.at(y, x, 0) = cls;
        }
    return out;
}

}  // namespace pocr
