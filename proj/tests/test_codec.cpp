#include <catch2/catch_amalgamated.hpp>

#include "pocr/codec.hpp"
#include "pocr/rng.hpp"

using namespace pocr;

TEST_CASE("segmentation target encoding") {
    Mask ones(4, 4, 1, 1);
    Image8 t = encode_segmentation_target(ones);
    for (auto v : t.px) CHECK(v == 255);

    Mask mixed(2, 2, 1, 0);
    mixed.at(0, 1, 0) = 1;
    Image8 t2 = encode_segmentation_target(mixed);
    CHECK(t2.at(0, 0, 0) == 0);
    CHECK(t2.at(0, 1, 0) == 255);
    CHECK(t2.at(0, 1, 1) == 255);
    CHECK(t2.at(0, 1, 2) == 255);

    Mask bad(1, 1, 1, 7);
    CHECK_THROWS_AS(encode_segmentation_target(bad), ValueError);
}

TEST_CASE("tamper target encoding uses red/green/blue") {
    ClassMap m(2, 2, 1, 2);
    m.at(0, 0, 0) = 0;  // tampered
    m.at(1, 1, 0) = 1;  // real
    Image8 t = encode_tamper_target(m);
    CHECK(t.at(0, 0, 0) == 255);
    CHECK(t.at(0, 0, 1) == 0);
    CHECK(t.at(0, 0, 2) == 0);
    CHECK(t.at(1, 1, 1) == 255);
    CHECK(t.at(0, 1, 2) == 255);  // background is blue

    ClassMap bad(1, 1, 1, 3);
    CHECK_THROWS_AS(encode_tamper_target(bad), ValueError);
}

TEST_CASE("removal target passes through") {
    Image8 img(3, 3, 3);
    Rng rng(1);
    for (auto& v : img.px) v = static_cast<uint8_t>(rng.below(256));
    Image8 t = encode_removal_target(img);
    CHECK(t.px == img.px);
}

TEST_CASE("segmentation decoding thresholds the channel mean at 0.4") {
    ImageF p(1, 3, 3);
    p.at(0, 0, 0) = 1.0; p.at(0, 0, 1) = 1.0; p.at(0, 0, 2) = 1.0;
    p.at(0, 1, 0) = 0.0; p.at(0, 1, 1) = 0.0; p.at(0, 1, 2) = 0.0;
    p.at(0, 2, 0) = 0.5; p.at(0, 2, 1) = 0.3; p.at(0, 2, 2) = 0.3;  // mean 0.3667
    Mask m = decode_segmentation(p);
    CHECK(m.at(0, 0, 0) == 1);
    CHECK(m.at(0, 1, 0) == 0);
    CHECK(m.at(0, 2, 0) == 0);

    // Strict inequality at the threshold, checked with an exactly
    // representable threshold value.
    ColorMap cm;
    cm.seg_threshold = 0.5;
    ImageF q(1, 1, 3, 0.5);
    CHECK(decode_segmentation(q, cm).at(0, 0, 0) == 0);
    ImageF q2(1, 1, 3, 0.5625);
    CHECK(decode_segmentation(q2, cm).at(0, 0, 0) == 1);
}

TEST_CASE("segmentation decoding is monotone in every channel") {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        ImageF p(1, 1, 3);
        for (int ch = 0; ch < 3; ++ch) p.at(0, 0, ch) = rng.uniform();
        uint8_t before = decode_segmentation(p).at(0, 0, 0);
        int ch = static_cast<int>(rng.below(3));
        p.at(0, 0, ch) = std::min(1.0, p.at(0, 0, ch) + rng.uniform());
        uint8_t after = decode_segmentation(p).at(0, 0, 0);
        CHECK(after >= before);
    }
}

TEST_CASE("tamper decoding: argmax with R>G>B ties") {
    ImageF p(1, 2, 3);
    p.at(0, 0, 0) = 0.9; p.at(0, 0, 1) = 0.1; p.at(0, 0, 2) = 0.2;
    p.at(0, 1, 0) = 0.2; p.at(0, 1, 1) = 0.2; p.at(0, 1, 2) = 0.6;
    ClassMap m = decode_tamper(p);
    CHECK(m.at(0, 0, 0) == 0);
    CHECK(m.at(0, 1, 0) == 2);

    ImageF tie(1, 1, 3, 0.5);
    CHECK(decode_tamper(tie).at(0, 0, 0) == 0);  // R wins three-way ties
}

TEST_CASE("tamper decoding is invariant under uniform positive scaling") {
    Rng rng(3);
    int checked = 0;
    for (int trial = 0; trial < 500; ++trial) {
        ImageF p(2, 2, 3);
        for (auto& v : p.px) v = rng.uniform(0.01, 1.0);
        bool has_tie = false;
        for (int i = 0; i < 4; ++i) {
            double r = p.px[3 * i], g = p.px[3 * i + 1], b = p.px[3 * i + 2];
            if (r == g || g == b || r == b) has_tie = true;
        }
        if (has_tie) continue;
        double k = rng.uniform(0.1, 5.0);
        ImageF scaled = p;
        for (auto& v : scaled.px) v *= k;
        CHECK(decode_tamper(p).px == decode_tamper(scaled).px);
        ++checked;
    }
    CHECK(checked > 400);
}

TEST_CASE("removal decoding clamps into [0,1]") {
    ImageF p(1, 1, 3);
    p.at(0, 0, 0) = 1.3;
    p.at(0, 0, 1) = -0.2;
    p.at(0, 0, 2) = 0.5;
    ImageF d = decode_removal(p);
    CHECK(d.at(0, 0, 0) == 1.0);
    CHECK(d.at(0, 0, 1) == 0.0);
    CHECK(d.at(0, 0, 2) == 0.5);
}

TEST_CASE("encode/decode round trips are exact on random labels") {
    Rng rng(4);
    for (int trial = 0; trial < 300; ++trial) {
        int h = 1 + static_cast<int>(rng.below(8));
        int w = 1 + static_cast<int>(rng.below(8));

        Mask mask(h, w, 1);
        for (auto& v : mask.px) v = static_cast<uint8_t>(rng.below(2));
        Mask back = decode_segmentation(to_float(encode_segmentation_target(mask)));
        REQUIRE(back.px == mask.px);

        ClassMap classes(h, w, 1);
        for (auto& v : classes.px) v = static_cast<uint8_t>(rng.below(3));
        ClassMap back2 = decode_tamper(to_float(encode_tamper_target(classes)));
        REQUIRE(back2.px == classes.px);
    }
}

TEST_CASE("task names round trip") {
    for (TaskId t : {TaskId::removal, TaskId::segmentation, TaskId::tamper})
        CHECK(task_from_name(task_name(t)) == t);
    CHECK_THROWS_AS(task_from_name("nope"), ValueError);
}
