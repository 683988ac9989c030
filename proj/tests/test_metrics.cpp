#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "pocr/eval.hpp"
#include "pocr/rng.hpp"

using namespace pocr;
namespace fs = std::filesystem;

namespace {

Image8 random_image(int h, int w, int c, Rng& rng) {
    Image8 img(h, w, c);
    for (auto& v : img.px) v = static_cast<uint8_t>(rng.below(256));
    return img;
}

}  // namespace

TEST_CASE("psnr: cap, floor, symmetry") {
    Rng rng(1);
    Image8 a = random_image(8, 8, 3, rng);
    CHECK(psnr(a, a) == 100.0);

    Image8 lo(1, 1, 3, 0), hi(1, 1, 3, 255);
    CHECK(psnr(lo, hi) == Catch::Approx(0.0).margin(1e-12));

    Image8 b = random_image(8, 8, 3, rng);
    CHECK(psnr(a, b) == psnr(b, a));

    Image8 wrong(4, 8, 3);
    CHECK_THROWS_AS(psnr(a, wrong), ValueError);
}

TEST_CASE("mssim: identity, constant-image closed form, symmetry") {
    Rng rng(2);
    Image8 a = random_image(16, 16, 3, rng);
    CHECK(mssim(a, a) == Catch::Approx(100.0).margin(1e-9));
    Image8 b = random_image(16, 16, 3, rng);
    CHECK(mssim(a, b) == Catch::Approx(mssim(b, a)).margin(1e-12));

    // Constant images: SSIM reduces to (2*m1*m2+C1)/(m1^2+m2^2+C1).
    Image8 c1(16, 16, 3, 50), c2(16, 16, 3, 178);
    double m1 = 50, m2 = 178, C1 = 6.5025;
    double expect = (2 * m1 * m2 + C1) / (m1 * m1 + m2 * m2 + C1) * 100.0;
    CHECK(mssim(c1, c2) == Catch::Approx(expect).margin(1e-9));

    Image8 tiny(8, 8, 3);
    CHECK_THROWS_AS(mssim(tiny, tiny), ValueError);
}

TEST_CASE("mse/age/peps/pceps: identity and hand-built cases") {
    Rng rng(3);
    Image8 a = random_image(8, 8, 3, rng);
    CHECK(mse_percent(a, a) == 0.0);
    CHECK(age(a, a) == 0.0);
    CHECK(peps(a, a) == 0.0);
    CHECK(pceps(a, a) == 0.0);

    // 2x2 gray pair differing by 25 at a single pixel: one error pixel with
    // no interior, so peps = 1/4 and pceps = 0.
    Image8 g1(2, 2, 1, 100), g2(2, 2, 1, 100);
    g2.at(0, 0, 0) = 125;
    CHECK(age(g1, g2) == Catch::Approx(25.0 / 4.0));
    CHECK(peps(g1, g2) == 0.25);
    CHECK(pceps(g1, g2) == 0.0);

    // 3x3 all-error image: only the center has four in-bounds error
    // neighbors.
    Image8 e1(3, 3, 1, 0), e2(3, 3, 1, 200);
    CHECK(peps(e1, e2) == 1.0);
    CHECK(pceps(e1, e2) == Catch::Approx(1.0 / 9.0));

    // Brute-force neighbor scan on random pairs.
    for (int trial = 0; trial < 20; ++trial) {
        Image8 x = random_image(6, 7, 3, rng);
        Image8 y = random_image(6, 7, 3, rng);
        auto lx = luma601(x), ly = luma601(y);
        std::vector<int> err(lx.size());
        for (size_t i = 0; i < lx.size(); ++i) err[i] = std::fabs(lx[i] - ly[i]) > 20.0;
        int ne = 0, nc = 0;
        for (int yy = 0; yy < 6; ++yy)
            for (int xx = 0; xx < 7; ++xx) {
                if (!err[static_cast<size_t>(yy * 7 + xx)]) continue;
                ++ne;
                if (yy == 0 || yy == 5 || xx == 0 || xx == 6) continue;
                if (err[static_cast<size_t>((yy - 1) * 7 + xx)] && err[static_cast<size_t>((yy + 1) * 7 + xx)] &&
                    err[static_cast<size_t>(yy * 7 + xx - 1)] && err[static_cast<size_t>(yy * 7 + xx + 1)])
                    ++nc;
            }
        CHECK(peps(x, y) == Catch::Approx(ne / 42.0));
        CHECK(pceps(x, y) == Catch::Approx(nc / 42.0));
    }
}

TEST_CASE("pceps never exceeds peps") {
    Rng rng(4);
    for (int trial = 0; trial < 300; ++trial) {
        int h = 3 + static_cast<int>(rng.below(10));
        int w = 3 + static_cast<int>(rng.below(10));
        Image8 a = random_image(h, w, 3, rng);
        Image8 b = a;
        // Perturb a random subset so errors cluster sometimes.
        int flips = static_cast<int>(rng.below(static_cast<uint32_t>(h * w)));
        for (int i = 0; i < flips; ++i) {
            int y = static_cast<int>(rng.below(static_cast<uint32_t>(h)));
            int x = static_cast<int>(rng.below(static_cast<uint32_t>(w)));
            for (int ch = 0; ch < 3; ++ch) b.at(y, x, ch) = static_cast<uint8_t>(rng.below(256));
        }
        CHECK(pceps(a, b) <= peps(a, b) + 1e-15);
    }
}

TEST_CASE("segmentation scores: perfect, disjoint, hand-counted confusion") {
    Mask m(2, 2, 1, 0);
    m.at(0, 0, 0) = 1;
    ClassScores perfect = seg_scores(m, m);
    CHECK(perfect.iou == 100.0);
    CHECK(perfect.precision == 100.0);
    CHECK(perfect.recall == 100.0);
    CHECK(perfect.f == 100.0);

    Mask p(2, 2, 1, 0), g(2, 2, 1, 0);
    p.at(0, 0, 0) = 1;
    g.at(1, 1, 0) = 1;
    ClassScores disjoint = seg_scores(p, g);
    CHECK(disjoint.iou == 0.0);
    CHECK(disjoint.precision == 0.0);
    CHECK(disjoint.recall == 0.0);
    CHECK(disjoint.f == 0.0);

    // pred {(0,0),(0,1)}, gt {(0,1),(1,1)}: TP 1, FP 1, FN 1.
    Mask p2(2, 2, 1, 0), g2(2, 2, 1, 0);
    p2.at(0, 0, 0) = 1;
    p2.at(0, 1, 0) = 1;
    g2.at(0, 1, 0) = 1;
    g2.at(1, 1, 0) = 1;
    ClassScores s = seg_scores(p2, g2);
    CHECK(s.iou == Catch::Approx(100.0 / 3.0));
    CHECK(s.precision == 50.0);
    CHECK(s.recall == 50.0);
    CHECK(s.f == 50.0);

    Mask empty(2, 2, 1, 0);
    CHECK(seg_scores(empty, empty).iou == 100.0);

    Mask bad(2, 2, 1, 7);
    CHECK_THROWS_AS(seg_scores(bad, g2), ValueError);
}

TEST_CASE("tamper scores: perfect, background-only, hand tally, class check") {
    ClassMap m(3, 3, 1, 2);
    m.at(0, 0, 0) = 0;
    m.at(2, 2, 0) = 1;
    TamperScores perfect = tamper_scores(m, m);
    CHECK(perfect.m_iou == 100.0);
    CHECK(perfect.m_f == 100.0);

    ClassMap bg(3, 3, 1, 2);
    TamperScores none = tamper_scores(bg, bg);
    CHECK(none.tampered.iou == 100.0);  // absent from both maps
    CHECK(none.real.iou == 100.0);

    // gt: row0 tampered, row1 real, row2 background.
    // pred: same but (1,1) flipped real->tampered.
    ClassMap gt(3, 3, 1, 2), pred(3, 3, 1, 2);
    for (int x = 0; x < 3; ++x) {
        gt.at(0, x, 0) = 0;
        pred.at(0, x, 0) = 0;
        gt.at(1, x, 0) = 1;
        pred.at(1, x, 0) = 1;
    }
    pred.at(1, 1, 0) = 0;
    TamperScores s = tamper_scores(pred, gt);
    // tampered: TP 3, FP 1, FN 0 -> IoU 75, P 75, R 100, F 85.714
    CHECK(s.tampered.iou == Catch::Approx(75.0));
    CHECK(s.tampered.precision == Catch::Approx(75.0));
    CHECK(s.tampered.recall == Catch::Approx(100.0));
    CHECK(s.tampered.f == Catch::Approx(2 * 75.0 * 100.0 / 175.0));
    // real: TP 2, FP 0, FN 1 -> IoU 66.67, P 100, R 66.67, F 80
    CHECK(s.real.iou == Catch::Approx(200.0 / 3.0));
    CHECK(s.real.precision == Catch::Approx(100.0));
    CHECK(s.real.recall == Catch::Approx(200.0 / 3.0));
    CHECK(s.real.f == Catch::Approx(80.0));
    CHECK(s.m_iou == Catch::Approx((75.0 + 200.0 / 3.0) / 2));

    ClassMap bad(3, 3, 1, 5);
    CHECK_THROWS_AS(tamper_scores(bad, gt), ValueError);
}

TEST_CASE("scores are invariant under consistent pixel permutation") {
    Rng rng(5);
    Mask p(4, 4, 1), g(4, 4, 1);
    for (auto& v : p.px) v = static_cast<uint8_t>(rng.below(2));
    for (auto& v : g.px) v = static_cast<uint8_t>(rng.below(2));
    std::vector<size_t> perm(16);
    for (size_t i = 0; i < 16; ++i) perm[i] = i;
    rng.shuffle(perm);
    Mask p2 = p, g2 = g;
    for (size_t i = 0; i < 16; ++i) {
        p2.px[i] = p.px[perm[i]];
        g2.px[i] = g.px[perm[i]];
    }
    ClassScores s1 = seg_scores(p, g), s2 = seg_scores(p2, g2);
    CHECK(s1.iou == s2.iou);
    CHECK(s1.f == s2.f);
}

TEST_CASE("fid: zero on identical sets, univariate closed form, symmetry") {
    Rng rng(6);
    std::vector<std::vector<double>> x;
    for (int i = 0; i < 5; ++i) {
        std::vector<double> v(4);
        for (auto& e : v) e = rng.uniform(-1, 1);
        x.push_back(v);
    }
    CHECK(fid_from_embeddings(x, x) <= 1e-6);

    std::vector<std::vector<double>> a{{0.0}, {0.0}}, b{{1.0}, {1.0}};
    CHECK(fid_from_embeddings(a, b) == Catch::Approx(1.0).margin(1e-9));

    std::vector<std::vector<double>> y;
    for (int i = 0; i < 5; ++i) {
        std::vector<double> v(4);
        for (auto& e : v) e = rng.uniform(-1, 1);
        y.push_back(v);
    }
    CHECK(fid_from_embeddings(x, y) == Catch::Approx(fid_from_embeddings(y, x)).margin(1e-9));
    CHECK(fid_from_embeddings(x, y) >= 0.0);

    CHECK_THROWS_AS(fid_from_embeddings({{1.0}}, b), ValueError);
}

TEST_CASE("dataset evaluation: ground truth against itself is perfect") {
    GeneratorConfig cfg;
    cfg.image_size = 64;
    cfg.seed = 31;
    std::string dir = (fs::temp_directory_path() / "pocr_eval_ds").string();
    std::string pred = (fs::temp_directory_path() / "pocr_eval_pred").string();
    fs::remove_all(dir);
    fs::remove_all(pred);
    fs::create_directories(pred);

    std::vector<TaskSample> samples;
    for (TaskId t : {TaskId::removal, TaskId::segmentation, TaskId::tamper}) {
        auto batch = generate(cfg, t, 3);
        samples.insert(samples.end(), batch.begin(), batch.end());
    }
    write_dataset(samples, dir, &cfg);

    // Ideal predictions derived from the ground truth.
    for (const auto& s : samples) {
        if (s.task == TaskId::removal) {
            write_png(pred + "/" + s.id + ".png", s.target);
        } else if (s.task == TaskId::segmentation) {
            Mask m = decode_segmentation(to_float(s.target));
            Image8 vis = m;
            for (auto& v : vis.px) v = v ? 255 : 0;
            write_png(pred + "/" + s.id + ".png", vis);
        } else {
            write_png(pred + "/" + s.id + ".png", decode_tamper(to_float(s.target)));
        }
    }

    FeatureExtractor ex = FeatureExtractor::make_default();
    MetricReport rm = evaluate_predictions(pred, dir, TaskId::removal, ex);
    REQUIRE(rm.removal.has_value());
    CHECK(rm.samples == 3);
    CHECK(rm.removal->psnr == 100.0);
    CHECK(rm.removal->mssim == Catch::Approx(100.0).margin(1e-9));
    CHECK(rm.removal->mse == 0.0);
    CHECK(rm.removal->age == 0.0);
    CHECK(rm.removal->peps == 0.0);
    CHECK(rm.removal->pceps == 0.0);
    CHECK(rm.removal->fid <= 1e-6);

    MetricReport sg = evaluate_predictions(pred, dir, TaskId::segmentation, ex);
    REQUIRE(sg.segmentation.has_value());
    CHECK(sg.segmentation->iou == 100.0);
    CHECK(sg.segmentation->f == 100.0);

    MetricReport tp = evaluate_predictions(pred, dir, TaskId::tamper, ex);
    REQUIRE(tp.tamper.has_value());
    CHECK(tp.tamper->m_iou == 100.0);
    CHECK(tp.tamper->m_f == 100.0);

    fs::remove_all(dir);
    fs::remove_all(pred);
}

TEST_CASE("report means match an independent per-image recomputation") {
    GeneratorConfig cfg;
    cfg.image_size = 64;
    cfg.seed = 37;
    std::string dir = (fs::temp_directory_path() / "pocr_eval_ds2").string();
    std::string pred = (fs::temp_directory_path() / "pocr_eval_pred2").string();
    fs::remove_all(dir);
    fs::remove_all(pred);
    fs::create_directories(pred);

    auto samples = generate(cfg, TaskId::removal, 4);
    write_dataset(samples, dir, &cfg);
    // Noisy predictions: input images restyled as outputs.
    for (const auto& s : samples) write_png(pred + "/" + s.id + ".png", s.input);

    FeatureExtractor ex = FeatureExtractor::make_default();
    std::vector<PerImageRow> rows;
    MetricReport r = evaluate_predictions(pred, dir, TaskId::removal, ex, "default", &rows);
    REQUIRE(rows.size() == 4);

    double psnr_sum = 0;
    for (const auto& s : samples) psnr_sum += psnr(s.input, s.target);
    CHECK(r.removal->psnr == Catch::Approx(psnr_sum / 4.0).margin(1e-12));

    // Single-sample dataset: report equals the single-image values.
    std::string dir1 = dir + "_one";
    fs::remove_all(dir1);
    write_dataset({samples[0]}, dir1, &cfg);
    std::vector<PerImageRow> row1;
    MetricReport r1 = evaluate_predictions(pred, dir1, TaskId::removal, ex, "default", &row1);
    CHECK(r1.samples == 1);
    CHECK(r1.removal->psnr == Catch::Approx(psnr(samples[0].input, samples[0].target)).margin(1e-12));
    CHECK(r1.removal->mssim == Catch::Approx(mssim(samples[0].input, samples[0].target)).margin(1e-12));

    // Task flag not present in the dataset is rejected.
    CHECK_THROWS_AS(evaluate_predictions(pred, dir, TaskId::segmentation, ex), DataError);

    fs::remove_all(dir);
    fs::remove_all(dir1);
    fs::remove_all(pred);
}
