#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "pocr/analysis.hpp"
#include "pocr/train.hpp"
#include "test_util.hpp"

using namespace pocr;
namespace fs = std::filesystem;

namespace {

std::vector<TaskSample> tiny_samples(int count) {
    GeneratorConfig cfg;
    cfg.image_size = 64;
    cfg.seed = 55;
    return generate(cfg, TaskId::segmentation, count);
}

}  // namespace

TEST_CASE("extract_features: counts, shared invariance, exact prompt offset") {
    Model model(ModelConfig::preset("toy"));
    init_random(model.params(), 5);
    // Give prompts distinct nonzero values.
    Rng rng(6);
    for (const char* p : {"prompts.removal", "prompts.segmentation", "prompts.tamper"}) {
        Tensor& t = model.params().at(p);
        for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(-0.5, 0.5);
    }

    auto samples = tiny_samples(3);
    std::vector<TaskId> tasks = {TaskId::removal, TaskId::segmentation, TaskId::tamper};
    FeatureExtraction fx = extract_features(model, samples, tasks, /*trained=*/false);
    REQUIRE(fx.records.size() == 9);
    CHECK(fx.metadata.at("trained") == false);

    for (const auto& rec : fx.records) {
        const auto& prompt = model.params().at("prompts." + task_name(rec.task)).values();
        REQUIRE(rec.shared.size() == prompt.size());
        for (size_t i = 0; i < prompt.size(); ++i)
            CHECK(rec.injected[i] - rec.shared[i] == Catch::Approx(prompt[i]).margin(1e-6));
    }
    // Shared features are identical across the task passes of one sample.
    for (size_t s = 0; s < samples.size(); ++s) {
        const auto& base = fx.records[s * 3].shared;
        CHECK(fx.records[s * 3 + 1].shared == base);
        CHECK(fx.records[s * 3 + 2].shared == base);
    }
}

TEST_CASE("project_2d: distance preservation, duplicates, component order") {
    Rng rng(7);
    // Already 2-D data, centered: projection is a rotation, so pairwise
    // distances survive.
    std::vector<std::vector<double>> feats;
    for (int i = 0; i < 12; ++i) feats.push_back({rng.uniform(-2, 2), rng.uniform(-1, 1)});
    double mean0 = 0, mean1 = 0;
    for (auto& f : feats) {
        mean0 += f[0];
        mean1 += f[1];
    }
    for (auto& f : feats) {
        f[0] -= mean0 / 12;
        f[1] -= mean1 / 12;
    }
    Projection proj = project_2d(feats);
    REQUIRE(proj.points.size() == 12);
    CHECK_FALSE(proj.rank_deficient);
    for (size_t i = 0; i < feats.size(); ++i)
        for (size_t j = i + 1; j < feats.size(); ++j) {
            double orig = std::hypot(feats[i][0] - feats[j][0], feats[i][1] - feats[j][1]);
            double got = std::hypot(proj.points[i][0] - proj.points[j][0],
                                    proj.points[i][1] - proj.points[j][1]);
            CHECK(got == Catch::Approx(orig).margin(1e-9));
        }

    // Duplicated record projects to the identical point.
    feats.push_back(feats[0]);
    Projection proj2 = project_2d(feats);
    CHECK(proj2.points.back()[0] == Catch::Approx(proj2.points.front()[0]).margin(1e-12));
    CHECK(proj2.points.back()[1] == Catch::Approx(proj2.points.front()[1]).margin(1e-12));

    // Component variances are ordered.
    std::vector<std::vector<double>> wide;
    for (int i = 0; i < 30; ++i)
        wide.push_back({rng.uniform(-5, 5), rng.uniform(-1, 1), rng.uniform(-0.2, 0.2)});
    Projection p3 = project_2d(wide);
    double v0 = 0, v1 = 0;
    for (const auto& pt : p3.points) {
        v0 += pt[0] * pt[0];
        v1 += pt[1] * pt[1];
    }
    CHECK(v0 >= v1);

    // Rank-deficient data: second component collapses to zero with a flag.
    std::vector<std::vector<double>> line;
    for (int i = 0; i < 8; ++i) line.push_back({static_cast<double>(i), 2.0 * i, -i + 0.0});
    Projection p4 = project_2d(line);
    CHECK(p4.rank_deficient);
    for (const auto& pt : p4.points) CHECK(pt[1] == 0.0);

    CHECK_THROWS_AS(project_2d({{1.0, 2.0}, {0.5, 0.1}}), ValueError);
}

TEST_CASE("separation: degenerate, constant-offset bound, relabel symmetry") {
    // All features identical: intra = inter = 0.
    std::vector<FeatureRecord> same;
    for (int i = 0; i < 4; ++i)
        same.push_back({"s" + std::to_string(i), i % 2 ? TaskId::removal : TaskId::segmentation,
                        {1, 2}, {1, 2}});
    SeparationReport r0 = separation(same);
    CHECK(r0.intra == 0.0);
    CHECK(r0.inter == 0.0);

    // Two tasks whose injected features differ by constant prompt offsets.
    Rng rng(8);
    std::vector<double> p1{3.0, -1.0}, p2{-2.0, 4.0};
    std::vector<FeatureRecord> recs;
    std::vector<std::vector<double>> bases;
    for (int i = 0; i < 5; ++i) bases.push_back({rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)});
    for (int i = 0; i < 5; ++i) {
        recs.push_back({"a" + std::to_string(i), TaskId::removal, bases[static_cast<size_t>(i)],
                        {bases[static_cast<size_t>(i)][0] + p1[0], bases[static_cast<size_t>(i)][1] + p1[1]}});
        recs.push_back({"b" + std::to_string(i), TaskId::tamper, bases[static_cast<size_t>(i)],
                        {bases[static_cast<size_t>(i)][0] + p2[0], bases[static_cast<size_t>(i)][1] + p2[1]}});
    }
    SeparationReport r = separation(recs);

    // Brute-force enumeration oracle.
    auto dist = [](const std::vector<double>& a, const std::vector<double>& b) {
        return std::hypot(a[0] - b[0], a[1] - b[1]);
    };
    double intra_sum = 0, inter_sum = 0;
    int ni = 0, nx = 0;
    for (size_t i = 0; i < recs.size(); ++i)
        for (size_t j = i + 1; j < recs.size(); ++j) {
            double d = dist(recs[i].injected, recs[j].injected);
            if (recs[i].task == recs[j].task) {
                intra_sum += d;
                ++ni;
            } else {
                inter_sum += d;
                ++nx;
            }
        }
    CHECK(r.intra == Catch::Approx(intra_sum / ni).margin(1e-12));
    CHECK(r.inter == Catch::Approx(inter_sum / nx).margin(1e-12));
    double prompt_gap = std::hypot(p1[0] - p2[0], p1[1] - p2[1]);
    CHECK(r.inter >= prompt_gap - r.intra - 1e-9);
    CHECK(r.centroids.count("removal") == 1);
    CHECK(r.centroids.count("tamper") == 1);

    // Swapping task labels leaves the statistics unchanged.
    std::vector<FeatureRecord> swapped = recs;
    for (auto& rec : swapped)
        rec.task = rec.task == TaskId::removal ? TaskId::tamper : TaskId::removal;
    SeparationReport rs = separation(swapped);
    CHECK(rs.intra == Catch::Approx(r.intra).margin(1e-12));
    CHECK(rs.inter == Catch::Approx(r.inter).margin(1e-12));

    std::vector<FeatureRecord> single{{"x", TaskId::removal, {1}, {1}}};
    CHECK_THROWS_AS(separation(single), ValueError);
}

TEST_CASE("emit_scatter writes deterministic files with the right legend") {
    std::vector<ScatterPoint> pts = {
        {0.0, 0.0, "general"}, {1.0, 0.5, "removal"}, {-1.0, 0.2, "segmentation"}, {0.3, -1.0, "tamper"},
        {0.1, 0.4, "general"}};

    std::string png = (fs::temp_directory_path() / "pocr_scatter.png").string();
    std::string svg = (fs::temp_directory_path() / "pocr_scatter.svg").string();
    emit_scatter(pts, png);
    emit_scatter(pts, svg);

    REQUIRE(fs::exists(png));
    REQUIRE(fs::file_size(png) > 0);
    std::map<std::string, std::string> text;
    (void)read_png(png, &text);
    CHECK(text.at("legend") == "general,removal,segmentation,tamper");

    std::ifstream is(svg);
    std::string svg_body((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    for (const char* label : {"general", "removal", "segmentation", "tamper"})
        CHECK(svg_body.find(label) != std::string::npos);

    // Deterministic bytes on rewrite.
    std::ifstream a(png, std::ios::binary);
    std::vector<char> bytes1((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    emit_scatter(pts, png);
    std::ifstream b(png, std::ios::binary);
    std::vector<char> bytes2((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(bytes1 == bytes2);

    CHECK_THROWS_AS(emit_scatter(pts, "/nonexistent_dir_xyz/s.svg"), DataError);
    fs::remove(png);
    fs::remove(svg);
}

TEST_CASE("features csv lists shared and injected rows per record") {
    Model model(ModelConfig::preset("toy"));
    init_random(model.params(), 9);
    auto samples = tiny_samples(2);
    FeatureExtraction fx =
        extract_features(model, samples, {TaskId::removal, TaskId::segmentation}, true);
    std::string path = (fs::temp_directory_path() / "pocr_feats.csv").string();
    write_features_csv(fx.records, path);
    std::ifstream is(path);
    std::string line;
    std::getline(is, line);
    CHECK(line.rfind("id,task,stage,d0,", 0) == 0);
    int rows = 0;
    while (std::getline(is, line)) ++rows;
    CHECK(rows == 8);  // 2 samples x 2 tasks x 2 stages
    fs::remove(path);
}
