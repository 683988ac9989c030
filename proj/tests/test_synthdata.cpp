#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "pocr/synthdata.hpp"

using namespace pocr;
namespace fs = std::filesystem;

namespace {

GeneratorConfig base_cfg(uint64_t seed = 42) {
    GeneratorConfig cfg;
    cfg.image_size = 64;
    cfg.seed = seed;
    return cfg;
}

std::vector<uint8_t> file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("flat background is constant; same seed gives identical bytes") {
    GeneratorConfig cfg = base_cfg();
    cfg.background_weights = {1, 0, 0, 0};
    Rng r1(9), r2(9);
    Image8 a = gen_background(cfg, r1);
    Image8 b = gen_background(cfg, r2);
    CHECK(a.px == b.px);
    for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < a.h; ++y)
            for (int x = 0; x < a.w; ++x) CHECK(a.at(y, x, ch) == a.at(0, 0, ch));
}

TEST_CASE("gradient background is monotone along one axis") {
    GeneratorConfig cfg = base_cfg();
    cfg.background_weights = {0, 1, 0, 0};
    for (uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        Image8 img = gen_background(cfg, rng);
        auto monotone = [&](bool vertical) {
            for (int ch = 0; ch < 3; ++ch) {
                bool up = true, down = true;
                int len = vertical ? img.h : img.w;
                for (int t = 1; t < len; ++t) {
                    int prev = vertical ? img.at(t - 1, 0, ch) : img.at(0, t - 1, ch);
                    int cur = vertical ? img.at(t, 0, ch) : img.at(0, t, ch);
                    if (cur < prev) up = false;
                    if (cur > prev) down = false;
                }
                if (!up && !down) return false;
            }
            return true;
        };
        CHECK((monotone(true) || monotone(false)));
    }
}

TEST_CASE("glyphs stay inside their boxes") {
    GeneratorConfig cfg = base_cfg(7);
    SECTION("zero glyphs") {
        cfg.min_glyphs = cfg.max_glyphs = 0;
        Rng rng(1);
        auto [mask, boxes] = gen_glyphs(cfg, rng);
        CHECK(boxes.empty());
        for (auto v : mask.px) CHECK(v == 0);
    }
    SECTION("containment and determinism") {
        Rng r1(2), r2(2);
        auto [mask, boxes] = gen_glyphs(cfg, r1);
        auto [mask2, boxes2] = gen_glyphs(cfg, r2);
        CHECK(mask.px == mask2.px);
        for (int y = 0; y < mask.h; ++y)
            for (int x = 0; x < mask.w; ++x)
                if (mask.at(y, x, 0)) {
                    bool inside = false;
                    for (const auto& b : boxes)
                        if (x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1) inside = true;
                    CHECK(inside);
                }
        for (size_t i = 0; i < boxes.size(); ++i)
            for (size_t j = i + 1; j < boxes.size(); ++j) CHECK_FALSE(boxes[i].overlaps(boxes[j]));
    }
}

TEST_CASE("removal samples: clean target, box mask, difference only inside mask") {
    GeneratorConfig cfg = base_cfg(11);
    for (int i = 0; i < 5; ++i) {
        Rng rng = sample_rng(cfg, TaskId::removal, i);
        TaskSample s = make_removal_sample(cfg, rng);
        CHECK(s.task == TaskId::removal);
        REQUIRE(s.mask.has_value());

        // Reconstruct the geometry with an identical stream.
        Rng rng2 = sample_rng(cfg, TaskId::removal, i);
        Image8 bg = gen_background(cfg, rng2);
        auto [strokes, boxes] = gen_glyphs(cfg, rng2);
        CHECK(s.target.px == bg.px);
        Mask expect_mask(cfg.image_size, cfg.image_size, 1, 0);
        for (const auto& b : boxes)
            for (int y = b.y0; y < b.y1; ++y)
                for (int x = b.x0; x < b.x1; ++x) expect_mask.at(y, x, 0) = 1;
        CHECK(s.mask->px == expect_mask.px);

        for (int y = 0; y < s.input.h; ++y)
            for (int x = 0; x < s.input.w; ++x)
                if (!s.mask->at(y, x, 0))
                    for (int ch = 0; ch < 3; ++ch)
                        REQUIRE(s.input.at(y, x, ch) == s.target.at(y, x, ch));
    }
}

TEST_CASE("segmentation samples decode back to the stroke mask") {
    GeneratorConfig cfg = base_cfg(13);
    for (int i = 0; i < 5; ++i) {
        Rng rng = sample_rng(cfg, TaskId::segmentation, i);
        TaskSample s = make_seg_sample(cfg, rng);
        CHECK(s.task == TaskId::segmentation);
        CHECK_FALSE(s.mask.has_value());
        for (size_t p = 0; p < s.target.px.size(); p += 3) {
            bool white = s.target.px[p] == 255 && s.target.px[p + 1] == 255 && s.target.px[p + 2] == 255;
            bool black = s.target.px[p] == 0 && s.target.px[p + 1] == 0 && s.target.px[p + 2] == 0;
            REQUIRE((white || black));
        }
        Rng rng2 = sample_rng(cfg, TaskId::segmentation, i);
        (void)gen_background(cfg, rng2);
        auto [strokes, boxes] = gen_glyphs(cfg, rng2);
        Mask decoded = decode_segmentation(to_float(s.target));
        REQUIRE(decoded.px == strokes.px);
    }
}

TEST_CASE("tamper samples: fractions and box-level class counts") {
    GeneratorConfig cfg = base_cfg(17);
    SECTION("fraction 0 has no tampered pixels") {
        cfg.tamper_fraction = 0.0;
        Rng rng = sample_rng(cfg, TaskId::tamper, 0);
        TaskSample s = make_tamper_sample(cfg, rng);
        for (size_t p = 0; p < s.target.px.size(); p += 3) CHECK(s.target.px[p] != 255);
    }
    SECTION("fraction 1 has no real pixels") {
        cfg.tamper_fraction = 1.0;
        Rng rng = sample_rng(cfg, TaskId::tamper, 0);
        TaskSample s = make_tamper_sample(cfg, rng);
        for (size_t p = 0; p < s.target.px.size(); p += 3) CHECK(s.target.px[p + 1] != 255);
    }
    SECTION("decoded class counts equal the generated box areas") {
        cfg.tamper_fraction = 0.5;
        for (int i = 0; i < 5; ++i) {
            Rng rng = sample_rng(cfg, TaskId::tamper, i);
            TaskSample s = make_tamper_sample(cfg, rng);
            Rng rng2 = sample_rng(cfg, TaskId::tamper, i);
            (void)gen_background(cfg, rng2);
            auto [strokes, boxes] = gen_glyphs(cfg, rng2);
            int box_area = 0;
            for (const auto& b : boxes) box_area += b.area();

            ClassMap decoded = decode_tamper(to_float(s.target));
            int text_pixels = 0;
            for (auto v : decoded.px)
                if (v != static_cast<uint8_t>(TamperClass::background)) ++text_pixels;
            CHECK(text_pixels == box_area);
        }
    }
}

TEST_CASE("dataset write/read round trip") {
    GeneratorConfig cfg = base_cfg(19);
    std::string dir = (fs::temp_directory_path() / "pocr_test_ds").string();
    fs::remove_all(dir);

    std::vector<TaskSample> samples;
    for (TaskId t : {TaskId::removal, TaskId::segmentation, TaskId::tamper}) {
        auto batch = generate(cfg, t, 2);
        samples.insert(samples.end(), batch.begin(), batch.end());
    }
    write_dataset(samples, dir, &cfg);

    DatasetManifest m = read_dataset(dir);
    REQUIRE(m.records.size() == samples.size());
    CHECK(m.seed == cfg.seed);
    for (size_t i = 0; i < samples.size(); ++i) {
        TaskSample loaded = load_sample(m.records[i]);
        CHECK(loaded.id == samples[i].id);
        CHECK(loaded.task == samples[i].task);
        CHECK(loaded.input.px == samples[i].input.px);
        CHECK(loaded.target.px == samples[i].target.px);
        if (samples[i].mask) {
            REQUIRE(loaded.mask.has_value());
            CHECK(loaded.mask->px == samples[i].mask->px);
        }
    }

    // Write a second copy: bytes must be identical file by file.
    std::string dir2 = dir + "_again";
    fs::remove_all(dir2);
    write_dataset(samples, dir2, &cfg);
    for (const auto& rec : m.records) {
        std::string rel = fs::relative(rec.input_path, dir).string();
        CHECK(file_bytes(rec.input_path) == file_bytes((fs::path(dir2) / rel).string()));
    }
    CHECK(file_bytes((fs::path(dir) / "manifest.json").string()) ==
          file_bytes((fs::path(dir2) / "manifest.json").string()));

    fs::remove_all(dir);
    fs::remove_all(dir2);
}

TEST_CASE("dataset loader rejects broken layouts naming the record") {
    GeneratorConfig cfg = base_cfg(23);
    std::string dir = (fs::temp_directory_path() / "pocr_test_bad").string();
    fs::remove_all(dir);
    auto samples = generate(cfg, TaskId::segmentation, 2);
    write_dataset(samples, dir);

    SECTION("missing file") {
        fs::remove(fs::path(dir) / "inputs" / (samples[1].id + ".png"));
        CHECK_THROWS_WITH(read_dataset(dir), Catch::Matchers::ContainsSubstring(samples[1].id));
    }
    SECTION("duplicate id") {
        std::ifstream is(fs::path(dir) / "manifest.json");
        nlohmann::json j = nlohmann::json::parse(is);
        j["records"].push_back(j["records"][0]);
        std::ofstream os(fs::path(dir) / "manifest.json");
        os << j.dump();
        os.close();
        CHECK_THROWS_WITH(read_dataset(dir), Catch::Matchers::ContainsSubstring("duplicate"));
    }
    SECTION("corrupt manifest") {
        std::ofstream os(fs::path(dir) / "manifest.json");
        os << "{ not json";
        os.close();
        CHECK_THROWS_AS(read_dataset(dir), DataError);
    }
    fs::remove_all(dir);
}

TEST_CASE("empty dataset is valid") {
    std::string dir = (fs::temp_directory_path() / "pocr_test_empty").string();
    fs::remove_all(dir);
    write_dataset({}, dir);
    DatasetManifest m = read_dataset(dir);
    CHECK(m.records.empty());
    fs::remove_all(dir);
}
