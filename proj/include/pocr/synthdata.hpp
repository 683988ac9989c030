#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "pocr/codec.hpp"
#include "pocr/common.hpp"
#include "pocr/image.hpp"
#include "pocr/png_io.hpp"
#include "pocr/rng.hpp"

namespace pocr {

// All rasterization is integer-only, so a (config, seed) pair produces
// byte-identical datasets on any platform.

struct GeneratorConfig {
    int image_size = 64;
    int min_glyphs = 2, max_glyphs = 5;
    int min_stroke = 2, max_stroke = 4;
    // flat, gradient, noise, shapes
    std::array<double, 4> background_weights{1.0, 1.0, 1.0, 1.0};
    double tamper_fraction = 0.5;
    uint64_t seed = 0;

    void validate() const {
        POCR_CHECK(image_size >= 32 && image_size % 32 == 0,
                   "generator: image_size must be a positive multiple of 32");
        POCR_CHECK(min_glyphs >= 0 && max_glyphs >= min_glyphs, "generator: bad glyph range");
        POCR_CHECK(min_stroke >= 1 && max_stroke >= min_stroke, "generator: bad stroke range");
        POCR_CHECK(tamper_fraction >= 0.0 && tamper_fraction <= 1.0,
                   "generator: tamper_fraction must lie in [0,1]");
        double total = 0;
        for (double w : background_weights) {
            POCR_CHECK(w >= 0, "generator: background weights must be non-negative");
            total += w;
        }
        POCR_CHECK(total > 0, "generator: at least one background kind must have weight");
    }
};

inline void to_json(nlohmann::json& j, const GeneratorConfig& c) {
    j = {{"image_size", c.image_size},
         {"min_glyphs", c.min_glyphs},
         {"max_glyphs", c.max_glyphs},
         {"min_stroke", c.min_stroke},
         {"max_stroke", c.max_stroke},
         {"background_weights", c.background_weights},
         {"tamper_fraction", c.tamper_fraction},
         {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, GeneratorConfig& c) {
    for (auto& [k, v] : j.items())
        POCR_CHECK(k == "image_size" || k == "min_glyphs" || k == "max_glyphs" ||
                       k == "min_stroke" || k == "max_stroke" || k == "background_weights" ||
                       k == "tamper_fraction" || k == "seed",
                   "generator config: unknown key '" + k + "'");
    if (j.contains("image_size")) j.at("image_size").get_to(c.image_size);
    if (j.contains("min_glyphs")) j.at("min_glyphs").get_to(c.min_glyphs);
    if (j.contains("max_glyphs")) j.at("max_glyphs").get_to(c.max_glyphs);
    if (j.contains("min_stroke")) j.at("min_stroke").get_to(c.min_stroke);
    if (j.contains("max_stroke")) j.at("max_stroke").get_to(c.max_stroke);
    if (j.contains("background_weights")) j.at("background_weights").get_to(c.background_weights);
    if (j.contains("tamper_fraction")) j.at("tamper_fraction").get_to(c.tamper_fraction);
    if (j.contains("seed")) j.at("seed").get_to(c.seed);
}

struct Box {
    int x0, y0, x1, y1;  // half-open

    int width() const { return x1 - x0; }
    int height() const { return y1 - y0; }
    int area() const { return width() * height(); }
    bool overlaps(const Box& o) const {
        return x0 < o.x1 && o.x0 < x1 && y0 < o.y1 && o.y0 < y1;
    }
};

struct TaskSample {
    std::string id;
    TaskId task = TaskId::removal;
    Image8 input;
    Image8 target;
    std::optional<Mask> mask;  // present iff task == removal
};

// ---------------------------------------------------------------------------
// Backgrounds
// ---------------------------------------------------------------------------

inline Image8 gen_background(const GeneratorConfig& cfg, Rng& rng) {
    int n = cfg.image_size;
    Image8 img(n, n, 3);

    double total = 0;
    for (double w : cfg.background_weights) total += w;
    double pick = rng.uniform() * total;
    int kind = 0;
    for (; kind < 3; ++kind) {
        pick -= cfg.background_weights[static_cast<size_t>(kind)];
        if (pick < 0) break;
    }

    auto muted = [&] { return static_cast<uint8_t>(40 + rng.below(176)); };
    if (kind == 0) {  // flat
        uint8_t c[3] = {muted(), muted(), muted()};
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x)
                for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = c[ch];
    } else if (kind == 1) {  // axis-aligned linear gradient
        int c0[3] = {muted(), muted(), muted()};
        int c1[3] = {muted(), muted(), muted()};
        bool vertical = rng.below(2) == 0;
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                int t = vertical ? y : x;
                for (int ch = 0; ch < 3; ++ch)
                    img.at(y, x, ch) =
                        static_cast<uint8_t>(c0[ch] + (c1[ch] - c0[ch]) * t / (n - 1));
            }
    } else if (kind == 2) {  // blocky noise (8px cells)
        int cell = 8;
        int cells = (n + cell - 1) / cell;
        std::vector<uint8_t> grid(static_cast<size_t>(cells) * cells * 3);
        for (auto& v : grid) v = muted();
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x)
                for (int ch = 0; ch < 3; ++ch)
                    img.at(y, x, ch) = grid[(static_cast<size_t>(y / cell) * cells + x / cell) * 3 + ch];
    } else {  // flat base plus random rectangles and discs
        uint8_t base[3] = {muted(), muted(), muted()};
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x)
                for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = base[ch];
        int count = 2 + static_cast<int>(rng.below(4));
        for (int s = 0; s < count; ++s) {
            uint8_t c[3] = {muted(), muted(), muted()};
            if (rng.below(2) == 0) {
                int x0 = static_cast<int>(rng.below(static_cast<uint32_t>(n)));
                int y0 = static_cast<int>(rng.below(static_cast<uint32_t>(n)));
                int w = 4 + static_cast<int>(rng.below(static_cast<uint32_t>(n / 2)));
                int h = 4 + static_cast<int>(rng.below(static_cast<uint32_t>(n / 2)));
                for (int y = y0; y < std::min(n, y0 + h); ++y)
                    for (int x = x0; x < std::min(n, x0 + w); ++x)
                        for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = c[ch];
            } else {
                int cx = static_cast<int>(rng.below(static_cast<uint32_t>(n)));
                int cy = static_cast<int>(rng.below(static_cast<uint32_t>(n)));
                int r = 3 + static_cast<int>(rng.below(static_cast<uint32_t>(n / 4)));
                for (int y = std::max(0, cy - r); y < std::min(n, cy + r + 1); ++y)
                    for (int x = std::max(0, cx - r); x < std::min(n, cx + r + 1); ++x)
                        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r)
                            for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = c[ch];
            }
        }
    }
    return img;
}

// ---------------------------------------------------------------------------
// Glyphs: polyline strokes inside non-overlapping boxes
// ---------------------------------------------------------------------------

namespace detail {

// Stamp a disc clipped to the box; integer arithmetic only.
inline void stamp(Mask& mask, const Box& box, int cx, int cy, int r) {
    for (int y = std::max(box.y0, cy - r); y < std::min(box.y1, cy + r + 1); ++y)
        for (int x = std::max(box.x0, cx - r); x < std::min(box.x1, cx + r + 1); ++x)
            if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) mask.at(y, x, 0) = 1;
}

inline void draw_segment(Mask& mask, const Box& box, int x0, int y0, int x1, int y1, int r) {
    int steps = std::max(std::abs(x1 - x0), std::abs(y1 - y0));
    for (int t = 0; t <= steps; ++t) {
        int x = steps == 0 ? x0 : x0 + (x1 - x0) * t / steps;
        int y = steps == 0 ? y0 : y0 + (y1 - y0) * t / steps;
        stamp(mask, box, x, y, r);
    }
}

}  // namespace detail

// Returns the stroke mask and the glyph bounding boxes; every stroke pixel
// lies inside its box.
inline std::pair<Mask, std::vector<Box>> gen_glyphs(const GeneratorConfig& cfg, Rng& rng) {
    int n = cfg.image_size;
    Mask mask(n, n, 1, 0);
    std::vector<Box> boxes;

    int count = static_cast<int>(rng.range(cfg.min_glyphs, cfg.max_glyphs));
    for (int g = 0; g < count; ++g) {
        Box box{};
        bool placed = false;
        for (int attempt = 0; attempt < 40 && !placed; ++attempt) {
            int bw = n / 6 + static_cast<int>(rng.below(static_cast<uint32_t>(n / 4)));
            int bh = n / 6 + static_cast<int>(rng.below(static_cast<uint32_t>(n / 4)));
            int x0 = static_cast<int>(rng.below(static_cast<uint32_t>(n - bw)));
            int y0 = static_cast<int>(rng.below(static_cast<uint32_t>(n - bh)));
            box = {x0, y0, x0 + bw, y0 + bh};
            placed = true;
            for (const auto& other : boxes)
                if (box.overlaps(other)) placed = false;
        }
        if (!placed) continue;
        boxes.push_back(box);

        int stroke = static_cast<int>(rng.range(cfg.min_stroke, cfg.max_stroke));
        int margin = stroke + 1;
        int ix0 = box.x0 + margin, ix1 = box.x1 - margin;
        int iy0 = box.y0 + margin, iy1 = box.y1 - margin;
        if (ix1 <= ix0 || iy1 <= iy0) continue;

        int points = 3 + static_cast<int>(rng.below(4));
        int px = static_cast<int>(rng.range(ix0, ix1 - 1));
        int py = static_cast<int>(rng.range(iy0, iy1 - 1));
        for (int s = 1; s < points; ++s) {
            int qx = static_cast<int>(rng.range(ix0, ix1 - 1));
            int qy = static_cast<int>(rng.range(iy0, iy1 - 1));
            detail::draw_segment(mask, box, px, py, qx, qy, stroke / 2);
            px = qx;
            py = qy;
        }
    }
    return {std::move(mask), std::move(boxes)};
}

namespace detail {

// High-contrast glyph color for a region: inverted mean with jitter.
inline void glyph_color(const Image8& bg, const Box& box, Rng& rng, uint8_t out[3]) {
    long sum[3] = {0, 0, 0};
    for (int y = box.y0; y < box.y1; ++y)
        for (int x = box.x0; x < box.x1; ++x)
            for (int ch = 0; ch < 3; ++ch) sum[ch] += bg.at(y, x, ch);
    long area = std::max(1, box.area());
    for (int ch = 0; ch < 3; ++ch) {
        int inv = 255 - static_cast<int>(sum[ch] / area);
        int jitter = static_cast<int>(rng.below(41)) - 20;
        out[ch] = static_cast<uint8_t>(std::clamp(inv + jitter, 0, 255));
    }
}

inline Image8 composite_glyphs(const Image8& bg, const Mask& strokes, const std::vector<Box>& boxes,
                               Rng& rng) {
    Image8 img = bg;
    for (const auto& box : boxes) {
        uint8_t color[3];
        glyph_color(bg, box, rng, color);
        for (int y = box.y0; y < box.y1; ++y)
            for (int x = box.x0; x < box.x1; ++x)
                if (strokes.at(y, x, 0))
                    for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = color[ch];
    }
    return img;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Per-task samples
// ---------------------------------------------------------------------------

inline TaskSample make_removal_sample(const GeneratorConfig& cfg, Rng& rng) {
    TaskSample s;
    s.task = TaskId::removal;
    Image8 bg = gen_background(cfg, rng);
    auto [strokes, boxes] = gen_glyphs(cfg, rng);
    s.input = detail::composite_glyphs(bg, strokes, boxes, rng);
    s.target = encode_removal_target(bg);
    Mask box_mask(cfg.image_size, cfg.image_size, 1, 0);
    for (const auto& box : boxes)
        for (int y = box.y0; y < box.y1; ++y)
            for (int x = box.x0; x < box.x1; ++x) box_mask.at(y, x, 0) = 1;
    s.mask = std::move(box_mask);
    return s;
}

inline TaskSample make_seg_sample(const GeneratorConfig& cfg, Rng& rng) {
    TaskSample s;
    s.task = TaskId::segmentation;
    Image8 bg = gen_background(cfg, rng);
    auto [strokes, boxes] = gen_glyphs(cfg, rng);
    s.input = detail::composite_glyphs(bg, strokes, boxes, rng);
    s.target = encode_segmentation_target(strokes);
    return s;
}

inline TaskSample make_tamper_sample(const GeneratorConfig& cfg, Rng& rng) {
    TaskSample s;
    s.task = TaskId::tamper;
    int n = cfg.image_size;
    Image8 bg = gen_background(cfg, rng);
    auto [strokes, boxes] = gen_glyphs(cfg, rng);
    s.input = detail::composite_glyphs(bg, strokes, boxes, rng);

    ClassMap classes(n, n, 1, static_cast<uint8_t>(TamperClass::background));
    for (const auto& box : boxes) {
        bool tampered = rng.uniform() < cfg.tamper_fraction;
        uint8_t label = static_cast<uint8_t>(tampered ? TamperClass::tampered : TamperClass::real);
        for (int y = box.y0; y < box.y1; ++y)
            for (int x = box.x0; x < box.x1; ++x) classes.at(y, x, 0) = label;
        if (!tampered) continue;

        switch (rng.below(3)) {
            case 0: {  // channel shift
                int ch = static_cast<int>(rng.below(3));
                int delta = 60 + static_cast<int>(rng.below(61));
                for (int y = box.y0; y < box.y1; ++y)
                    for (int x = box.x0; x < box.x1; ++x)
                        s.input.at(y, x, ch) =
                            static_cast<uint8_t>(std::clamp(s.input.at(y, x, ch) + delta, 0, 255));
                break;
            }
            case 1: {  // integer box blur
                Image8 copy = s.input;
                int r = 1 + static_cast<int>(rng.below(2));
                for (int y = box.y0; y < box.y1; ++y)
                    for (int x = box.x0; x < box.x1; ++x)
                        for (int ch = 0; ch < 3; ++ch) {
                            int sum = 0, cnt = 0;
                            for (int dy = -r; dy <= r; ++dy)
                                for (int dx = -r; dx <= r; ++dx) {
                                    int yy = y + dy, xx = x + dx;
                                    if (yy < 0 || yy >= n || xx < 0 || xx >= n) continue;
                                    sum += copy.at(yy, xx, ch);
                                    ++cnt;
                                }
                            s.input.at(y, x, ch) = static_cast<uint8_t>(sum / cnt);
                        }
                break;
            }
            default: {  // copy-move from a wrapped offset
                Image8 copy = s.input;
                int oy = static_cast<int>(rng.below(static_cast<uint32_t>(n)));
                int ox = static_cast<int>(rng.below(static_cast<uint32_t>(n)));
                for (int y = box.y0; y < box.y1; ++y)
                    for (int x = box.x0; x < box.x1; ++x)
                        for (int ch = 0; ch < 3; ++ch)
                            s.input.at(y, x, ch) = copy.at((y + oy) % n, (x + ox) % n, ch);
                break;
            }
        }
    }
    s.target = encode_tamper_target(classes);
    return s;
}

inline TaskSample make_sample(TaskId task, const GeneratorConfig& cfg, Rng& rng) {
    switch (task) {
        case TaskId::removal: return make_removal_sample(cfg, rng);
        case TaskId::segmentation: return make_seg_sample(cfg, rng);
        case TaskId::tamper: return make_tamper_sample(cfg, rng);
    }
    throw ValueError("unknown task id");
}

// Independent per-sample stream so generation order (or parallelism) cannot
// change the result.
inline Rng sample_rng(const GeneratorConfig& cfg, TaskId task, int index) {
    uint64_t stream = (static_cast<uint64_t>(task) << 32) | static_cast<uint32_t>(index);
    return Rng(mix_seed(cfg.seed, stream));
}

inline std::vector<TaskSample> generate(const GeneratorConfig& cfg, TaskId task, int count) {
    cfg.validate();
    std::vector<TaskSample> out;
    char buf[32];
    for (int i = 0; i < count; ++i) {
        Rng rng = sample_rng(cfg, task, i);
        TaskSample s = make_sample(task, cfg, rng);
        std::snprintf(buf, sizeof(buf), "%s_%06d", task_name(task).c_str(), i);
        s.id = buf;
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// On-disk dataset: inputs/, targets/, masks/, manifest.json
// ---------------------------------------------------------------------------

struct DatasetRecord {
    std::string id;
    TaskId task;
    std::string input_path, target_path;
    std::optional<std::string> mask_path;
};

struct DatasetManifest {
    int version = 1;
    uint64_t seed = 0;
    nlohmann::json generator;  // config echo, may be null for external data
    std::vector<DatasetRecord> records;
};

inline void write_dataset(const std::vector<TaskSample>& samples, const std::string& dir,
                          const GeneratorConfig* cfg = nullptr) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "inputs");
    fs::create_directories(fs::path(dir) / "targets");
    fs::create_directories(fs::path(dir) / "masks");

    nlohmann::json records = nlohmann::json::array();
    std::set<std::string> ids;
    for (const auto& s : samples) {
        POCR_CHECK_DATA(ids.insert(s.id).second, "write_dataset: duplicate sample id " + s.id);
        std::string input_rel = "inputs/" + s.id + ".png";
        std::string target_rel = "targets/" + s.id + ".png";
        write_png((fs::path(dir) / input_rel).string(), s.input);
        write_png((fs::path(dir) / target_rel).string(), s.target);
        nlohmann::json rec = {{"id", s.id},
                              {"task", task_name(s.task)},
                              {"input", input_rel},
                              {"target", target_rel}};
        POCR_CHECK((s.task == TaskId::removal) == s.mask.has_value(),
                   "write_dataset: mask must be present exactly for removal samples: " + s.id);
        if (s.mask) {
            // Stored as 0/255 so the files are viewable; the loader rebinarizes.
            Mask vis = *s.mask;
            for (auto& v : vis.px) v = v ? 255 : 0;
            std::string mask_rel = "masks/" + s.id + ".png";
            write_png((fs::path(dir) / mask_rel).string(), vis);
            rec["mask"] = mask_rel;
        }
        records.push_back(rec);
    }
    nlohmann::json manifest = {{"version", 1}, {"records", records}};
    if (cfg) {
        manifest["seed"] = cfg->seed;
        manifest["generator"] = *cfg;
    }
    std::ofstream os((fs::path(dir) / "manifest.json").string());
    POCR_CHECK_DATA(os.good(), "write_dataset: cannot write manifest in " + dir);
    os << manifest.dump(2) << "\n";
}

inline DatasetManifest read_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::string mpath = (fs::path(dir) / "manifest.json").string();
    std::ifstream is(mpath);
    POCR_CHECK_DATA(is.good(), "read_dataset: cannot open " + mpath);
    nlohmann::json j = nlohmann::json::parse(is, nullptr, /*allow_exceptions=*/false);
    POCR_CHECK_DATA(!j.is_discarded(), "read_dataset: corrupt manifest " + mpath);

    DatasetManifest m;
    POCR_CHECK_DATA(j.contains("version") && j["version"] == 1,
                    "read_dataset: unsupported manifest version in " + mpath);
    if (j.contains("seed")) m.seed = j["seed"].get<uint64_t>();
    if (j.contains("generator")) m.generator = j["generator"];

    std::set<std::string> ids;
    for (const auto& rec : j.at("records")) {
        DatasetRecord r;
        POCR_CHECK_DATA(rec.contains("id") && rec.contains("task") && rec.contains("input") &&
                            rec.contains("target"),
                        "read_dataset: record missing required fields in " + mpath);
        r.id = rec["id"].get<std::string>();
        POCR_CHECK_DATA(ids.insert(r.id).second, "read_dataset: duplicate id " + r.id);
        r.task = task_from_name(rec["task"].get<std::string>());
        r.input_path = (fs::path(dir) / rec["input"].get<std::string>()).string();
        r.target_path = (fs::path(dir) / rec["target"].get<std::string>()).string();
        POCR_CHECK_DATA(fs::exists(r.input_path), "read_dataset: missing input for record " + r.id);
        POCR_CHECK_DATA(fs::exists(r.target_path), "read_dataset: missing target for record " + r.id);
        if (rec.contains("mask")) {
            r.mask_path = (fs::path(dir) / rec["mask"].get<std::string>()).string();
            POCR_CHECK_DATA(fs::exists(*r.mask_path), "read_dataset: missing mask for record " + r.id);
        }
        POCR_CHECK_DATA((r.task == TaskId::removal) == r.mask_path.has_value(),
                        "read_dataset: record " + r.id + " mask presence does not match its task");
        m.records.push_back(std::move(r));
    }
    return m;
}

inline TaskSample load_sample(const DatasetRecord& rec) {
    TaskSample s;
    s.id = rec.id;
    s.task = rec.task;
    s.input = read_png(rec.input_path);
    s.target = read_png(rec.target_path);
    POCR_CHECK_DATA(s.input.h == s.target.h && s.input.w == s.target.w,
                    "load_sample: input/target size mismatch for record " + rec.id);
    if (rec.mask_path) {
        Image8 raw = read_png(*rec.mask_path);
        POCR_CHECK_DATA(raw.c == 1, "load_sample: mask must be single channel for record " + rec.id);
        POCR_CHECK_DATA(raw.h == s.input.h && raw.w == s.input.w,
                        "load_sample: mask size mismatch for record " + rec.id);
        for (auto& v : raw.px) v = v > 127 ? 1 : 0;
        s.mask = std::move(raw);
    }
    return s;
}

}  // namespace pocr
