#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "pocr/codec.hpp"
#include "pocr/common.hpp"
#include "pocr/model.hpp"
#include "pocr/png_io.hpp"
#include "pocr/synthdata.hpp"

namespace pocr {

// Spatially pooled features around the prompt injection point for one
// (sample, task) pass. Because the prompt is constant over space,
// injected - shared equals the task prompt exactly under mean pooling.
struct FeatureRecord {
    std::string id;
    TaskId task;
    std::vector<double> shared;    // mean-pooled pre-injection feature
    std::vector<double> injected;  // mean-pooled post-injection feature
};

struct FeatureExtraction {
    std::vector<FeatureRecord> records;
    nlohmann::json metadata;  // model provenance; flags untrained models
};

inline std::vector<double> pool_spatial(const Tensor& feat) {
    int64_t c = feat.shape().back();
    Tensor m = mean_rows(reshape(feat, {feat.numel() / c, c}), c);
    return m.values();
}

inline FeatureExtraction extract_features(const Model& model,
                                          const std::vector<TaskSample>& samples,
                                          const std::vector<TaskId>& tasks, bool trained) {
    FeatureExtraction out;
    out.metadata = {{"trained", trained},
                    {"samples", samples.size()},
                    {"tasks", tasks.size()},
                    {"pooling", "spatial_mean"}};
    NoGradGuard ng;
    for (const auto& s : samples) {
        Tensor img = to_tensor(to_float(s.input));
        for (TaskId t : tasks) {
            ModelOutput mo = model.forward(img, t, /*record_features=*/true);
            FeatureRecord rec;
            rec.id = s.id;
            rec.task = t;
            rec.shared = pool_spatial(mo.features->shared_feat);
            rec.injected = pool_spatial(mo.features->injected_feat);
            out.records.push_back(std::move(rec));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// PCA projection to 2-D (deterministic; sign fixed so the largest-magnitude
// loading of each component is positive).
// ---------------------------------------------------------------------------

struct Projection {
    std::vector<std::array<double, 2>> points;
    bool rank_deficient = false;
};

inline Projection project_2d(const std::vector<std::vector<double>>& feats) {
    POCR_CHECK(feats.size() >= 3, "project_2d: need at least 3 records");
    int64_t n = static_cast<int64_t>(feats.size());
    int64_t d = static_cast<int64_t>(feats[0].size());
    Eigen::MatrixXd data(n, d);
    for (int64_t i = 0; i < n; ++i) {
        POCR_CHECK(static_cast<int64_t>(feats[static_cast<size_t>(i)].size()) == d,
                   "project_2d: inconsistent feature dims");
        for (int64_t j = 0; j < d; ++j) data(i, j) = feats[static_cast<size_t>(i)][static_cast<size_t>(j)];
    }
    Eigen::RowVectorXd mean = data.colwise().mean();
    Eigen::MatrixXd centered = data.rowwise() - mean;
    Eigen::MatrixXd cov = centered.transpose() * centered / std::max<double>(1.0, static_cast<double>(n - 1));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);

    Projection proj;
    proj.points.resize(static_cast<size_t>(n));
    // Eigenvalues come out ascending; take the top two.
    std::array<Eigen::VectorXd, 2> axes;
    std::array<double, 2> vals{solver.eigenvalues()(d - 1), d >= 2 ? solver.eigenvalues()(d - 2) : 0.0};
    axes[0] = solver.eigenvectors().col(d - 1);
    axes[1] = d >= 2 ? Eigen::VectorXd(solver.eigenvectors().col(d - 2)) : Eigen::VectorXd::Zero(d);
    double scale = std::max(vals[0], 1e-24);
    if (vals[1] <= 1e-12 * scale) {
        proj.rank_deficient = true;
        axes[1].setZero();
    }
    for (int k = 0; k < 2; ++k) {
        int64_t arg = 0;
        for (int64_t j = 1; j < d; ++j)
            if (std::fabs(axes[static_cast<size_t>(k)](j)) > std::fabs(axes[static_cast<size_t>(k)](arg))) arg = j;
        if (axes[static_cast<size_t>(k)](arg) < 0) axes[static_cast<size_t>(k)] = -axes[static_cast<size_t>(k)];
    }
    for (int64_t i = 0; i < n; ++i) {
        proj.points[static_cast<size_t>(i)][0] = centered.row(i).dot(axes[0]);
        proj.points[static_cast<size_t>(i)][1] = centered.row(i).dot(axes[1]);
    }
    return proj;
}

// ---------------------------------------------------------------------------
// Task-separation statistics over injected features
// ---------------------------------------------------------------------------

struct SeparationReport {
    double intra = 0;  // mean pairwise distance within a task
    double inter = 0;  // mean pairwise distance across tasks
    double ratio = 0;  // inter / max(intra, eps)
    std::map<std::string, std::vector<double>> centroids;
};

inline void to_json(nlohmann::json& j, const SeparationReport& r) {
    j = {{"intra", r.intra}, {"inter", r.inter}, {"ratio", r.ratio}};
    for (const auto& [k, v] : r.centroids) j["centroids"][k] = v;
}

inline SeparationReport separation(const std::vector<FeatureRecord>& records) {
    std::map<TaskId, std::vector<const FeatureRecord*>> by_task;
    for (const auto& r : records) by_task[r.task].push_back(&r);
    POCR_CHECK(by_task.size() >= 2, "separation: need records from at least 2 tasks");

    auto dist = [](const std::vector<double>& a, const std::vector<double>& b) {
        double acc = 0;
        for (size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
        return std::sqrt(acc);
    };

    SeparationReport rep;
    double intra_sum = 0, inter_sum = 0;
    int64_t intra_n = 0, inter_n = 0;
    for (size_t i = 0; i < records.size(); ++i)
        for (size_t j = i + 1; j < records.size(); ++j) {
            double d = dist(records[i].injected, records[j].injected);
            if (records[i].task == records[j].task) {
                intra_sum += d;
                ++intra_n;
            } else {
                inter_sum += d;
                ++inter_n;
            }
        }
    rep.intra = intra_n ? intra_sum / static_cast<double>(intra_n) : 0.0;
    rep.inter = inter_n ? inter_sum / static_cast<double>(inter_n) : 0.0;
    rep.ratio = rep.inter / std::max(rep.intra, 1e-12);

    for (const auto& [task, recs] : by_task) {
        std::vector<double> c(recs[0]->injected.size(), 0.0);
        for (const auto* r : recs)
            for (size_t k = 0; k < c.size(); ++k) c[k] += r->injected[k];
        for (auto& v : c) v /= static_cast<double>(recs.size());
        rep.centroids[task_name(task)] = std::move(c);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Scatter plot output. Labels follow the figure convention: "general" for
// pre-injection features plus one label per task.
// ---------------------------------------------------------------------------

struct ScatterPoint {
    double x, y;
    std::string label;
};

namespace detail {

inline std::array<uint8_t, 3> label_color(const std::string& label) {
    if (label == "general") return {128, 128, 128};
    if (label == "removal") return {214, 39, 40};
    if (label == "segmentation") return {31, 119, 180};
    if (label == "tamper") return {44, 160, 44};
    return {0, 0, 0};
}

}  // namespace detail

// Writes an SVG when the path ends in .svg, otherwise a PNG raster whose
// legend labels are also stored in a tEXt chunk for machine checking.
inline void emit_scatter(const std::vector<ScatterPoint>& points, const std::string& path) {
    POCR_CHECK(!points.empty(), "emit_scatter: no points");
    double min_x = points[0].x, max_x = points[0].x, min_y = points[0].y, max_y = points[0].y;
    for (const auto& p : points) {
        min_x = std::min(min_x, p.x);
        max_x = std::max(max_x, p.x);
        min_y = std::min(min_y, p.y);
        max_y = std::max(max_y, p.y);
    }
    double span_x = std::max(max_x - min_x, 1e-12), span_y = std::max(max_y - min_y, 1e-12);
    const int size = 640, margin = 40;
    auto sx = [&](double x) { return margin + (x - min_x) / span_x * (size - 2 * margin); };
    auto sy = [&](double y) { return size - margin - (y - min_y) / span_y * (size - 2 * margin); };

    std::vector<std::string> labels;
    for (const auto& p : points)
        if (std::find(labels.begin(), labels.end(), p.label) == labels.end()) labels.push_back(p.label);

    if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".svg") == 0) {
        std::ofstream os(path);
        POCR_CHECK_DATA(os.good(), "emit_scatter: cannot open " + path);
        char buf[256];
        os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size
           << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
        for (const auto& p : points) {
            auto c = detail::label_color(p.label);
            std::snprintf(buf, sizeof(buf),
                          "<circle cx=\"%.3f\" cy=\"%.3f\" r=\"4\" fill=\"rgb(%d,%d,%d)\" fill-opacity=\"0.75\"/>\n",
                          sx(p.x), sy(p.y), c[0], c[1], c[2]);
            os << buf;
        }
        for (size_t i = 0; i < labels.size(); ++i) {
            auto c = detail::label_color(labels[i]);
            std::snprintf(buf, sizeof(buf),
                          "<rect x=\"%d\" y=\"%d\" width=\"12\" height=\"12\" fill=\"rgb(%d,%d,%d)\"/>"
                          "<text x=\"%d\" y=\"%d\" font-size=\"14\" font-family=\"sans-serif\">%s</text>\n",
                          margin, margin + static_cast<int>(i) * 20 - 10, c[0], c[1], c[2],
                          margin + 16, margin + static_cast<int>(i) * 20, labels[i].c_str());
            os << buf;
        }
        os << "</svg>\n";
        POCR_CHECK_DATA(os.good(), "emit_scatter: write failed for " + path);
        return;
    }

    Image8 img(size, size, 3, 255);
    auto disc = [&](int cx, int cy, int r, std::array<uint8_t, 3> c) {
        for (int y = std::max(0, cy - r); y <= std::min(size - 1, cy + r); ++y)
            for (int x = std::max(0, cx - r); x <= std::min(size - 1, cx + r); ++x)
                if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r)
                    for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = c[static_cast<size_t>(ch)];
    };
    for (const auto& p : points)
        disc(static_cast<int>(std::lround(sx(p.x))), static_cast<int>(std::lround(sy(p.y))), 3,
             detail::label_color(p.label));
    for (size_t i = 0; i < labels.size(); ++i) {
        auto c = detail::label_color(labels[i]);
        for (int y = 0; y < 12; ++y)
            for (int x = 0; x < 12; ++x)
                for (int ch = 0; ch < 3; ++ch)
                    img.at(margin + static_cast<int>(i) * 20 + y, margin + x, ch) = c[static_cast<size_t>(ch)];
    }
    std::string legend;
    for (const auto& l : labels) legend += (legend.empty() ? "" : ",") + l;
    write_png(path, img, {{"legend", legend}});
}

// features.csv rows: id, task, stage, then the feature values.
inline void write_features_csv(const std::vector<FeatureRecord>& records, const std::string& path) {
    POCR_CHECK(!records.empty(), "write_features_csv: no records");
    std::ofstream os(path);
    POCR_CHECK_DATA(os.good(), "write_features_csv: cannot open " + path);
    os << "id,task,stage";
    for (size_t i = 0; i < records[0].shared.size(); ++i) os << ",d" << i;
    os << "\n";
    os.setf(std::ios::scientific);
    os.precision(17);
    for (const auto& r : records) {
        os << r.id << "," << task_name(r.task) << ",shared";
        for (double v : r.shared) os << "," << v;
        os << "\n" << r.id << "," << task_name(r.task) << ",injected";
        for (double v : r.injected) os << "," << v;
        os << "\n";
    }
}

}  // namespace pocr
