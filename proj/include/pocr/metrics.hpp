#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pocr/codec.hpp"
#include "pocr/common.hpp"
#include "pocr/image.hpp"

namespace pocr {

// ---------------------------------------------------------------------------
// Image-eval metrics (8-bit inputs). MSSIM and MSE are reported in percent.
// ---------------------------------------------------------------------------

inline double mse8(const Image8& a, const Image8& b) {
    POCR_CHECK(a.same_shape(b), "metrics: image shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < a.px.size(); ++i) {
        double d = static_cast<double>(a.px[i]) - b.px[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.px.size());
}

// 10*log10(255^2 / mse); identical images sit at the 100 dB cap.
inline double psnr(const Image8& a, const Image8& b) {
    double m = mse8(a, b);
    if (m == 0.0) return 100.0;
    return 10.0 * std::log10(255.0 * 255.0 / m);
}

inline double mse_percent(const Image8& a, const Image8& b) {
    return mse8(a, b) / (255.0 * 255.0) * 100.0;
}

// Mean SSIM over BT.601 luma with an 11x11 Gaussian window (sigma 1.5),
// valid-mode filtering, in percent.
inline double mssim(const Image8& a, const Image8& b) {
    POCR_CHECK(a.same_shape(b), "mssim: image shape mismatch");
    constexpr int win = 11;
    POCR_CHECK(a.h >= win && a.w >= win, "mssim: image smaller than the 11x11 window");
    constexpr double c1 = (0.01 * 255) * (0.01 * 255);
    constexpr double c2 = (0.03 * 255) * (0.03 * 255);

    static const std::array<double, win * win> kernel = [] {
        std::array<double, win * win> k{};
        double sum = 0.0;
        for (int y = 0; y < win; ++y)
            for (int x = 0; x < win; ++x) {
                double dy = y - win / 2, dx = x - win / 2;
                k[static_cast<size_t>(y * win + x)] = std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
                sum += k[static_cast<size_t>(y * win + x)];
            }
        for (auto& v : k) v /= sum;
        return k;
    }();

    std::vector<double> ya = luma601(a), yb = luma601(b);
    double total = 0.0;
    int64_t count = 0;
    for (int y = 0; y + win <= a.h; ++y)
        for (int x = 0; x + win <= a.w; ++x) {
            double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
            for (int ky = 0; ky < win; ++ky)
                for (int kx = 0; kx < win; ++kx) {
                    double wv = kernel[static_cast<size_t>(ky * win + kx)];
                    double va = ya[static_cast<size_t>((y + ky) * a.w + (x + kx))];
                    double vb = yb[static_cast<size_t>((y + ky) * a.w + (x + kx))];
                    mx += wv * va;
                    my += wv * vb;
                    xx += wv * va * va;
                    yy += wv * vb * vb;
                    xy += wv * va * vb;
                }
            double sx = xx - mx * mx, sy = yy - my * my, sxy = xy - mx * my;
            total += ((2 * mx * my + c1) * (2 * sxy + c2)) /
                     ((mx * mx + my * my + c1) * (sx + sy + c2));
            ++count;
        }
    return total / static_cast<double>(count) * 100.0;
}

// Average grayscale error on the 8-bit luma scale.
inline double age(const Image8& a, const Image8& b) {
    POCR_CHECK(a.same_shape(b), "age: image shape mismatch");
    std::vector<double> ya = luma601(a), yb = luma601(b);
    double acc = 0.0;
    for (size_t i = 0; i < ya.size(); ++i) acc += std::fabs(ya[i] - yb[i]);
    return acc / static_cast<double>(ya.size());
}

namespace detail {

constexpr double kErrorPixelThreshold = 20.0;  // 8-bit luma difference

inline std::vector<uint8_t> error_pixels(const Image8& a, const Image8& b) {
    std::vector<double> ya = luma601(a), yb = luma601(b);
    std::vector<uint8_t> err(ya.size());
    for (size_t i = 0; i < ya.size(); ++i)
        err[i] = std::fabs(ya[i] - yb[i]) > kErrorPixelThreshold ? 1 : 0;
    return err;
}

}  // namespace detail

// Fraction of pixels whose luma differs by more than the error threshold.
inline double peps(const Image8& a, const Image8& b) {
    POCR_CHECK(a.same_shape(b), "peps: image shape mismatch");
    auto err = detail::error_pixels(a, b);
    double n = 0;
    for (auto e : err) n += e;
    return n / static_cast<double>(err.size());
}

// Fraction of pixels that are errors and whose four in-bounds neighbors are
// all errors as well (border pixels never qualify).
inline double pceps(const Image8& a, const Image8& b) {
    POCR_CHECK(a.same_shape(b), "pceps: image shape mismatch");
    auto err = detail::error_pixels(a, b);
    int64_t n = 0;
    for (int y = 1; y + 1 < a.h; ++y)
        for (int x = 1; x + 1 < a.w; ++x) {
            size_t i = static_cast<size_t>(y) * a.w + x;
            if (err[i] && err[i - 1] && err[i + 1] && err[i - static_cast<size_t>(a.w)] &&
                err[i + static_cast<size_t>(a.w)])
                ++n;
        }
    return static_cast<double>(n) / static_cast<double>(err.size());
}

// ---------------------------------------------------------------------------
// Pixel-classification scores
// ---------------------------------------------------------------------------

struct ConfusionCounts {
    int64_t tp = 0, fp = 0, fn = 0, tn = 0;

    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
};

struct ClassScores {
    double iou = 0, precision = 0, recall = 0, f = 0;  // percent
};

// Degenerate conventions: IoU is 100% when the class is absent from both
// maps; P/R are 0 on empty denominators; F is 0 when P+R = 0.
inline ClassScores scores_from_counts(const ConfusionCounts& c) {
    ClassScores s;
    s.iou = (c.tp + c.fp + c.fn) == 0
                ? 100.0
                : 100.0 * static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp + c.fn);
    s.precision = (c.tp + c.fp) == 0 ? 0.0 : 100.0 * static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    s.recall = (c.tp + c.fn) == 0 ? 0.0 : 100.0 * static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    s.f = (s.precision + s.recall) == 0.0 ? 0.0 : 2 * s.precision * s.recall / (s.precision + s.recall);
    return s;
}

inline ConfusionCounts binary_confusion(const Mask& pred, const Mask& gt) {
    POCR_CHECK(pred.same_shape(gt) && pred.c == 1, "seg_scores: mask shape mismatch");
    ConfusionCounts c;
    for (size_t i = 0; i < pred.px.size(); ++i) {
        POCR_CHECK(pred.px[i] <= 1 && gt.px[i] <= 1, "seg_scores: masks must be binary");
        if (pred.px[i] && gt.px[i]) ++c.tp;
        else if (pred.px[i] && !gt.px[i]) ++c.fp;
        else if (!pred.px[i] && gt.px[i]) ++c.fn;
        else ++c.tn;
    }
    return c;
}

inline ClassScores seg_scores(const Mask& pred, const Mask& gt) {
    return scores_from_counts(binary_confusion(pred, gt));
}

struct TamperScores {
    ClassScores tampered, real;
    double m_iou = 0, m_f = 0;  // unweighted mean over the two text classes
};

inline ConfusionCounts one_vs_rest(const ClassMap& pred, const ClassMap& gt, uint8_t cls) {
    ConfusionCounts c;
    for (size_t i = 0; i < pred.px.size(); ++i) {
        bool p = pred.px[i] == cls, g = gt.px[i] == cls;
        if (p && g) ++c.tp;
        else if (p) ++c.fp;
        else if (g) ++c.fn;
        else ++c.tn;
    }
    return c;
}

inline TamperScores tamper_scores(const ClassMap& pred, const ClassMap& gt) {
    POCR_CHECK(pred.same_shape(gt) && pred.c == 1, "tamper_scores: class map shape mismatch");
    for (size_t i = 0; i < pred.px.size(); ++i)
        POCR_CHECK(pred.px[i] <= 2 && gt.px[i] <= 2, "tamper_scores: class values must be in {0,1,2}");
    TamperScores s;
    s.tampered = scores_from_counts(one_vs_rest(pred, gt, static_cast<uint8_t>(TamperClass::tampered)));
    s.real = scores_from_counts(one_vs_rest(pred, gt, static_cast<uint8_t>(TamperClass::real)));
    s.m_iou = (s.tampered.iou + s.real.iou) / 2.0;
    s.m_f = (s.tampered.f + s.real.f) / 2.0;
    return s;
}

// ---------------------------------------------------------------------------
// Frechet distance over embedding Gaussians
// ---------------------------------------------------------------------------

namespace detail {

inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(sym);
    Eigen::VectorXd vals = solver.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return solver.eigenvectors() * vals.asDiagonal() * solver.eigenvectors().transpose();
}

}  // namespace detail

// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)); covariances are the
// unbiased fits with a fixed 1e-6 diagonal regularizer.
inline double fid_from_embeddings(const std::vector<std::vector<double>>& set_a,
                                  const std::vector<std::vector<double>>& set_b) {
    POCR_CHECK(set_a.size() >= 2 && set_b.size() >= 2, "fid: each set needs at least 2 embeddings");
    int64_t d = static_cast<int64_t>(set_a[0].size());
    for (const auto& v : set_a) POCR_CHECK(static_cast<int64_t>(v.size()) == d, "fid: embedding dim mismatch");
    for (const auto& v : set_b) POCR_CHECK(static_cast<int64_t>(v.size()) == d, "fid: embedding dim mismatch");

    auto fit = [d](const std::vector<std::vector<double>>& set, Eigen::VectorXd& mu,
                   Eigen::MatrixXd& sigma) {
        int64_t n = static_cast<int64_t>(set.size());
        Eigen::MatrixXd data(n, d);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j) data(i, j) = set[static_cast<size_t>(i)][static_cast<size_t>(j)];
        mu = data.colwise().mean();
        Eigen::MatrixXd centered = data.rowwise() - mu.transpose();
        sigma = centered.transpose() * centered / static_cast<double>(n - 1);
        sigma += 1e-6 * Eigen::MatrixXd::Identity(d, d);
    };
    Eigen::VectorXd mu_a, mu_b;
    Eigen::MatrixXd sig_a, sig_b;
    fit(set_a, mu_a, sig_a);
    fit(set_b, mu_b, sig_b);

    Eigen::MatrixXd sqrt_a = detail::psd_sqrt(sig_a);
    Eigen::MatrixXd cross = detail::psd_sqrt(sqrt_a * sig_b * sqrt_a);
    double val = (mu_a - mu_b).squaredNorm() + (sig_a + sig_b - 2.0 * cross).trace();
    return std::max(0.0, val);
}

using Embedder = std::function<std::vector<double>(const ImageF&)>;

inline double fid(const std::vector<ImageF>& set_a, const std::vector<ImageF>& set_b,
                  const Embedder& embedder) {
    std::vector<std::vector<double>> ea, eb;
    for (const auto& img : set_a) ea.push_back(embedder(img));
    for (const auto& img : set_b) eb.push_back(embedder(img));
    return fid_from_embeddings(ea, eb);
}

// ---------------------------------------------------------------------------
// Report bundle
// ---------------------------------------------------------------------------

struct RemovalMetrics {
    double psnr = 0, mssim = 0, mse = 0, age = 0, peps = 0, pceps = 0, fid = 0;
};

struct MetricReport {
    TaskId task = TaskId::removal;
    int64_t samples = 0;
    std::string embedder_name;  // removal only
    std::optional<RemovalMetrics> removal;
    std::optional<ClassScores> segmentation;
    std::optional<TamperScores> tamper;
};

inline void to_json(nlohmann::json& j, const ClassScores& s) {
    j = {{"iou", s.iou}, {"precision", s.precision}, {"recall", s.recall}, {"f", s.f}};
}

inline void to_json(nlohmann::json& j, const MetricReport& r) {
    j = {{"version", 1}, {"task", task_name(r.task)}, {"samples", r.samples}};
    if (r.removal) {
        j["metrics"] = {{"psnr", r.removal->psnr}, {"mssim", r.removal->mssim},
                        {"mse", r.removal->mse},   {"age", r.removal->age},
                        {"peps", r.removal->peps}, {"pceps", r.removal->pceps},
                        {"fid", r.removal->fid}};
        j["embedder"] = r.embedder_name;
    }
    if (r.segmentation) {
        nlohmann::json s;
        to_json(s, *r.segmentation);
        s["fg_iou"] = r.segmentation->iou;
        j["metrics"] = s;
    }
    if (r.tamper) {
        nlohmann::json t;
        to_json(t["tampered"], r.tamper->tampered);
        to_json(t["real"], r.tamper->real);
        t["m_iou"] = r.tamper->m_iou;
        t["m_f"] = r.tamper->m_f;
        j["metrics"] = t;
    }
}

// Per-image rows for the optional CSV export.
struct PerImageRow {
    std::string id;
    std::vector<std::pair<std::string, double>> values;
};

// Dataset-level report: the mean of per-image metric values (FID is computed
// once over the whole prediction/target sets).
class MetricAccumulator {
public:
    explicit MetricAccumulator(TaskId task) : task_(task) {}

    void add_removal(const std::string& id, const Image8& pred, const Image8& gt) {
        POCR_CHECK(task_ == TaskId::removal, "accumulator: wrong task");
        RemovalMetrics m;
        m.psnr = pocr::psnr(pred, gt);
        m.mssim = pocr::mssim(pred, gt);
        m.mse = pocr::mse_percent(pred, gt);
        m.age = pocr::age(pred, gt);
        m.peps = pocr::peps(pred, gt);
        m.pceps = pocr::pceps(pred, gt);
        sums_.resize(6);
        sums_[0] += m.psnr;
        sums_[1] += m.mssim;
        sums_[2] += m.mse;
        sums_[3] += m.age;
        sums_[4] += m.peps;
        sums_[5] += m.pceps;
        rows_.push_back({id,
                         {{"psnr", m.psnr},
                          {"mssim", m.mssim},
                          {"mse", m.mse},
                          {"age", m.age},
                          {"peps", m.peps},
                          {"pceps", m.pceps}}});
        ++count_;
    }

    void add_segmentation(const std::string& id, const Mask& pred, const Mask& gt) {
        POCR_CHECK(task_ == TaskId::segmentation, "accumulator: wrong task");
        ClassScores s = seg_scores(pred, gt);
        sums_.resize(4);
        sums_[0] += s.iou;
        sums_[1] += s.precision;
        sums_[2] += s.recall;
        sums_[3] += s.f;
        rows_.push_back({id, {{"fg_iou", s.iou}, {"precision", s.precision}, {"recall", s.recall}, {"f", s.f}}});
        ++count_;
    }

    void add_tamper(const std::string& id, const ClassMap& pred, const ClassMap& gt) {
        POCR_CHECK(task_ == TaskId::tamper, "accumulator: wrong task");
        TamperScores s = tamper_scores(pred, gt);
        sums_.resize(10);
        double vals[10] = {s.tampered.iou, s.tampered.precision, s.tampered.recall, s.tampered.f,
                           s.real.iou,     s.real.precision,     s.real.recall,     s.real.f,
                           s.m_iou,        s.m_f};
        for (int i = 0; i < 10; ++i) sums_[static_cast<size_t>(i)] += vals[i];
        rows_.push_back({id, {{"m_iou", s.m_iou}, {"m_f", s.m_f}}});
        ++count_;
    }

    void set_fid(double v, std::string embedder_name) {
        fid_ = v;
        embedder_name_ = std::move(embedder_name);
    }

    MetricReport report() const {
        POCR_CHECK(count_ > 0, "accumulator: no samples");
        MetricReport r;
        r.task = task_;
        r.samples = count_;
        double n = static_cast<double>(count_);
        if (task_ == TaskId::removal) {
            RemovalMetrics m;
            m.psnr = sums_[0] / n;
            m.mssim = sums_[1] / n;
            m.mse = sums_[2] / n;
            m.age = sums_[3] / n;
            m.peps = sums_[4] / n;
            m.pceps = sums_[5] / n;
            m.fid = fid_;
            r.removal = m;
            r.embedder_name = embedder_name_;
        } else if (task_ == TaskId::segmentation) {
            ClassScores s;
            s.iou = sums_[0] / n;
            s.precision = sums_[1] / n;
            s.recall = sums_[2] / n;
            s.f = sums_[3] / n;
            r.segmentation = s;
        } else {
            TamperScores s;
            s.tampered = {sums_[0] / n, sums_[1] / n, sums_[2] / n, sums_[3] / n};
            s.real = {sums_[4] / n, sums_[5] / n, sums_[6] / n, sums_[7] / n};
            s.m_iou = sums_[8] / n;
            s.m_f = sums_[9] / n;
            r.tamper = s;
        }
        return r;
    }

    const std::vector<PerImageRow>& rows() const { return rows_; }

private:
    TaskId task_;
    int64_t count_ = 0;
    std::vector<double> sums_;
    double fid_ = 0;
    std::string embedder_name_;
    std::vector<PerImageRow> rows_;
};

}  // namespace pocr
