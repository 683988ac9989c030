#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "pocr/codec.hpp"
#include "pocr/losses.hpp"
#include "pocr/metrics.hpp"
#include "pocr/model.hpp"
#include "pocr/png_io.hpp"
#include "pocr/synthdata.hpp"

namespace pocr {

namespace detail {

inline Mask read_pred_mask(const std::string& path, const std::string& id) {
    Image8 raw = read_png(path);
    if (raw.c == 3) return decode_segmentation(to_float(raw));
    Mask m(raw.h, raw.w, 1);
    for (size_t i = 0; i < raw.px.size(); ++i) m.px[i] = raw.px[i] > 127 ? 1 : 0;
    (void)id;
    return m;
}

inline ClassMap read_pred_classes(const std::string& path, const std::string& id) {
    Image8 raw = read_png(path);
    if (raw.c == 3) return decode_tamper(to_float(raw));
    for (uint8_t v : raw.px)
        POCR_CHECK_DATA(v <= 2, "eval: class map for " + id + " has values outside {0,1,2}");
    return raw;
}

inline std::vector<DatasetRecord> task_records(const DatasetManifest& manifest, TaskId task) {
    std::vector<DatasetRecord> out;
    for (const auto& rec : manifest.records)
        if (rec.task == task) out.push_back(rec);
    POCR_CHECK_DATA(!out.empty(),
                    "eval: dataset has no records for task " + task_name(task) +
                        " (task flag does not match the manifest)");
    return out;
}

template <typename PredFn>
MetricReport evaluate_records(const std::vector<DatasetRecord>& records, TaskId task,
                              const FeatureExtractor& embedder, const std::string& embedder_name,
                              PredFn pred_rgb, std::vector<PerImageRow>* rows) {
    MetricAccumulator acc(task);
    std::vector<ImageF> pred_set, gt_set;
    for (const auto& rec : records) {
        Image8 gt_img = read_png(rec.target_path);
        Image8 pred = pred_rgb(rec);
        POCR_CHECK_DATA(pred.h == gt_img.h && pred.w == gt_img.w,
                        "eval: prediction size mismatch for record " + rec.id);
        switch (task) {
            case TaskId::removal:
                POCR_CHECK_DATA(pred.c == 3, "eval: removal prediction must be RGB: " + rec.id);
                acc.add_removal(rec.id, pred, gt_img);
                pred_set.push_back(to_float(pred));
                gt_set.push_back(to_float(gt_img));
                break;
            case TaskId::segmentation: {
                Mask pm(pred.h, pred.w, 1);
                if (pred.c == 3)
                    pm = decode_segmentation(to_float(pred));
                else
                    for (size_t i = 0; i < pred.px.size(); ++i) pm.px[i] = pred.px[i] > 127 ? 1 : 0;
                acc.add_segmentation(rec.id, pm, decode_segmentation(to_float(gt_img)));
                break;
            }
            case TaskId::tamper: {
                ClassMap cm = pred.c == 3 ? decode_tamper(to_float(pred)) : pred;
                if (pred.c == 1)
                    for (uint8_t v : pred.px)
                        POCR_CHECK_DATA(v <= 2, "eval: class map for " + rec.id + " has values outside {0,1,2}");
                acc.add_tamper(rec.id, cm, decode_tamper(to_float(gt_img)));
                break;
            }
        }
    }
    if (task == TaskId::removal) {
        double f = pred_set.size() >= 2
                       ? fid(pred_set, gt_set, [&](const ImageF& img) { return embedder.embed(img); })
                       : 0.0;
        acc.set_fid(f, embedder_name);
    }
    if (rows) *rows = acc.rows();
    return acc.report();
}

}  // namespace detail

// Evaluate a directory of prediction PNGs (named <id>.png) against a dataset.
inline MetricReport evaluate_predictions(const std::string& pred_dir, const std::string& dataset_dir,
                                         TaskId task, const FeatureExtractor& embedder,
                                         const std::string& embedder_name = "default",
                                         std::vector<PerImageRow>* rows = nullptr) {
    namespace fs = std::filesystem;
    DatasetManifest manifest = read_dataset(dataset_dir);
    auto records = detail::task_records(manifest, task);
    return detail::evaluate_records(
        records, task, embedder, embedder_name,
        [&](const DatasetRecord& rec) {
            std::string path = (fs::path(pred_dir) / (rec.id + ".png")).string();
            POCR_CHECK_DATA(fs::exists(path), "eval: missing prediction " + path);
            return read_png(path);
        },
        rows);
}

// Run the model over the dataset inputs and evaluate its decoded outputs.
inline MetricReport evaluate_model(const Model& model, const std::string& dataset_dir, TaskId task,
                                   const FeatureExtractor& embedder,
                                   const std::string& embedder_name = "default",
                                   std::vector<PerImageRow>* rows = nullptr) {
    DatasetManifest manifest = read_dataset(dataset_dir);
    auto records = detail::task_records(manifest, task);
    return detail::evaluate_records(
        records, task, embedder, embedder_name,
        [&](const DatasetRecord& rec) {
            NoGradGuard ng;
            Image8 input = read_png(rec.input_path);
            ModelOutput out = model.forward(to_tensor(to_float(input)), task);
            ImageF pred = from_tensor(out.out_full);
            switch (task) {
                case TaskId::removal: return to_u8(decode_removal(pred));
                case TaskId::segmentation: {
                    Mask m = decode_segmentation(pred);
                    Image8 vis = m;
                    for (auto& v : vis.px) v = v ? 255 : 0;
                    return vis;
                }
                case TaskId::tamper: return static_cast<Image8>(decode_tamper(pred));
            }
            throw ValueError("unknown task");
        },
        rows);
}

inline std::string format_report(const MetricReport& r) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(4);
    os << "task: " << task_name(r.task) << "  samples: " << r.samples << "\n";
    auto row = [&](const std::string& k, double v) {
        os << "  " << k;
        for (size_t i = k.size(); i < 12; ++i) os << ' ';
        os << v << "\n";
    };
    if (r.removal) {
        row("psnr", r.removal->psnr);
        row("mssim", r.removal->mssim);
        row("mse%", r.removal->mse);
        row("age", r.removal->age);
        row("peps", r.removal->peps);
        row("pceps", r.removal->pceps);
        row("fid", r.removal->fid);
        os << "  embedder    " << r.embedder_name << "\n";
    }
    if (r.segmentation) {
        row("fgIoU", r.segmentation->iou);
        row("precision", r.segmentation->precision);
        row("recall", r.segmentation->recall);
        row("f", r.segmentation->f);
    }
    if (r.tamper) {
        row("tamper.iou", r.tamper->tampered.iou);
        row("tamper.f", r.tamper->tampered.f);
        row("real.iou", r.tamper->real.iou);
        row("real.f", r.tamper->real.f);
        row("mIoU", r.tamper->m_iou);
        row("mF", r.tamper->m_f);
    }
    return os.str();
}

inline void write_csv(const std::vector<PerImageRow>& rows, const std::string& path) {
    POCR_CHECK(!rows.empty(), "write_csv: no rows");
    std::ofstream os(path);
    POCR_CHECK_DATA(os.good(), "write_csv: cannot open " + path);
    os << "id";
    for (const auto& [k, v] : rows[0].values) os << "," << k;
    os << "\n";
    os.setf(std::ios::fixed);
    os.precision(6);
    for (const auto& row : rows) {
        os << row.id;
        for (const auto& [k, v] : row.values) os << "," << v;
        os << "\n";
    }
}

}  // namespace pocr
