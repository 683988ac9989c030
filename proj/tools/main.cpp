#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "pocr/analysis.hpp"
#include "pocr/eval.hpp"
#include "pocr/train.hpp"

namespace fs = std::filesystem;
using namespace pocr;

namespace {

// Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
constexpr int kUsageError = 1;
constexpr int kDataError = 2;
constexpr int kRuntimeError = 3;

void echo_config(const std::string& command, const nlohmann::json& effective) {
    nlohmann::json j = {{"command", command}, {"config", effective}};
    std::cout << j.dump() << "\n";
}

nlohmann::json load_json_file(const std::string& path) {
    std::ifstream is(path);
    POCR_CHECK_DATA(is.good(), "cannot open config file " + path);
    nlohmann::json j = nlohmann::json::parse(is, nullptr, /*allow_exceptions=*/false);
    POCR_CHECK_DATA(!j.is_discarded(), "config file is not valid JSON: " + path);
    return j;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataArgs {
    std::string task = "all";
    int count = 8;
    uint64_t seed = 0;
    std::string out;
    int size = 64;
    std::string config_file;
    bool seed_set = false, size_set = false;
};

int run_gen_data(const GenDataArgs& args) {
    GeneratorConfig cfg;
    if (!args.config_file.empty()) cfg = load_json_file(args.config_file).get<GeneratorConfig>();
    if (args.seed_set || args.config_file.empty()) cfg.seed = args.seed;
    if (args.size_set || args.config_file.empty()) cfg.image_size = args.size;
    cfg.validate();

    std::vector<TaskId> tasks;
    if (args.task == "all")
        tasks = {TaskId::removal, TaskId::segmentation, TaskId::tamper};
    else
        tasks = {task_from_name(args.task)};

    nlohmann::json eff;
    to_json(eff, cfg);
    eff["task"] = args.task;
    eff["count"] = args.count;
    eff["out"] = args.out;
    echo_config("gen-data", eff);

    std::vector<TaskSample> samples;
    for (TaskId t : tasks) {
        auto batch = generate(cfg, t, args.count);
        samples.insert(samples.end(), batch.begin(), batch.end());
    }
    write_dataset(samples, args.out, &cfg);
    std::cout << "wrote " << samples.size() << " samples to " << args.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string config_file, data, out, resume;
    std::string preset;
    int64_t iters = -1;
    int64_t lr_step = -1;
    std::vector<int> per_task;
    uint64_t seed = 0;
    bool seed_set = false;
    int image_size = -1;
};

int run_train(const TrainArgs& args) {
    TrainConfig cfg;
    if (!args.config_file.empty()) cfg = load_json_file(args.config_file).get<TrainConfig>();
    if (!args.preset.empty()) cfg.preset = args.preset;
    if (args.iters > 0) cfg.total_iters = args.iters;
    if (args.lr_step > 0) cfg.lr_step = args.lr_step;
    if (!args.per_task.empty()) {
        POCR_CHECK(args.per_task.size() == 3, "train: --per-task needs exactly 3 values");
        for (int i = 0; i < 3; ++i) cfg.per_task_batch[static_cast<size_t>(i)] = args.per_task[static_cast<size_t>(i)];
        cfg.batch_size = args.per_task[0] + args.per_task[1] + args.per_task[2];
    }
    if (args.seed_set) cfg.seed = args.seed;
    if (args.image_size > 0) cfg.image_size = args.image_size;
    cfg.validate();

    LossConfig loss_cfg;
    nlohmann::json eff;
    to_json(eff, cfg);
    eff["data"] = args.data;
    eff["out"] = args.out;
    if (!args.resume.empty()) eff["resume"] = args.resume;
    echo_config("train", eff);

    Model model(ModelConfig::preset(cfg.preset));
    FeatureExtractor extractor = FeatureExtractor::make_default();
    TrainResult result = train_loop(model, cfg, loss_cfg, extractor, args.data, args.out, args.resume);
    std::cout << "finished " << result.state.iter << " iterations; checkpoint at "
              << result.final_checkpoint << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

struct InferArgs {
    std::string ckpt, task, input, out;
    bool raw = false;
};

int run_infer(const InferArgs& args) {
    TaskId task = task_from_name(args.task);
    Model model = load_model(args.ckpt);
    fs::create_directories(args.out);

    std::vector<fs::path> inputs;
    if (fs::is_directory(args.input)) {
        for (const auto& entry : fs::directory_iterator(args.input))
            if (entry.path().extension() == ".png") inputs.push_back(entry.path());
        std::sort(inputs.begin(), inputs.end());
        POCR_CHECK_DATA(!inputs.empty(), "infer: no .png files in " + args.input);
    } else {
        POCR_CHECK_DATA(fs::exists(args.input), "infer: input not found: " + args.input);
        inputs.push_back(args.input);
    }

    echo_config("infer", {{"ckpt", args.ckpt},
                          {"task", args.task},
                          {"input", args.input},
                          {"out", args.out},
                          {"raw", args.raw},
                          {"inputs", inputs.size()}});

    NoGradGuard ng;
    for (const auto& path : inputs) {
        Image8 img = read_png(path.string());
        POCR_CHECK_DATA(img.c == 3, "infer: input must be RGB: " + path.string());
        ModelOutput out = model.forward(to_tensor(to_float(img)), task);
        ImageF pred = from_tensor(out.out_full);
        std::string stem = path.stem().string();

        switch (task) {
            case TaskId::removal:
                write_png((fs::path(args.out) / (stem + ".png")).string(), to_u8(decode_removal(pred)));
                break;
            case TaskId::segmentation: {
                Mask m = decode_segmentation(pred);
                Image8 vis = m;
                for (auto& v : vis.px) v = v ? 255 : 0;
                write_png((fs::path(args.out) / (stem + ".png")).string(), vis);
                break;
            }
            case TaskId::tamper: {
                ClassMap cm = decode_tamper(pred);
                write_png((fs::path(args.out) / (stem + ".png")).string(), cm);
                write_png((fs::path(args.out) / (stem + "_rgb.png")).string(),
                          encode_tamper_target(cm));
                break;
            }
        }
        if (args.raw)
            write_png((fs::path(args.out) / (stem + "_raw.png")).string(), to_u8(decode_removal(pred)));
    }
    std::cout << "wrote outputs for " << inputs.size() << " images to " << args.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string task, pred, gt;
    std::string embedder = "default";
    std::string out_json, out_csv;
};

int run_eval(const EvalArgs& args) {
    TaskId task = task_from_name(args.task);
    echo_config("eval", {{"task", args.task},
                         {"pred", args.pred},
                         {"gt", args.gt},
                         {"embedder", args.embedder},
                         {"out", args.out_json},
                         {"csv", args.out_csv}});

    FeatureExtractor embedder = args.embedder == "default"
                                    ? FeatureExtractor::make_default()
                                    : FeatureExtractor::from_file(args.embedder);
    std::vector<PerImageRow> rows;
    MetricReport report = evaluate_predictions(args.pred, args.gt, task, embedder, args.embedder, &rows);

    std::cout << format_report(report);
    nlohmann::json j;
    to_json(j, report);
    if (!args.out_json.empty()) {
        std::ofstream os(args.out_json);
        POCR_CHECK_DATA(os.good(), "eval: cannot open " + args.out_json);
        os << j.dump(2) << "\n";
    } else {
        std::cout << j.dump() << "\n";
    }
    if (!args.out_csv.empty()) write_csv(rows, args.out_csv);
    return 0;
}

// ---------------------------------------------------------------------------
// inspect-prompts
// ---------------------------------------------------------------------------

struct InspectArgs {
    std::string ckpt, data, out;
    int count = 16;
};

int run_inspect(const InspectArgs& args) {
    Model model = load_model(args.ckpt);
    ckpt::File file = ckpt::load(args.ckpt);
    bool trained = file.header.contains("schedule_state") &&
                   file.header["schedule_state"]["iter"].get<int64_t>() > 0;

    echo_config("inspect-prompts",
                {{"ckpt", args.ckpt}, {"data", args.data}, {"out", args.out}, {"count", args.count}});

    DatasetManifest manifest = read_dataset(args.data);
    std::vector<TaskSample> samples;
    for (const auto& rec : manifest.records) {
        if (static_cast<int>(samples.size()) >= args.count) break;
        samples.push_back(load_sample(rec));
    }
    POCR_CHECK_DATA(!samples.empty(), "inspect-prompts: dataset is empty: " + args.data);

    std::vector<TaskId> tasks = {TaskId::removal, TaskId::segmentation, TaskId::tamper};
    FeatureExtraction fx = extract_features(model, samples, tasks, trained);

    fs::create_directories(args.out);
    write_features_csv(fx.records, (fs::path(args.out) / "features.csv").string());

    SeparationReport sep = separation(fx.records);
    nlohmann::json sep_json;
    to_json(sep_json, sep);
    sep_json["metadata"] = fx.metadata;
    {
        std::ofstream os(fs::path(args.out) / "separation.json");
        POCR_CHECK_DATA(os.good(), "inspect-prompts: cannot write separation.json");
        os << sep_json.dump(2) << "\n";
    }

    // One "general" point per sample plus one injected point per task pass.
    std::vector<std::vector<double>> feats;
    std::vector<std::string> labels;
    for (size_t i = 0; i < fx.records.size(); ++i) {
        if (fx.records[i].task == tasks[0]) {
            feats.push_back(fx.records[i].shared);
            labels.push_back("general");
        }
        feats.push_back(fx.records[i].injected);
        labels.push_back(task_name(fx.records[i].task));
    }
    Projection proj = project_2d(feats);
    if (proj.rank_deficient)
        std::cerr << "warning: features are rank deficient; second component is zero\n";
    std::vector<ScatterPoint> points;
    for (size_t i = 0; i < feats.size(); ++i)
        points.push_back({proj.points[i][0], proj.points[i][1], labels[i]});
    emit_scatter(points, (fs::path(args.out) / "scatter.png").string());

    std::cout << "intra " << sep.intra << "  inter " << sep.inter << "  ratio " << sep.ratio << "\n";
    std::cout << "wrote features.csv, separation.json, scatter.png to " << args.out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pocr: pixel-level OCR tasks as prompted RGB-to-RGB translation"};
    app.require_subcommand(1);

    GenDataArgs gen_args;
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
    gen->add_option("--task", gen_args.task, "removal|segmentation|tamper|all")
        ->check(CLI::IsMember({"removal", "segmentation", "tamper", "all"}));
    gen->add_option("--count", gen_args.count, "Samples per task")->check(CLI::PositiveNumber);
    auto* gseed = gen->add_option("--seed", gen_args.seed, "Generator seed");
    gen->add_option("--out", gen_args.out, "Output directory")->required();
    auto* gsize = gen->add_option("--size", gen_args.size, "Image size (multiple of 32)");
    gen->add_option("--config", gen_args.config_file, "Generator config JSON");

    TrainArgs train_args;
    auto* train = app.add_subcommand("train", "Train the model");
    train->add_option("--config", train_args.config_file, "Train config JSON");
    train->add_option("--data", train_args.data, "Dataset directory")->required();
    train->add_option("--out", train_args.out, "Output directory")->required();
    train->add_option("--resume", train_args.resume, "Checkpoint to resume from");
    train->add_option("--preset", train_args.preset, "Model preset (toy|small)");
    train->add_option("--iters", train_args.iters, "Total iterations");
    train->add_option("--lr-step", train_args.lr_step, "Schedule window length");
    train->add_option("--per-task", train_args.per_task, "Per-task batch sizes (3 values)")
        ->expected(3);
    auto* tseed = train->add_option("--seed", train_args.seed, "Training seed");
    train->add_option("--image-size", train_args.image_size, "Training image size");

    InferArgs infer_args;
    auto* infer = app.add_subcommand("infer", "Run the model on images");
    infer->add_option("--ckpt", infer_args.ckpt, "Checkpoint file")->required();
    infer->add_option("--task", infer_args.task, "removal|segmentation|tamper")
        ->required()
        ->check(CLI::IsMember({"removal", "segmentation", "tamper"}));
    infer->add_option("--input", infer_args.input, "PNG file or directory")->required();
    infer->add_option("--out", infer_args.out, "Output directory")->required();
    infer->add_flag("--raw", infer_args.raw, "Also write the raw RGB prediction");

    EvalArgs eval_args;
    auto* eval = app.add_subcommand("eval", "Evaluate predictions against a dataset");
    eval->add_option("--task", eval_args.task, "removal|segmentation|tamper")
        ->required()
        ->check(CLI::IsMember({"removal", "segmentation", "tamper"}));
    eval->add_option("--pred", eval_args.pred, "Directory of prediction PNGs")->required();
    eval->add_option("--gt", eval_args.gt, "Dataset directory (ground truth)")->required();
    eval->add_option("--embedder", eval_args.embedder, "default | extractor file");
    eval->add_option("--out", eval_args.out_json, "Report JSON path");
    eval->add_option("--csv", eval_args.out_csv, "Per-image CSV path");

    InspectArgs inspect_args;
    auto* inspect = app.add_subcommand("inspect-prompts", "Prompt-geometry study");
    inspect->add_option("--ckpt", inspect_args.ckpt, "Checkpoint file")->required();
    inspect->add_option("--data", inspect_args.data, "Dataset directory")->required();
    inspect->add_option("--out", inspect_args.out, "Output directory")->required();
    inspect->add_option("--count", inspect_args.count, "Max samples to inspect");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        gen_args.seed_set = gseed->count() > 0;
        gen_args.size_set = gsize->count() > 0;
        train_args.seed_set = tseed->count() > 0;
        if (gen->parsed()) return run_gen_data(gen_args);
        if (train->parsed()) return run_train(train_args);
        if (infer->parsed()) return run_infer(infer_args);
        if (eval->parsed()) return run_eval(eval_args);
        if (inspect->parsed()) return run_inspect(inspect_args);
    } catch (const ValueError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsageError;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kDataError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntimeError;
    }
    return kUsageError;
}
