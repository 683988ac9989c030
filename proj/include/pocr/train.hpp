#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pocr/checkpoint.hpp"
#include "pocr/codec.hpp"
#include "pocr/common.hpp"
#include "pocr/losses.hpp"
#include "pocr/model.hpp"
#include "pocr/rng.hpp"
#include "pocr/synthdata.hpp"

namespace pocr {

struct TrainConfig {
    int64_t total_iters = 80000;
    int batch_size = 48;
    std::array<int, 3> per_task_batch{16, 16, 16};  // removal, segmentation, tamper
    double lr_start = 5e-4;
    double lr_end = 1e-5;
    int64_t lr_step = 200;
    double weight_decay = 0.05;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    double prompt_lr_mult = 1.0;  // step multiplier for the task prompts
    uint64_t seed = 0;
    int image_size = 512;
    std::string preset = "small";
    int64_t checkpoint_every = 2000;

    void validate() const {
        POCR_CHECK(total_iters > 0, "train config: total_iters must be positive");
        int sum = 0;
        for (int c : per_task_batch) {
            POCR_CHECK(c >= 0, "train config: per-task batch sizes must be non-negative");
            sum += c;
        }
        POCR_CHECK(batch_size == sum, "train config: batch_size must equal the per-task sum");
        POCR_CHECK(batch_size > 0, "train config: batch_size must be positive");
        POCR_CHECK(lr_start > lr_end && lr_end > 0, "train config: need lr_start > lr_end > 0");
        POCR_CHECK(lr_step > 0 && total_iters % lr_step == 0,
                   "train config: total_iters must be divisible by lr_step");
        POCR_CHECK(weight_decay >= 0, "train config: weight_decay must be non-negative");
        POCR_CHECK(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1, "train config: bad betas");
        POCR_CHECK(prompt_lr_mult > 0, "train config: prompt_lr_mult must be positive");
        POCR_CHECK(image_size >= 32 && image_size % 32 == 0,
                   "train config: image_size must be a positive multiple of 32");
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"total_iters", c.total_iters},
         {"batch_size", c.batch_size},
         {"per_task_batch", c.per_task_batch},
         {"lr_start", c.lr_start},
         {"lr_end", c.lr_end},
         {"lr_step", c.lr_step},
         {"weight_decay", c.weight_decay},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"adam_eps", c.adam_eps},
         {"prompt_lr_mult", c.prompt_lr_mult},
         {"seed", c.seed},
         {"image_size", c.image_size},
         {"preset", c.preset},
         {"checkpoint_every", c.checkpoint_every}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    static const std::set<std::string> known = {
        "total_iters", "batch_size", "per_task_batch", "lr_start",  "lr_end",
        "lr_step",     "weight_decay", "beta1",       "beta2",     "adam_eps",
        "seed",        "image_size",   "preset",      "checkpoint_every", "prompt_lr_mult"};
    for (auto& [k, v] : j.items())
        POCR_CHECK(known.count(k), "train config: unknown key '" + k + "'");
    if (j.contains("total_iters")) j.at("total_iters").get_to(c.total_iters);
    if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
    if (j.contains("per_task_batch")) j.at("per_task_batch").get_to(c.per_task_batch);
    if (j.contains("lr_start")) j.at("lr_start").get_to(c.lr_start);
    if (j.contains("lr_end")) j.at("lr_end").get_to(c.lr_end);
    if (j.contains("lr_step")) j.at("lr_step").get_to(c.lr_step);
    if (j.contains("weight_decay")) j.at("weight_decay").get_to(c.weight_decay);
    if (j.contains("beta1")) j.at("beta1").get_to(c.beta1);
    if (j.contains("beta2")) j.at("beta2").get_to(c.beta2);
    if (j.contains("adam_eps")) j.at("adam_eps").get_to(c.adam_eps);
    if (j.contains("prompt_lr_mult")) j.at("prompt_lr_mult").get_to(c.prompt_lr_mult);
    if (j.contains("seed")) j.at("seed").get_to(c.seed);
    if (j.contains("image_size")) j.at("image_size").get_to(c.image_size);
    if (j.contains("preset")) j.at("preset").get_to(c.preset);
    if (j.contains("checkpoint_every")) j.at("checkpoint_every").get_to(c.checkpoint_every);
}

// Piecewise-constant linear decay: window k of K = total/lr_step gets
// lr_start + (lr_end - lr_start) * k / (K - 1); the final window sits exactly
// at lr_end.
inline double lr_at(int64_t iter, const TrainConfig& cfg) {
    POCR_CHECK(iter >= 0 && iter < cfg.total_iters,
               "lr_at: iteration " + std::to_string(iter) + " outside [0, " +
                   std::to_string(cfg.total_iters) + ")");
    int64_t windows = cfg.total_iters / cfg.lr_step;
    if (windows == 1) return cfg.lr_start;
    int64_t k = iter / cfg.lr_step;
    return cfg.lr_start +
           (cfg.lr_end - cfg.lr_start) * static_cast<double>(k) / static_cast<double>(windows - 1);
}

struct ScheduleState {
    int64_t iter = 0;
    double lr = 0.0;
    uint64_t rng_state = 0, rng_inc = 0;
    std::array<double, 3> loss_avg{0, 0, 0};        // per-task EMA (0.99)
    std::array<uint64_t, 3> stream_counters{0, 0, 0};
};

inline void to_json(nlohmann::json& j, const ScheduleState& s) {
    j = {{"iter", s.iter},       {"lr", s.lr},
         {"rng_state", s.rng_state}, {"rng_inc", s.rng_inc},
         {"loss_avg", s.loss_avg},   {"stream_counters", s.stream_counters}};
}

inline void from_json(const nlohmann::json& j, ScheduleState& s) {
    j.at("iter").get_to(s.iter);
    j.at("lr").get_to(s.lr);
    j.at("rng_state").get_to(s.rng_state);
    j.at("rng_inc").get_to(s.rng_inc);
    j.at("loss_avg").get_to(s.loss_avg);
    j.at("stream_counters").get_to(s.stream_counters);
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay. Decay applies only to matrix-shaped
// parameters; vectors (biases, norms, prompts, temperatures) are exempt.
// ---------------------------------------------------------------------------
class AdamW {
public:
    explicit AdamW(const TrainConfig& cfg)
        : beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.adam_eps), weight_decay_(cfg.weight_decay),
          prompt_lr_mult_(cfg.prompt_lr_mult) {}

    void step(ParamStore& params, double lr) {
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (auto& [name, p] : params.params) {
            auto& g = p.grad();
            auto& m = moments_m_[name];
            auto& v = moments_v_[name];
            if (m.empty()) {
                m.assign(g.size(), 0.0);
                v.assign(g.size(), 0.0);
            }
            bool decay = p.ndim() >= 2 && weight_decay_ > 0.0;
            double plr = name.rfind("prompts.", 0) == 0 ? lr * prompt_lr_mult_ : lr;
            double* pv = p.data();
            for (size_t i = 0; i < g.size(); ++i) {
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
                double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
                if (decay) update += weight_decay_ * pv[i];
                pv[i] -= plr * update;
            }
        }
    }

    int64_t step_count() const { return t_; }

    void pack(ckpt::File& file) const {
        file.header["optimizer"] = {{"t", t_}};
        for (const auto& [name, m] : moments_m_)
            file.tensors["opt.m." + name] = {{static_cast<int64_t>(m.size())}, m};
        for (const auto& [name, v] : moments_v_)
            file.tensors["opt.v." + name] = {{static_cast<int64_t>(v.size())}, v};
    }

    void unpack(const ckpt::File& file) {
        POCR_CHECK_DATA(file.header.contains("optimizer"), "checkpoint: missing optimizer state");
        t_ = file.header["optimizer"]["t"].get<int64_t>();
        moments_m_.clear();
        moments_v_.clear();
        for (const auto& [name, t] : file.tensors) {
            if (name.rfind("opt.m.", 0) == 0) moments_m_[name.substr(6)] = t.data;
            if (name.rfind("opt.v.", 0) == 0) moments_v_[name.substr(6)] = t.data;
        }
    }

private:
    double beta1_, beta2_, eps_, weight_decay_;
    double prompt_lr_mult_ = 1.0;
    int64_t t_ = 0;
    std::map<std::string, std::vector<double>> moments_m_, moments_v_;
};

// ---------------------------------------------------------------------------
// Weight initialization
// ---------------------------------------------------------------------------

// Truncated normal (std 0.02) for attention/MLP weights, zeros for vectors
// and prompts, identity-style values for norms and attention temperatures.
// Resampling linears, lateral convolutions, and output heads sit on the
// non-residual signal path, so they get fan-in-scaled init instead: a 0.02
// init there shrinks the stream roughly tenfold per stage and the decoder
// output collapses to ~1e-4 of the input scale.
inline void init_random(ParamStore& params, uint64_t seed) {
    Rng rng(seed);
    for (auto& [name, t] : params.params) {
        bool is_gamma = name.size() >= 7 && (name.find(".norm") != std::string::npos) &&
                        name.compare(name.size() - 2, 2, ".g") == 0;
        bool signal_path = name.find(".embed.") != std::string::npos ||
                           name.find(".split.") != std::string::npos ||
                           name.rfind("lateral.", 0) == 0 || name.rfind("head.", 0) == 0;
        if (name.find(".logit_scale") != std::string::npos) {
            for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = std::log(10.0);
        } else if (is_gamma) {
            for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = 1.0;
        } else if (t.ndim() >= 2 && signal_path) {
            // fan-in: all dims except the last (output) one
            int64_t fan_in = t.numel() / t.shape().back();
            double std = std::sqrt(1.0 / static_cast<double>(fan_in));
            for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.trunc_normal(std);
        } else if (t.ndim() >= 2) {
            for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.trunc_normal(0.02);
        } else {
            for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = 0.0;
        }
    }
}

// Random init followed by a (possibly partial) checkpoint load.
inline ckpt::LoadReport init_weights(Model& model, const std::string& checkpoint_path,
                                     uint64_t seed, bool strict) {
    init_random(model.params(), seed);
    ckpt::File file = ckpt::load(checkpoint_path);
    return ckpt::unpack_params(file, model.params(), strict);
}

// ---------------------------------------------------------------------------
// Batch composition: exact per-task counts, shuffled order, streams that
// reshuffle and cycle on exhaustion.
// ---------------------------------------------------------------------------

// Shuffled cycle over [0, size): epoch e uses a permutation derived from
// (seed, task, e) alone, so the stream's full state is one counter and resume
// from a checkpoint replays the identical sequence.
class SampleStream {
public:
    SampleStream() = default;
    SampleStream(size_t size, TaskId task, uint64_t seed)
        : size_(size), seed_(mix_seed(seed, 0xda7a0000 + static_cast<uint64_t>(task))) {}

    size_t next() {
        POCR_CHECK(size_ > 0, "sample stream: empty stream");
        uint64_t epoch = counter_ / size_;
        if (order_.empty() || epoch != epoch_) {
            order_.resize(size_);
            for (size_t i = 0; i < size_; ++i) order_[i] = i;
            Rng rng(mix_seed(seed_, epoch));
            rng.shuffle(order_);
            epoch_ = epoch;
        }
        return order_[counter_++ % size_];
    }

    size_t size() const { return size_; }
    uint64_t counter() const { return counter_; }
    void set_counter(uint64_t c) { counter_ = c; order_.clear(); }

private:
    size_t size_ = 0;
    uint64_t seed_ = 0;
    uint64_t counter_ = 0;
    uint64_t epoch_ = 0;
    std::vector<size_t> order_;
};

struct BatchEntry {
    TaskId task;
    size_t index;  // into the per-task sample list
};

inline std::vector<BatchEntry> build_batch(std::array<SampleStream, 3>& streams,
                                           const TrainConfig& cfg, Rng& rng) {
    std::vector<BatchEntry> batch;
    for (int t = 0; t < kNumTasks; ++t) {
        POCR_CHECK(cfg.per_task_batch[static_cast<size_t>(t)] == 0 ||
                       streams[static_cast<size_t>(t)].size() > 0,
                   "build_batch: empty stream for task " + task_name(static_cast<TaskId>(t)));
        for (int i = 0; i < cfg.per_task_batch[static_cast<size_t>(t)]; ++i)
            batch.push_back({static_cast<TaskId>(t), streams[static_cast<size_t>(t)].next()});
    }
    rng.shuffle(batch);
    return batch;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

// Sample converted to training tensors once (inputs, target pyramid, masks).
struct PreparedSample {
    TaskId task;
    Tensor input;
    ScaleTriple gts;
    std::optional<MaskPyramid> masks;
};

inline PreparedSample prepare_sample(const TaskSample& s) {
    PreparedSample p;
    p.task = s.task;
    p.input = to_tensor(to_float(s.input));
    p.gts = target_pyramid(to_float(s.target));
    if (s.mask) p.masks = MaskPyramid::from_mask(*s.mask);
    return p;
}

struct StepLog {
    int64_t step = 0;
    double lr = 0.0;
    // per task: l_pix, l_per, l_sty, l_total, count
    std::array<std::array<double, 4>, 3> sums{};
    std::array<int, 3> counts{};
};

class Trainer {
public:
    Trainer(Model& model, const TrainConfig& cfg, const LossConfig& loss_cfg,
            const FeatureExtractor& extractor)
        : model_(model), cfg_(cfg), loss_cfg_(loss_cfg), extractor_(extractor), opt_(cfg),
          rng_(cfg.seed, /*stream=*/1) {
        cfg_.validate();
        loss_cfg_.validate();
        state_.lr = lr_at(0, cfg_);
        state_.rng_state = rng_.state();
        state_.rng_inc = rng_.inc();
    }

    ScheduleState& state() { return state_; }
    AdamW& optimizer() { return opt_; }
    Rng& rng() { return rng_; }

    // One optimization step over a prepared batch. Returns the per-task loss
    // breakdown used for logging.
    StepLog train_step(const std::vector<const PreparedSample*>& batch) {
        POCR_CHECK(state_.iter < cfg_.total_iters, "train_step: schedule exhausted");
        double lr = lr_at(state_.iter, cfg_);
        StepLog log;
        log.step = state_.iter;
        log.lr = lr;

        model_.params().zero_grads();
        double inv_batch = 1.0 / static_cast<double>(batch.size());
        for (const PreparedSample* s : batch) {
            ModelOutput out = model_.forward(s->input, s->task);
            ScaleTriple outs{out.out_quarter, out.out_half, out.out_full};
            LossBreakdown bd = total_loss(s->task, outs, s->gts, s->input,
                                          s->masks ? &*s->masks : nullptr, extractor_, loss_cfg_);
            if (!std::isfinite(bd.l_total)) abort_non_finite(bd, s->task);
            mul_scalar(bd.total, inv_batch).backward();
            size_t t = static_cast<size_t>(s->task);
            log.sums[t][0] += bd.l_pix;
            log.sums[t][1] += bd.l_per;
            log.sums[t][2] += bd.l_sty;
            log.sums[t][3] += bd.l_total;
            log.counts[t] += 1;
        }
        opt_.step(model_.params(), lr);

        for (int t = 0; t < kNumTasks; ++t)
            if (log.counts[static_cast<size_t>(t)] > 0) {
                double mean = log.sums[static_cast<size_t>(t)][3] / log.counts[static_cast<size_t>(t)];
                double& avg = state_.loss_avg[static_cast<size_t>(t)];
                avg = avg == 0.0 ? mean : 0.99 * avg + 0.01 * mean;
            }
        state_.iter += 1;
        state_.lr = state_.iter < cfg_.total_iters ? lr_at(state_.iter, cfg_) : cfg_.lr_end;
        state_.rng_state = rng_.state();
        state_.rng_inc = rng_.inc();
        return log;
    }

    void save_checkpoint(const std::string& path) const {
        ckpt::File file;
        file.header["model_config"] = model_.config();
        file.header["train_config"] = cfg_;
        file.header["loss_config"] = {{"alpha", loss_cfg_.alpha},
                                      {"beta", loss_cfg_.beta},
                                      {"per_weight", loss_cfg_.per_weight},
                                      {"sty_weight", loss_cfg_.sty_weight},
                                      {"smooth_delta", loss_cfg_.smooth_delta}};
        file.header["schedule_state"] = state_;
        ckpt::pack_params(file, model_.params());
        opt_.pack(file);
        ckpt::save(path, file);
    }

    void restore(const ckpt::File& file) {
        POCR_CHECK_DATA(file.header.contains("schedule_state"),
                        "checkpoint: missing schedule state (not a training checkpoint)");
        TrainConfig saved = file.header.at("train_config").get<TrainConfig>();
        nlohmann::json a, b;
        to_json(a, saved);
        to_json(b, cfg_);
        POCR_CHECK_DATA(a == b, "checkpoint: train config mismatch on resume");
        state_ = file.header.at("schedule_state").get<ScheduleState>();
        rng_.restore(state_.rng_state, state_.rng_inc);
        opt_.unpack(file);
        // Model parameters: everything that is not optimizer state.
        ckpt::File params_only;
        for (const auto& [name, t] : file.tensors)
            if (name.rfind("opt.", 0) != 0) params_only.tensors[name] = t;
        ckpt::unpack_params(params_only, model_.params(), /*strict=*/true);
    }

private:
    [[noreturn]] void abort_non_finite(const LossBreakdown& bd, TaskId task) {
        double grad_norm = 0.0;
        for (auto& [name, p] : model_.params().params)
            for (double g : p.grad()) grad_norm += g * g;
        std::ostringstream os;
        os << "train_step: non-finite loss at step " << state_.iter << " (task " << task_name(task)
           << ", l_pix=" << bd.l_pix << ", l_per=" << bd.l_per << ", l_sty=" << bd.l_sty
           << ", accumulated grad norm=" << std::sqrt(grad_norm) << ")";
        throw std::runtime_error(os.str());
    }

    Model& model_;
    TrainConfig cfg_;
    LossConfig loss_cfg_;
    const FeatureExtractor& extractor_;
    AdamW opt_;
    Rng rng_;
    ScheduleState state_;
};

// ---------------------------------------------------------------------------
// Full loop: dataset in, checkpoints and a JSON-lines loss log out.
// ---------------------------------------------------------------------------

struct TrainResult {
    std::string final_checkpoint;
    std::string loss_log;
    ScheduleState state;
};

inline TrainResult train_loop(Model& model, const TrainConfig& cfg, const LossConfig& loss_cfg,
                              const FeatureExtractor& extractor, const std::string& data_dir,
                              const std::string& out_dir,
                              const std::string& resume_checkpoint = "") {
    namespace fs = std::filesystem;
    cfg.validate();
    fs::create_directories(out_dir);

    DatasetManifest manifest = read_dataset(data_dir);
    std::array<std::vector<PreparedSample>, 3> samples;
    for (const auto& rec : manifest.records) {
        TaskSample s = load_sample(rec);
        POCR_CHECK_DATA(s.input.h == cfg.image_size && s.input.w == cfg.image_size,
                        "train_loop: sample " + rec.id + " size does not match configured image_size");
        samples[static_cast<size_t>(s.task)].push_back(prepare_sample(s));
    }
    std::array<SampleStream, 3> streams;
    for (int t = 0; t < kNumTasks; ++t) {
        if (cfg.per_task_batch[static_cast<size_t>(t)] > 0)
            POCR_CHECK_DATA(!samples[static_cast<size_t>(t)].empty(),
                            "train_loop: dataset has no samples for task " +
                                task_name(static_cast<TaskId>(t)));
        streams[static_cast<size_t>(t)] =
            SampleStream(samples[static_cast<size_t>(t)].size(), static_cast<TaskId>(t), cfg.seed);
    }

    Trainer trainer(model, cfg, loss_cfg, extractor);
    if (!resume_checkpoint.empty()) {
        trainer.restore(ckpt::load(resume_checkpoint));
        for (int t = 0; t < kNumTasks; ++t)
            streams[static_cast<size_t>(t)].set_counter(
                trainer.state().stream_counters[static_cast<size_t>(t)]);
    } else {
        init_random(model.params(), cfg.seed);
    }

    std::string log_path = (fs::path(out_dir) / "loss_log.jsonl").string();
    std::ofstream log(log_path, resume_checkpoint.empty() ? std::ios::trunc : std::ios::app);
    POCR_CHECK_DATA(log.good(), "train_loop: cannot open " + log_path);

    while (trainer.state().iter < cfg.total_iters) {
        std::vector<BatchEntry> entries = build_batch(streams, cfg, trainer.rng());
        std::vector<const PreparedSample*> batch;
        for (const auto& e : entries)
            batch.push_back(&samples[static_cast<size_t>(e.task)][e.index]);
        StepLog sl = trainer.train_step(batch);
        for (int t = 0; t < kNumTasks; ++t)
            trainer.state().stream_counters[static_cast<size_t>(t)] =
                streams[static_cast<size_t>(t)].counter();

        for (int t = 0; t < kNumTasks; ++t) {
            if (sl.counts[static_cast<size_t>(t)] == 0) continue;
            double n = sl.counts[static_cast<size_t>(t)];
            nlohmann::json line = {{"step", sl.step},
                                   {"task", task_name(static_cast<TaskId>(t))},
                                   {"l_pix", sl.sums[static_cast<size_t>(t)][0] / n},
                                   {"l_per", sl.sums[static_cast<size_t>(t)][1] / n},
                                   {"l_sty", sl.sums[static_cast<size_t>(t)][2] / n},
                                   {"l_total", sl.sums[static_cast<size_t>(t)][3] / n}};
            log << line.dump() << "\n";
        }

        int64_t iter = trainer.state().iter;
        if (cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0 && iter < cfg.total_iters)
            trainer.save_checkpoint((fs::path(out_dir) / ("ckpt_" + std::to_string(iter) + ".bin")).string());
    }
    log.flush();

    TrainResult result;
    result.final_checkpoint = (fs::path(out_dir) / "ckpt_final.bin").string();
    trainer.save_checkpoint(result.final_checkpoint);
    result.loss_log = log_path;
    result.state = trainer.state();
    return result;
}

// Convenience for inference tooling: build the model a checkpoint describes
// and load its weights strictly.
inline Model load_model(const std::string& checkpoint_path) {
    ckpt::File file = ckpt::load(checkpoint_path);
    POCR_CHECK_DATA(file.header.contains("model_config"),
                    "checkpoint: missing model_config header in " + checkpoint_path);
    Model model(file.header.at("model_config").get<ModelConfig>());
    ckpt::File params_only;
    for (const auto& [name, t] : file.tensors)
        if (name.rfind("opt.", 0) != 0) params_only.tensors[name] = t;
    ckpt::unpack_params(params_only, model.params(), /*strict=*/true);
    return model;
}

}  // namespace pocr
