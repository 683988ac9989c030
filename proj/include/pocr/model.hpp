#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "pocr/codec.hpp"
#include "pocr/common.hpp"
#include "pocr/nn.hpp"
#include "pocr/tensor.hpp"

namespace pocr {

// One encoder or decoder stage. For encoder stages resample_ratio is the
// patch-embedding downsample and out_dim the embedding width (equal to dim);
// for decoder stages resample_ratio is the patch-splitting upsample and
// out_dim the width after splitting.
struct StageSpec {
    int resample_ratio = 1;
    int out_dim = 1;
    int window = 1;
    int heads = 1;
    int depth = 1;
    int dim = 1;

    bool operator==(const StageSpec&) const = default;
};

enum class PromptSite { encoder, shared, decoder };

struct ModelConfig {
    std::vector<StageSpec> encoder_stages;
    std::vector<StageSpec> decoder_stages;
    int prompt_count = kNumTasks;
    int prompt_dim = 0;
    std::set<PromptSite> prompt_sites = {PromptSite::shared};
    double mlp_ratio = 4.0;
    int head_kernel = 3;

    int total_stride() const {
        int s = 1;
        for (const auto& st : encoder_stages) s *= st.resample_ratio;
        return s;
    }

    std::vector<int> encoder_strides() const {
        std::vector<int> out;
        int s = 1;
        for (const auto& st : encoder_stages) out.push_back(s *= st.resample_ratio);
        return out;
    }

    std::vector<int> decoder_strides() const {
        std::vector<int> out;
        int s = total_stride();
        for (const auto& st : decoder_stages) out.push_back(s /= st.resample_ratio);
        return out;
    }

    void validate() const {
        POCR_CHECK(!encoder_stages.empty() && decoder_stages.size() == encoder_stages.size() + 1,
                   "config: decoder must have one more stage than the encoder");
        for (const auto& st : encoder_stages) validate_stage(st);
        for (const auto& st : decoder_stages) validate_stage(st);
        for (const auto& st : encoder_stages)
            POCR_CHECK(st.out_dim == st.dim, "config: encoder stage embedding width must equal block dim");

        int enc_prod = 1, dec_prod = 1;
        for (const auto& st : encoder_stages) enc_prod *= st.resample_ratio;
        for (const auto& st : decoder_stages) dec_prod *= st.resample_ratio;
        POCR_CHECK(enc_prod == dec_prod, "config: decoder upsampling must undo encoder downsampling");

        POCR_CHECK(decoder_stages.front().dim == encoder_stages.back().out_dim,
                   "config: first decoder dim must match final encoder dim");
        for (size_t i = 0; i + 1 < decoder_stages.size(); ++i)
            POCR_CHECK(decoder_stages[i + 1].dim == decoder_stages[i].out_dim,
                       "config: decoder stage " + std::to_string(i + 2) + " dim must match previous out_dim");
        for (const auto& st : decoder_stages) {
            int r2 = st.resample_ratio * st.resample_ratio;
            POCR_CHECK(st.dim % r2 == 0, "config: decoder dim must be divisible by resample_ratio^2");
        }

        POCR_CHECK(prompt_count >= 1, "config: prompt_count must be >= 1");
        POCR_CHECK(prompt_dim == encoder_stages.back().dim,
                   "config: prompt_dim must equal the final encoder dim");
        POCR_CHECK(!prompt_sites.empty(), "config: at least one prompt site required");
        POCR_CHECK(decoder_stages.size() >= 3, "config: multi-scale heads need >= 3 decoder stages");
        auto dstr = decoder_strides();
        size_t m = dstr.size();
        POCR_CHECK(dstr[m - 1] == 1 && dstr[m - 2] == 2 && dstr[m - 3] == 4,
                   "config: last three decoder strides must be 4, 2, 1");

        // The four/five stage family must reproduce the canonical schedule.
        if (encoder_stages.size() == 4) {
            POCR_CHECK(encoder_strides() == std::vector<int>({4, 8, 16, 32}),
                       "config: 4-stage encoder must have strides 4,8,16,32");
            POCR_CHECK(decoder_strides() == std::vector<int>({16, 8, 4, 2, 1}),
                       "config: 5-stage decoder must have strides 16,8,4,2,1");
        }

        // Every non-final encoder feature needs a resolution- and
        // width-matched decoder feature for the lateral connection.
        auto estr = encoder_strides();
        for (size_t i = 0; i + 1 < encoder_stages.size(); ++i) {
            bool found = false;
            for (size_t j = 0; j < decoder_stages.size(); ++j)
                if (dstr[j] == estr[i]) {
                    POCR_CHECK(decoder_stages[j].out_dim == encoder_stages[i].out_dim,
                               "config: lateral pair at stride " + std::to_string(estr[i]) +
                                   " has mismatched widths");
                    found = true;
                }
            POCR_CHECK(found, "config: no decoder feature at stride " + std::to_string(estr[i]) +
                                  " for the lateral connection");
        }
    }

    static void validate_stage(const StageSpec& st) {
        POCR_CHECK(st.resample_ratio >= 1, "stage: resample_ratio must be >= 1");
        POCR_CHECK(st.out_dim >= 1 && st.heads >= 1 && st.depth >= 1 && st.dim >= 1 && st.window >= 1,
                   "stage: all sizes must be >= 1");
        POCR_CHECK(st.dim % st.heads == 0, "stage: dim " + std::to_string(st.dim) +
                                               " not divisible by heads " + std::to_string(st.heads));
    }

    // Total trainable parameter count, computed from shapes alone.
    int64_t param_count() const {
        auto block_params = [&](const StageSpec& st) -> int64_t {
            int64_t c = st.dim, h = st.heads, w = st.window;
            int64_t hidden = static_cast<int64_t>(mlp_ratio * static_cast<double>(c));
            int64_t n = 0;
            n += c * 3 * c + 3 * c;                    // qkv
            n += c * c + c;                            // proj
            n += h;                                    // logit scale
            n += (2 * w - 1) * (2 * w - 1) * h;        // relative bias table
            n += 4 * c;                                // two layer norms
            n += c * hidden + hidden + hidden * c + c; // mlp
            return n * st.depth;
        };
        int64_t total = 0;
        int64_t cin = 3;
        for (const auto& st : encoder_stages) {
            total += (static_cast<int64_t>(st.resample_ratio) * st.resample_ratio * cin + 1) * st.out_dim;
            total += block_params(st);
            cin = st.out_dim;
        }
        total += static_cast<int64_t>(prompt_count) * prompt_dim;
        if (prompt_sites.count(PromptSite::encoder))
            for (const auto& st : encoder_stages) total += (static_cast<int64_t>(prompt_dim) + 1) * st.dim;
        if (prompt_sites.count(PromptSite::decoder))
            for (const auto& st : decoder_stages) total += (static_cast<int64_t>(prompt_dim) + 1) * st.out_dim;
        for (const auto& st : decoder_stages) {
            total += block_params(st);
            int64_t split_in = st.dim / (st.resample_ratio * st.resample_ratio);
            total += (split_in + 1) * st.out_dim;
        }
        // Lateral connections pair non-final encoder features with the
        // stride-matched decoder features.
        auto estr = encoder_strides();
        auto dstr = decoder_strides();
        for (size_t i = 0; i + 1 < encoder_stages.size(); ++i)
            for (size_t j = 0; j < decoder_stages.size(); ++j)
                if (dstr[j] == estr[i]) {
                    int64_t c = encoder_stages[i].out_dim;
                    total += (c * c + c) + (9 * c * 2 * c + 2 * c) + (9 * 2 * c * 2 * c + 2 * c) +
                             (2 * c * c + c);
                }
        // Three output heads on the last three decoder features.
        size_t m = decoder_stages.size();
        for (size_t j = m - 3; j < m; ++j)
            total += static_cast<int64_t>(head_kernel) * head_kernel * decoder_stages[j].out_dim * 3 + 3;
        return total;
    }

    static ModelConfig preset(const std::string& name) {
        ModelConfig cfg;
        if (name == "small") {
            cfg.encoder_stages = {{4, 96, 16, 3, 2, 96},
                                  {2, 192, 16, 6, 2, 192},
                                  {2, 384, 16, 12, 18, 384},
                                  {2, 768, 16, 24, 2, 768}};
            cfg.decoder_stages = {{2, 384, 8, 24, 2, 768},
                                  {2, 192, 8, 12, 18, 384},
                                  {2, 96, 8, 6, 2, 192},
                                  {2, 48, 8, 3, 2, 96},
                                  {2, 24, 8, 2, 2, 48}};
            cfg.prompt_dim = 768;
        } else if (name == "toy") {
            // Encoder mirrors the small preset at 1/6 width; the decoder tail
            // stays wider (strides 2 and 1) so full-resolution detail is not
            // squeezed through a 2-channel feature.
            cfg.encoder_stages = {{4, 16, 4, 1, 1, 16},
                                  {2, 32, 4, 2, 1, 32},
                                  {2, 64, 4, 4, 2, 64},
                                  {2, 128, 4, 8, 1, 128}};
            cfg.decoder_stages = {{2, 64, 4, 8, 1, 128},
                                  {2, 32, 4, 4, 2, 64},
                                  {2, 16, 4, 2, 1, 32},
                                  {2, 16, 4, 1, 1, 16},
                                  {2, 12, 4, 2, 1, 16}};
            cfg.prompt_dim = 128;
        } else {
            throw ValueError("unknown preset: " + name + " (expected toy or small)");
        }
        cfg.validate();
        return cfg;
    }
};

inline std::string prompt_site_name(PromptSite s) {
    switch (s) {
        case PromptSite::encoder: return "encoder";
        case PromptSite::shared: return "shared";
        case PromptSite::decoder: return "decoder";
    }
    throw ValueError("unknown prompt site");
}

inline PromptSite prompt_site_from_name(const std::string& s) {
    if (s == "encoder") return PromptSite::encoder;
    if (s == "shared") return PromptSite::shared;
    if (s == "decoder") return PromptSite::decoder;
    throw ValueError("unknown prompt site: " + s);
}

inline void to_json(nlohmann::json& j, const StageSpec& s) {
    j = {{"resample_ratio", s.resample_ratio}, {"out_dim", s.out_dim}, {"window", s.window},
         {"heads", s.heads},                   {"depth", s.depth},     {"dim", s.dim}};
}

inline void from_json(const nlohmann::json& j, StageSpec& s) {
    for (auto& [k, v] : j.items())
        POCR_CHECK(k == "resample_ratio" || k == "out_dim" || k == "window" || k == "heads" ||
                       k == "depth" || k == "dim",
                   "stage config: unknown key '" + k + "'");
    j.at("resample_ratio").get_to(s.resample_ratio);
    j.at("out_dim").get_to(s.out_dim);
    j.at("window").get_to(s.window);
    j.at("heads").get_to(s.heads);
    j.at("depth").get_to(s.depth);
    j.at("dim").get_to(s.dim);
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    std::vector<std::string> sites;
    for (auto s : c.prompt_sites) sites.push_back(prompt_site_name(s));
    j = {{"encoder_stages", c.encoder_stages},
         {"decoder_stages", c.decoder_stages},
         {"prompt_count", c.prompt_count},
         {"prompt_dim", c.prompt_dim},
         {"prompt_sites", sites},
         {"mlp_ratio", c.mlp_ratio},
         {"head_kernel", c.head_kernel}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    for (auto& [k, v] : j.items())
        POCR_CHECK(k == "encoder_stages" || k == "decoder_stages" || k == "prompt_count" ||
                       k == "prompt_dim" || k == "prompt_sites" || k == "mlp_ratio" ||
                       k == "head_kernel",
                   "model config: unknown key '" + k + "'");
    j.at("encoder_stages").get_to(c.encoder_stages);
    j.at("decoder_stages").get_to(c.decoder_stages);
    j.at("prompt_count").get_to(c.prompt_count);
    j.at("prompt_dim").get_to(c.prompt_dim);
    c.prompt_sites.clear();
    for (const auto& s : j.at("prompt_sites")) c.prompt_sites.insert(prompt_site_from_name(s.get<std::string>()));
    if (j.contains("mlp_ratio")) j.at("mlp_ratio").get_to(c.mlp_ratio);
    if (j.contains("head_kernel")) j.at("head_kernel").get_to(c.head_kernel);
}

// ---------------------------------------------------------------------------
// Prompt bank: one learnable vector per task plus optional per-stage linear
// maps used when prompts are injected inside the encoder/decoder.
// ---------------------------------------------------------------------------
struct PromptBank {
    std::vector<Tensor> prompts;           // each [prompt_dim]
    std::vector<LinearLayer> enc_proj;     // prompt_dim -> stage dim
    std::vector<LinearLayer> dec_proj;     // prompt_dim -> stage out_dim

    static std::string prompt_name(int i) {
        return i < kNumTasks ? "prompts." + task_name(static_cast<TaskId>(i))
                             : "prompts.task" + std::to_string(i);
    }
};

struct FeatureBundle {
    std::vector<Tensor> enc_feats;
    Tensor shared_feat;
    Tensor injected_feat;
    std::vector<Tensor> dec_feats;
};

struct ModelOutput {
    Tensor out_quarter;  // H/4 x W/4 x 3
    Tensor out_half;     // H/2 x W/2 x 3
    Tensor out_full;     // H x W x 3
    std::optional<FeatureBundle> features;
};

class Model {
public:
    explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        build();
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    Tensor prompt(TaskId task) const {
        int idx = static_cast<int>(task);
        POCR_CHECK(idx >= 0 && idx < cfg_.prompt_count,
                   "task index " + std::to_string(idx) + " out of range for prompt bank");
        return bank_.prompts[static_cast<size_t>(idx)];
    }

    // Broadcast-add of the selected task prompt onto the shared feature map.
    Tensor inject_prompt(const Tensor& shared_feat, TaskId task) const {
        POCR_CHECK(shared_feat.ndim() == 3 && shared_feat.dim(2) == cfg_.prompt_dim,
                   "inject_prompt: feature dim must equal prompt dim");
        Tensor p = prompt(task);
        return add_bcast(shared_feat, reshape(p, {1, 1, cfg_.prompt_dim}));
    }

    ModelOutput forward(const Tensor& image, TaskId task, bool record_features = false) const {
        POCR_CHECK(image.ndim() == 3 && image.dim(2) == 3, "forward: expects HxWx3 input");
        int64_t stride = cfg_.total_stride();
        POCR_CHECK(image.dim(0) % stride == 0 && image.dim(1) % stride == 0,
                   "forward: input size " + shape_str(image.shape()) + " not divisible by " +
                       std::to_string(stride));
        (void)prompt(task);  // validates the task id

        FeatureBundle fb;
        Tensor x = image;
        for (size_t si = 0; si < cfg_.encoder_stages.size(); ++si) {
            x = enc_embed_[si](x);
            for (const auto& blk : enc_blocks_[si]) x = blk(x);
            if (cfg_.prompt_sites.count(PromptSite::encoder)) {
                Tensor p = bank_.enc_proj[si](prompt(task));
                x = add_bcast(x, reshape(p, {1, 1, cfg_.encoder_stages[si].dim}));
            }
            fb.enc_feats.push_back(x);
        }
        fb.shared_feat = x;
        Tensor d = cfg_.prompt_sites.count(PromptSite::shared) ? inject_prompt(x, task) : x;
        fb.injected_feat = d;

        auto estr = cfg_.encoder_strides();
        auto dstr = cfg_.decoder_strides();
        for (size_t si = 0; si < cfg_.decoder_stages.size(); ++si) {
            for (const auto& blk : dec_blocks_[si]) d = blk(d);
            d = dec_split_[si](d);
            for (size_t i = 0; i + 1 < cfg_.encoder_stages.size(); ++i)
                if (estr[i] == dstr[si]) d = laterals_[i](fb.enc_feats[i], d);
            if (cfg_.prompt_sites.count(PromptSite::decoder)) {
                Tensor p = bank_.dec_proj[si](prompt(task));
                d = add_bcast(d, reshape(p, {1, 1, cfg_.decoder_stages[si].out_dim}));
            }
            fb.dec_feats.push_back(d);
        }

        size_t m = cfg_.decoder_stages.size();
        ModelOutput out;
        out.out_quarter = head_quarter_(fb.dec_feats[m - 3]);
        out.out_half = head_half_(fb.dec_feats[m - 2]);
        out.out_full = head_full_(fb.dec_feats[m - 1]);
        if (record_features) out.features = std::move(fb);
        return out;
    }

private:
    void build() {
        int64_t cin = 3;
        for (size_t si = 0; si < cfg_.encoder_stages.size(); ++si) {
            const auto& st = cfg_.encoder_stages[si];
            std::string sp = "encoder.stage" + std::to_string(si + 1);
            enc_embed_.emplace_back(params_, sp + ".embed", st.resample_ratio, cin, st.out_dim);
            enc_blocks_.emplace_back();
            for (int j = 0; j < st.depth; ++j)
                enc_blocks_.back().emplace_back(params_, sp + ".block" + std::to_string(j + 1), st.dim,
                                                st.heads, st.window, cfg_.mlp_ratio, j % 2 == 1);
            cin = st.out_dim;
        }
        for (int i = 0; i < cfg_.prompt_count; ++i)
            bank_.prompts.push_back(params_.make(PromptBank::prompt_name(i), {cfg_.prompt_dim}));
        if (cfg_.prompt_sites.count(PromptSite::encoder))
            for (size_t si = 0; si < cfg_.encoder_stages.size(); ++si)
                bank_.enc_proj.emplace_back(params_, "prompts.enc_proj" + std::to_string(si + 1),
                                            cfg_.prompt_dim, cfg_.encoder_stages[si].dim);
        if (cfg_.prompt_sites.count(PromptSite::decoder))
            for (size_t si = 0; si < cfg_.decoder_stages.size(); ++si)
                bank_.dec_proj.emplace_back(params_, "prompts.dec_proj" + std::to_string(si + 1),
                                            cfg_.prompt_dim, cfg_.decoder_stages[si].out_dim);
        for (size_t si = 0; si < cfg_.decoder_stages.size(); ++si) {
            const auto& st = cfg_.decoder_stages[si];
            std::string sp = "decoder.stage" + std::to_string(si + 1);
            dec_blocks_.emplace_back();
            for (int j = 0; j < st.depth; ++j)
                dec_blocks_.back().emplace_back(params_, sp + ".block" + std::to_string(j + 1), st.dim,
                                                st.heads, st.window, cfg_.mlp_ratio, j % 2 == 1);
            dec_split_.emplace_back(params_, sp + ".split", st.resample_ratio, st.dim, st.out_dim);
        }
        auto estr = cfg_.encoder_strides();
        for (size_t i = 0; i + 1 < cfg_.encoder_stages.size(); ++i)
            laterals_.emplace_back(params_, "lateral.stage" + std::to_string(i + 1),
                                   cfg_.encoder_stages[i].out_dim);
        size_t m = cfg_.decoder_stages.size();
        head_quarter_ = Conv2dLayer(params_, "head.quarter", cfg_.head_kernel,
                                    cfg_.decoder_stages[m - 3].out_dim, 3);
        head_half_ = Conv2dLayer(params_, "head.half", cfg_.head_kernel,
                                 cfg_.decoder_stages[m - 2].out_dim, 3);
        head_full_ = Conv2dLayer(params_, "head.full", cfg_.head_kernel,
                                 cfg_.decoder_stages[m - 1].out_dim, 3);
    }

    ModelConfig cfg_;
    ParamStore params_;
    PromptBank bank_;
    std::vector<PatchEmbed> enc_embed_;
    std::vector<std::vector<SwinBlock>> enc_blocks_;
    std::vector<std::vector<SwinBlock>> dec_blocks_;
    std::vector<PatchSplit> dec_split_;
    std::vector<LateralConnection> laterals_;
    Conv2dLayer head_quarter_, head_half_, head_full_;
};

}  // namespace pocr
