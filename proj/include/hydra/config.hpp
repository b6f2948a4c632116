#pragma once

#include <string>

#include <json.hpp>

#include "hydra/errors.hpp"

namespace hydra {

enum class PromptMode { Static, Adaptive };
enum class MaskStrategy { Individual, Cluster };

inline std::string to_string(PromptMode m) {
    return m == PromptMode::Static ? "static" : "adaptive";
}
inline std::string to_string(MaskStrategy s) {
    return s == MaskStrategy::Individual ? "individual" : "cluster";
}

inline PromptMode prompt_mode_from_string(const std::string& s) {
    if (s == "static") return PromptMode::Static;
    if (s == "adaptive") return PromptMode::Adaptive;
    throw ConfigError("unknown prompt mode: " + s + " (expected static|adaptive)");
}
inline MaskStrategy mask_strategy_from_string(const std::string& s) {
    if (s == "individual") return MaskStrategy::Individual;
    if (s == "cluster") return MaskStrategy::Cluster;
    throw ConfigError("unknown mask strategy: " + s + " (expected cluster|individual)");
}

/// Geometry and behavior of the frozen dual encoder plus the prompt
/// adapter. Defaults are the desk-scale toy geometry.
struct ModelConfig {
    int image_size = 32;
    int patch_size = 8;
    int channels = 3;
    int dim = 64;           // shared embedding width D
    int heads = 2;
    int mlp_hidden = 128;
    int image_blocks = 4;   // L
    int text_blocks = 2;    // L_t
    int vocab_size = 16;
    int max_context = 16;
    int adapter_hidden = 16;  // D' < D
    int prompt_count = 8;     // M learnable prompts per category
    int lora_rank = 6;
    double lora_alpha = 6.0;
    bool lora_enabled = true;  // false runs the frozen baseline exactly
    int cue_layer = 1;         // block tap feeding the cue extractor
    PromptMode real_prompt = PromptMode::Static;
    PromptMode fake_prompt = PromptMode::Adaptive;

    int patches_per_image() const {
        return (image_size / patch_size) * (image_size / patch_size);
    }
    int patch_pixels() const { return patch_size * patch_size * channels; }

    void validate() const {
        if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0) {
            throw ConfigError("image size " + std::to_string(image_size) +
                              " not divisible by patch size " + std::to_string(patch_size));
        }
        if (image_blocks < 2) throw ConfigError("image encoder needs at least 2 blocks");
        if (text_blocks < 1) throw ConfigError("text encoder needs at least 1 block");
        if (dim <= 0 || dim % heads != 0) throw ConfigError("dim must be divisible by heads");
        if (adapter_hidden >= dim) throw ConfigError("adapter bottleneck must satisfy D' < D");
        if (adapter_hidden <= 0 || prompt_count <= 0) throw ConfigError("bad adapter geometry");
        if (lora_rank <= 0) throw ConfigError("LoRA rank must be positive");
        if (cue_layer < 1 || cue_layer > image_blocks) {
            throw ConfigError("cue layer " + std::to_string(cue_layer) + " out of range [1," +
                              std::to_string(image_blocks) + "]");
        }
    }
};

/// Weights and switches of the training objective.
struct LossConfig {
    double tau = 0.07;
    double lambda1 = 1.0;
    double lambda2 = 1.25;
    MaskStrategy mask_real = MaskStrategy::Cluster;
    MaskStrategy mask_fake = MaskStrategy::Individual;
    bool sc_image = true;
    bool sc_text = true;
    bool align = true;

    void validate() const {
        if (tau <= 0.0) throw ConfigError("temperature tau must be positive");
        if (lambda1 < 0.0 || lambda2 < 0.0) throw ConfigError("lambda weights must be >= 0");
    }
};

struct TrainConfig {
    ModelConfig model;
    LossConfig loss;
    int epochs = 10;
    double base_lr = 4e-4;
    int batch_size = 32;
    int bank_capacity = 968;  // batch + bank ~ 1000
    std::uint64_t seed = 0;
    int resize_to = 32;  // full-scale recipe uses 256 -> 224
    int crop_to = 32;

    void validate() const {
        model.validate();
        loss.validate();
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (base_lr <= 0.0) throw ConfigError("base learning rate must be positive");
        if (batch_size < 1) throw ConfigError("batch size must be >= 1");
        if (bank_capacity <= 0) throw ConfigError("bank capacity must be positive");
        if (crop_to > resize_to) throw ConfigError("crop size exceeds resize size");
        if (crop_to != model.image_size) {
            throw ConfigError("crop size must match the encoder image size");
        }
    }
};

// ---- JSON round trips (stable key order via ordered_json) ----

using Json = nlohmann::ordered_json;

inline Json to_json(const ModelConfig& m) {
    return Json{{"image_size", m.image_size},
                {"patch_size", m.patch_size},
                {"channels", m.channels},
                {"dim", m.dim},
                {"heads", m.heads},
                {"mlp_hidden", m.mlp_hidden},
                {"image_blocks", m.image_blocks},
                {"text_blocks", m.text_blocks},
                {"vocab_size", m.vocab_size},
                {"max_context", m.max_context},
                {"adapter_hidden", m.adapter_hidden},
                {"prompt_count", m.prompt_count},
                {"lora_rank", m.lora_rank},
                {"lora_alpha", m.lora_alpha},
                {"lora_enabled", m.lora_enabled},
                {"cue_layer", m.cue_layer},
                {"real_prompt", to_string(m.real_prompt)},
                {"fake_prompt", to_string(m.fake_prompt)}};
}

inline Json to_json(const LossConfig& l) {
    return Json{{"tau", l.tau},
                {"lambda1", l.lambda1},
                {"lambda2", l.lambda2},
                {"mask_real", to_string(l.mask_real)},
                {"mask_fake", to_string(l.mask_fake)},
                {"sc_image", l.sc_image},
                {"sc_text", l.sc_text},
                {"align", l.align}};
}

inline Json to_json(const TrainConfig& t) {
    return Json{{"model", to_json(t.model)}, {"loss", to_json(t.loss)},
                {"epochs", t.epochs},        {"base_lr", t.base_lr},
                {"batch_size", t.batch_size}, {"bank_capacity", t.bank_capacity},
                {"seed", t.seed},            {"resize_to", t.resize_to},
                {"crop_to", t.crop_to}};
}

namespace detail {
template <class T>
void maybe(const Json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}
inline void maybe_prompt(const Json& j, const char* key, PromptMode& out) {
    if (j.contains(key)) out = prompt_mode_from_string(j.at(key).get<std::string>());
}
inline void maybe_mask(const Json& j, const char* key, MaskStrategy& out) {
    if (j.contains(key)) out = mask_strategy_from_string(j.at(key).get<std::string>());
}
}  // namespace detail

inline ModelConfig model_config_from_json(const Json& j) {
    ModelConfig m;
    detail::maybe(j, "image_size", m.image_size);
    detail::maybe(j, "patch_size", m.patch_size);
    detail::maybe(j, "channels", m.channels);
    detail::maybe(j, "dim", m.dim);
    detail::maybe(j, "heads", m.heads);
    detail::maybe(j, "mlp_hidden", m.mlp_hidden);
    detail::maybe(j, "image_blocks", m.image_blocks);
    detail::maybe(j, "text_blocks", m.text_blocks);
    detail::maybe(j, "vocab_size", m.vocab_size);
    detail::maybe(j, "max_context", m.max_context);
    detail::maybe(j, "adapter_hidden", m.adapter_hidden);
    detail::maybe(j, "prompt_count", m.prompt_count);
    detail::maybe(j, "lora_rank", m.lora_rank);
    detail::maybe(j, "lora_alpha", m.lora_alpha);
    detail::maybe(j, "lora_enabled", m.lora_enabled);
    detail::maybe(j, "cue_layer", m.cue_layer);
    detail::maybe_prompt(j, "real_prompt", m.real_prompt);
    detail::maybe_prompt(j, "fake_prompt", m.fake_prompt);
    return m;
}

inline LossConfig loss_config_from_json(const Json& j) {
    LossConfig l;
    detail::maybe(j, "tau", l.tau);
    detail::maybe(j, "lambda1", l.lambda1);
    detail::maybe(j, "lambda2", l.lambda2);
    detail::maybe_mask(j, "mask_real", l.mask_real);
    detail::maybe_mask(j, "mask_fake", l.mask_fake);
    detail::maybe(j, "sc_image", l.sc_image);
    detail::maybe(j, "sc_text", l.sc_text);
    detail::maybe(j, "align", l.align);
    return l;
}

inline TrainConfig train_config_from_json(const Json& j) {
    TrainConfig t;
    if (j.contains("model")) t.model = model_config_from_json(j.at("model"));
    if (j.contains("loss")) t.loss = loss_config_from_json(j.at("loss"));
    detail::maybe(j, "epochs", t.epochs);
    detail::maybe(j, "base_lr", t.base_lr);
    detail::maybe(j, "batch_size", t.batch_size);
    detail::maybe(j, "bank_capacity", t.bank_capacity);
    detail::maybe(j, "seed", t.seed);
    detail::maybe(j, "resize_to", t.resize_to);
    detail::maybe(j, "crop_to", t.crop_to);
    return t;
}

}  // namespace hydra
