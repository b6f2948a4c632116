#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hydra/apa.hpp"
#include "hydra/checkpoint.hpp"
#include "hydra/config.hpp"
#include "hydra/dataset.hpp"
#include "hydra/encoders.hpp"
#include "hydra/objectives.hpp"

namespace hydra {

// ---- schedule ----

/// Cosine decay: base * (1 + cos(pi * step / total)) / 2.
inline double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double base_lr) {
    if (total_steps == 0) throw ConfigError("cosine_lr: total steps must be positive");
    if (step > total_steps) throw ConfigError("cosine_lr: step beyond total");
    const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
}

// ---- metrics ----

/// Average precision over descending scores; ties keep input order.
inline double average_precision(const std::vector<double>& scores,
                                const std::vector<int>& labels) {
    if (scores.size() != labels.size() || scores.empty()) {
        throw MetricError("average_precision: need matching, non-empty scores and labels");
    }
    const std::size_t positives =
        static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
    if (positives == 0) {
        throw MetricError("average_precision: undefined without any positive sample");
    }
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    double ap = 0.0;
    std::size_t hits = 0;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
        if (labels[order[rank]] == 1) {
            ++hits;
            ap += static_cast<double>(hits) / static_cast<double>(rank + 1);
        }
    }
    return ap / static_cast<double>(positives);
}

// ---- inference ----

struct Prediction {
    int label = 0;  // 0 real, 1 fake
    double o_real = 0.0;
    double o_fake = 0.0;
};

/// Forward-only model driver. Static category centers are computed once
/// per parameter version and reused across samples (they are pure
/// functions of the checkpoint).
class Predictor {
public:
    Predictor(const ParamStore& params, const ModelConfig& cfg) : params_(params), cfg_(cfg) {
        cfg_.validate();
        if (cfg_.real_prompt == PromptMode::Static) t_real_static_ = static_center(true);
        if (cfg_.fake_prompt == PromptMode::Static) t_fake_static_ = static_center(false);
    }

    const ModelConfig& config() const { return cfg_; }
    const ParamStore& params() const { return params_; }

    struct Embeddings {
        Tensor z;
        Tensor t_real;
        Tensor t_fake;
        std::vector<Tensor> cue_means;  // per-block tap means
    };

    /// z, both category centers and every layer-tap mean for one image.
    Embeddings embed(const Tensor& image) const {
        Graph g;
        GraphBinder bind(g, params_);
        ImageForward img = image_forward(bind, g.constant(patchify(image, cfg_)), cfg_);
        Embeddings out;
        out.z = g.value(img.z);
        for (Graph::Id tap : img.taps) {
            out.cue_means.push_back(g.value(extract_cues(g, tap)));
        }
        const bool need_adaptive = cfg_.real_prompt == PromptMode::Adaptive ||
                                   cfg_.fake_prompt == PromptMode::Adaptive;
        Graph::Id cue_row = -1;
        if (need_adaptive) {
            Graph::Id cue =
                extract_cues(g, img.taps[static_cast<std::size_t>(cfg_.cue_layer - 1)]);
            cue_row = adapt_cues(bind, cue, cfg_);
        }
        if (cfg_.real_prompt == PromptMode::Static) {
            out.t_real = t_real_static_;
        } else {
            Graph::Id seq = g.concat_rows({bind("apa.p_real"), cue_row, bind("apa.c_real")});
            out.t_real = g.value(text_forward(bind, seq, cfg_));
        }
        if (cfg_.fake_prompt == PromptMode::Static) {
            out.t_fake = t_fake_static_;
        } else {
            Graph::Id seq = g.concat_rows({bind("apa.p_fake"), cue_row, bind("apa.c_fake")});
            out.t_fake = g.value(text_forward(bind, seq, cfg_));
        }
        return out;
    }

    /// Compare the two candidate centers. Ties resolve to real: an exact
    /// tie carries no forgery evidence.
    Prediction predict(const Tensor& image) const {
        const Embeddings e = embed(image);
        Prediction p;
        for (std::size_t i = 0; i < e.z.numel(); ++i) {
            p.o_real += e.z[i] * e.t_real[i];
            p.o_fake += e.z[i] * e.t_fake[i];
        }
        p.label = p.o_fake > p.o_real ? 1 : 0;
        return p;
    }

private:
    const ParamStore& params_;
    ModelConfig cfg_;
    Tensor t_real_static_;
    Tensor t_fake_static_;

    Tensor static_center(bool real) const {
        Graph g;
        GraphBinder bind(g, params_);
        Graph::Id seq = real ? g.concat_rows({bind("apa.p_real"), bind("apa.c_real")})
                             : g.concat_rows({bind("apa.p_fake"), bind("apa.c_fake")});
        return g.value(text_forward(bind, seq, cfg_));
    }
};

inline Prediction predict(const Checkpoint& ckpt, const Tensor& image) {
    Predictor p(ckpt.params, ckpt.config.model);
    Tensor prepared = preprocess(image, ckpt.config.resize_to, ckpt.config.crop_to);
    return p.predict(prepared);
}

// ---- evaluation ----

struct EvalRow {
    std::string name;
    double acc = 0.0;  // percent
    double ap = 0.0;   // percent
    int n = 0;
};

struct EvalReport {
    std::vector<EvalRow> rows;  // one per fake subset, paired with the reals
    EvalRow mean;               // unweighted over rows
    std::vector<std::string> warnings;
};

inline std::string format_g9(double v) {
    char buf[40];
    auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 9);
    return std::string(buf, res.ptr);
}

/// Per-subset accuracy and AP. Each fake subset is scored against the
/// pooled real samples (the benchmark convention: one test set per
/// generator, containing that generator's fakes plus real images).
inline EvalReport evaluate(const std::vector<Sample>& samples, const Predictor& predictor,
                           int resize_to, int crop_to) {
    struct Scored {
        double score;
        int label;
        bool correct;
    };
    std::map<std::string, std::vector<Scored>> by_subset;
    std::vector<Scored> reals;
    std::vector<std::string> subset_order;

    for (const auto& s : samples) {
        const Prediction p = predictor.predict(preprocess(s.image, resize_to, crop_to));
        const Scored scored{p.o_fake - p.o_real, s.label, p.label == s.label};
        if (s.label == 0) {
            reals.push_back(scored);
        } else {
            if (by_subset.find(s.subset) == by_subset.end()) subset_order.push_back(s.subset);
            by_subset[s.subset].push_back(scored);
        }
    }
    std::sort(subset_order.begin(), subset_order.end());

    EvalReport report;
    if (reals.empty()) report.warnings.push_back("no real samples; AP uses fakes only");
    double acc_sum = 0.0, ap_sum = 0.0;
    for (const auto& name : subset_order) {
        const auto& fakes = by_subset[name];
        if (fakes.empty()) {
            report.warnings.push_back("subset " + name + " is empty; skipped");
            continue;
        }
        std::vector<double> scores;
        std::vector<int> labels;
        int correct = 0;
        for (const auto& s : fakes) {
            scores.push_back(s.score);
            labels.push_back(s.label);
            correct += s.correct ? 1 : 0;
        }
        for (const auto& s : reals) {
            scores.push_back(s.score);
            labels.push_back(s.label);
            correct += s.correct ? 1 : 0;
        }
        EvalRow row;
        row.name = name;
        row.n = static_cast<int>(scores.size());
        row.acc = 100.0 * static_cast<double>(correct) / static_cast<double>(row.n);
        row.ap = 100.0 * average_precision(scores, labels);
        acc_sum += row.acc;
        ap_sum += row.ap;
        report.rows.push_back(row);
    }
    if (report.rows.empty()) {
        throw MetricError("evaluate: no fake subset with samples");
    }
    report.mean.name = "mean";
    report.mean.acc = acc_sum / static_cast<double>(report.rows.size());
    report.mean.ap = ap_sum / static_cast<double>(report.rows.size());
    for (const auto& r : report.rows) report.mean.n += r.n;
    return report;
}

inline std::string report_csv(const EvalReport& report) {
    std::string out = "subset,acc,ap,n\n";
    for (const auto& r : report.rows) {
        out += r.name + "," + format_g9(r.acc) + "," + format_g9(r.ap) + "," +
               std::to_string(r.n) + "\n";
    }
    out += report.mean.name + "," + format_g9(report.mean.acc) + "," + format_g9(report.mean.ap) +
           "," + std::to_string(report.mean.n) + "\n";
    return out;
}

inline nlohmann::ordered_json report_json(const EvalReport& report) {
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& r : report.rows) {
        rows.push_back({{"subset", r.name}, {"acc", r.acc}, {"ap", r.ap}, {"n", r.n}});
    }
    return {{"subsets", rows},
            {"mean", {{"acc", report.mean.acc}, {"ap", report.mean.ap}, {"n", report.mean.n}}},
            {"warnings", report.warnings}};
}

// ---- training ----

namespace detail {

struct StepLosses {
    double cls = 0.0, sc = 0.0, align = 0.0, total = 0.0;
};

struct BatchGraph {
    Graph::Id total;    // scalar objective
    Graph::Id z_batch;  // [B x D] image features, the bank feed
    StepLosses losses;
};

struct BatchFeatures {
    Graph::Id z_batch;  // [B x D]
    Graph::Id t_batch;  // [B x D]: T_r for reals, per-sample T_f for fakes
    Graph::Id o_real;   // [B] logits against the real center
    Graph::Id o_fake;   // [B] logits against the fake center
};

/// [B x B*rows] constant averaging each sample's row block.
inline Tensor block_mean_matrix(std::size_t b, std::size_t rows) {
    Tensor m(Shape{b, b * rows});
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t r = 0; r < rows; ++r) {
            m.at2(i, i * rows + r) = 1.0 / static_cast<double>(rows);
        }
    }
    return m;
}

/// [B x B*rows] constant selecting the last row of each sample's block.
inline Tensor last_row_matrix(std::size_t b, std::size_t rows) {
    Tensor m(Shape{b, b * rows});
    for (std::size_t i = 0; i < b; ++i) m.at2(i, i * rows + rows - 1) = 1.0;
    return m;
}

/// Text encoder over `groups` row-stacked sequences of equal length.
inline Graph::Id batched_text(GraphBinder& bind, Graph::Id seq_all, const ModelConfig& mc,
                              int groups) {
    Graph& g = bind.graph();
    const int rows = static_cast<int>(g.value(seq_all).shape()[0]);
    const int s = rows / groups;
    if (s > mc.max_context) {
        throw ConfigError("text sequence length " + std::to_string(s) +
                          " exceeds context capacity " + std::to_string(mc.max_context));
    }
    Graph::Id x = seq_all;
    for (int b = 0; b < mc.text_blocks; ++b) {
        x = encoder_block(bind, x, "txt.b" + std::to_string(b), mc, groups);
    }
    Graph::Id pooled = g.matmul(
        g.constant(last_row_matrix(static_cast<std::size_t>(groups), static_cast<std::size_t>(s))),
        x);
    return g.l2_normalize(g.matmul(pooled, bind("txt.proj")));
}

/// Forward passes for one batch, with every row-wise op batched across
/// samples and attention restricted per sample. Static centers are
/// built once per graph and shared.
inline BatchFeatures assemble_batch(GraphBinder& bind, const std::vector<const Tensor*>& patches,
                                    const std::vector<int>& labels, const ModelConfig& mc) {
    Graph& g = bind.graph();
    const std::size_t b = patches.size();
    const std::size_t n = static_cast<std::size_t>(mc.patches_per_image());
    const std::size_t pw = static_cast<std::size_t>(mc.patch_pixels());
    const std::size_t d = static_cast<std::size_t>(mc.dim);

    // host-side stack of all patch matrices
    Tensor stacked(Shape{b * n, pw});
    for (std::size_t i = 0; i < b; ++i) {
        if (patches[i]->shape() != Shape{n, pw}) {
            throw ShapeError("assemble_batch: sample " + std::to_string(i) +
                             " has patch shape " + shape_str(patches[i]->shape()));
        }
        std::copy(patches[i]->data(), patches[i]->data() + n * pw, stacked.data() + i * n * pw);
    }

    Graph::Id x = g.matmul(g.constant(std::move(stacked)), bind("img.patch_proj"));
    std::vector<Graph::Id> taps;
    for (int blk = 0; blk < mc.image_blocks; ++blk) {
        x = encoder_block(bind, x, "img.b" + std::to_string(blk), mc, static_cast<int>(b));
        taps.push_back(x);
    }
    Graph::Id pool = g.constant(block_mean_matrix(b, n));
    Graph::Id z_batch = g.l2_normalize(g.matmul(g.matmul(pool, x), bind("img.proj")));

    // sample-adaptive cue tokens, one row per sample
    Graph::Id cue_rows = -1;
    if (mc.real_prompt == PromptMode::Adaptive || mc.fake_prompt == PromptMode::Adaptive) {
        Graph::Id cue =
            g.matmul(pool, taps[static_cast<std::size_t>(mc.cue_layer - 1)]);  // [B x D]
        Graph::Id hidden =
            g.relu(g.add(g.matmul(cue, bind("apa.adapter.w1")), bind("apa.adapter.b1")));
        cue_rows = g.add(g.matmul(hidden, bind("apa.adapter.w2")), bind("apa.adapter.b2"));
    }

    auto adaptive_centers = [&](const std::string& prompts, const std::string& context) {
        std::vector<Graph::Id> pieces;
        pieces.reserve(3 * b);
        for (std::size_t i = 0; i < b; ++i) {
            pieces.push_back(bind(prompts));
            pieces.push_back(g.slice_rows(cue_rows, static_cast<int>(i), static_cast<int>(i) + 1));
            pieces.push_back(bind(context));
        }
        return batched_text(bind, g.concat_rows(pieces), mc, static_cast<int>(b));
    };

    Graph::Id t_real = -1;   // [1 x D] when static
    Graph::Id t_real_b = -1; // [B x D] when adaptive
    if (mc.real_prompt == PromptMode::Static) {
        t_real = text_forward(bind, g.concat_rows({bind("apa.p_real"), bind("apa.c_real")}), mc);
    } else {
        t_real_b = adaptive_centers("apa.p_real", "apa.c_real");
    }
    Graph::Id t_fake = -1;
    Graph::Id t_fake_b = -1;
    if (mc.fake_prompt == PromptMode::Static) {
        t_fake = text_forward(bind, g.concat_rows({bind("apa.p_fake"), bind("apa.c_fake")}), mc);
    } else {
        t_fake_b = adaptive_centers("apa.p_fake", "apa.c_fake");
    }

    // per-sample text feature: T_r for reals, T_f^i for fakes
    std::vector<Graph::Id> t_rows;
    t_rows.reserve(b);
    for (std::size_t i = 0; i < b; ++i) {
        const bool real = labels[i] == 0;
        Graph::Id shared = real ? t_real : t_fake;
        Graph::Id per = real ? t_real_b : t_fake_b;
        t_rows.push_back(shared >= 0
                             ? shared
                             : g.slice_rows(per, static_cast<int>(i), static_cast<int>(i) + 1));
    }

    BatchFeatures out;
    out.z_batch = z_batch;
    out.t_batch = g.concat_rows(t_rows);
    out.o_real = logits_batched(g, z_batch, t_real >= 0 ? t_real : t_real_b);
    out.o_fake = logits_batched(g, z_batch, t_fake >= 0 ? t_fake : t_fake_b);
    (void)d;
    return out;
}

/// Build the full training objective for one batch on a fresh graph.
inline BatchGraph build_batch_loss(GraphBinder& bind, const std::vector<const Tensor*>& patches,
                                   const std::vector<int>& labels, const TrainConfig& cfg,
                                   const MemoryBank& bank) {
    Graph& g = bind.graph();
    const ModelConfig& mc = cfg.model;
    const BatchFeatures feats = assemble_batch(bind, patches, labels, mc);
    Graph::Id z_batch = feats.z_batch;
    Graph::Id t_batch = feats.t_batch;

    // Image-branch contrast set: batch plus detached bank entries.
    std::vector<int> contrast_labels = labels;
    Graph::Id z_contrast = z_batch;
    if (bank.size() > 0) {
        for (int l : bank.labels()) contrast_labels.push_back(l);
        z_contrast = g.concat_rows(
            {z_batch, g.constant(bank.features(static_cast<std::size_t>(mc.dim)))});
    }
    const Tensor z_mask = build_mask_extended(labels, contrast_labels, cfg.loss.mask_real,
                                              cfg.loss.mask_fake);
    const Tensor t_mask = build_mask(labels, cfg.loss.mask_real, cfg.loss.mask_fake);

    Graph::Id cls, sc, align;
    try {
        cls = cls_loss_batched(g, feats.o_real, feats.o_fake, labels);
    } catch (const NumericError& e) {
        throw NumericError("cls loss: " + std::string(e.what()));
    }
    try {
        sc = sc_loss(g, z_batch, z_contrast, z_mask, t_batch, t_mask, cfg.loss).total;
    } catch (const NumericError& e) {
        throw NumericError("sc loss: " + std::string(e.what()));
    }
    try {
        align = cfg.loss.align ? align_loss(g, z_batch, t_batch, t_mask, cfg.loss.tau)
                               : g.constant(Tensor::scalar(0.0));
    } catch (const NumericError& e) {
        throw NumericError("align loss: " + std::string(e.what()));
    }
    BatchGraph result;
    result.total = total_loss(g, cls, sc, align, cfg.loss);
    result.z_batch = z_batch;
    result.losses.cls = g.value(cls).item();
    result.losses.sc = g.value(sc).item();
    result.losses.align = g.value(align).item();
    result.losses.total = g.value(result.total).item();
    return result;
}

}  // namespace detail

/// Plain gradient descent on the total objective with cosine-decayed
/// learning rate. Deterministic for a fixed seed: shuffling, batching,
/// bank updates and parameter iteration order are all fixed.
inline Checkpoint train(const TrainConfig& cfg, const std::vector<Sample>& samples,
                        std::ostream* log = nullptr) {
    cfg.validate();
    int reals = 0, fakes = 0;
    for (const auto& s : samples) (s.label == 0 ? reals : fakes)++;
    if (reals == 0 || fakes == 0) {
        throw ConfigError("train: need at least one real and one fake sample");
    }

    ParamStore params = init_params(cfg.model, cfg.seed);

    std::vector<Tensor> patches;
    std::vector<int> labels;
    patches.reserve(samples.size());
    for (const auto& s : samples) {
        patches.push_back(patchify(preprocess(s.image, cfg.resize_to, cfg.crop_to), cfg.model));
        labels.push_back(s.label);
    }

    const std::size_t n = samples.size();
    const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
    const std::uint64_t batches_per_epoch = (n + bs - 1) / bs;
    const std::uint64_t total_steps = static_cast<std::uint64_t>(cfg.epochs) * batches_per_epoch;

    MemoryBank bank(cfg.bank_capacity);
    Rng shuffle_rng(cfg.seed * 0x9E3779B97F4A7C15ull + 0x517CC1B727220A95ull);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);

    std::uint64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (std::size_t start = 0; start < n; start += bs, ++step) {
            const std::size_t count = std::min(bs, n - start);
            std::vector<const Tensor*> batch_patches(count);
            std::vector<int> batch_labels(count);
            for (std::size_t i = 0; i < count; ++i) {
                batch_patches[i] = &patches[order[start + i]];
                batch_labels[i] = labels[order[start + i]];
            }

            Graph g;
            GraphBinder bind(g, params);
            const detail::BatchGraph batch =
                detail::build_batch_loss(bind, batch_patches, batch_labels, cfg, bank);

            std::map<std::string, Tensor> grads = g.backward(batch.total);
            const double lr = cosine_lr(step, total_steps, cfg.base_lr);
            for (auto& [name, grad] : grads) {
                Tensor& p = params.mutable_tensor(name);
                for (std::size_t i = 0; i < p.numel(); ++i) p[i] -= lr * grad[i];
            }

            // detached copy of this batch's image features
            bank.push_batch(g.value(batch.z_batch), batch_labels);

            if (log) {
                nlohmann::ordered_json line{{"epoch", epoch},
                                            {"step", step},
                                            {"lr", lr},
                                            {"loss_cls", batch.losses.cls},
                                            {"loss_sc", batch.losses.sc},
                                            {"loss_align", batch.losses.align},
                                            {"loss_total", batch.losses.total}};
                (*log) << line.dump() << "\n";
            }
        }
    }

    Checkpoint ckpt;
    ckpt.config = cfg;
    ckpt.seed = cfg.seed;
    ckpt.step = step;
    ckpt.params = std::move(params);
    return ckpt;
}

}  // namespace hydra
