#pragma once

#include <chrono>
#include <string>
#include <vector>

#include "hydra/pipeline.hpp"

namespace hydra {

/// Full-model gradient fidelity harness: reverse-mode gradients of every
/// objective term, w.r.t. every trainable scalar, against central finite
/// differences. Runs on a reduced geometry (still D=64, B=8) so the
/// exhaustive sweep stays fast.
struct GradCheckReport {
    struct Term {
        std::string name;
        double max_rel_err = 0.0;
    };
    std::vector<Term> terms;
    double max_rel_err = 0.0;
    double elapsed_seconds = 0.0;
    std::size_t parameter_count = 0;
};

namespace detail {

inline ModelConfig gradcheck_model() {
    ModelConfig mc;
    mc.dim = 64;
    mc.image_size = 16;  // 4 patches
    mc.patch_size = 8;
    mc.image_blocks = 2;
    mc.text_blocks = 1;
    mc.heads = 2;
    mc.mlp_hidden = 64;
    mc.prompt_count = 2;
    mc.adapter_hidden = 4;
    mc.lora_rank = 1;
    mc.lora_alpha = 1.0;
    return mc;
}

enum class LossTerm { ImageSupcon, Sc, Align, Cls, Total };

inline Graph::Id term_node(Graph& g, const BatchFeatures& feats, const Tensor& mask,
                           const std::vector<int>& labels, const LossConfig& cfg,
                           LossTerm term) {
    switch (term) {
        case LossTerm::ImageSupcon:
            return supcon(g, feats.z_batch, feats.z_batch, mask, cfg.tau);
        case LossTerm::Sc:
            return sc_loss(g, feats.z_batch, feats.z_batch, mask, feats.t_batch, mask, cfg).total;
        case LossTerm::Align:
            return align_loss(g, feats.z_batch, feats.t_batch, mask, cfg.tau);
        case LossTerm::Cls:
            return cls_loss_batched(g, feats.o_real, feats.o_fake, labels);
        case LossTerm::Total: {
            Graph::Id cls = cls_loss_batched(g, feats.o_real, feats.o_fake, labels);
            Graph::Id sc =
                sc_loss(g, feats.z_batch, feats.z_batch, mask, feats.t_batch, mask, cfg).total;
            Graph::Id al = align_loss(g, feats.z_batch, feats.t_batch, mask, cfg.tau);
            return total_loss(g, cls, sc, al, cfg);
        }
    }
    throw Error("unreachable loss term");
}

}  // namespace detail

inline GradCheckReport gradcheck(std::uint64_t seed = 0, double eps = 1e-5) {
    const auto t0 = std::chrono::steady_clock::now();

    TrainConfig cfg;
    cfg.model = detail::gradcheck_model();
    cfg.resize_to = cfg.model.image_size;
    cfg.crop_to = cfg.model.image_size;

    ParamStore params = init_params(cfg.model, seed);
    Rng rng(seed ^ 0xC0FFEEull);
    for (const auto& name : params.names(true)) {
        Tensor& t = params.mutable_tensor(name);
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.gaussian(0.0, 0.1);
    }

    const int batch = 8;
    std::vector<Tensor> patch_store;
    std::vector<const Tensor*> patches;
    std::vector<int> labels;
    for (int i = 0; i < batch; ++i) {
        Tensor img(Shape{static_cast<std::size_t>(cfg.model.image_size),
                         static_cast<std::size_t>(cfg.model.image_size), 3});
        for (std::size_t p = 0; p < img.numel(); ++p) img[p] = rng.uniform();
        patch_store.push_back(patchify(img, cfg.model));
        labels.push_back(i % 2);
    }
    for (const auto& p : patch_store) patches.push_back(&p);

    GradCheckReport report;
    report.parameter_count = params.trainable_scalar_count();
    const std::pair<std::string, detail::LossTerm> term_list[] = {
        {"image_supcon", detail::LossTerm::ImageSupcon},
        {"sc", detail::LossTerm::Sc},
        {"align", detail::LossTerm::Align},
        {"cls", detail::LossTerm::Cls},
        {"total", detail::LossTerm::Total},
    };

    for (const auto& [name, term] : term_list) {
        // One graph per term; each probe rebinds the perturbed parameter
        // and re-executes the fixed tape (two evaluations per scalar).
        Graph g;
        GraphBinder bind(g, params);
        const detail::BatchFeatures feats = detail::assemble_batch(bind, patches, labels,
                                                                   cfg.model);
        const Tensor mask = build_mask(labels, cfg.loss.mask_real, cfg.loss.mask_fake);
        const Graph::Id loss = detail::term_node(g, feats, mask, labels, cfg.loss, term);
        const std::map<std::string, Tensor> grads = g.backward(loss);

        std::map<std::string, Tensor> binding;
        for (const auto& pname : params.names(true)) binding[pname] = params.get(pname);

        double max_err = 0.0;
        for (const auto& pname : params.names(true)) {
            Tensor& t = binding[pname];
            const Tensor& ga = grads.at(pname);
            for (std::size_t i = 0; i < t.numel(); ++i) {
                const double orig = t[i];
                t[i] = orig + eps;
                g.eval(binding);
                const double hi = g.value(loss).item();
                t[i] = orig - eps;
                g.eval(binding);
                const double lo = g.value(loss).item();
                t[i] = orig;  // applied by the next probe's eval
                const double fd = (hi - lo) / (2.0 * eps);
                const double denom = std::max({std::fabs(ga[i]), std::fabs(fd), 1e-3});
                max_err = std::max(max_err, std::fabs(ga[i] - fd) / denom);
            }
        }
        report.terms.push_back({name, max_err});
        report.max_rel_err = std::max(report.max_rel_err, max_err);
    }

    report.elapsed_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

}  // namespace hydra
