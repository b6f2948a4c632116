#pragma once

#include <algorithm>
#include <ostream>
#include <string>
#include <vector>

#include "hydra/dataset.hpp"
#include "hydra/pipeline.hpp"

namespace hydra {

/// Export per-sample vectors as CSV for external projection/plotting.
/// Selectors: "z" (image embedding), "Tr" (real center), "Tf" (fake
/// center), "layerK" (mean of the K-th block tap, K in 1..L).
inline void dump_embeddings(const std::vector<Sample>& samples, const Predictor& predictor,
                            int resize_to, int crop_to, const std::string& selector,
                            std::ostream& out) {
    int layer = 0;
    if (selector == "z" || selector == "Tr" || selector == "Tf") {
        // handled below
    } else if (selector.rfind("layer", 0) == 0) {
        try {
            layer = std::stoi(selector.substr(5));
        } catch (const std::exception&) {
            throw UsageError("unknown embedding selector: " + selector);
        }
        if (layer < 1 || layer > predictor.config().image_blocks) {
            throw UsageError("layer selector out of range: " + selector);
        }
    } else {
        throw UsageError("unknown embedding selector: " + selector);
    }

    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return samples[a].id < samples[b].id; });

    out << "id,subset,label";
    for (int j = 0; j < predictor.config().dim; ++j) out << ",v" << j;
    out << "\n";
    for (std::size_t idx : order) {
        const Sample& s = samples[idx];
        const auto e = predictor.embed(preprocess(s.image, resize_to, crop_to));
        const Tensor* vec = nullptr;
        if (selector == "z") {
            vec = &e.z;
        } else if (selector == "Tr") {
            vec = &e.t_real;
        } else if (selector == "Tf") {
            vec = &e.t_fake;
        } else {
            vec = &e.cue_means[static_cast<std::size_t>(layer - 1)];
        }
        out << s.id << "," << s.subset << "," << s.label;
        for (std::size_t j = 0; j < vec->numel(); ++j) out << "," << format_g9((*vec)[j]);
        out << "\n";
    }
}

}  // namespace hydra
