#pragma once

#include <string>
#include <vector>

#include "hydra/autodiff.hpp"
#include "hydra/config.hpp"
#include "hydra/encoders.hpp"
#include "hydra/errors.hpp"

namespace hydra {

/// Average-pool a block tap [N x D] into the fine-grained cue vector [D].
inline Graph::Id extract_cues(Graph& g, Graph::Id layer_tap) {
    const Tensor& t = g.value(layer_tap);
    if (t.rank() != 2 || t.shape()[0] == 0) {
        throw ShapeError("extract_cues: expected a non-empty [N x D] tap, got " +
                         shape_str(t.shape()));
    }
    return g.mean_axis(layer_tap, 0);
}

/// Bottleneck modulation of the cue vector:
/// relu(cue W1 + b1) W2 + b2, returned as a single [1 x D] prompt row.
/// Deliberately not normalized; it enters the text sequence as a token.
inline Graph::Id adapt_cues(GraphBinder& bind, Graph::Id cue, const ModelConfig& cfg) {
    Graph& g = bind.graph();
    Graph::Id row = g.reshape(cue, Shape{1, static_cast<std::size_t>(cfg.dim)});
    Graph::Id hidden = g.relu(g.add(g.matmul(row, bind("apa.adapter.w1")), bind("apa.adapter.b1")));
    return g.add(g.matmul(hidden, bind("apa.adapter.w2")), bind("apa.adapter.b2"));
}

struct PromptSequences {
    Graph::Id seq_real;
    Graph::Id seq_fake;
};

/// Assemble the two text prompt sequences. The default configuration is
/// asymmetric: the real sequence [P_r, C_r] is static, the fake sequence
/// [P_f, cue_row, C_f] carries the sample-adaptive cue token. Either
/// side can be flipped for the ablation modes.
inline PromptSequences build_prompts(GraphBinder& bind, Graph::Id cue_row,
                                     const ModelConfig& cfg) {
    Graph& g = bind.graph();
    PromptSequences out;
    if (cfg.real_prompt == PromptMode::Adaptive) {
        out.seq_real = g.concat_rows({bind("apa.p_real"), cue_row, bind("apa.c_real")});
    } else {
        out.seq_real = g.concat_rows({bind("apa.p_real"), bind("apa.c_real")});
    }
    if (cfg.fake_prompt == PromptMode::Adaptive) {
        out.seq_fake = g.concat_rows({bind("apa.p_fake"), cue_row, bind("apa.c_fake")});
    } else {
        out.seq_fake = g.concat_rows({bind("apa.p_fake"), bind("apa.c_fake")});
    }
    return out;
}

struct CategoryCenters {
    Graph::Id z;       // image embedding [1 x D]
    Graph::Id t_real;  // real category center [1 x D]
    Graph::Id t_fake;  // fake category center [1 x D]
    std::vector<Graph::Id> taps;
};

/// Full per-sample path: image embedding plus both category centers.
/// With the default static real prompt, t_real has no image dependence
/// and is shared verbatim across a batch graph by the caller.
inline CategoryCenters category_centers(GraphBinder& bind, Graph::Id patches,
                                        const ModelConfig& cfg) {
    Graph& g = bind.graph();
    CategoryCenters out;
    ImageForward img = image_forward(bind, patches, cfg);
    out.z = img.z;
    out.taps = img.taps;
    Graph::Id cue = extract_cues(g, img.taps[static_cast<std::size_t>(cfg.cue_layer - 1)]);
    Graph::Id cue_row = adapt_cues(bind, cue, cfg);
    PromptSequences seqs = build_prompts(bind, cue_row, cfg);
    out.t_real = text_forward(bind, seqs.seq_real, cfg);
    out.t_fake = text_forward(bind, seqs.seq_fake, cfg);
    return out;
}

}  // namespace hydra
