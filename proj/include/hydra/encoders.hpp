#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "hydra/autodiff.hpp"
#include "hydra/config.hpp"
#include "hydra/errors.hpp"
#include "hydra/params.hpp"
#include "hydra/rng.hpp"
#include "hydra/tensor.hpp"

namespace hydra {

/// Binds ParamStore tensors to graph leaves, one node per name, so that
/// gradients accumulate across every use within a step.
class GraphBinder {
public:
    GraphBinder(Graph& g, const ParamStore& ps) : g_(g), ps_(ps) {}

    Graph::Id operator()(const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        Graph::Id id = g_.param(name, ps_.get(name), ps_.trainable(name));
        bound_.emplace(name, id);
        return id;
    }

    Graph& graph() { return g_; }
    const ParamStore& params() const { return ps_; }

private:
    Graph& g_;
    const ParamStore& ps_;
    std::map<std::string, Graph::Id> bound_;
};

// ---- fixed prompt vocabulary ----

inline const std::vector<std::string>& vocab_words() {
    static const std::vector<std::string> words = {
        "a",  "an", "the",       "real",      "fake",      "image",   "photo",  "picture",
        "of", ".",  ",",         "synthetic", "authentic", "generated", "natural", "camera"};
    return words;
}

inline int vocab_index(const std::string& word) {
    const auto& words = vocab_words();
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (words[i] == word) return static_cast<int>(i);
    }
    throw VocabError("word not in vocabulary: '" + word + "'");
}

// ---- deterministic "pretrained" initialization ----

namespace detail {

inline Tensor gaussian_tensor(Rng& rng, Shape shape, double stddev, double mean = 0.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.gaussian(mean, stddev);
    return t;
}

inline void init_block(ParamStore& ps, Rng& rng, const std::string& prefix,
                       const ModelConfig& cfg) {
    const std::size_t d = static_cast<std::size_t>(cfg.dim);
    const std::size_t dh = d / static_cast<std::size_t>(cfg.heads);
    const std::size_t hid = static_cast<std::size_t>(cfg.mlp_hidden);
    const double wd = 1.0 / std::sqrt(static_cast<double>(d));
    const double wdh = 1.0 / std::sqrt(static_cast<double>(dh));
    const double wh = 1.0 / std::sqrt(static_cast<double>(hid));

    ps.insert(prefix + ".ln1.g", gaussian_tensor(rng, {d}, 0.02, 1.0), false);
    ps.insert(prefix + ".ln1.b", gaussian_tensor(rng, {d}, 0.02), false);
    for (int h = 0; h < cfg.heads; ++h) {
        const std::string hp = prefix + ".attn.h" + std::to_string(h);
        ps.insert(hp + ".wq", gaussian_tensor(rng, {d, dh}, wd), false);
        ps.insert(hp + ".bq", gaussian_tensor(rng, {dh}, 0.01), false);
        ps.insert(hp + ".wk", gaussian_tensor(rng, {d, dh}, wd), false);
        ps.insert(hp + ".bk", gaussian_tensor(rng, {dh}, 0.01), false);
        ps.insert(hp + ".wv", gaussian_tensor(rng, {d, dh}, wd), false);
        ps.insert(hp + ".bv", gaussian_tensor(rng, {dh}, 0.01), false);
        ps.insert(hp + ".wo", gaussian_tensor(rng, {dh, d}, wdh), false);
    }
    ps.insert(prefix + ".attn.bo", gaussian_tensor(rng, {d}, 0.01), false);
    ps.insert(prefix + ".ln2.g", gaussian_tensor(rng, {d}, 0.02, 1.0), false);
    ps.insert(prefix + ".ln2.b", gaussian_tensor(rng, {d}, 0.02), false);
    ps.insert(prefix + ".mlp.w1", gaussian_tensor(rng, {d, hid}, wd), false);
    ps.insert(prefix + ".mlp.b1", gaussian_tensor(rng, {hid}, 0.01), false);
    ps.insert(prefix + ".mlp.w2", gaussian_tensor(rng, {hid, d}, wh), false);
    ps.insert(prefix + ".mlp.b2", gaussian_tensor(rng, {d}, 0.01), false);

    // LoRA around both MLP linears: A random, B zero so the adapted
    // forward starts exactly at the frozen baseline.
    const std::size_t r = static_cast<std::size_t>(cfg.lora_rank);
    ps.insert(prefix + ".mlp.fc1.lora_a", gaussian_tensor(rng, {d, r}, wd), true);
    ps.insert(prefix + ".mlp.fc1.lora_b", Tensor(Shape{r, hid}), true);
    ps.insert(prefix + ".mlp.fc2.lora_a", gaussian_tensor(rng, {hid, r}, wh), true);
    ps.insert(prefix + ".mlp.fc2.lora_b", Tensor(Shape{r, d}), true);
}

}  // namespace detail

/// Look up the frozen context rows for a phrase, one token per
/// lowercase word ("A real image" -> 3 rows of the token table).
inline Tensor tokenize_context(const std::string& text, const ParamStore& ps) {
    std::istringstream in(text);
    std::string word;
    std::vector<int> ids;
    while (in >> word) {
        std::transform(word.begin(), word.end(), word.begin(),
                       [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        ids.push_back(vocab_index(word));
    }
    if (ids.empty()) throw VocabError("cannot tokenize empty text");
    const Tensor& table = ps.get("txt.token_table");
    const std::size_t d = table.shape()[1];
    Tensor out(Shape{ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            out.at2(i, j) = table.at2(static_cast<std::size_t>(ids[i]), j);
        }
    }
    return out;
}

/// Build the full parameter set: frozen encoder weights drawn from a
/// recorded seed, plus the trainable prompt / adapter / LoRA tensors.
inline ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ParamStore ps;
    Rng rng(seed);
    const std::size_t d = static_cast<std::size_t>(cfg.dim);
    const std::size_t pp = static_cast<std::size_t>(cfg.patch_pixels());
    const double wd = 1.0 / std::sqrt(static_cast<double>(d));

    ps.insert("img.patch_proj", detail::gaussian_tensor(rng, {pp, d}, 1.0 / std::sqrt(double(pp))),
              false);
    for (int b = 0; b < cfg.image_blocks; ++b) {
        detail::init_block(ps, rng, "img.b" + std::to_string(b), cfg);
    }
    ps.insert("img.proj", detail::gaussian_tensor(rng, {d, d}, wd), false);

    ps.insert("txt.token_table",
              detail::gaussian_tensor(rng, {static_cast<std::size_t>(cfg.vocab_size), d}, 1.0),
              false);
    for (int b = 0; b < cfg.text_blocks; ++b) {
        detail::init_block(ps, rng, "txt.b" + std::to_string(b), cfg);
    }
    ps.insert("txt.proj", detail::gaussian_tensor(rng, {d, d}, wd), false);

    const std::size_t m = static_cast<std::size_t>(cfg.prompt_count);
    const std::size_t dp = static_cast<std::size_t>(cfg.adapter_hidden);
    ps.insert("apa.p_real", detail::gaussian_tensor(rng, {m, d}, 0.02), true);
    ps.insert("apa.p_fake", detail::gaussian_tensor(rng, {m, d}, 0.02), true);
    ps.insert("apa.adapter.w1", detail::gaussian_tensor(rng, {d, dp}, wd), true);
    ps.insert("apa.adapter.b1", Tensor(Shape{dp}), true);
    ps.insert("apa.adapter.w2",
              detail::gaussian_tensor(rng, {dp, d}, 1.0 / std::sqrt(double(dp))), true);
    ps.insert("apa.adapter.b2", Tensor(Shape{d}), true);

    // Context rows are frozen lookups; materialized so the checkpoint is
    // self-contained.
    ps.insert("apa.c_real", tokenize_context("A real image", ps), false);
    ps.insert("apa.c_fake", tokenize_context("A fake image", ps), false);
    return ps;
}

/// Rearrange an [H x W x 3] image into the [N x patch_pixels] matrix the
/// image encoder consumes. Patches scan row-major; within a patch,
/// pixels scan row-major with channels innermost.
inline Tensor patchify(const Tensor& image, const ModelConfig& cfg) {
    if (image.rank() != 3 || image.shape()[2] != static_cast<std::size_t>(cfg.channels)) {
        throw ShapeError("patchify: expected [HxWx" + std::to_string(cfg.channels) +
                         "] image, got " + shape_str(image.shape()));
    }
    const std::size_t h = image.shape()[0], w = image.shape()[1];
    const std::size_t p = static_cast<std::size_t>(cfg.patch_size);
    const std::size_t c = static_cast<std::size_t>(cfg.channels);
    if (h % p != 0 || w % p != 0) {
        throw ConfigError("image " + std::to_string(h) + "x" + std::to_string(w) +
                          " not divisible by patch size " + std::to_string(p));
    }
    const std::size_t gh = h / p, gw = w / p;
    Tensor out(Shape{gh * gw, p * p * c});
    for (std::size_t py = 0; py < gh; ++py) {
        for (std::size_t px = 0; px < gw; ++px) {
            const std::size_t row = py * gw + px;
            std::size_t col = 0;
            for (std::size_t dy = 0; dy < p; ++dy) {
                for (std::size_t dx = 0; dx < p; ++dx) {
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        out.at2(row, col++) = image[((py * p + dy) * w + (px * p + dx)) * c + ch];
                    }
                }
            }
        }
    }
    return out;
}

namespace detail {

/// base(x) + (alpha/r) * (x A) B around a frozen linear layer.
inline Graph::Id linear_with_lora(GraphBinder& bind, Graph::Id x, const std::string& w,
                                  const std::string& b, const std::string& lora_prefix,
                                  const ModelConfig& cfg) {
    Graph& g = bind.graph();
    Graph::Id out = g.add(g.matmul(x, bind(w)), bind(b));
    if (!cfg.lora_enabled) return out;
    const double scale = cfg.lora_alpha / static_cast<double>(cfg.lora_rank);
    Graph::Id delta = g.matmul(g.matmul(x, bind(lora_prefix + ".lora_a")),
                               bind(lora_prefix + ".lora_b"));
    return g.add(out, g.scalar_mul(delta, scale));
}

inline Graph::Id affine_layer_norm(GraphBinder& bind, Graph::Id x, const std::string& prefix) {
    Graph& g = bind.graph();
    return g.add(g.mul(g.layer_norm(x), bind(prefix + ".g")), bind(prefix + ".b"));
}

/// Pre-norm transformer block: x += Attn(LN1 x); x += MLP(LN2 x).
/// The MLP linears carry LoRA; attention stays fully frozen.
///
/// `groups` > 1 runs the block over a row-stacked batch of `groups`
/// independent sequences: every row-wise op (projections, norms, MLP)
/// is shared, and attention is restricted to each sequence's own rows.
inline Graph::Id encoder_block(GraphBinder& bind, Graph::Id x, const std::string& prefix,
                               const ModelConfig& cfg, int groups = 1) {
    Graph& g = bind.graph();
    const std::size_t dh = static_cast<std::size_t>(cfg.dim / cfg.heads);
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Graph::Id a = affine_layer_norm(bind, x, prefix + ".ln1");
    Graph::Id attn = -1;
    for (int h = 0; h < cfg.heads; ++h) {
        const std::string hp = prefix + ".attn.h" + std::to_string(h);
        Graph::Id q = g.add(g.matmul(a, bind(hp + ".wq")), bind(hp + ".bq"));
        Graph::Id k = g.add(g.matmul(a, bind(hp + ".wk")), bind(hp + ".bk"));
        Graph::Id v = g.add(g.matmul(a, bind(hp + ".wv")), bind(hp + ".bv"));
        Graph::Id mixed = -1;
        if (groups == 1) {
            Graph::Id scores = g.scalar_mul(g.matmul(q, g.transpose(k)), att_scale);
            mixed = g.matmul(g.softmax_rows(scores), v);
        } else {
            mixed = g.attention(q, k, v, groups, att_scale);
        }
        Graph::Id proj = g.matmul(mixed, bind(hp + ".wo"));
        attn = attn < 0 ? proj : g.add(attn, proj);
    }
    attn = g.add(attn, bind(prefix + ".attn.bo"));
    x = g.add(x, attn);

    Graph::Id m = affine_layer_norm(bind, x, prefix + ".ln2");
    Graph::Id h1 = g.relu(linear_with_lora(bind, m, prefix + ".mlp.w1", prefix + ".mlp.b1",
                                           prefix + ".mlp.fc1", cfg));
    Graph::Id h2 = linear_with_lora(bind, h1, prefix + ".mlp.w2", prefix + ".mlp.b2",
                                    prefix + ".mlp.fc2", cfg);
    return g.add(x, h2);
}

}  // namespace detail

struct ImageForward {
    std::vector<Graph::Id> taps;  // patch features after block 1..L
    Graph::Id z;                  // pooled, projected, unit-norm embedding [1 x D]
};

/// Run the image encoder over a patch matrix node. Returns every block
/// tap so any cue layer is selectable downstream.
inline ImageForward image_forward(GraphBinder& bind, Graph::Id patches, const ModelConfig& cfg) {
    Graph& g = bind.graph();
    const Tensor& pv = g.value(patches);
    if (pv.rank() != 2 || pv.shape()[1] != static_cast<std::size_t>(cfg.patch_pixels())) {
        throw ShapeError("image_forward: expected [N x " + std::to_string(cfg.patch_pixels()) +
                         "] patches, got " + shape_str(pv.shape()));
    }
    ImageForward out;
    Graph::Id x = g.matmul(patches, bind("img.patch_proj"));
    for (int b = 0; b < cfg.image_blocks; ++b) {
        x = detail::encoder_block(bind, x, "img.b" + std::to_string(b), cfg);
        out.taps.push_back(x);
    }
    Graph::Id pooled = g.reshape(g.mean_axis(x, 0), Shape{1, static_cast<std::size_t>(cfg.dim)});
    out.z = g.l2_normalize(g.matmul(pooled, bind("img.proj")));
    return out;
}

/// Run the text encoder over an assembled [S x D] sequence of continuous
/// vectors. Pools the final sequence position (CLIP-style), projects and
/// normalizes.
inline Graph::Id text_forward(GraphBinder& bind, Graph::Id sequence, const ModelConfig& cfg) {
    Graph& g = bind.graph();
    const Tensor& sv = g.value(sequence);
    if (sv.rank() != 2 || sv.shape()[1] != static_cast<std::size_t>(cfg.dim)) {
        throw ShapeError("text_forward: expected [S x " + std::to_string(cfg.dim) +
                         "] sequence, got " + shape_str(sv.shape()));
    }
    const int s = static_cast<int>(sv.shape()[0]);
    if (s > cfg.max_context) {
        throw ConfigError("text sequence length " + std::to_string(s) +
                          " exceeds context capacity " + std::to_string(cfg.max_context));
    }
    Graph::Id x = sequence;
    for (int b = 0; b < cfg.text_blocks; ++b) {
        x = detail::encoder_block(bind, x, "txt.b" + std::to_string(b), cfg);
    }
    Graph::Id pooled = g.slice_rows(x, s - 1, s);
    return g.l2_normalize(g.matmul(pooled, bind("txt.proj")));
}

}  // namespace hydra
