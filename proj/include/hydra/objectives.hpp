#pragma once

#include <deque>
#include <utility>
#include <vector>

#include "hydra/autodiff.hpp"
#include "hydra/config.hpp"
#include "hydra/errors.hpp"
#include "hydra/tensor.hpp"

namespace hydra {

// ---- positive-pair mask ----

/// Positive-pair mask over anchors x contrast set. Contrast columns
/// j < B are the anchors themselves (same-sample identity holds there);
/// columns past B come from the memory bank and are never "self".
///
/// Per category c: "cluster" marks every same-category pair positive,
/// "individual" marks only the self pair. The default (real: cluster,
/// fake: individual) is the published mask definition.
inline Tensor build_mask_extended(const std::vector<int>& anchor_labels,
                                  const std::vector<int>& contrast_labels,
                                  MaskStrategy real_strategy, MaskStrategy fake_strategy) {
    const std::size_t b = anchor_labels.size();
    const std::size_t c = contrast_labels.size();
    if (b == 0 || c < b) throw ConfigError("mask: contrast set must contain the batch");
    Tensor m(Shape{b, c});
    for (std::size_t i = 0; i < b; ++i) {
        const int cat = anchor_labels[i];
        const MaskStrategy strat = cat == 0 ? real_strategy : fake_strategy;
        for (std::size_t j = 0; j < c; ++j) {
            if (contrast_labels[j] != cat) continue;
            if (strat == MaskStrategy::Cluster || j == i) m.at2(i, j) = 1.0;
        }
    }
    return m;
}

/// In-batch B x B mask (the printed definition when strategies are left
/// at their defaults).
inline Tensor build_mask(const std::vector<int>& labels, MaskStrategy real_strategy,
                         MaskStrategy fake_strategy) {
    return build_mask_extended(labels, labels, real_strategy, fake_strategy);
}

// ---- contrastive terms ----

/// Masked supervised contrastive loss, implemented exactly as printed:
///
///   (1/B) sum_i -(1/m_i) log( sum_j M_ij e^{a_i.c_j/tau} / sum_k e^{a_i.c_k/tau} )
///
/// Both inner sums run over the full contrast set, self pair included,
/// so every log argument is a ratio in (0, 1] and the loss is finite and
/// nonnegative for any valid mask.
inline Graph::Id supcon(Graph& g, Graph::Id anchors, Graph::Id contrast, const Tensor& mask,
                        double tau) {
    if (tau <= 0.0) throw ConfigError("supcon: temperature must be positive");
    const Tensor& a = g.value(anchors);
    const Tensor& c = g.value(contrast);
    if (mask.rank() != 2 || mask.shape()[0] != a.rows() || mask.shape()[1] != c.rows()) {
        throw ShapeError("supcon: mask " + shape_str(mask.shape()) + " does not match features");
    }
    const std::size_t b = a.rows();
    Tensor inv_m(Shape{b});
    for (std::size_t i = 0; i < b; ++i) {
        double m = 0.0;
        for (std::size_t j = 0; j < mask.shape()[1]; ++j) m += mask.at2(i, j);
        if (m <= 0.0) throw ConfigError("supcon: mask row " + std::to_string(i) +
                                        " has no positive pair");
        inv_m[i] = 1.0 / m;
    }
    Graph::Id sims = g.scalar_mul(g.matmul(anchors, g.transpose(contrast)), 1.0 / tau);
    Graph::Id ex = g.exp_(sims);
    Graph::Id num = g.sum_axis(g.mul(ex, g.constant(mask)), 1);
    Graph::Id den = g.sum_axis(ex, 1);
    Graph::Id terms = g.mul(g.sub(g.log_(den), g.log_(num)), g.constant(inv_m));
    return g.scalar_mul(g.sum_all(terms), 1.0 / static_cast<double>(b));
}

struct ScLoss {
    Graph::Id total;
    Graph::Id image = -1;
    Graph::Id text = -1;
};

/// Both-branch supervised contrastive loss: (image + text) / 2, with the
/// same mask semantics on each branch. A disabled branch contributes
/// zero; the 1/2 weighting is kept as-is (the branch ablations toggle
/// terms, not normalization). The image branch may contrast against the
/// memory bank; the text branch is in-batch only.
inline ScLoss sc_loss(Graph& g, Graph::Id z_anchors, Graph::Id z_contrast, const Tensor& z_mask,
                      Graph::Id t_features, const Tensor& t_mask, const LossConfig& cfg) {
    ScLoss out;
    if (cfg.sc_image) out.image = supcon(g, z_anchors, z_contrast, z_mask, cfg.tau);
    if (cfg.sc_text) out.text = supcon(g, t_features, t_features, t_mask, cfg.tau);
    if (out.image >= 0 && out.text >= 0) {
        out.total = g.scalar_mul(g.add(out.image, out.text), 0.5);
    } else if (out.image >= 0) {
        out.total = g.scalar_mul(out.image, 0.5);
    } else if (out.text >= 0) {
        out.total = g.scalar_mul(out.text, 0.5);
    } else {
        out.total = g.constant(Tensor::scalar(0.0));
    }
    return out;
}

/// Cross-modal alignment constraint: image-anchored only, no mirrored
/// text-anchored term. Same masked log-ratio shape as supcon with text
/// features as the contrast set.
inline Graph::Id align_loss(Graph& g, Graph::Id z_features, Graph::Id t_features,
                            const Tensor& mask, double tau) {
    if (tau <= 0.0) throw ConfigError("align_loss: temperature must be positive");
    return supcon(g, z_features, t_features, mask, tau);
}

// ---- classification ----

struct LogitPair {
    Graph::Id real;
    Graph::Id fake;
};

/// Two-logit head: plain dot products against the category centers,
/// no temperature or learned scale.
inline LogitPair logits(Graph& g, Graph::Id z, Graph::Id t_real, Graph::Id t_fake) {
    return {g.dot(z, t_real), g.dot(z, t_fake)};
}

/// Asymmetric two-logit cross entropy, summed over the batch (not
/// averaged; the lambda weights absorb the scale difference).
inline Graph::Id cls_loss(Graph& g, const std::vector<LogitPair>& pairs,
                          const std::vector<int>& labels) {
    if (pairs.size() != labels.size() || pairs.empty()) {
        throw ShapeError("cls_loss: need one logit pair per label");
    }
    std::vector<Graph::Id> terms;
    terms.reserve(pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        Graph::Id lse = g.log_(g.add(g.exp_(pairs[i].real), g.exp_(pairs[i].fake)));
        Graph::Id picked = labels[i] == 1 ? pairs[i].fake : pairs[i].real;
        terms.push_back(g.sub(picked, lse));
    }
    return g.scalar_mul(g.sum_all(g.concat_rows(terms)), -1.0);
}

/// Row-wise logits for a whole batch: o[i] = z_i . t_i. `centers` is
/// either one [1 x D] row shared by every sample or a per-sample
/// [B x D] matrix.
inline Graph::Id logits_batched(Graph& g, Graph::Id z_batch, Graph::Id centers) {
    const Tensor& c = g.value(centers);
    Graph::Id rhs = centers;
    if (c.rows() == 1 && g.value(z_batch).rows() != 1) {
        rhs = g.reshape(centers, Shape{c.cols()});  // broadcast one center over the batch
    }
    return g.sum_axis(g.mul(z_batch, rhs), 1);
}

/// Batched form of the two-logit cross entropy; algebraically identical
/// to cls_loss over per-sample pairs.
inline Graph::Id cls_loss_batched(Graph& g, Graph::Id o_real, Graph::Id o_fake,
                                  const std::vector<int>& labels) {
    const std::size_t b = labels.size();
    if (g.value(o_real).numel() != b || g.value(o_fake).numel() != b || b == 0) {
        throw ShapeError("cls_loss: need one logit pair per label");
    }
    Tensor pick_fake(Shape{b}), pick_real(Shape{b});
    for (std::size_t i = 0; i < b; ++i) {
        pick_fake[i] = labels[i] == 1 ? 1.0 : 0.0;
        pick_real[i] = 1.0 - pick_fake[i];
    }
    Graph::Id lse = g.log_(g.add(g.exp_(o_real), g.exp_(o_fake)));
    Graph::Id picked = g.add(g.mul(o_real, g.constant(pick_real)),
                             g.mul(o_fake, g.constant(pick_fake)));
    return g.scalar_mul(g.sum_all(g.sub(picked, lse)), -1.0);
}

/// cls + lambda1 * sc + lambda2 * align.
inline Graph::Id total_loss(Graph& g, Graph::Id cls, Graph::Id sc, Graph::Id align,
                            const LossConfig& cfg) {
    return g.add(cls, g.add(g.scalar_mul(sc, cfg.lambda1), g.scalar_mul(align, cfg.lambda2)));
}

// ---- memory bank ----

/// FIFO store of detached image-branch features. Entries enlarge the
/// contrast set of the image supcon term; they carry no gradient.
class MemoryBank {
public:
    explicit MemoryBank(int capacity) : capacity_(capacity) {
        if (capacity <= 0) throw ConfigError("memory bank capacity must be positive");
    }

    std::size_t size() const { return entries_.size(); }
    int capacity() const { return capacity_; }

    void push(const std::vector<double>& feature, int label) {
        entries_.emplace_back(feature, label);
        while (entries_.size() > static_cast<std::size_t>(capacity_)) entries_.pop_front();
    }

    /// Append one row per batch sample, evicting oldest entries first.
    void push_batch(const Tensor& features, const std::vector<int>& labels) {
        if (features.rows() != labels.size()) {
            throw ShapeError("memory bank: feature/label count mismatch");
        }
        const std::size_t d = features.cols();
        for (std::size_t i = 0; i < labels.size(); ++i) {
            std::vector<double> row(features.data() + i * d, features.data() + (i + 1) * d);
            push(row, labels[i]);
        }
    }

    /// Snapshot as a [Q x D] tensor (Q may be 0).
    Tensor features(std::size_t dim) const {
        Tensor out(Shape{entries_.size(), dim});
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (entries_[i].first.size() != dim) {
                throw ShapeError("memory bank: stored feature width mismatch");
            }
            std::copy(entries_[i].first.begin(), entries_[i].first.end(), out.data() + i * dim);
        }
        return out;
    }

    std::vector<int> labels() const {
        std::vector<int> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) out.push_back(e.second);
        return out;
    }

private:
    int capacity_;
    std::deque<std::pair<std::vector<double>, int>> entries_;
};

}  // namespace hydra
