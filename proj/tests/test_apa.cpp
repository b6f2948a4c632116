#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <vector>

#include "hydra/apa.hpp"
#include "hydra/rng.hpp"
#include "oracles.hpp"

using hydra::Graph;
using hydra::GraphBinder;
using hydra::ModelConfig;
using hydra::ParamStore;
using hydra::PromptMode;
using hydra::Shape;
using hydra::Tensor;

namespace {

Tensor random_image(hydra::Rng& rng, int size) {
    Tensor img(Shape{static_cast<std::size_t>(size), static_cast<std::size_t>(size), 3});
    for (std::size_t i = 0; i < img.numel(); ++i) img[i] = rng.uniform();
    return img;
}

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.image_size = 16;
    cfg.prompt_count = 2;
    return cfg;
}

}  // namespace

TEST_CASE("cue extraction is the patch mean") {
    SECTION("mean of identical rows is the row itself") {
        Graph g;
        Tensor tap(Shape{5, 3});
        for (std::size_t i = 0; i < 5; ++i) {
            tap.at2(i, 0) = 1.5;
            tap.at2(i, 1) = -2.0;
            tap.at2(i, 2) = 0.25;
        }
        const Tensor& cue = g.value(hydra::extract_cues(g, g.constant(tap)));
        CHECK(cue.vec() == std::vector<double>{1.5, -2.0, 0.25});
    }
    SECTION("two basis rows average to the midpoint") {
        Graph g;
        Tensor tap(Shape{2, 2}, {1, 0, 0, 1});
        CHECK(g.value(hydra::extract_cues(g, g.constant(tap))).vec() ==
              std::vector<double>{0.5, 0.5});
    }
    SECTION("random 16x64 tap matches the double-loop mean") {
        hydra::Rng rng(13);
        Tensor tap(Shape{16, 64});
        for (std::size_t i = 0; i < tap.numel(); ++i) tap[i] = rng.gaussian();
        Graph g;
        const Tensor& cue = g.value(hydra::extract_cues(g, g.constant(tap)));
        for (std::size_t j = 0; j < 64; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < 16; ++i) s += tap.at2(i, j);
            CHECK(std::fabs(cue[j] - s / 16.0) < 1e-12);
        }
    }
    SECTION("empty tap is an error") {
        Graph g;
        CHECK_THROWS_AS(hydra::extract_cues(g, g.constant(Tensor(Shape{0, 4}))),
                        hydra::ShapeError);
    }
}

TEST_CASE("cue adapter implements the bottleneck MLP exactly") {
    ModelConfig cfg = small_config();

    SECTION("all-zero weights give a zero cue token") {
        ParamStore ps = hydra::init_params(cfg, 3);
        for (const char* name : {"apa.adapter.w1", "apa.adapter.b1", "apa.adapter.w2",
                                 "apa.adapter.b2"}) {
            Tensor& t = ps.mutable_tensor(name);
            std::fill(t.vec().begin(), t.vec().end(), 0.0);
        }
        Graph g;
        GraphBinder bind(g, ps);
        Graph::Id cue = g.constant(Tensor(Shape{static_cast<std::size_t>(cfg.dim)}, 0.7));
        const Tensor& zt = g.value(hydra::adapt_cues(bind, cue, cfg));
        for (double v : zt.vec()) CHECK(v == 0.0);
    }

    SECTION("killed ReLU leaves only the output bias") {
        ParamStore ps = hydra::init_params(cfg, 3);
        Tensor& w1 = ps.mutable_tensor("apa.adapter.w1");
        for (auto& v : w1.vec()) v = -1.0;  // nonnegative cue forced negative pre-activation
        Tensor& b1 = ps.mutable_tensor("apa.adapter.b1");
        std::fill(b1.vec().begin(), b1.vec().end(), 0.0);
        Graph g;
        GraphBinder bind(g, ps);
        Graph::Id cue = g.constant(Tensor(Shape{static_cast<std::size_t>(cfg.dim)}, 0.5));
        const Tensor& zt = g.value(hydra::adapt_cues(bind, cue, cfg));
        const Tensor& b2 = ps.get("apa.adapter.b2");
        for (std::size_t i = 0; i < zt.numel(); ++i) CHECK(zt[i] == b2[i]);
    }

    SECTION("random parameters match the scalar re-implementation") {
        ParamStore ps = hydra::init_params(cfg, 19);
        hydra::Rng rng(7);
        for (const char* name : {"apa.adapter.b1", "apa.adapter.b2"}) {
            Tensor& t = ps.mutable_tensor(name);
            for (auto& v : t.vec()) v = rng.gaussian(0.0, 0.3);
        }
        std::vector<double> cue_v(static_cast<std::size_t>(cfg.dim));
        for (auto& v : cue_v) v = rng.gaussian();

        const Tensor& w1 = ps.get("apa.adapter.w1");
        const Tensor& w2 = ps.get("apa.adapter.w2");
        std::vector<std::vector<double>> w1m(w1.shape()[0], std::vector<double>(w1.shape()[1]));
        std::vector<std::vector<double>> w2m(w2.shape()[0], std::vector<double>(w2.shape()[1]));
        for (std::size_t i = 0; i < w1.shape()[0]; ++i)
            for (std::size_t j = 0; j < w1.shape()[1]; ++j) w1m[i][j] = w1.at2(i, j);
        for (std::size_t i = 0; i < w2.shape()[0]; ++i)
            for (std::size_t j = 0; j < w2.shape()[1]; ++j) w2m[i][j] = w2.at2(i, j);
        const std::vector<double> expected = oracle::adapter_ref(
            cue_v, w1m, ps.get("apa.adapter.b1").vec(), w2m, ps.get("apa.adapter.b2").vec());

        Graph g;
        GraphBinder bind(g, ps);
        Graph::Id cue = g.constant(Tensor(Shape{cue_v.size()}, cue_v));
        const Tensor& zt = g.value(hydra::adapt_cues(bind, cue, cfg));
        REQUIRE(zt.numel() == expected.size());
        for (std::size_t i = 0; i < expected.size(); ++i) {
            CHECK(std::fabs(zt[i] - expected[i]) < 1e-12);
        }
    }
}

TEST_CASE("prompt sequences have the published layout") {
    ModelConfig cfg = small_config();  // M=2, S_c=3
    ParamStore ps = hydra::init_params(cfg, 5);
    Graph g;
    GraphBinder bind(g, ps);
    Graph::Id cue_row = g.constant(Tensor(Shape{1, static_cast<std::size_t>(cfg.dim)}, 0.1));

    SECTION("default: static real, adaptive fake") {
        auto seqs = hydra::build_prompts(bind, cue_row, cfg);
        CHECK(g.value(seqs.seq_real).shape() == Shape{5, 64});  // M + S_c
        CHECK(g.value(seqs.seq_fake).shape() == Shape{6, 64});  // M + 1 + S_c

        // order: [P_f, cue, C_f]
        const Tensor& sf = g.value(seqs.seq_fake);
        const Tensor& pf = ps.get("apa.p_fake");
        const Tensor& cf = ps.get("apa.c_fake");
        for (std::size_t j = 0; j < 64; ++j) {
            CHECK(sf.at2(0, j) == pf.at2(0, j));
            CHECK(sf.at2(1, j) == pf.at2(1, j));
            CHECK(sf.at2(2, j) == 0.1);
            CHECK(sf.at2(3, j) == cf.at2(0, j));
        }
    }

    SECTION("ablation modes change which side carries the cue token") {
        ModelConfig ada = cfg;
        ada.real_prompt = PromptMode::Adaptive;
        ada.fake_prompt = PromptMode::Static;
        auto seqs = hydra::build_prompts(bind, cue_row, ada);
        CHECK(g.value(seqs.seq_real).shape() == Shape{6, 64});
        CHECK(g.value(seqs.seq_fake).shape() == Shape{5, 64});
    }
}

TEST_CASE("category centers: static anchor, adaptive fake center") {
    ModelConfig cfg = small_config();
    ParamStore ps = hydra::init_params(cfg, 21);
    hydra::Rng rng(2);
    const Tensor img_a = random_image(rng, cfg.image_size);
    const Tensor img_b = random_image(rng, cfg.image_size);

    auto centers = [&](const Tensor& img) {
        Graph g;
        GraphBinder bind(g, ps);
        auto c = hydra::category_centers(bind, g.constant(hydra::patchify(img, cfg)), cfg);
        return std::make_pair(g.value(c.t_real), g.value(c.t_fake));
    };
    auto [tr_a, tf_a] = centers(img_a);
    auto [tr_b, tf_b] = centers(img_b);

    CHECK(tr_a == tr_b);        // T_r has no image dependence
    CHECK_FALSE(tf_a == tf_b);  // T_f follows the cues

    SECTION("unit norms") {
        double nr = 0.0, nf = 0.0;
        for (std::size_t i = 0; i < tr_a.numel(); ++i) {
            nr += tr_a[i] * tr_a[i];
            nf += tf_a[i] * tf_a[i];
        }
        CHECK(std::fabs(std::sqrt(nr) - 1.0) < 1e-6);
        CHECK(std::fabs(std::sqrt(nf) - 1.0) < 1e-6);
    }
}

TEST_CASE("permuting patch order leaves the fake sequence unchanged") {
    ModelConfig cfg = small_config();
    ParamStore ps = hydra::init_params(cfg, 8);
    hydra::Rng rng(40);
    const Tensor image = random_image(rng, cfg.image_size);
    Tensor patches = hydra::patchify(image, cfg);

    auto seq_fake_for = [&](const Tensor& p) {
        Graph g;
        GraphBinder bind(g, ps);
        auto img = hydra::image_forward(bind, g.constant(p), cfg);
        Graph::Id cue = hydra::extract_cues(g, img.taps[0]);
        Graph::Id cue_row = hydra::adapt_cues(bind, cue, cfg);
        return g.value(hydra::build_prompts(bind, cue_row, cfg).seq_fake);
    };
    const Tensor base = seq_fake_for(patches);

    const std::size_t n = patches.shape()[0], w = patches.shape()[1];
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(perm);
        Tensor shuffled(Shape{n, w});
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < w; ++j) shuffled.at2(i, j) = patches.at2(perm[i], j);
        }
        const Tensor permuted = seq_fake_for(shuffled);
        double max_diff = 0.0;
        for (std::size_t i = 0; i < base.numel(); ++i) {
            max_diff = std::max(max_diff, std::fabs(base[i] - permuted[i]));
        }
        CHECK(max_diff < 1e-9);  // exact up to float reassociation
    }
}

TEST_CASE("gradient separation between the two prompt banks") {
    ModelConfig cfg = small_config();
    ParamStore ps = hydra::init_params(cfg, 33);
    hydra::Rng rng(3);
    // nonzero LoRA B so every path is live
    for (const auto& name : ps.names(true)) {
        Tensor& t = ps.mutable_tensor(name);
        for (auto& v : t.vec()) v = rng.gaussian(0.0, 0.05);
    }
    const Tensor image = random_image(rng, cfg.image_size);

    Graph g;
    GraphBinder bind(g, ps);
    auto c = hydra::category_centers(bind, g.constant(hydra::patchify(image, cfg)), cfg);

    auto grad_norm = [](const Tensor& t) {
        double s = 0.0;
        for (double v : t.vec()) s += v * v;
        return s;
    };

    auto grads_r = g.backward(g.sum_all(c.t_real));
    CHECK(grad_norm(grads_r.at("apa.p_fake")) == 0.0);
    CHECK(grad_norm(grads_r.at("apa.p_real")) > 0.0);
    CHECK(grad_norm(grads_r.at("apa.adapter.w1")) == 0.0);  // static real side has no cue path

    auto grads_f = g.backward(g.sum_all(c.t_fake));
    CHECK(grad_norm(grads_f.at("apa.p_real")) == 0.0);
    CHECK(grad_norm(grads_f.at("apa.p_fake")) > 0.0);
    CHECK(grad_norm(grads_f.at("apa.adapter.w1")) > 0.0);
    CHECK(grad_norm(grads_f.at("apa.adapter.w2")) > 0.0);
}
