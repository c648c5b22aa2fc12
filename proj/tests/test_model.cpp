#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "estf/gradcheck.hpp"
#include "estf/model.hpp"

using namespace estf;

namespace {

Tensor random_frames(const ModelConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return random_tensor(rng, {cfg.frames, 2, cfg.input_height, cfg.input_width}, 0.0, 1.0);
}

Tensor permute_frames(const Tensor& x, const std::vector<std::size_t>& order) {
    Tensor out(x.shape());
    const std::size_t n = x.size() / x.dim(0);
    for (std::size_t f = 0; f < order.size(); ++f) {
        std::copy_n(x.data().begin() + static_cast<long>(order[f] * n), n, out.data().begin() + static_cast<long>(f * n));
    }
    return out;
}

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& order) { return permute_frames(x, order); }

Tensor layer_norm_rows(const Tensor& x) {
    const std::size_t d = x.dim(1);
    return layer_norm(x, Tensor({d}, 1.0), Tensor({d}), kLayerNormEps).y;
}

void zero_block_weights(TransformerBlockParams& b) {
    b.visit("", [](const std::string& name, Tensor& t) {
        if (name.find("gamma") == std::string::npos) std::fill(t.data().begin(), t.data().end(), 0.0);
    });
}

}  // namespace

TEST_CASE("default and toy configurations are consistent") {
    ModelConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.stem_out_height() == 16);
    CHECK(cfg.embed_height() == 8);
    CHECK(cfg.num_patches() == 16);
    const auto toy = toy_model_config();
    CHECK_NOTHROW(toy.validate());
    CHECK(toy.frames == 4);
    CHECK(toy.dim == 16);
    CHECK(toy.heads == 2);
    CHECK(toy.num_patches() == 4);
}

TEST_CASE("configuration errors") {
    ModelConfig cfg;
    cfg.heads = 5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = ModelConfig{};
    cfg.patch = 3;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = ModelConfig{};
    cfg.patch_mode = PatchMode::size;
    cfg.patch = 2;
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.num_patches() == 16);
    cfg.stem_strides = {2};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("init is deterministic and norms start at identity") {
    const auto cfg = toy_model_config();
    const Params a = init_params(cfg, 7), b = init_params(cfg, 7), c = init_params(cfg, 8);
    CHECK(a == b);
    CHECK_FALSE(a == c);
    a.visit([](const std::string& name, const Tensor& t) {
        if (name.find("gamma") != std::string::npos) {
            for (double v : t.data()) CHECK(v == 1.0);
        } else if (t.rank() == 1 || name.ends_with(".pos")) {
            for (double v : t.data()) CHECK(v == 0.0);
        } else {
            for (double v : t.data()) CHECK(std::abs(v) <= 0.04);
        }
    });
}

TEST_CASE("flatten and unflatten round-trip") {
    const auto cfg = toy_model_config();
    const Params a = init_params(cfg, 3);
    Params b = zero_params(cfg);
    b.unflatten(a.flatten());
    CHECK(a == b);
    CHECK(a.parameter_count() == a.flatten().size());
    CHECK_THROWS_AS(b.unflatten(std::vector<double>(3)), DimensionError);
}

TEST_CASE("shared stage weights drop the post-fusion arrays") {
    auto cfg = toy_model_config();
    cfg.share_stage_weights = true;
    const Params p = zero_params(cfg);
    CHECK(p.sf_post.empty());
    CHECK(p.tf_post.empty());
    CHECK(p.parameter_count() < zero_params(toy_model_config()).parameter_count());
}

TEST_CASE("initial logits give a loss near ln C") {
    for (std::size_t classes : {4u, 10u}) {
        ModelConfig cfg = toy_model_config();
        cfg.num_classes = classes;
        const Params p = init_params(cfg, 1);
        const Tensor logits = estf_forward(random_frames(cfg, 2), p, cfg);
        double mx = *std::max_element(logits.data().begin(), logits.data().end()), s = 0;
        for (double v : logits.data()) s += std::exp(v - mx);
        const double loss = -(logits[0] - mx - std::log(s));
        CHECK(std::abs(loss - std::log(double(classes))) < 0.1);
    }
}

TEST_CASE("stem: shapes, constant output on zero input, frame equivariance") {
    ModelConfig cfg;
    cfg.frames = 3;
    const Params p = init_params(cfg, 5);
    const Tensor zero({3, 2, 64, 64});
    const auto r = stem_forward(zero, p, cfg);
    CHECK(r.features.shape() == Shape{3, 16, 16, 16});
    // A zero input has zero variance everywhere, so every activation is relu(beta) = 0.
    for (double v : r.features.data()) CHECK(v == 0.0);

    const Tensor x = random_frames(cfg, 9);
    const std::vector<std::size_t> order = {2, 0, 1};
    const auto a = stem_forward(permute_frames(x, order), p, cfg).features;
    const auto b = permute_frames(stem_forward(x, p, cfg).features, order);
    CHECK(max_abs_diff(a, b) == 0.0);
    CHECK_THROWS_AS(stem_forward(Tensor({3, 2, 32, 32}), p, cfg), DimensionError);
}

TEST_CASE("embeddings: token shapes and spatial frame-order invariance") {
    const auto cfg = toy_model_config();
    const Params p = init_params(cfg, 4);
    const Tensor feats = stem_forward(random_frames(cfg, 1), p, cfg).features;
    const auto t = embed_temporal(feats, p, cfg);
    const auto s = embed_spatial(feats, p, cfg);
    CHECK(t.tokens.shape() == Shape{cfg.frames, cfg.dim});
    CHECK(s.tokens.shape() == Shape{cfg.num_patches(), cfg.dim});
    const auto s2 = embed_spatial(permute_frames(feats, {3, 1, 0, 2}), p, cfg);
    CHECK(max_abs_diff(s.tokens, s2.tokens) < 1e-12);
    // The temporal tokens follow the frames.
    const auto t2 = embed_temporal(permute_frames(feats, {3, 1, 0, 2}), p, cfg);
    CHECK(max_abs_diff(t2.tokens, permute_rows(t.tokens, {3, 1, 0, 2})) < 1e-12);
}

TEST_CASE("add_position") {
    const Tensor x = Tensor::matrix({{1, 2}, {3, 4}});
    CHECK(add_position(x, Tensor({2, 2})) == x);
    CHECK(add_position(x, Tensor({2, 2}, 1.0)) == Tensor::matrix({{2, 3}, {4, 5}}));
    CHECK_THROWS_AS(add_position(x, Tensor({3, 2})), DimensionError);
}

TEST_CASE("attention rows are distributions") {
    const auto cfg = toy_model_config();
    const Params p = init_params(cfg, 11);
    std::mt19937_64 rng(3);
    for (std::size_t n : {1u, 2u, 7u}) {
        const auto r = transformer_block(random_tensor(rng, {n, cfg.dim}, -3, 3), p.sf_pre[0], block_options(cfg));
        for (const auto& a : r.cache.attention) {
            for (std::size_t i = 0; i < n; ++i) {
                double s = 0;
                for (std::size_t j = 0; j < n; ++j) s += a.at(i, j);
                CHECK(std::abs(s - 1.0) < 1e-12);
            }
            if (n == 1) CHECK(a[0] == 1.0);
        }
    }
}

TEST_CASE("self-attention blocks are permutation equivariant") {
    const auto cfg = toy_model_config();
    const Params p = init_params(cfg, 12);
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor x = random_tensor(rng, {6, cfg.dim}, -2, 2);
        std::vector<std::size_t> order(6);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        const auto a = transformer_block(permute_rows(x, order), p.sf_pre[0], block_options(cfg)).out;
        const auto b = permute_rows(transformer_block(x, p.sf_pre[0], block_options(cfg)).out, order);
        CHECK(max_abs_diff(a, b) < 1e-12);
    }
}

TEST_CASE("zero-weight blocks reduce to layer norms") {
    const auto cfg = toy_model_config();
    Params p = init_params(cfg, 2);
    zero_block_weights(p.sf_pre[0]);
    zero_block_weights(p.fusion[0]);
    std::mt19937_64 rng(8);
    const Tensor x = random_tensor(rng, {5, cfg.dim}, -2, 2);
    // With every projection zero: MSA = 0, Y = LN(X), MLP(Y) = 0.
    const auto sf = transformer_block(x, p.sf_pre[0], block_options(cfg));
    CHECK(max_abs_diff(sf.out, layer_norm_rows(x)) < 1e-10);

    const Tensor t = random_tensor(rng, {cfg.frames, cfg.dim}, -2, 2);
    const Tensor s = random_tensor(rng, {cfg.num_patches(), cfg.dim}, -2, 2);
    const auto fused = fusion_block(t, s, p.fusion[0], block_options(cfg, true));
    const Tensor z = concat({t, s}, 0);
    const Tensor expect = add(z, layer_norm_rows(z));
    CHECK(fused.temporal.dim(0) + fused.spatial.dim(0) == cfg.frames + cfg.num_patches());
    CHECK(max_abs_diff(concat({fused.temporal, fused.spatial}, 0), expect) < 1e-10);
}

TEST_CASE("fusion mixes the branches") {
    const auto cfg = toy_model_config();
    const Params p = init_params(cfg, 21);
    std::mt19937_64 rng(1);
    const Tensor t = random_tensor(rng, {cfg.frames, cfg.dim});
    Tensor s = random_tensor(rng, {cfg.num_patches(), cfg.dim});
    const auto a = fusion_block(t, s, p.fusion[0], block_options(cfg, true));
    s[0] += 0.5;
    const auto b = fusion_block(t, s, p.fusion[0], block_options(cfg, true));
    CHECK(max_abs_diff(a.temporal, b.temporal) > 1e-9);
}

TEST_CASE("component toggles bypass stages") {
    auto cfg = toy_model_config();
    cfg.use_tf = cfg.use_sf = cfg.use_fusion = false;
    const Params p = init_params(cfg, 3);
    const auto tr = estf_forward_trace(random_frames(cfg, 4), p, cfg);
    CHECK(tr.sf_pre.empty());
    CHECK(tr.fusion.empty());
    CHECK(tr.logits.shape() == Shape{cfg.num_classes});
}

TEST_CASE("batched forward matches single-sample forward") {
    const auto cfg = toy_model_config();
    const Params p = init_params(cfg, 13);
    std::vector<Tensor> xs;
    for (int i = 0; i < 5; ++i) xs.push_back(random_frames(cfg, 100 + i));
    const Tensor batch = estf_forward_batch(xs, p, cfg);
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const Tensor one = estf_forward(xs[i], p, cfg);
        for (std::size_t k = 0; k < cfg.num_classes; ++k) CHECK(batch.at(i, k) == one[k]);
    }
}

TEST_CASE("forward errors name the stage") {
    const auto cfg = toy_model_config();
    const Params p = init_params(cfg, 1);
    try {
        estf_forward(Tensor({cfg.frames, 2, 4, 4}), p, cfg);
        FAIL("expected an error");
    } catch (const DimensionError& e) {
        CHECK(std::string(e.what()).find("stem") != std::string::npos);
    }
}

TEST_CASE("end-to-end backward matches central differences") {
    auto check = [](const ModelConfig& cfg, std::uint64_t seed) {
        for (const auto& g : model_grad_check(cfg, seed, 1e-6, 1e-4, 24)) {
            INFO(g.name << " err " << g.max_rel_error);
            CHECK(g.passed);
        }
    };
    SUBCASE("default wiring") { check(toy_model_config(), 1); }
    SUBCASE("single residual in fusion") {
        auto cfg = toy_model_config();
        cfg.fusion_double_residual = false;
        check(cfg, 2);
    }
    SUBCASE("shared stage weights and gelu") {
        auto cfg = toy_model_config();
        cfg.share_stage_weights = true;
        cfg.activation = Activation::gelu;
        check(cfg, 3);
    }
    SUBCASE("depth 2 with patch-size tokens") {
        auto cfg = toy_model_config();
        cfg.depth = 2;
        cfg.patch_mode = PatchMode::size;
        cfg.patch = 1;
        check(cfg, 4);
    }
}
