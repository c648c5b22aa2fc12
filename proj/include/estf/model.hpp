#pragma once

// The event spatial-temporal transformer: a per-frame conv stem, a temporal
// token per frame, spatial tokens from the time-summed feature plane, SF/TF
// encoder blocks, a fusion block over the joint token set, post-fusion SF/TF,
// and a two-layer MLP head. Every stage has an explicit backward.
//
// Feature maps are stored channel-first: the stem output for T frames is
// [T×c×h×w].

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "estf/events.hpp"
#include "estf/ops.hpp"
#include "estf/tensor.hpp"

namespace estf {

/// How `patch` partitions the embedding plane into spatial tokens.
enum class PatchMode {
    grid,  // patch × patch tokens
    size,  // tokens of patch × patch cells
};

struct ModelConfig {
    std::size_t frames = 8;
    std::size_t input_height = 64;
    std::size_t input_width = 64;
    std::vector<std::size_t> stem_channels = {8, 16};
    std::vector<std::size_t> stem_strides = {2, 2};
    std::size_t embed_channels = 16;
    std::size_t dim = 32;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 2;
    std::size_t depth = 1;
    std::size_t patch = 4;
    PatchMode patch_mode = PatchMode::grid;
    std::size_t num_classes = 10;
    Activation activation = Activation::relu;
    FrameNormalization input_normalization = FrameNormalization::log1p;
    double ln_eps = kLayerNormEps;
    bool use_tf = true;
    bool use_sf = true;
    bool use_fusion = true;
    bool fusion_double_residual = true;
    bool share_stage_weights = false;

    /// Throws ConfigError naming the offending field.
    void validate() const;

    std::size_t stem_out_height() const;
    std::size_t stem_out_width() const;
    std::size_t stem_out_channels() const { return stem_channels.back(); }
    std::size_t embed_height() const;
    std::size_t embed_width() const;
    std::size_t patch_rows() const;  // tokens along the vertical axis
    std::size_t patch_cols() const;
    std::size_t num_patches() const { return patch_rows() * patch_cols(); }
    std::size_t head_dim() const { return dim / heads; }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// The standard configuration for gradient checking: T=4, 8×8 input, d=16,
/// two heads, depth 1, four classes, 2×2 spatial tokens.
ModelConfig toy_model_config();

struct TransformerBlockParams {
    Tensor ln1_gamma, ln1_beta;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_gamma, ln2_beta;
    Tensor w1, b1, w2, b2;

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + "ln1_gamma", ln1_gamma);
        f(prefix + "ln1_beta", ln1_beta);
        f(prefix + "wq", wq);
        f(prefix + "bq", bq);
        f(prefix + "wk", wk);
        f(prefix + "bk", bk);
        f(prefix + "wv", wv);
        f(prefix + "bv", bv);
        f(prefix + "wo", wo);
        f(prefix + "bo", bo);
        f(prefix + "ln2_gamma", ln2_gamma);
        f(prefix + "ln2_beta", ln2_beta);
        f(prefix + "w1", w1);
        f(prefix + "b1", b1);
        f(prefix + "w2", w2);
        f(prefix + "b2", b2);
    }
};

struct StemLayerParams {
    Tensor weight;  // [c_out×c_in×3×3], no bias: the norm's beta plays that role
    Tensor norm_gamma, norm_beta;
};

struct Params {
    std::vector<StemLayerParams> stem;
    Tensor temporal_conv_w, temporal_conv_b, temporal_proj_w, temporal_proj_b;
    Tensor spatial_conv_w, spatial_conv_b, spatial_proj_w, spatial_proj_b;
    Tensor spatial_pos;   // [N×d]
    Tensor temporal_pos;  // [T×d]
    std::vector<TransformerBlockParams> sf_pre, tf_pre, fusion, sf_post, tf_post;
    Tensor head_w1, head_b1, head_w2, head_b2;

    /// Every array with a stable dotted name, in a fixed order.
    template <class F>
    void visit(F&& f) {
        for (std::size_t i = 0; i < stem.size(); ++i) {
            const std::string p = "stem." + std::to_string(i) + ".";
            f(p + "weight", stem[i].weight);
            f(p + "norm_gamma", stem[i].norm_gamma);
            f(p + "norm_beta", stem[i].norm_beta);
        }
        f("temporal.conv_w", temporal_conv_w);
        f("temporal.conv_b", temporal_conv_b);
        f("temporal.proj_w", temporal_proj_w);
        f("temporal.proj_b", temporal_proj_b);
        f("spatial.conv_w", spatial_conv_w);
        f("spatial.conv_b", spatial_conv_b);
        f("spatial.proj_w", spatial_proj_w);
        f("spatial.proj_b", spatial_proj_b);
        f("spatial.pos", spatial_pos);
        f("temporal.pos", temporal_pos);
        auto blocks = [&](const char* stage, std::vector<TransformerBlockParams>& v) {
            for (std::size_t i = 0; i < v.size(); ++i) v[i].visit(std::string(stage) + "." + std::to_string(i) + ".", f);
        };
        blocks("sf_pre", sf_pre);
        blocks("tf_pre", tf_pre);
        blocks("fusion", fusion);
        blocks("sf_post", sf_post);
        blocks("tf_post", tf_post);
        f("head.w1", head_w1);
        f("head.b1", head_b1);
        f("head.w2", head_w2);
        f("head.b2", head_b2);
    }
    template <class F>
    void visit(F&& f) const {
        const_cast<Params*>(this)->visit([&](const std::string& name, Tensor& t) { f(name, std::as_const(t)); });
    }

    std::size_t parameter_count() const;
    /// Concatenation of all arrays in visit order.
    std::vector<double> flatten() const;
    void unflatten(std::span<const double> values);
    bool all_finite() const;

    friend bool operator==(const Params& a, const Params& b);
};

/// All-zero Params with the shapes `cfg` implies; doubles as a gradient buffer.
Params zero_params(const ModelConfig& cfg);
/// Truncated normal (std 0.02, cut at 2 std) weights, zero biases and
/// position tables, norm gamma 1 and beta 0. Deterministic per seed.
Params init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Adds every array of `g` into `into`; shapes must agree.
void accumulate(Params& into, const Params& g);

// ---------------------------------------------------------------------------
// Input preparation

/// Stack, normalise, and center-fit a stream into the [T×2×H×W] model input.
Tensor prepare_input(const EventStream& stream, const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Stages. Each forward returns its output plus what its backward needs.

struct StemLayerCache {
    Tensor input, conv, normalized;  // normalized = after norm and affine, before relu
    LayerNormCache norm;
};
struct StemCache {
    std::vector<std::vector<StemLayerCache>> frames;  // [frame][layer]
};
struct StemResult {
    Tensor features;  // [T×c×h×w]
    StemCache cache;
};
StemResult stem_forward(const Tensor& frames, const Params& p, const ModelConfig& cfg);
/// Returns the gradient of the input frames; parameter gradients go to `grads`.
Tensor stem_backward(const StemCache& cache, const Params& p, const ModelConfig& cfg, const Tensor& dfeatures,
                     Params& grads);

struct EmbedCache {
    Tensor features;   // stem output
    Tensor conv_out;   // temporal: [T×c'×h/2×w/2]; spatial: plane after summation
    Tensor tokens_in;  // input rows of the projection
};
struct EmbedResult {
    Tensor tokens;
    EmbedCache cache;
};
/// [T×c×h×w] -> [T×d]: per-frame stride-2 conv, flatten, project.
EmbedResult embed_temporal(const Tensor& features, const Params& p, const ModelConfig& cfg);
Tensor embed_temporal_backward(const EmbedCache& cache, const Params& p, const ModelConfig& cfg,
                               const Tensor& dtokens, Params& grads);
/// [T×c×h×w] -> [N×d]: per-frame stride-2 conv, sum over frames, patchify, project.
EmbedResult embed_spatial(const Tensor& features, const Params& p, const ModelConfig& cfg);
Tensor embed_spatial_backward(const EmbedCache& cache, const Params& p, const ModelConfig& cfg,
                              const Tensor& dtokens, Params& grads);

/// tokens + table; the table's gradient is the upstream gradient itself.
Tensor add_position(const Tensor& tokens, const Tensor& table);

struct BlockOptions {
    std::size_t heads = 1;
    Activation activation = Activation::relu;
    double ln_eps = kLayerNormEps;
    /// Adds the block input once more to the output (fusion wiring).
    bool extra_residual = false;
};

struct BlockCache {
    Tensor input;
    LayerNormCache ln1;
    Tensor ln1_out;
    std::vector<Tensor> q, k, v;  // per head [n×dh]
    std::vector<Tensor> attention;  // per head [n×n], rows sum to 1
    Tensor heads_out;  // concatenated head outputs [n×d]
    LayerNormCache ln2;
    Tensor y;
    Tensor hidden_pre, hidden_act;
};
struct BlockResult {
    Tensor out;
    BlockCache cache;
};

/// Y = LN(X + MSA(LN(X))); out = Y + MLP(Y) (+ X with extra_residual).
BlockResult transformer_block(const Tensor& x, const TransformerBlockParams& p, const BlockOptions& opt);
Tensor transformer_block_backward(const BlockCache& cache, const TransformerBlockParams& p, const BlockOptions& opt,
                                  const Tensor& dout, TransformerBlockParams& grads);

struct FusionResult {
    Tensor temporal;  // first T rows of the fused output
    Tensor spatial;   // last N rows
    BlockCache cache;
};
/// Z = [temporal; spatial]; one block with the extra residual; split back.
FusionResult fusion_block(const Tensor& temporal, const Tensor& spatial, const TransformerBlockParams& p,
                          const BlockOptions& opt);
struct FusionGrads {
    Tensor dtemporal, dspatial;
};
FusionGrads fusion_block_backward(const BlockCache& cache, const TransformerBlockParams& p, const BlockOptions& opt,
                                  const Tensor& dtemporal, const Tensor& dspatial, TransformerBlockParams& grads);

// ---------------------------------------------------------------------------
// Whole network

struct ForwardTrace {
    StemResult stem;
    EmbedCache temporal_embed, spatial_embed;
    std::vector<BlockCache> sf_pre, tf_pre, sf_post, tf_post;
    std::vector<BlockCache> fusion;
    Tensor head_in, hidden_pre, hidden_act;
    Tensor logits;  // [num_classes]
};

ForwardTrace estf_forward_trace(const Tensor& frames, const Params& p, const ModelConfig& cfg);
/// logits [num_classes]. Errors name the failing stage.
Tensor estf_forward(const Tensor& frames, const Params& p, const ModelConfig& cfg);
/// Rows are per-sample logits; samples are independent.
Tensor estf_forward_batch(const std::vector<Tensor>& frames, const Params& p, const ModelConfig& cfg);
/// Accumulates parameter gradients of dlogits into `grads`.
void estf_backward(const ForwardTrace& trace, const Params& p, const ModelConfig& cfg, const Tensor& dlogits,
                   Params& grads);

BlockOptions block_options(const ModelConfig& cfg, bool fusion = false);

// ---------------------------------------------------------------------------
// End-to-end gradient check

struct ParamGroupCheck {
    std::string name;  // dotted parameter name
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    bool passed = false;
};

/// Checks estf_backward against central differences of L = sum(w * logits)
/// for random frames in [0, 1) and random probe weights w, one report per
/// parameter array. `max_coords` caps the coordinates sampled per array.
std::vector<ParamGroupCheck> model_grad_check(const ModelConfig& cfg, std::uint64_t seed, double h, double tol,
                                              std::size_t max_coords = 0);

}  // namespace estf
