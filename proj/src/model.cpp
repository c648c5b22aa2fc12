#include "estf/model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

namespace estf {

namespace {

constexpr std::size_t kKernel = 3;
constexpr std::size_t kPad = 1;
constexpr std::size_t kEmbedStride = 2;
constexpr double kInitStd = 0.02;

std::size_t conv_out(std::size_t n, std::size_t stride) { return (n + 2 * kPad - kKernel) / stride + 1; }

}  // namespace

// ---------------------------------------------------------------------------
// ModelConfig

std::size_t ModelConfig::stem_out_height() const {
    std::size_t h = input_height;
    for (auto s : stem_strides) h = conv_out(h, s);
    return h;
}

std::size_t ModelConfig::stem_out_width() const {
    std::size_t w = input_width;
    for (auto s : stem_strides) w = conv_out(w, s);
    return w;
}

std::size_t ModelConfig::embed_height() const { return conv_out(stem_out_height(), kEmbedStride); }
std::size_t ModelConfig::embed_width() const { return conv_out(stem_out_width(), kEmbedStride); }

std::size_t ModelConfig::patch_rows() const {
    return patch_mode == PatchMode::grid ? patch : embed_height() / patch;
}

std::size_t ModelConfig::patch_cols() const {
    return patch_mode == PatchMode::grid ? patch : embed_width() / patch;
}

void ModelConfig::validate() const {
    auto positive = [](std::size_t v, const char* name) {
        if (v == 0) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(frames, "frames");
    positive(input_height, "input_height");
    positive(input_width, "input_width");
    positive(embed_channels, "embed_channels");
    positive(dim, "dim");
    positive(heads, "heads");
    positive(mlp_ratio, "mlp_ratio");
    positive(depth, "depth");
    positive(patch, "patch");
    positive(num_classes, "num_classes");
    if (stem_channels.empty()) throw ConfigError("stem_channels must list at least one layer");
    if (stem_channels.size() != stem_strides.size()) {
        throw ConfigError("stem_channels and stem_strides must have the same length");
    }
    for (auto c : stem_channels) positive(c, "stem_channels entry");
    for (auto s : stem_strides) positive(s, "stem_strides entry");
    if (dim % heads != 0) {
        throw ConfigError("dim " + std::to_string(dim) + " is not divisible by heads " + std::to_string(heads));
    }
    if (!(ln_eps > 0.0)) throw ConfigError("ln_eps must be positive");
    const std::size_t eh = embed_height(), ew = embed_width();
    if (eh % patch != 0 || ew % patch != 0) {
        throw ConfigError("patch " + std::to_string(patch) + " does not divide the " + std::to_string(eh) + "x" +
                          std::to_string(ew) + " embedding plane");
    }
}

ModelConfig toy_model_config() {
    ModelConfig cfg;
    cfg.frames = 4;
    cfg.input_height = 8;
    cfg.input_width = 8;
    cfg.stem_channels = {4, 4};
    cfg.stem_strides = {1, 2};
    cfg.embed_channels = 4;
    cfg.dim = 16;
    cfg.heads = 2;
    cfg.mlp_ratio = 2;
    cfg.depth = 1;
    cfg.patch = 2;
    cfg.num_classes = 4;
    return cfg;
}

// ---------------------------------------------------------------------------
// Params

std::size_t Params::parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
}

std::vector<double> Params::flatten() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    visit([&](const std::string&, const Tensor& t) { out.insert(out.end(), t.data().begin(), t.data().end()); });
    return out;
}

void Params::unflatten(std::span<const double> values) {
    if (values.size() != parameter_count()) {
        throw DimensionError("unflatten: " + std::to_string(values.size()) + " values for " +
                             std::to_string(parameter_count()) + " parameters");
    }
    std::size_t offset = 0;
    visit([&](const std::string&, Tensor& t) {
        std::copy_n(values.begin() + static_cast<long>(offset), t.size(), t.data().begin());
        offset += t.size();
    });
}

bool Params::all_finite() const {
    bool ok = true;
    visit([&](const std::string&, const Tensor& t) { ok = ok && t.all_finite(); });
    return ok;
}

bool operator==(const Params& a, const Params& b) {
    std::vector<std::pair<std::string, const Tensor*>> la, lb;
    a.visit([&](const std::string& n, const Tensor& t) { la.emplace_back(n, &t); });
    b.visit([&](const std::string& n, const Tensor& t) { lb.emplace_back(n, &t); });
    if (la.size() != lb.size()) return false;
    for (std::size_t i = 0; i < la.size(); ++i) {
        if (la[i].first != lb[i].first || !(*la[i].second == *lb[i].second)) return false;
    }
    return true;
}

namespace {

TransformerBlockParams zero_block(std::size_t d, std::size_t hidden) {
    TransformerBlockParams b;
    b.ln1_gamma = Tensor({d});
    b.ln1_beta = Tensor({d});
    b.wq = Tensor({d, d});
    b.bq = Tensor({d});
    b.wk = Tensor({d, d});
    b.bk = Tensor({d});
    b.wv = Tensor({d, d});
    b.bv = Tensor({d});
    b.wo = Tensor({d, d});
    b.bo = Tensor({d});
    b.ln2_gamma = Tensor({d});
    b.ln2_beta = Tensor({d});
    b.w1 = Tensor({d, hidden});
    b.b1 = Tensor({hidden});
    b.w2 = Tensor({hidden, d});
    b.b2 = Tensor({d});
    return b;
}

std::size_t patch_cell_height(const ModelConfig& cfg) { return cfg.embed_height() / cfg.patch_rows(); }
std::size_t patch_cell_width(const ModelConfig& cfg) { return cfg.embed_width() / cfg.patch_cols(); }

}  // namespace

Params zero_params(const ModelConfig& cfg) {
    cfg.validate();
    Params p;
    std::size_t in = 2;
    for (auto c : cfg.stem_channels) {
        p.stem.push_back({Tensor({c, in, kKernel, kKernel}), Tensor({c}), Tensor({c})});
        in = c;
    }
    const std::size_t c = cfg.stem_out_channels(), ce = cfg.embed_channels, d = cfg.dim;
    const std::size_t plane = cfg.embed_height() * cfg.embed_width();
    const std::size_t cell = patch_cell_height(cfg) * patch_cell_width(cfg);
    p.temporal_conv_w = Tensor({ce, c, kKernel, kKernel});
    p.temporal_conv_b = Tensor({ce});
    p.temporal_proj_w = Tensor({ce * plane, d});
    p.temporal_proj_b = Tensor({d});
    p.spatial_conv_w = Tensor({ce, c, kKernel, kKernel});
    p.spatial_conv_b = Tensor({ce});
    p.spatial_proj_w = Tensor({ce * cell, d});
    p.spatial_proj_b = Tensor({d});
    p.spatial_pos = Tensor({cfg.num_patches(), d});
    p.temporal_pos = Tensor({cfg.frames, d});
    const std::size_t hidden = cfg.mlp_ratio * d;
    for (std::size_t i = 0; i < cfg.depth; ++i) {
        p.sf_pre.push_back(zero_block(d, hidden));
        p.tf_pre.push_back(zero_block(d, hidden));
        if (!cfg.share_stage_weights) {
            p.sf_post.push_back(zero_block(d, hidden));
            p.tf_post.push_back(zero_block(d, hidden));
        }
    }
    p.fusion.push_back(zero_block(d, hidden));
    p.head_w1 = Tensor({(cfg.frames + cfg.num_patches()) * d, d});
    p.head_b1 = Tensor({d});
    p.head_w2 = Tensor({d, cfg.num_classes});
    p.head_b2 = Tensor({cfg.num_classes});
    return p;
}

Params init_params(const ModelConfig& cfg, std::uint64_t seed) {
    Params p = zero_params(cfg);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto truncated = [&] {
        double z;
        do {
            z = normal(rng);
        } while (std::abs(z) > 2.0);
        return z * kInitStd;
    };
    // Matrices and conv kernels are random; vectors (biases, norm params) and
    // position tables keep their zero/one defaults.
    p.visit([&](const std::string& name, Tensor& t) {
        if (name.ends_with("gamma")) std::fill(t.data().begin(), t.data().end(), 1.0);
        if (t.rank() < 2 || name.ends_with(".pos")) return;
        for (auto& v : t.data()) v = truncated();
    });
    return p;
}

void accumulate(Params& into, const Params& g) {
    std::vector<const Tensor*> src;
    g.visit([&](const std::string&, const Tensor& t) { src.push_back(&t); });
    std::size_t i = 0;
    into.visit([&](const std::string& name, Tensor& t) {
        if (i >= src.size() || src[i]->shape() != t.shape()) {
            throw DimensionError("accumulate: parameter layout differs at " + name);
        }
        for (std::size_t k = 0; k < t.size(); ++k) t[k] += (*src[i])[k];
        ++i;
    });
}

// ---------------------------------------------------------------------------
// Input

Tensor prepare_input(const EventStream& stream, const ModelConfig& cfg) {
    const auto stacked = stack_to_frames(stream, cfg.frames);
    const auto normalized = normalize_frames(stacked, cfg.input_normalization);
    return fit_frames(normalized, cfg.input_height, cfg.input_width).frames;
}

// ---------------------------------------------------------------------------
// Helpers

namespace {

void add_into(Tensor& into, const Tensor& g) {
    if (into.shape() != g.shape()) {
        throw DimensionError("gradient shape " + shape_str(g.shape()) + " vs parameter " + shape_str(into.shape()));
    }
    for (std::size_t i = 0; i < g.size(); ++i) into[i] += g[i];
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_row_bias(matmul(x, w), b); }

Tensor linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor& dw, Tensor& db) {
    add_into(db, add_row_bias_backward(dy));
    auto g = matmul_backward(x, w, dy);
    add_into(dw, g.db);
    return std::move(g.da);
}

// Frame f of a [T×...] tensor as a standalone tensor with the trailing shape.
Tensor slice_frame(const Tensor& x, std::size_t f) {
    Shape shape(x.shape().begin() + 1, x.shape().end());
    const std::size_t n = shape_numel(shape);
    Tensor out(shape);
    std::copy_n(x.data().begin() + static_cast<long>(f * n), n, out.data().begin());
    return out;
}

void store_frame(Tensor& x, std::size_t f, const Tensor& frame) {
    std::copy(frame.data().begin(), frame.data().end(), x.data().begin() + static_cast<long>(f * frame.size()));
}

template <class Fn>
auto in_stage(const char* stage, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const DimensionError& e) {
        throw DimensionError(std::string(stage) + ": " + e.what());
    } catch (const ConfigError& e) {
        throw ConfigError(std::string(stage) + ": " + e.what());
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Stem

StemResult stem_forward(const Tensor& frames, const Params& p, const ModelConfig& cfg) {
    if (frames.shape() != Shape{cfg.frames, 2, cfg.input_height, cfg.input_width}) {
        throw DimensionError("stem: frames " + shape_str(frames.shape()) + " vs configured " +
                             shape_str({cfg.frames, 2, cfg.input_height, cfg.input_width}));
    }
    const std::size_t c = cfg.stem_out_channels(), h = cfg.stem_out_height(), w = cfg.stem_out_width();
    StemResult r{Tensor({cfg.frames, c, h, w}), {}};
    r.cache.frames.resize(cfg.frames);
    for (std::size_t f = 0; f < cfg.frames; ++f) {
        Tensor x = slice_frame(frames, f);
        for (std::size_t l = 0; l < p.stem.size(); ++l) {
            StemLayerCache lc;
            lc.input = x;
            lc.conv = conv2d(x, p.stem[l].weight, cfg.stem_strides[l], kPad);
            const std::size_t ch = lc.conv.dim(0), plane = lc.conv.size() / ch;
            // Instance normalisation: each channel plane standardised on its own.
            auto ln = layer_norm(lc.conv.reshaped({ch, plane}), Tensor({plane}, 1.0), Tensor({plane}), cfg.ln_eps);
            lc.norm = std::move(ln.cache);
            lc.normalized = channel_affine(lc.norm.xhat.reshaped(lc.conv.shape()), p.stem[l].norm_gamma,
                                           p.stem[l].norm_beta);
            x = relu(lc.normalized);
            r.cache.frames[f].push_back(std::move(lc));
        }
        store_frame(r.features, f, x);
    }
    return r;
}

Tensor stem_backward(const StemCache& cache, const Params& p, const ModelConfig& cfg, const Tensor& dfeatures,
                     Params& grads) {
    Tensor dframes({cfg.frames, 2, cfg.input_height, cfg.input_width});
    for (std::size_t f = 0; f < cfg.frames; ++f) {
        Tensor dx = slice_frame(dfeatures, f);
        for (std::size_t l = p.stem.size(); l-- > 0;) {
            const StemLayerCache& lc = cache.frames[f][l];
            const Tensor dnorm = relu_backward(lc.normalized, dx);
            const auto aff = channel_affine_backward(lc.norm.xhat.reshaped(lc.conv.shape()), p.stem[l].norm_gamma, dnorm);
            add_into(grads.stem[l].norm_gamma, aff.dgamma);
            add_into(grads.stem[l].norm_beta, aff.dbeta);
            const std::size_t ch = lc.conv.dim(0), plane = lc.conv.size() / ch;
            const auto lng = layer_norm_backward(lc.norm, Tensor({plane}, 1.0), aff.dx.reshaped({ch, plane}));
            const auto cg = conv2d_backward(lc.input, p.stem[l].weight, lng.dx.reshaped(lc.conv.shape()),
                                            cfg.stem_strides[l], kPad);
            add_into(grads.stem[l].weight, cg.dweight);
            dx = cg.dx;
        }
        store_frame(dframes, f, dx);
    }
    return dframes;
}

// ---------------------------------------------------------------------------
// Embeddings

EmbedResult embed_temporal(const Tensor& features, const Params& p, const ModelConfig& cfg) {
    const std::size_t T = features.dim(0);
    const std::size_t ce = cfg.embed_channels, eh = cfg.embed_height(), ew = cfg.embed_width();
    EmbedResult r;
    r.cache.features = features;
    r.cache.conv_out = Tensor({T, ce, eh, ew});
    const Tensor ones({ce}, 1.0);
    for (std::size_t f = 0; f < T; ++f) {
        const Tensor conv = conv2d(slice_frame(features, f), p.temporal_conv_w, kEmbedStride, kPad);
        store_frame(r.cache.conv_out, f, channel_affine(conv, ones, p.temporal_conv_b));
    }
    r.cache.tokens_in = r.cache.conv_out.reshaped({T, ce * eh * ew});
    r.tokens = linear(r.cache.tokens_in, p.temporal_proj_w, p.temporal_proj_b);
    return r;
}

Tensor embed_temporal_backward(const EmbedCache& cache, const Params& p, const ModelConfig& cfg,
                               const Tensor& dtokens, Params& grads) {
    const std::size_t T = cache.features.dim(0);
    const Tensor din = linear_backward(cache.tokens_in, p.temporal_proj_w, dtokens, grads.temporal_proj_w,
                                       grads.temporal_proj_b);
    const Tensor dconv_all = din.reshaped(cache.conv_out.shape());
    Tensor dfeatures(cache.features.shape());
    for (std::size_t f = 0; f < T; ++f) {
        const Tensor dconv = slice_frame(dconv_all, f);
        const std::size_t ce = dconv.dim(0), plane = dconv.size() / ce;
        for (std::size_t ch = 0; ch < ce; ++ch) {
            for (std::size_t i = 0; i < plane; ++i) grads.temporal_conv_b[ch] += dconv[ch * plane + i];
        }
        const auto g = conv2d_backward(slice_frame(cache.features, f), p.temporal_conv_w, dconv, kEmbedStride, kPad);
        add_into(grads.temporal_conv_w, g.dweight);
        store_frame(dfeatures, f, g.dx);
    }
    (void)cfg;
    return dfeatures;
}

namespace {

// [C×H×W] plane -> [N × C·ph·pw] rows, token-major over the patch grid.
Tensor patchify(const Tensor& plane, const ModelConfig& cfg) {
    const std::size_t C = plane.dim(0), H = plane.dim(1), W = plane.dim(2);
    const std::size_t rows = cfg.patch_rows(), cols = cfg.patch_cols();
    const std::size_t ph = H / rows, pw = W / cols;
    Tensor out({rows * cols, C * ph * pw});
    for (std::size_t gr = 0; gr < rows; ++gr)
        for (std::size_t gc = 0; gc < cols; ++gc)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t y = 0; y < ph; ++y)
                    for (std::size_t x = 0; x < pw; ++x)
                        out[(gr * cols + gc) * C * ph * pw + (c * ph + y) * pw + x] =
                            plane[(c * H + gr * ph + y) * W + gc * pw + x];
    return out;
}

Tensor unpatchify(const Tensor& tokens, const Shape& plane_shape, const ModelConfig& cfg) {
    const std::size_t C = plane_shape[0], H = plane_shape[1], W = plane_shape[2];
    const std::size_t rows = cfg.patch_rows(), cols = cfg.patch_cols();
    const std::size_t ph = H / rows, pw = W / cols;
    Tensor plane(plane_shape);
    for (std::size_t gr = 0; gr < rows; ++gr)
        for (std::size_t gc = 0; gc < cols; ++gc)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t y = 0; y < ph; ++y)
                    for (std::size_t x = 0; x < pw; ++x)
                        plane[(c * H + gr * ph + y) * W + gc * pw + x] =
                            tokens[(gr * cols + gc) * C * ph * pw + (c * ph + y) * pw + x];
    return plane;
}

}  // namespace

EmbedResult embed_spatial(const Tensor& features, const Params& p, const ModelConfig& cfg) {
    const std::size_t T = features.dim(0);
    const std::size_t ce = cfg.embed_channels, eh = cfg.embed_height(), ew = cfg.embed_width();
    EmbedResult r;
    r.cache.features = features;
    Tensor per_frame({T, ce, eh, ew});
    const Tensor ones({ce}, 1.0);
    for (std::size_t f = 0; f < T; ++f) {
        const Tensor conv = conv2d(slice_frame(features, f), p.spatial_conv_w, kEmbedStride, kPad);
        store_frame(per_frame, f, channel_affine(conv, ones, p.spatial_conv_b));
    }
    r.cache.conv_out = sum_axis(per_frame, 0);
    r.cache.tokens_in = patchify(r.cache.conv_out, cfg);
    r.tokens = linear(r.cache.tokens_in, p.spatial_proj_w, p.spatial_proj_b);
    return r;
}

Tensor embed_spatial_backward(const EmbedCache& cache, const Params& p, const ModelConfig& cfg,
                              const Tensor& dtokens, Params& grads) {
    const std::size_t T = cache.features.dim(0);
    const Tensor din =
        linear_backward(cache.tokens_in, p.spatial_proj_w, dtokens, grads.spatial_proj_w, grads.spatial_proj_b);
    // The frame sum hands the same plane gradient to every frame.
    const Tensor dplane = unpatchify(din, cache.conv_out.shape(), cfg);
    const std::size_t ce = dplane.dim(0), plane = dplane.size() / ce;
    for (std::size_t ch = 0; ch < ce; ++ch) {
        double s = 0.0;
        for (std::size_t i = 0; i < plane; ++i) s += dplane[ch * plane + i];
        grads.spatial_conv_b[ch] += static_cast<double>(T) * s;
    }
    Tensor dfeatures(cache.features.shape());
    for (std::size_t f = 0; f < T; ++f) {
        const auto g = conv2d_backward(slice_frame(cache.features, f), p.spatial_conv_w, dplane, kEmbedStride, kPad);
        add_into(grads.spatial_conv_w, g.dweight);
        store_frame(dfeatures, f, g.dx);
    }
    return dfeatures;
}

Tensor add_position(const Tensor& tokens, const Tensor& table) {
    if (tokens.shape() != table.shape()) {
        throw DimensionError("add_position: tokens " + shape_str(tokens.shape()) + " vs table " +
                             shape_str(table.shape()));
    }
    return add(tokens, table);
}

// ---------------------------------------------------------------------------
// Transformer block

BlockResult transformer_block(const Tensor& x, const TransformerBlockParams& p, const BlockOptions& opt) {
    require_rank(x, 2, "transformer_block input");
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (opt.heads == 0 || d % opt.heads != 0) {
        throw ConfigError("token width " + std::to_string(d) + " is not divisible by " + std::to_string(opt.heads) +
                          " heads");
    }
    const std::size_t dh = d / opt.heads;
    const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::vector<std::size_t> head_sizes(opt.heads, dh);

    BlockResult r;
    BlockCache& c = r.cache;
    c.input = x;
    auto ln1 = layer_norm(x, p.ln1_gamma, p.ln1_beta, opt.ln_eps);
    c.ln1 = std::move(ln1.cache);
    c.ln1_out = std::move(ln1.y);
    c.q = split(linear(c.ln1_out, p.wq, p.bq), 1, head_sizes);
    c.k = split(linear(c.ln1_out, p.wk, p.bk), 1, head_sizes);
    c.v = split(linear(c.ln1_out, p.wv, p.bv), 1, head_sizes);
    std::vector<Tensor> outs;
    for (std::size_t h = 0; h < opt.heads; ++h) {
        const Tensor scores = scale(matmul(c.q[h], transpose(c.k[h])), scale_factor);
        c.attention.push_back(softmax_rows(scores));
        outs.push_back(matmul(c.attention.back(), c.v[h]));
    }
    c.heads_out = concat(outs, 1);
    const Tensor msa = linear(c.heads_out, p.wo, p.bo);
    auto ln2 = layer_norm(add(x, msa), p.ln2_gamma, p.ln2_beta, opt.ln_eps);
    c.ln2 = std::move(ln2.cache);
    c.y = std::move(ln2.y);
    c.hidden_pre = linear(c.y, p.w1, p.b1);
    c.hidden_act = activate(opt.activation, c.hidden_pre);
    const Tensor mlp = linear(c.hidden_act, p.w2, p.b2);
    r.out = add(c.y, mlp);
    if (opt.extra_residual) r.out = add(r.out, x);
    (void)n;
    return r;
}

Tensor transformer_block_backward(const BlockCache& c, const TransformerBlockParams& p, const BlockOptions& opt,
                                  const Tensor& dout, TransformerBlockParams& g) {
    const std::size_t d = c.input.dim(1);
    const std::size_t dh = d / opt.heads;
    const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::vector<std::size_t> head_sizes(opt.heads, dh);

    Tensor dx = opt.extra_residual ? dout : Tensor(dout.shape());
    // out = y + mlp(y)
    const Tensor dact = linear_backward(c.hidden_act, p.w2, dout, g.w2, g.b2);
    const Tensor dpre = activate_backward(opt.activation, c.hidden_pre, dact);
    const Tensor dy = add(dout, linear_backward(c.y, p.w1, dpre, g.w1, g.b1));
    // y = LN2(x + msa)
    const auto ln2 = layer_norm_backward(c.ln2, p.ln2_gamma, dy);
    add_into(g.ln2_gamma, ln2.dgamma);
    add_into(g.ln2_beta, ln2.dbeta);
    dx = add(dx, ln2.dx);
    // msa = heads_out · wo + bo
    const Tensor dheads = linear_backward(c.heads_out, p.wo, ln2.dx, g.wo, g.bo);
    const auto dhead_parts = split(dheads, 1, head_sizes);
    std::vector<Tensor> dq, dk, dv;
    for (std::size_t h = 0; h < opt.heads; ++h) {
        const auto pv = matmul_backward(c.attention[h], c.v[h], dhead_parts[h]);
        const Tensor dscores = scale(softmax_rows_backward(c.attention[h], pv.da), scale_factor);
        const Tensor kt = transpose(c.k[h]);
        const auto qk = matmul_backward(c.q[h], kt, dscores);
        dq.push_back(qk.da);
        dk.push_back(transpose(qk.db));
        dv.push_back(pv.db);
    }
    Tensor dln1 = linear_backward(c.ln1_out, p.wq, concat(dq, 1), g.wq, g.bq);
    dln1 = add(dln1, linear_backward(c.ln1_out, p.wk, concat(dk, 1), g.wk, g.bk));
    dln1 = add(dln1, linear_backward(c.ln1_out, p.wv, concat(dv, 1), g.wv, g.bv));
    const auto ln1 = layer_norm_backward(c.ln1, p.ln1_gamma, dln1);
    add_into(g.ln1_gamma, ln1.dgamma);
    add_into(g.ln1_beta, ln1.dbeta);
    return add(dx, ln1.dx);
}

FusionResult fusion_block(const Tensor& temporal, const Tensor& spatial, const TransformerBlockParams& p,
                          const BlockOptions& opt) {
    if (temporal.rank() != 2 || spatial.rank() != 2 || temporal.dim(1) != spatial.dim(1)) {
        throw DimensionError("fusion: temporal " + shape_str(temporal.shape()) + " and spatial " +
                             shape_str(spatial.shape()) + " need the same token width");
    }
    auto block = transformer_block(concat({temporal, spatial}, 0), p, opt);
    auto parts = split(block.out, 0, {temporal.dim(0), spatial.dim(0)});
    return {std::move(parts[0]), std::move(parts[1]), std::move(block.cache)};
}

FusionGrads fusion_block_backward(const BlockCache& cache, const TransformerBlockParams& p, const BlockOptions& opt,
                                  const Tensor& dtemporal, const Tensor& dspatial, TransformerBlockParams& grads) {
    const Tensor dz = transformer_block_backward(cache, p, opt, concat({dtemporal, dspatial}, 0), grads);
    auto parts = split(dz, 0, {dtemporal.dim(0), dspatial.dim(0)});
    return {std::move(parts[0]), std::move(parts[1])};
}

// ---------------------------------------------------------------------------
// Whole network

BlockOptions block_options(const ModelConfig& cfg, bool fusion) {
    return {cfg.heads, cfg.activation, cfg.ln_eps, fusion && cfg.fusion_double_residual};
}

namespace {

const TransformerBlockParams& post_block(const std::vector<TransformerBlockParams>& post,
                                         const std::vector<TransformerBlockParams>& pre, std::size_t i,
                                         bool shared) {
    return shared ? pre[i] : post[i];
}

TransformerBlockParams& post_block(std::vector<TransformerBlockParams>& post, std::vector<TransformerBlockParams>& pre,
                                   std::size_t i, bool shared) {
    return shared ? pre[i] : post[i];
}

Tensor run_stack(const Tensor& x, std::size_t depth, const BlockOptions& opt, std::vector<BlockCache>& caches,
                 const std::function<const TransformerBlockParams&(std::size_t)>& block_at) {
    Tensor h = x;
    for (std::size_t i = 0; i < depth; ++i) {
        auto r = transformer_block(h, block_at(i), opt);
        caches.push_back(std::move(r.cache));
        h = std::move(r.out);
    }
    return h;
}

Tensor run_stack_backward(const std::vector<BlockCache>& caches, const BlockOptions& opt, const Tensor& dout,
                          const std::function<const TransformerBlockParams&(std::size_t)>& block_at,
                          const std::function<TransformerBlockParams&(std::size_t)>& grads_at) {
    Tensor d = dout;
    for (std::size_t i = caches.size(); i-- > 0;) d = transformer_block_backward(caches[i], block_at(i), opt, d, grads_at(i));
    return d;
}

}  // namespace

ForwardTrace estf_forward_trace(const Tensor& frames, const Params& p, const ModelConfig& cfg) {
    in_stage("config", [&] {
        cfg.validate();
        return 0;
    });
    ForwardTrace tr;
    tr.stem = in_stage("stem", [&] { return stem_forward(frames, p, cfg); });
    auto te = in_stage("temporal embedding", [&] { return embed_temporal(tr.stem.features, p, cfg); });
    auto se = in_stage("spatial embedding", [&] { return embed_spatial(tr.stem.features, p, cfg); });
    tr.temporal_embed = std::move(te.cache);
    tr.spatial_embed = std::move(se.cache);

    const BlockOptions opt = block_options(cfg);
    const bool shared = cfg.share_stage_weights;
    Tensor xt = in_stage("position", [&] { return add_position(te.tokens, p.temporal_pos); });
    Tensor xs = in_stage("position", [&] { return add_position(se.tokens, p.spatial_pos); });
    if (cfg.use_tf) {
        xt = in_stage("tf", [&] { return run_stack(xt, cfg.depth, opt, tr.tf_pre, [&](std::size_t i) -> const auto& { return p.tf_pre[i]; }); });
    }
    if (cfg.use_sf) {
        xs = in_stage("sf", [&] { return run_stack(xs, cfg.depth, opt, tr.sf_pre, [&](std::size_t i) -> const auto& { return p.sf_pre[i]; }); });
    }
    if (cfg.use_fusion) {
        auto fr = in_stage("fusion", [&] { return fusion_block(xt, xs, p.fusion[0], block_options(cfg, true)); });
        xt = std::move(fr.temporal);
        xs = std::move(fr.spatial);
        tr.fusion.push_back(std::move(fr.cache));
    }
    if (cfg.use_tf) {
        xt = in_stage("tf post", [&] {
            return run_stack(xt, cfg.depth, opt, tr.tf_post,
                             [&](std::size_t i) -> const auto& { return post_block(p.tf_post, p.tf_pre, i, shared); });
        });
    }
    if (cfg.use_sf) {
        xs = in_stage("sf post", [&] {
            return run_stack(xs, cfg.depth, opt, tr.sf_post,
                             [&](std::size_t i) -> const auto& { return post_block(p.sf_post, p.sf_pre, i, shared); });
        });
    }
    in_stage("head", [&] {
        const Tensor tokens = concat({xt, xs}, 0);
        tr.head_in = tokens.reshaped({1, tokens.size()});
        tr.hidden_pre = linear(tr.head_in, p.head_w1, p.head_b1);
        tr.hidden_act = activate(cfg.activation, tr.hidden_pre);
        tr.logits = linear(tr.hidden_act, p.head_w2, p.head_b2).reshaped({cfg.num_classes});
        return 0;
    });
    return tr;
}

Tensor estf_forward(const Tensor& frames, const Params& p, const ModelConfig& cfg) {
    return estf_forward_trace(frames, p, cfg).logits;
}

Tensor estf_forward_batch(const std::vector<Tensor>& frames, const Params& p, const ModelConfig& cfg) {
    Tensor out({frames.size(), cfg.num_classes});
    std::string failure;
#pragma omp parallel for schedule(dynamic)
    for (std::size_t b = 0; b < frames.size(); ++b) {
        try {
            const Tensor logits = estf_forward(frames[b], p, cfg);
            std::copy(logits.data().begin(), logits.data().end(), out.data().begin() + static_cast<long>(b * cfg.num_classes));
        } catch (const std::exception& e) {
#pragma omp critical
            failure = "sample " + std::to_string(b) + ": " + e.what();
        }
    }
    if (!failure.empty()) throw DimensionError(failure);
    return out;
}

void estf_backward(const ForwardTrace& tr, const Params& p, const ModelConfig& cfg, const Tensor& dlogits,
                   Params& g) {
    const BlockOptions opt = block_options(cfg);
    const bool shared = cfg.share_stage_weights;
    const std::size_t T = cfg.frames, N = cfg.num_patches(), d = cfg.dim;

    const Tensor dact = linear_backward(tr.hidden_act, p.head_w2, dlogits.reshaped({1, cfg.num_classes}), g.head_w2, g.head_b2);
    const Tensor dpre = activate_backward(cfg.activation, tr.hidden_pre, dact);
    const Tensor dhead_in = linear_backward(tr.head_in, p.head_w1, dpre, g.head_w1, g.head_b1);
    auto parts = split(dhead_in.reshaped({T + N, d}), 0, {T, N});
    Tensor dxt = std::move(parts[0]), dxs = std::move(parts[1]);

    if (cfg.use_sf) {
        dxs = run_stack_backward(tr.sf_post, opt, dxs,
                                 [&](std::size_t i) -> const auto& { return post_block(p.sf_post, p.sf_pre, i, shared); },
                                 [&](std::size_t i) -> auto& { return post_block(g.sf_post, g.sf_pre, i, shared); });
    }
    if (cfg.use_tf) {
        dxt = run_stack_backward(tr.tf_post, opt, dxt,
                                 [&](std::size_t i) -> const auto& { return post_block(p.tf_post, p.tf_pre, i, shared); },
                                 [&](std::size_t i) -> auto& { return post_block(g.tf_post, g.tf_pre, i, shared); });
    }
    if (cfg.use_fusion) {
        auto fg = fusion_block_backward(tr.fusion[0], p.fusion[0], block_options(cfg, true), dxt, dxs, g.fusion[0]);
        dxt = std::move(fg.dtemporal);
        dxs = std::move(fg.dspatial);
    }
    if (cfg.use_sf) {
        dxs = run_stack_backward(tr.sf_pre, opt, dxs, [&](std::size_t i) -> const auto& { return p.sf_pre[i]; },
                                 [&](std::size_t i) -> auto& { return g.sf_pre[i]; });
    }
    if (cfg.use_tf) {
        dxt = run_stack_backward(tr.tf_pre, opt, dxt, [&](std::size_t i) -> const auto& { return p.tf_pre[i]; },
                                 [&](std::size_t i) -> auto& { return g.tf_pre[i]; });
    }
    add_into(g.temporal_pos, dxt);
    add_into(g.spatial_pos, dxs);
    Tensor dfeatures = embed_temporal_backward(tr.temporal_embed, p, cfg, dxt, g);
    dfeatures = add(dfeatures, embed_spatial_backward(tr.spatial_embed, p, cfg, dxs, g));
    stem_backward(tr.stem.cache, p, cfg, dfeatures, g);
}

}  // namespace estf
