#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "maebench/ops.hpp"
#include "maebench/rng.hpp"
#include "maebench/tensor.hpp"

// Vision Transformer building blocks: patch <-> image reshaping, fixed
// sine-cosine positions, pre-norm attention blocks, and the parameter
// bundles the training loops and checkpoints operate on.
namespace maebench {

struct vit_config {
    std::size_t image_side = 32;
    std::size_t patch_side = 4;
    std::size_t embed_dim = 64;
    std::size_t depth = 4;
    std::size_t num_heads = 4;
    std::size_t mlp_ratio = 4;
    std::size_t in_channels = 1;
    bool use_cls = true;  // pooled feature: class token when true, token mean otherwise

    void validate() const {
        std::string problems;
        if (image_side == 0 || patch_side == 0 || embed_dim == 0 || num_heads == 0)
            problems += "  image_side, patch_side, embed_dim, num_heads must be positive\n";
        if (patch_side != 0 && image_side % patch_side != 0)
            problems += "  image_side " + std::to_string(image_side) + " not divisible by patch_side " +
                        std::to_string(patch_side) + "\n";
        if (num_heads != 0 && embed_dim % num_heads != 0)
            problems += "  embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
                        std::to_string(num_heads) + "\n";
        if (embed_dim % 4 != 0)
            problems += "  embed_dim must be a multiple of 4 for 2D sine-cosine positions\n";
        if (!problems.empty()) throw config_error("invalid model config:\n" + problems);
    }

    std::size_t grid() const { return image_side / patch_side; }
    std::size_t n_patches() const { return grid() * grid(); }
    std::size_t patch_dim() const { return in_channels * patch_side * patch_side; }
};

// Reference model shapes addressable from config files.
inline vit_config vit_preset(const std::string& name) {
    vit_config c;
    if (name == "paper-encoder") {
        c.image_side = 224;
        c.patch_side = 16;
        c.embed_dim = 1024;
        c.depth = 24;
        c.num_heads = 16;
    } else if (name == "paper-decoder") {
        c.image_side = 224;
        c.patch_side = 16;
        c.embed_dim = 512;
        c.depth = 8;
        c.num_heads = 16;
    } else if (name == "desk-tiny") {
        c.image_side = 32;
        c.patch_side = 4;
        c.embed_dim = 64;
        c.depth = 4;
        c.num_heads = 4;
    } else {
        throw config_error("unknown model preset '" + name +
                           "' (expected paper-encoder, paper-decoder, or desk-tiny)");
    }
    c.validate();
    return c;
}

// ------------------------------------------------------ patch reshaping

// [c, H, W] -> [n_patches, c*p*p]; row i is patch i in row-major patch
// order, each patch flattened channel-major. Value-only transform: images
// are model inputs, never gradient carriers.
template <class S>
tensor<S> patchify(const tensor<S>& image, std::size_t patch_side) {
    if (image.rank() != 3) throw dim_error("patchify: expected [c, H, W], got " + shape_str(image.shape()));
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (patch_side == 0 || h % patch_side != 0 || w % patch_side != 0)
        throw dim_error("patchify: " + std::to_string(h) + "x" + std::to_string(w) +
                        " not divisible by patch side " + std::to_string(patch_side));
    const std::size_t gh = h / patch_side, gw = w / patch_side;
    const std::size_t pd = c * patch_side * patch_side;
    std::vector<S> out(gh * gw * pd);
    const S* src = image.data().data();
    for (std::size_t pr = 0; pr < gh; ++pr)
        for (std::size_t pc = 0; pc < gw; ++pc) {
            S* row = out.data() + (pr * gw + pc) * pd;
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t r = 0; r < patch_side; ++r)
                    for (std::size_t cc = 0; cc < patch_side; ++cc)
                        row[(ch * patch_side + r) * patch_side + cc] =
                            src[(ch * h + pr * patch_side + r) * w + pc * patch_side + cc];
        }
    return tensor<S>::from({gh * gw, pd}, std::move(out));
}

template <class S>
tensor<S> unpatchify(const tensor<S>& patches, std::size_t patch_side, std::size_t h, std::size_t w) {
    if (patches.rank() != 2) throw dim_error("unpatchify: expected [n, patch_dim]");
    const std::size_t n = patches.dim(0), pd = patches.dim(1);
    if (patch_side == 0 || h % patch_side != 0 || w % patch_side != 0 || pd % (patch_side * patch_side) != 0)
        throw dim_error("unpatchify: inconsistent patch geometry");
    const std::size_t c = pd / (patch_side * patch_side);
    const std::size_t gh = h / patch_side, gw = w / patch_side;
    if (n != gh * gw)
        throw dim_error("unpatchify: " + std::to_string(n) + " patches cannot tile " + std::to_string(h) +
                        "x" + std::to_string(w));
    std::vector<S> out(c * h * w);
    const S* src = patches.data().data();
    for (std::size_t pr = 0; pr < gh; ++pr)
        for (std::size_t pc = 0; pc < gw; ++pc) {
            const S* row = src + (pr * gw + pc) * pd;
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t r = 0; r < patch_side; ++r)
                    for (std::size_t cc = 0; cc < patch_side; ++cc)
                        out[(ch * h + pr * patch_side + r) * w + pc * patch_side + cc] =
                            row[(ch * patch_side + r) * patch_side + cc];
        }
    return tensor<S>::from({c, h, w}, std::move(out));
}

// -------------------------------------------------- sine-cosine positions

// Fixed 2D table, one row per grid cell (row index = r*grid + c). The
// first embed_dim/2 channels encode the row coordinate, the rest the
// column; each half is sin over dim/4 frequencies then cos.
inline std::vector<double> sincos_table(std::size_t embed_dim, std::size_t grid) {
    if (embed_dim % 4 != 0) throw config_error("sincos_table: embed_dim must be a multiple of 4");
    const std::size_t quarter = embed_dim / 4;
    std::vector<double> omega(quarter);
    for (std::size_t k = 0; k < quarter; ++k)
        omega[k] = 1.0 / std::pow(10000.0, static_cast<double>(k) / static_cast<double>(quarter));
    std::vector<double> out(grid * grid * embed_dim);
    for (std::size_t r = 0; r < grid; ++r)
        for (std::size_t c = 0; c < grid; ++c) {
            double* row = out.data() + (r * grid + c) * embed_dim;
            for (std::size_t k = 0; k < quarter; ++k) {
                row[k] = std::sin(static_cast<double>(r) * omega[k]);
                row[quarter + k] = std::cos(static_cast<double>(r) * omega[k]);
                row[2 * quarter + k] = std::sin(static_cast<double>(c) * omega[k]);
                row[3 * quarter + k] = std::cos(static_cast<double>(c) * omega[k]);
            }
        }
    return out;
}

// As a tensor, optionally with an all-zero leading row for the class token.
template <class S>
tensor<S> sincos_pos_embed(std::size_t embed_dim, std::size_t grid, bool with_cls) {
    const std::vector<double> table = sincos_table(embed_dim, grid);
    const std::size_t n = grid * grid;
    const std::size_t rows = n + (with_cls ? 1 : 0);
    std::vector<S> vals(rows * embed_dim, S(0));
    const std::size_t off = with_cls ? embed_dim : 0;
    for (std::size_t i = 0; i < table.size(); ++i) vals[off + i] = static_cast<S>(table[i]);
    return tensor<S>::from({rows, embed_dim}, std::move(vals));
}

// ------------------------------------------------------------ parameters

template <class S>
struct block_params {
    tensor<S> ln1_g, ln1_b;
    tensor<S> qkv_w, qkv_b;    // [D, 3D] fused query/key/value projection
    tensor<S> proj_w, proj_b;  // [D, D] attention output projection
    tensor<S> ln2_g, ln2_b;
    tensor<S> fc1_w, fc1_b;  // [D, ratio*D]
    tensor<S> fc2_w, fc2_b;  // [ratio*D, D]
};

template <class S>
struct vit_params {
    vit_config cfg;
    tensor<S> patch_w, patch_b;  // [patch_dim, D]
    tensor<S> cls;               // [1, 1, D]; present only when cfg.use_cls
    std::vector<block_params<S>> blocks;
    tensor<S> norm_g, norm_b;  // final normalization
    tensor<S> pos;             // fixed sine-cosine table, not trainable

    static vit_params init(const vit_config& cfg, rng& r) {
        cfg.validate();
        vit_params p;
        p.cfg = cfg;
        const std::size_t d = cfg.embed_dim;
        auto tn = [&r](const shape_t& shape) {
            std::vector<S> v(shape_numel(shape));
            for (S& x : v) x = static_cast<S>(r.truncated_normal(0.02));
            tensor<S> t = tensor<S>::from(shape, std::move(v));
            t.set_requires_grad(true);
            return t;
        };
        auto zeros_p = [](const shape_t& shape) {
            tensor<S> t = tensor<S>::zeros(shape);
            t.set_requires_grad(true);
            return t;
        };
        auto ones_p = [](const shape_t& shape) {
            tensor<S> t = tensor<S>::ones(shape);
            t.set_requires_grad(true);
            return t;
        };
        p.patch_w = tn({cfg.patch_dim(), d});
        p.patch_b = zeros_p({d});
        if (cfg.use_cls) p.cls = tn({1, 1, d});
        p.blocks.resize(cfg.depth);
        for (block_params<S>& b : p.blocks) {
            b.ln1_g = ones_p({d});
            b.ln1_b = zeros_p({d});
            b.qkv_w = tn({d, 3 * d});
            b.qkv_b = zeros_p({3 * d});
            b.proj_w = tn({d, d});
            b.proj_b = zeros_p({d});
            b.ln2_g = ones_p({d});
            b.ln2_b = zeros_p({d});
            b.fc1_w = tn({d, cfg.mlp_ratio * d});
            b.fc1_b = zeros_p({cfg.mlp_ratio * d});
            b.fc2_w = tn({cfg.mlp_ratio * d, d});
            b.fc2_b = zeros_p({d});
        }
        p.norm_g = ones_p({d});
        p.norm_b = zeros_p({d});
        p.pos = sincos_pos_embed<S>(d, cfg.grid(), cfg.use_cls);
        return p;
    }

    // Stable path-like names, insertion order fixed. The position table is
    // derived from config and deliberately left out.
    std::vector<std::pair<std::string, tensor<S>>> named(const std::string& prefix) const {
        std::vector<std::pair<std::string, tensor<S>>> out;
        out.emplace_back(prefix + "patch_embed.w", patch_w);
        out.emplace_back(prefix + "patch_embed.b", patch_b);
        if (cfg.use_cls) out.emplace_back(prefix + "cls_token", cls);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string bp = prefix + "blocks." + std::to_string(i) + ".";
            const block_params<S>& b = blocks[i];
            out.emplace_back(bp + "ln1.gamma", b.ln1_g);
            out.emplace_back(bp + "ln1.beta", b.ln1_b);
            out.emplace_back(bp + "attn.qkv.w", b.qkv_w);
            out.emplace_back(bp + "attn.qkv.b", b.qkv_b);
            out.emplace_back(bp + "attn.proj.w", b.proj_w);
            out.emplace_back(bp + "attn.proj.b", b.proj_b);
            out.emplace_back(bp + "ln2.gamma", b.ln2_g);
            out.emplace_back(bp + "ln2.beta", b.ln2_b);
            out.emplace_back(bp + "mlp.fc1.w", b.fc1_w);
            out.emplace_back(bp + "mlp.fc1.b", b.fc1_b);
            out.emplace_back(bp + "mlp.fc2.w", b.fc2_w);
            out.emplace_back(bp + "mlp.fc2.b", b.fc2_b);
        }
        out.emplace_back(prefix + "norm.gamma", norm_g);
        out.emplace_back(prefix + "norm.beta", norm_b);
        return out;
    }

    std::vector<tensor<S>> trainable() const {
        std::vector<tensor<S>> out;
        for (auto& [name, t] : named("")) out.push_back(t);
        return out;
    }
};

// --------------------------------------------------------------- forward

// Pre-norm residual block: x + MHSA(LN(x)), then + MLP(LN(.)). When
// `attn_weights` is given it receives the softmaxed [B*heads, T, T] map.
template <class S>
tensor<S> attention_block(const tensor<S>& x, const block_params<S>& p, std::size_t num_heads,
                          tensor<S>* attn_weights = nullptr) {
    if (x.rank() != 3) throw dim_error("attention_block: expected [B, T, D]");
    const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
    if (num_heads == 0 || d % num_heads != 0)
        throw config_error("attention_block: embed dim " + std::to_string(d) + " not divisible by " +
                           std::to_string(num_heads) + " heads");
    const std::size_t dh = d / num_heads;

    tensor<S> h = layer_norm(x, p.ln1_g, p.ln1_b);
    tensor<S> qkv = linear(h, p.qkv_w, p.qkv_b);
    auto split_heads = [&](std::size_t off) {
        tensor<S> part = slice(qkv, 2, off, d);
        tensor<S> r4 = reshape(part, {b, t, num_heads, dh});
        return reshape(transpose(r4, {0, 2, 1, 3}), {b * num_heads, t, dh});
    };
    tensor<S> q = split_heads(0);
    tensor<S> k = split_heads(d);
    tensor<S> v = split_heads(2 * d);

    tensor<S> scores = mul_scalar(bmm(q, transpose(k, {0, 2, 1})),
                                  static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh))));
    tensor<S> att = softmax(scores, 2);
    if (attn_weights) *attn_weights = att;

    tensor<S> ctx = bmm(att, v);
    ctx = reshape(transpose(reshape(ctx, {b, num_heads, t, dh}), {0, 2, 1, 3}), {b, t, d});
    tensor<S> x1 = add(x, linear(ctx, p.proj_w, p.proj_b));

    tensor<S> h2 = layer_norm(x1, p.ln2_g, p.ln2_b);
    tensor<S> m = linear(gelu(linear(h2, p.fc1_w, p.fc1_b)), p.fc2_w, p.fc2_b);
    return add(x1, m);
}

// All blocks then the final normalization; token count is preserved, so
// masked subsets pass through unchanged in length.
template <class S>
tensor<S> encoder_forward(const tensor<S>& tokens, const vit_params<S>& p) {
    tensor<S> x = tokens;
    for (const block_params<S>& b : p.blocks) x = attention_block(x, b, p.cfg.num_heads);
    return layer_norm(x, p.norm_g, p.norm_b);
}

// Patch tokens with positions added, class token prepended when enabled.
// `patches` is [B, n_patches, patch_dim].
template <class S>
tensor<S> embed_patches(const tensor<S>& patches, const vit_params<S>& p) {
    if (patches.rank() != 3) throw dim_error("embed_patches: expected [B, n, patch_dim]");
    if (patches.dim(2) != p.cfg.patch_dim())
        throw dim_error("embed_patches: patch dim " + std::to_string(patches.dim(2)) + " but projection wants " +
                        std::to_string(p.cfg.patch_dim()));
    if (patches.dim(1) != p.cfg.n_patches())
        throw dim_error("embed_patches: got " + std::to_string(patches.dim(1)) + " patches, config implies " +
                        std::to_string(p.cfg.n_patches()));
    tensor<S> tok = linear(patches, p.patch_w, p.patch_b);
    const std::size_t cls_off = p.cfg.use_cls ? 1 : 0;
    tensor<S> patch_pos = slice(p.pos, 0, cls_off, p.cfg.n_patches());
    tok = add(tok, patch_pos);
    if (p.cfg.use_cls) {
        // The class position row is all zeros, so prepending cls directly
        // already matches cls + pos[0].
        tensor<S> cls_b = broadcast_to(p.cls, {patches.dim(0), 1, p.cfg.embed_dim});
        tok = concat<S>({cls_b, tok}, 1);
    }
    return tok;
}

// Pooled image feature: final class token, or token mean without one.
template <class S>
tensor<S> pooled_feature(const tensor<S>& encoded, bool has_cls) {
    if (encoded.rank() != 3) throw dim_error("pooled_feature: expected [B, T, D]");
    if (has_cls) return reshape(slice(encoded, 1, 0, 1), {encoded.dim(0), encoded.dim(2)});
    return mean_axis(encoded, 1);
}

}  // namespace maebench
