#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "maebench/ops.hpp"
#include "maebench/optim.hpp"
#include "maebench/rng.hpp"
#include "maebench/tensor.hpp"
#include "maebench/vit.hpp"

// Masked-autoencoder pretraining: per-sample random masking, the
// asymmetric encode/decode pass with a shared mask token, the
// masked-pixel reconstruction loss, and the training loop.
namespace maebench {

struct mask_plan {
    std::vector<std::size_t> ids_shuffle;  // permutation of patch indices; first len_keep stay visible
    std::vector<std::size_t> ids_restore;  // inverse permutation
    std::size_t len_keep = 0;
    std::vector<std::uint8_t> mask;  // original patch order, 1 = masked
};

inline std::size_t keep_count(std::size_t n_patches, double mask_ratio) {
    return static_cast<std::size_t>(
        std::llround(static_cast<double>(n_patches) * (1.0 - mask_ratio)));
}

inline mask_plan make_mask_plan(std::size_t n_patches, double mask_ratio, rng& r) {
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
        throw config_error("mask_ratio must lie in (0, 1), got " + std::to_string(mask_ratio));
    mask_plan plan;
    plan.ids_shuffle = r.permutation(n_patches);
    plan.ids_restore = inverse_permutation(plan.ids_shuffle);
    plan.len_keep = keep_count(n_patches, mask_ratio);
    plan.mask.assign(n_patches, 1);
    for (std::size_t j = 0; j < plan.len_keep; ++j) plan.mask[plan.ids_shuffle[j]] = 0;
    return plan;
}

template <class S>
struct token_sequence {
    tensor<S> tokens;  // [B, T, D]
    bool has_cls = false;
};

// Keeps the class token (when present) and a fresh uniform per-sample
// subset of patch tokens; one plan per batch row.
template <class S>
std::pair<token_sequence<S>, std::vector<mask_plan>> random_masking(const token_sequence<S>& seq,
                                                                    double mask_ratio, rng& r) {
    const std::size_t b = seq.tokens.dim(0);
    const std::size_t cls_off = seq.has_cls ? 1 : 0;
    const std::size_t n = seq.tokens.dim(1) - cls_off;

    std::vector<mask_plan> plans;
    plans.reserve(b);
    std::vector<std::vector<std::size_t>> keep_ids(b);
    for (std::size_t i = 0; i < b; ++i) {
        plans.push_back(make_mask_plan(n, mask_ratio, r));
        keep_ids[i].assign(plans[i].ids_shuffle.begin(),
                           plans[i].ids_shuffle.begin() + plans[i].len_keep);
    }

    tensor<S> patch_tok = seq.has_cls ? slice(seq.tokens, 1, 1, n) : seq.tokens;
    tensor<S> visible = gather_tokens(patch_tok, keep_ids);
    if (seq.has_cls) visible = concat<S>({slice(seq.tokens, 1, 0, 1), visible}, 1);
    return {token_sequence<S>{visible, seq.has_cls}, std::move(plans)};
}

// ------------------------------------------------------------ decoder

template <class S>
struct mae_decoder_params {
    vit_config cfg;  // decoder-width copy of the encoder geometry
    tensor<S> in_w, in_b;  // encoder width -> decoder width
    tensor<S> mask_token;  // [1, 1, D], shared across all masked slots
    std::vector<block_params<S>> blocks;
    tensor<S> norm_g, norm_b;
    tensor<S> pred_w, pred_b;  // decoder width -> patch pixels
    tensor<S> pos;             // fixed sine-cosine table (cls row zero when present)

    static mae_decoder_params init(const vit_config& enc_cfg, std::size_t dec_dim,
                                   std::size_t dec_depth, std::size_t dec_heads, rng& r) {
        vit_config cfg = enc_cfg;
        cfg.embed_dim = dec_dim;
        cfg.depth = dec_depth;
        cfg.num_heads = dec_heads;
        cfg.validate();

        mae_decoder_params p;
        p.cfg = cfg;
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
        p.in_w = tn({enc_cfg.embed_dim, dec_dim});
        p.in_b = zeros_p({dec_dim});
        p.mask_token = tn({1, 1, dec_dim});
        p.blocks.resize(dec_depth);
        for (block_params<S>& b : p.blocks) {
            b.ln1_g = ones_p({dec_dim});
            b.ln1_b = zeros_p({dec_dim});
            b.qkv_w = tn({dec_dim, 3 * dec_dim});
            b.qkv_b = zeros_p({3 * dec_dim});
            b.proj_w = tn({dec_dim, dec_dim});
            b.proj_b = zeros_p({dec_dim});
            b.ln2_g = ones_p({dec_dim});
            b.ln2_b = zeros_p({dec_dim});
            b.fc1_w = tn({dec_dim, cfg.mlp_ratio * dec_dim});
            b.fc1_b = zeros_p({cfg.mlp_ratio * dec_dim});
            b.fc2_w = tn({cfg.mlp_ratio * dec_dim, dec_dim});
            b.fc2_b = zeros_p({dec_dim});
        }
        p.norm_g = ones_p({dec_dim});
        p.norm_b = zeros_p({dec_dim});
        p.pred_w = tn({dec_dim, cfg.patch_dim()});
        p.pred_b = zeros_p({cfg.patch_dim()});
        p.pos = sincos_pos_embed<S>(dec_dim, cfg.grid(), cfg.use_cls);
        return p;
    }

    std::vector<std::pair<std::string, tensor<S>>> named(const std::string& prefix) const {
        std::vector<std::pair<std::string, tensor<S>>> out;
        out.emplace_back(prefix + "in.w", in_w);
        out.emplace_back(prefix + "in.b", in_b);
        out.emplace_back(prefix + "mask_token", mask_token);
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
        out.emplace_back(prefix + "pred.w", pred_w);
        out.emplace_back(prefix + "pred.b", pred_b);
        return out;
    }
};

template <class S>
struct mae_model {
    vit_params<S> enc;
    mae_decoder_params<S> dec;

    static mae_model init(const vit_config& enc_cfg, std::size_t dec_dim, std::size_t dec_depth,
                          std::size_t dec_heads, std::uint64_t seed) {
        rng r(mix_seed(seed, 0x1417));
        mae_model m;
        m.enc = vit_params<S>::init(enc_cfg, r);
        m.dec = mae_decoder_params<S>::init(enc_cfg, dec_dim, dec_depth, dec_heads, r);
        return m;
    }

    std::vector<std::pair<std::string, tensor<S>>> named() const {
        auto out = enc.named("encoder.");
        for (auto& kv : dec.named("decoder.")) out.push_back(std::move(kv));
        return out;
    }

    std::vector<tensor<S>> trainable() const {
        std::vector<tensor<S>> out;
        for (auto& [name, t] : named()) out.push_back(t);
        return out;
    }
};

// Project latent visible tokens to decoder width, fill masked slots with
// the shared mask token, unshuffle back to patch order, add positions,
// run the decoder blocks, and predict pixels per patch. Output drops the
// class token: [B, n_patches, patch_dim].
template <class S>
tensor<S> decode_with_mask_tokens(const token_sequence<S>& latent,
                                  const std::vector<mask_plan>& plans,
                                  const mae_decoder_params<S>& p) {
    const std::size_t b = latent.tokens.dim(0);
    if (plans.size() != b) throw contract_error("decode: one mask plan per batch row required");
    const std::size_t cls_off = latent.has_cls ? 1 : 0;
    const std::size_t n = p.cfg.n_patches();
    const std::size_t len_keep = plans.empty() ? 0 : plans[0].len_keep;
    for (const mask_plan& plan : plans)
        if (plan.len_keep != len_keep || plan.ids_restore.size() != n)
            throw contract_error("decode: mask plans disagree with the patch grid");
    if (latent.tokens.dim(1) != len_keep + cls_off)
        throw contract_error("decode: latent carries " + std::to_string(latent.tokens.dim(1)) +
                             " tokens but plans keep " + std::to_string(len_keep + cls_off));

    tensor<S> x = linear(latent.tokens, p.in_w, p.in_b);
    tensor<S> vis = latent.has_cls ? slice(x, 1, 1, len_keep) : x;

    tensor<S> full;
    if (n > len_keep) {
        tensor<S> fills = broadcast_to(p.mask_token, {b, n - len_keep, p.cfg.embed_dim});
        full = concat<S>({vis, fills}, 1);
    } else {
        full = vis;  // degenerate plan, nothing masked
    }

    std::vector<std::vector<std::size_t>> restore(b);
    for (std::size_t i = 0; i < b; ++i) restore[i] = plans[i].ids_restore;
    tensor<S> ordered = gather_tokens(full, restore);

    if (latent.has_cls) ordered = concat<S>({slice(x, 1, 0, 1), ordered}, 1);
    ordered = add(ordered, p.pos);

    for (const block_params<S>& blk : p.blocks)
        ordered = attention_block(ordered, blk, p.cfg.num_heads);
    ordered = layer_norm(ordered, p.norm_g, p.norm_b);
    tensor<S> pred = linear(ordered, p.pred_w, p.pred_b);
    if (latent.has_cls) pred = slice(pred, 1, 1, n);
    return pred;
}

// Value-only per-patch standardization of reconstruction targets.
template <class S>
tensor<S> normalize_patch_targets(const tensor<S>& targets, S eps = S(1e-6)) {
    const std::size_t pd = targets.dim(targets.rank() - 1);
    const std::size_t rows = targets.numel() / pd;
    std::vector<S> out(targets.numel());
    const S* src = targets.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const S* row = src + r * pd;
        S mu = S(0);
        for (std::size_t j = 0; j < pd; ++j) mu += row[j];
        mu /= static_cast<S>(pd);
        S var = S(0);
        for (std::size_t j = 0; j < pd; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<S>(pd);
        const S inv = S(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < pd; ++j) out[r * pd + j] = (row[j] - mu) * inv;
    }
    return tensor<S>::from(targets.shape(), std::move(out));
}

// Mean squared error over masked patches only: per-patch pixel mean,
// masked out, then mean over masked patches and over the batch.
template <class S>
tensor<S> mae_loss(const tensor<S>& pred, const tensor<S>& target_patches,
                   const std::vector<mask_plan>& plans, bool normalize_targets) {
    if (pred.shape() != target_patches.shape())
        throw dim_error("mae_loss: prediction " + shape_str(pred.shape()) + " vs target " +
                        shape_str(target_patches.shape()));
    const std::size_t b = pred.dim(0), n = pred.dim(1);
    if (plans.size() != b) throw contract_error("mae_loss: one plan per batch row required");

    std::size_t total_masked = 0;
    std::vector<S> mask_vals(b * n);
    for (std::size_t i = 0; i < b; ++i) {
        if (plans[i].mask.size() != n) throw contract_error("mae_loss: plan length mismatch");
        for (std::size_t j = 0; j < n; ++j) {
            mask_vals[i * n + j] = static_cast<S>(plans[i].mask[j]);
            total_masked += plans[i].mask[j];
        }
    }
    if (total_masked == 0) {
        std::fputs("warning: mae_loss over a plan with zero masked patches, defined as 0\n", stderr);
        return tensor<S>::scalar(S(0));
    }

    tensor<S> target = normalize_targets ? normalize_patch_targets(target_patches) : target_patches;
    tensor<S> diff = sub(pred, target);
    tensor<S> per_patch = mean_axis(mul(diff, diff), 2);  // [B, n]
    tensor<S> mask_t = tensor<S>::from({b, n}, std::move(mask_vals));
    tensor<S> masked = mul(per_patch, mask_t);
    return mul_scalar(sum(masked), S(1) / static_cast<S>(total_masked));
}

// ------------------------------------------------------- training loop

struct pretrain_config {
    double mask_ratio = 0.75;
    std::size_t epochs = 800;
    std::size_t warmup_epochs = 30;
    std::size_t batch_size = 2048;
    double peak_lr = 1e-3;
    double min_lr = 1e-6;
    double weight_decay = 0.05;
    bool normalize_targets = true;
    std::uint64_t seed = 0;

    void validate() const {
        std::string problems;
        if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) problems += "  mask_ratio must lie in (0, 1)\n";
        if (epochs == 0) problems += "  epochs must be positive\n";
        if (warmup_epochs > epochs) problems += "  warmup_epochs exceeds epochs\n";
        if (batch_size == 0) problems += "  batch_size must be positive\n";
        if (peak_lr < 0 || min_lr < 0 || min_lr > peak_lr)
            problems += "  learning rates must satisfy 0 <= min_lr <= peak_lr\n";
        if (!problems.empty()) throw config_error("invalid pretrain config:\n" + problems);
    }
};

struct loss_record {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double loss = 0;
    double lr = 0;
};

template <class S>
struct pretrain_result {
    std::vector<loss_record> history;  // one record per optimizer step
    std::vector<double> epoch_mean;
    std::size_t best_epoch = 0;  // lowest epoch-mean loss, earlier epoch on ties
    std::vector<std::pair<std::string, std::vector<S>>> best_params;
};

// Optional per-sample transform applied freshly each epoch (augmentation);
// identity when empty. Receives a [c, H, W] image and an epoch-derived rng.
template <class S>
using augment_fn = std::function<tensor<S>(const tensor<S>&, rng&)>;

template <class S>
pretrain_result<S> pretrain_loop(const std::vector<tensor<S>>& images, mae_model<S>& model,
                                 const pretrain_config& cfg,
                                 const augment_fn<S>& augment = augment_fn<S>()) {
    cfg.validate();
    if (images.empty()) throw config_error("pretrain: dataset is empty");

    const std::size_t n_img = images.size();
    const std::size_t steps_per_epoch = (n_img + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = cfg.epochs * steps_per_epoch;
    const std::size_t warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    const std::size_t n = model.enc.cfg.n_patches();
    const std::size_t pd = model.enc.cfg.patch_dim();

    std::vector<tensor<S>> params = model.trainable();
    optim_state<S> opt;
    opt.weight_decay = static_cast<S>(cfg.weight_decay);

    pretrain_result<S> result;
    std::size_t global_step = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng order_rng(mix_seed(mix_seed(cfg.seed, 1), epoch));
        rng mask_rng(mix_seed(mix_seed(cfg.seed, 2), epoch));
        rng aug_rng(mix_seed(mix_seed(cfg.seed, 3), epoch));
        std::vector<std::size_t> order = order_rng.permutation(n_img);

        double epoch_loss = 0;
        std::size_t epoch_batches = 0;
        for (std::size_t start = 0; start < n_img; start += cfg.batch_size) {
            const std::size_t bsz = std::min(cfg.batch_size, n_img - start);
            std::vector<S> batch_vals(bsz * n * pd);
            for (std::size_t i = 0; i < bsz; ++i) {
                const tensor<S>& img = images[order[start + i]];
                tensor<S> view = augment ? augment(img, aug_rng) : img;
                tensor<S> patches = patchify(view, model.enc.cfg.patch_side);
                std::copy(patches.data().begin(), patches.data().end(),
                          batch_vals.begin() + i * n * pd);
            }
            tensor<S> batch = tensor<S>::from({bsz, n, pd}, std::move(batch_vals));

            tensor<S> tokens = embed_patches(batch, model.enc);
            auto [visible, plans] =
                random_masking(token_sequence<S>{tokens, model.enc.cfg.use_cls}, cfg.mask_ratio, mask_rng);
            tensor<S> latent = encoder_forward(visible.tokens, model.enc);
            tensor<S> pred =
                decode_with_mask_tokens(token_sequence<S>{latent, visible.has_cls}, plans, model.dec);
            tensor<S> loss = mae_loss(pred, batch, plans, cfg.normalize_targets);

            const double loss_v = static_cast<double>(loss.item());
            if (!std::isfinite(loss_v))
                throw numeric_error("pretrain: non-finite loss at step " + std::to_string(global_step));

            zero_grads(params);
            loss.backward();
            const double lr = lr_schedule(global_step + 1, total_steps, warmup_steps, cfg.peak_lr, cfg.min_lr);
            opt.lr = static_cast<S>(lr);
            optimizer_step(params, opt);

            result.history.push_back({epoch, global_step, loss_v, lr});
            epoch_loss += loss_v;
            epoch_batches += 1;
            global_step += 1;
        }
        result.epoch_mean.push_back(epoch_loss / static_cast<double>(epoch_batches));
        if (epoch == 0 || result.epoch_mean[epoch] < result.epoch_mean[result.best_epoch]) {
            result.best_epoch = epoch;
            result.best_params.clear();
            for (auto& [name, t] : model.named()) result.best_params.emplace_back(name, t.data());
        }
    }
    return result;
}

}  // namespace maebench
