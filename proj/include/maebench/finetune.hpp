#pragma once

// Downstream adaptation of a pretrained encoder: a two-layer MLP
// classification head with label smoothing, a minimal single-scale box
// head, the fine-tuning loop, and checkpoint selection by validation
// metric (macro AUROC for classification tasks, macro AP50 for boxes).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "maebench/checkpoint.hpp"
#include "maebench/dataset.hpp"
#include "maebench/errors.hpp"
#include "maebench/metrics.hpp"
#include "maebench/optim.hpp"
#include "maebench/ops.hpp"
#include "maebench/rng.hpp"
#include "maebench/tensor.hpp"
#include "maebench/vit.hpp"

namespace maebench {

enum class task_kind { binary, multiclass, multilabel, localization };

inline const char* task_name(task_kind t) {
    switch (t) {
        case task_kind::binary: return "binary";
        case task_kind::multiclass: return "multiclass";
        case task_kind::multilabel: return "multilabel";
        case task_kind::localization: return "localization";
    }
    throw contract_error("task_name: unknown task value");
}

inline task_kind parse_task(const std::string& s) {
    if (s == "binary") return task_kind::binary;
    if (s == "multiclass") return task_kind::multiclass;
    if (s == "multilabel") return task_kind::multilabel;
    if (s == "localization") return task_kind::localization;
    throw config_error("unknown task '" + s +
                       "'; expected binary, multiclass, multilabel, or localization");
}

inline bool is_classification(task_kind t) { return t != task_kind::localization; }

struct finetune_config {
    task_kind task = task_kind::multilabel;
    std::size_t num_classes = 0;
    double label_smoothing = 0.1;
    std::size_t batch_size = 16;
    std::size_t epochs = 50;
    std::size_t warmup_epochs = 5;
    double peak_lr = 1e-3;
    double min_lr = 1e-6;
    double weight_decay = 0.05;
    bool freeze_encoder = false;
    std::optional<std::size_t> shots;  // per-class training-sample cap
    std::uint64_t seed = 0;
    std::size_t head_hidden = 0;     // 0 means: use the encoder embed dim
    double score_threshold = 0.25;   // box decoding cutoff (localization)
    double nms_iou = 0.5;

    void validate() const {
        std::string problems;
        if (num_classes == 0) problems += "  num_classes must be positive\n";
        if (task == task_kind::multiclass && num_classes < 2)
            problems += "  multiclass needs at least 2 classes\n";
        if (task == task_kind::binary && num_classes != 1)
            problems += "  binary uses exactly 1 class (one sigmoid logit)\n";
        if (!(label_smoothing >= 0.0 && label_smoothing < 1.0))
            problems += "  label_smoothing must lie in [0, 1)\n";
        if (batch_size == 0) problems += "  batch_size must be positive\n";
        if (epochs == 0) problems += "  epochs must be positive\n";
        if (warmup_epochs > epochs) problems += "  warmup_epochs exceeds epochs\n";
        if (peak_lr < 0 || min_lr < 0 || min_lr > peak_lr)
            problems += "  learning rates must satisfy 0 <= min_lr <= peak_lr\n";
        if (shots && *shots == 0) problems += "  shots must be at least 1 when set\n";
        if (!(score_threshold >= 0.0 && score_threshold <= 1.0))
            problems += "  score_threshold must lie in [0, 1]\n";
        if (!(nms_iou > 0.0 && nms_iou <= 1.0)) problems += "  nms_iou must lie in (0, 1]\n";
        if (!problems.empty()) throw config_error("invalid finetune config:\n" + problems);
    }
};

// ------------------------------------------------------------- model config IO

// The encoder geometry travels inside checkpoints as a JSON object; both
// directions are strict so a stored config can never silently gain or
// lose a field.
inline nlohmann::json vit_config_to_json(const vit_config& c) {
    return nlohmann::json{{"image_side", c.image_side}, {"patch_side", c.patch_side},
                          {"embed_dim", c.embed_dim},   {"depth", c.depth},
                          {"num_heads", c.num_heads},   {"mlp_ratio", c.mlp_ratio},
                          {"in_channels", c.in_channels}, {"use_cls", c.use_cls}};
}

inline vit_config vit_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw config_error("model config must be a JSON object");
    static const char* const keys[] = {"image_side", "patch_side", "embed_dim", "depth",
                                       "num_heads",  "mlp_ratio",  "in_channels", "use_cls"};
    std::string problems;
    for (const char* k : keys)
        if (!j.contains(k)) problems += std::string("  missing key '") + k + "'\n";
    for (const auto& [k, v] : j.items()) {
        bool known = false;
        for (const char* ours : keys) known = known || k == ours;
        if (!known) problems += "  unknown key '" + k + "'\n";
    }
    if (!problems.empty()) throw config_error("bad model config:\n" + problems);

    vit_config c;
    try {
        c.image_side = j.at("image_side").get<std::size_t>();
        c.patch_side = j.at("patch_side").get<std::size_t>();
        c.embed_dim = j.at("embed_dim").get<std::size_t>();
        c.depth = j.at("depth").get<std::size_t>();
        c.num_heads = j.at("num_heads").get<std::size_t>();
        c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
        c.in_channels = j.at("in_channels").get<std::size_t>();
        c.use_cls = j.at("use_cls").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw config_error(std::string("bad model config: ") + e.what());
    }
    c.validate();
    return c;
}

// ------------------------------------------------------------------- heads

// Two-layer MLP on the pooled image feature.
template <class S>
struct mlp_head {
    tensor<S> fc1_w, fc1_b;  // [in, hidden]
    tensor<S> fc2_w, fc2_b;  // [hidden, out]

    static mlp_head init(std::size_t in_dim, std::size_t hidden, std::size_t out_dim, rng& r) {
        if (in_dim == 0 || hidden == 0 || out_dim == 0)
            throw config_error("mlp_head: all dimensions must be positive");
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
        mlp_head h;
        h.fc1_w = tn({in_dim, hidden});
        h.fc1_b = zeros_p({hidden});
        h.fc2_w = tn({hidden, out_dim});
        h.fc2_b = zeros_p({out_dim});
        return h;
    }

    tensor<S> forward(const tensor<S>& features) const {
        if (features.dim(features.rank() - 1) != fc1_w.dim(0))
            throw config_error("mlp_head: feature dim " +
                               std::to_string(features.dim(features.rank() - 1)) +
                               " does not match head input dim " + std::to_string(fc1_w.dim(0)));
        return linear(gelu(linear(features, fc1_w, fc1_b)), fc2_w, fc2_b);
    }

    std::vector<std::pair<std::string, tensor<S>>> named(const std::string& prefix) const {
        return {{prefix + "fc1.w", fc1_w},
                {prefix + "fc1.b", fc1_b},
                {prefix + "fc2.w", fc2_w},
                {prefix + "fc2.b", fc2_b}};
    }
};

// Single linear map from each patch token to its cell prediction. Output
// layout per cell: [objectness, dx, dy, log w, log h, class logits...].
// Deliberately minimal: one scale, no anchors, one box per cell.
template <class S>
struct det_head {
    tensor<S> w, b;  // [in, 5 + num_classes]
    std::size_t num_classes = 0;

    static det_head init(std::size_t in_dim, std::size_t num_classes, rng& r) {
        if (in_dim == 0 || num_classes == 0)
            throw config_error("det_head: dimensions must be positive");
        det_head h;
        h.num_classes = num_classes;
        std::vector<S> v(in_dim * (5 + num_classes));
        for (S& x : v) x = static_cast<S>(r.truncated_normal(0.02));
        h.w = tensor<S>::from({in_dim, 5 + num_classes}, std::move(v));
        h.w.set_requires_grad(true);
        h.b = tensor<S>::zeros({5 + num_classes});
        h.b.set_requires_grad(true);
        return h;
    }

    std::vector<std::pair<std::string, tensor<S>>> named(const std::string& prefix) const {
        return {{prefix + "det.w", w}, {prefix + "det.b", b}};
    }
};

namespace detail {

// Rearranges an image batch [B, C, H, W] into flattened patch rows
// [B, n_patches, patch_dim]. Values only; the batch is model input, not a
// parameter, so nothing here needs a gradient.
template <class S>
tensor<S> patchify_batch(const tensor<S>& images, std::size_t patch_side) {
    if (images.rank() != 4)
        throw dim_error("patchify_batch: expected [B, C, H, W], got " + shape_str(images.shape()));
    const std::size_t bsz = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
    const std::size_t per = c * h * w;
    tensor<S> first;
    std::vector<S> out;
    std::size_t n = 0, pd = 0;
    for (std::size_t i = 0; i < bsz; ++i) {
        std::vector<S> one(images.data().begin() + static_cast<std::ptrdiff_t>(i * per),
                           images.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
        tensor<S> patches = patchify(tensor<S>::from({c, h, w}, std::move(one)), patch_side);
        if (i == 0) {
            n = patches.dim(0);
            pd = patches.dim(1);
            out.resize(bsz * n * pd);
        }
        std::copy(patches.data().begin(), patches.data().end(),
                  out.begin() + static_cast<std::ptrdiff_t>(i * n * pd));
    }
    return tensor<S>::from({bsz, n, pd}, std::move(out));
}

// Full-visibility encode of an image batch: every patch is a token, no
// masking. Returns the token sequence after the final norm.
template <class S>
tensor<S> encode_all_patches(const tensor<S>& images, const vit_params<S>& enc) {
    if (images.dim(1) != enc.cfg.in_channels || images.dim(2) != enc.cfg.image_side ||
        images.dim(3) != enc.cfg.image_side)
        throw dim_error("encode: image batch " + shape_str(images.shape()) +
                        " does not match the encoder's " + std::to_string(enc.cfg.in_channels) +
                        "x" + std::to_string(enc.cfg.image_side) + "x" +
                        std::to_string(enc.cfg.image_side) + " input");
    tensor<S> patches = patchify_batch(images, enc.cfg.patch_side);
    return encoder_forward(embed_patches(patches, enc), enc);
}

}  // namespace detail

// Pooled feature of every image through a 2-layer MLP. All patches are
// visible here; masking belongs to pretraining only.
template <class S>
tensor<S> classifier_forward(const tensor<S>& images, const vit_params<S>& enc,
                             const mlp_head<S>& head) {
    if (head.fc1_w.dim(0) != enc.cfg.embed_dim)
        throw config_error("classifier_forward: head expects input dim " +
                           std::to_string(head.fc1_w.dim(0)) + ", encoder produces " +
                           std::to_string(enc.cfg.embed_dim));
    tensor<S> x = detail::encode_all_patches(images, enc);
    return head.forward(pooled_feature(x, enc.cfg.use_cls));
}

// Argmax with ties broken toward the lowest index, so the result is
// deterministic and invariant under any strictly increasing remapping of
// the probabilities.
inline std::size_t predict_class(const std::vector<double>& probabilities) {
    if (probabilities.empty()) throw contract_error("predict_class: empty probability vector");
    std::size_t best = 0;
    for (std::size_t i = 0; i < probabilities.size(); ++i) {
        if (!(probabilities[i] >= 0.0))
            throw contract_error("predict_class: probabilities must be nonnegative, got " +
                                 std::to_string(probabilities[i]) + " at index " + std::to_string(i));
        if (probabilities[i] > probabilities[best]) best = i;
    }
    return best;
}

namespace detail {

inline void check_smoothing(double eps) {
    if (!(eps >= 0.0 && eps < 1.0))
        throw config_error("label_smoothing must lie in [0, 1), got " + std::to_string(eps));
}

}  // namespace detail

// Multiclass cross-entropy against softened targets: the one-hot row is
// mixed to (1 - eps) * onehot + eps / K, which still sums to 1. Mean over
// the batch.
template <class S>
tensor<S> smoothed_loss(const tensor<S>& logits, const std::vector<std::size_t>& target_class,
                        double eps, task_kind task) {
    detail::check_smoothing(eps);
    if (task != task_kind::multiclass)
        throw config_error("smoothed_loss: class-index targets fit the multiclass task only");
    if (logits.rank() != 2) throw dim_error("smoothed_loss: logits must be [B, K]");
    const std::size_t bsz = logits.dim(0), k = logits.dim(1);
    if (target_class.size() != bsz)
        throw dim_error("smoothed_loss: " + std::to_string(bsz) + " logit rows vs " +
                        std::to_string(target_class.size()) + " targets");

    std::vector<S> soft(bsz * k, static_cast<S>(eps / static_cast<double>(k)));
    for (std::size_t i = 0; i < bsz; ++i) {
        if (target_class[i] >= k)
            throw validation_error("smoothed_loss: target class " + std::to_string(target_class[i]) +
                                   " out of range for " + std::to_string(k) + " classes");
        soft[i * k + target_class[i]] += static_cast<S>(1.0 - eps);
    }
    tensor<S> y = tensor<S>::from({bsz, k}, std::move(soft));
    tensor<S> logp = log_softmax(logits, 1);
    return mul_scalar(sum(mul(y, logp)), static_cast<S>(-1.0 / static_cast<double>(bsz)));
}

// Per-class sigmoid cross-entropy for binary and multilabel targets,
// against y' = (1 - eps) * y + eps / 2. Averaged over annotated entries
// only; unannotated cells are masked out of the loss, so their logits
// receive exactly zero gradient. Computed from logits in the stable form
// softplus(z) - y' * z.
template <class S>
tensor<S> smoothed_loss(const tensor<S>& logits,
                        const std::vector<std::vector<label_state>>& target, double eps,
                        task_kind task) {
    detail::check_smoothing(eps);
    if (task != task_kind::binary && task != task_kind::multilabel)
        throw config_error("smoothed_loss: per-class targets fit binary or multilabel tasks only");
    if (logits.rank() != 2) throw dim_error("smoothed_loss: logits must be [B, K]");
    const std::size_t bsz = logits.dim(0), k = logits.dim(1);
    if (target.size() != bsz)
        throw dim_error("smoothed_loss: " + std::to_string(bsz) + " logit rows vs " +
                        std::to_string(target.size()) + " target rows");

    std::vector<S> soft(bsz * k, S(0));
    std::vector<S> mask(bsz * k, S(0));
    std::size_t annotated = 0;
    for (std::size_t i = 0; i < bsz; ++i) {
        if (target[i].size() != k)
            throw dim_error("smoothed_loss: target row " + std::to_string(i) + " has " +
                            std::to_string(target[i].size()) + " classes, logits have " +
                            std::to_string(k));
        for (std::size_t j = 0; j < k; ++j) {
            if (target[i][j] == label_state::unannotated) continue;
            const double y = target[i][j] == label_state::positive ? 1.0 : 0.0;
            soft[i * k + j] = static_cast<S>((1.0 - eps) * y + eps / 2.0);
            mask[i * k + j] = S(1);
            ++annotated;
        }
    }
    tensor<S> y = tensor<S>::from({bsz, k}, std::move(soft));
    tensor<S> m = tensor<S>::from({bsz, k}, std::move(mask));
    if (annotated == 0) {
        std::cerr << "note: batch has no annotated labels; loss is 0\n";
        return mul_scalar(sum(mul(logits, m)), S(0));
    }
    tensor<S> bce = sub(softplus(logits), mul(y, logits));
    return mul_scalar(sum(mul(bce, m)), static_cast<S>(1.0 / static_cast<double>(annotated)));
}

// -------------------------------------------------------------- localization

namespace detail {

// Greedy same-class suppression: keep detections in descending score
// order, dropping any box that overlaps an already kept box of the same
// class at IoU >= the threshold. Two identical boxes collapse to one.
inline std::vector<detection> nms(std::vector<detection> dets, double iou_threshold) {
    std::stable_sort(dets.begin(), dets.end(),
                     [](const detection& a, const detection& b) { return a.score > b.score; });
    std::vector<detection> kept;
    for (const detection& d : dets) {
        bool suppressed = false;
        for (const detection& k : kept)
            if (k.b.class_id == d.b.class_id && iou(k.b, d.b) >= iou_threshold) {
                suppressed = true;
                break;
            }
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

}  // namespace detail

// Decodes per-cell predictions into absolute-pixel detections. Each patch
// cell proposes one box: center = (cell center + offset) * cell size,
// size = exp(log-size) * cell size, class = argmax of the class logits,
// score = sigmoid(objectness) * softmax probability of the argmax class
// (so a single-class head scores by objectness alone). Proposals below
// the score threshold are dropped, the rest pass through greedy NMS.
template <class S>
std::vector<std::vector<detection>> localization_forward(const tensor<S>& images,
                                                         const vit_params<S>& enc,
                                                         const det_head<S>& head,
                                                         double score_threshold = 0.25,
                                                         double nms_iou = 0.5) {
    if (head.w.dim(0) != enc.cfg.embed_dim)
        throw config_error("localization_forward: head expects input dim " +
                           std::to_string(head.w.dim(0)) + ", encoder produces " +
                           std::to_string(enc.cfg.embed_dim));
    tensor<S> x = detail::encode_all_patches(images, enc);
    const std::size_t cls_off = enc.cfg.use_cls ? 1 : 0;
    tensor<S> cells = linear(slice(x, 1, cls_off, enc.cfg.n_patches()), head.w, head.b);

    const std::size_t bsz = cells.dim(0), n = cells.dim(1), width = cells.dim(2);
    const std::size_t g = enc.cfg.grid();
    const std::size_t k = head.num_classes;
    const double cell = static_cast<double>(enc.cfg.patch_side);
    const std::vector<S>& raw = cells.data();

    auto sigm = [](double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); };

    std::vector<std::vector<detection>> out(bsz);
    for (std::size_t b = 0; b < bsz; ++b) {
        std::vector<detection> dets;
        for (std::size_t i = 0; i < n; ++i) {
            const S* row = raw.data() + (b * n + i) * width;
            std::size_t best_c = 0;
            for (std::size_t c = 1; c < k; ++c)
                if (row[5 + c] > row[5 + best_c]) best_c = c;
            double denom = 0;
            for (std::size_t c = 0; c < k; ++c)
                denom += std::exp(static_cast<double>(row[5 + c]) -
                                  static_cast<double>(row[5 + best_c]));
            const double score = sigm(static_cast<double>(row[0])) / denom;
            if (score < score_threshold) continue;

            const double col = static_cast<double>(i % g), rrow = static_cast<double>(i / g);
            const double cx = (col + 0.5 + static_cast<double>(row[1])) * cell;
            const double cy = (rrow + 0.5 + static_cast<double>(row[2])) * cell;
            const double bw = std::exp(static_cast<double>(row[3])) * cell;
            const double bh = std::exp(static_cast<double>(row[4])) * cell;
            box bx;
            bx.class_id = best_c;
            bx.x_min = cx - bw / 2;
            bx.x_max = cx + bw / 2;
            bx.y_min = cy - bh / 2;
            bx.y_max = cy + bh / 2;
            dets.push_back({bx, score});
        }
        out[b] = detail::nms(std::move(dets), nms_iou);
    }
    return out;
}

namespace detail {

// Cell-level regression targets for one batch: the cell under each box
// center becomes positive and carries offsets, log sizes, and the class.
// If two boxes land in the same cell the later one wins the cell.
struct cell_targets {
    std::vector<float> obj;      // [B * n]
    std::vector<float> box_reg;  // [B * n * 4]
    std::vector<float> pos4;     // [B * n * 4], 1 on positive cells
    std::vector<float> onehot;   // [B * n * K]
    std::size_t n_pos = 0;
};

inline cell_targets assign_cells(const std::vector<const std::vector<box>*>& boxes_per_image,
                                 std::size_t grid, double cell, std::size_t num_classes) {
    const std::size_t bsz = boxes_per_image.size();
    const std::size_t n = grid * grid;
    cell_targets t;
    t.obj.assign(bsz * n, 0.f);
    t.box_reg.assign(bsz * n * 4, 0.f);
    t.pos4.assign(bsz * n * 4, 0.f);
    t.onehot.assign(bsz * n * num_classes, 0.f);

    for (std::size_t b = 0; b < bsz; ++b)
        for (const box& g : *boxes_per_image[b]) {
            if (g.class_id >= num_classes)
                throw validation_error("box class " + std::to_string(g.class_id) +
                                       " out of range for " + std::to_string(num_classes) +
                                       " classes");
            const double cx = (g.x_min + g.x_max) / 2, cy = (g.y_min + g.y_max) / 2;
            const auto clamp_cell = [&](double v) {
                return std::min<std::size_t>(grid - 1,
                                             static_cast<std::size_t>(std::max(0.0, v / cell)));
            };
            const std::size_t col = clamp_cell(cx), row = clamp_cell(cy);
            const std::size_t i = b * n + row * grid + col;
            if (t.obj[i] == 0.f) ++t.n_pos;
            t.obj[i] = 1.f;
            t.box_reg[i * 4 + 0] = static_cast<float>(cx / cell - (static_cast<double>(col) + 0.5));
            t.box_reg[i * 4 + 1] = static_cast<float>(cy / cell - (static_cast<double>(row) + 0.5));
            t.box_reg[i * 4 + 2] = static_cast<float>(std::log((g.x_max - g.x_min) / cell));
            t.box_reg[i * 4 + 3] = static_cast<float>(std::log((g.y_max - g.y_min) / cell));
            for (std::size_t j = 0; j < 4; ++j) t.pos4[i * 4 + j] = 1.f;
            for (std::size_t c = 0; c < num_classes; ++c) t.onehot[i * num_classes + c] = 0.f;
            t.onehot[i * num_classes + g.class_id] = 1.f;
        }
    return t;
}

// Objectness BCE balanced between positive and negative cells (a box
// occupies one cell in dozens, so a plain mean lets the background term
// drown the positives), plus squared-error box regression and class
// cross-entropy on positive cells, the latter two averaged by the
// positive-cell count.
template <class S>
tensor<S> detection_loss(const tensor<S>& cells, const cell_targets& t, std::size_t num_classes) {
    const std::size_t bsz = cells.dim(0), n = cells.dim(1);
    const S pos_norm = static_cast<S>(1.0 / static_cast<double>(std::max<std::size_t>(1, t.n_pos)));

    tensor<S> obj_z = slice(cells, 2, 0, 1);
    tensor<S> obj_t = tensor<S>::from({bsz, n, 1}, std::vector<S>(t.obj.begin(), t.obj.end()));
    const double n_neg = static_cast<double>(bsz * n - t.n_pos);
    std::vector<S> obj_w(bsz * n);
    for (std::size_t i = 0; i < bsz * n; ++i) {
        if (t.obj[i] > 0.5f)
            obj_w[i] = static_cast<S>(0.5 / static_cast<double>(t.n_pos));
        else
            obj_w[i] = static_cast<S>((t.n_pos > 0 ? 0.5 : 1.0) / std::max(1.0, n_neg));
    }
    tensor<S> obj_wt = tensor<S>::from({bsz, n, 1}, std::move(obj_w));
    tensor<S> obj_loss = sum(mul(sub(softplus(obj_z), mul(obj_t, obj_z)), obj_wt));

    tensor<S> box_z = slice(cells, 2, 1, 4);
    tensor<S> box_t =
        tensor<S>::from({bsz, n, 4}, std::vector<S>(t.box_reg.begin(), t.box_reg.end()));
    tensor<S> box_m = tensor<S>::from({bsz, n, 4}, std::vector<S>(t.pos4.begin(), t.pos4.end()));
    tensor<S> d = sub(box_z, box_t);
    tensor<S> box_loss = mul_scalar(sum(mul(mul(d, d), box_m)), pos_norm);

    tensor<S> cls_z = slice(cells, 2, 5, num_classes);
    tensor<S> cls_t =
        tensor<S>::from({bsz, n, num_classes}, std::vector<S>(t.onehot.begin(), t.onehot.end()));
    tensor<S> cls_loss = mul_scalar(sum(mul(log_softmax(cls_z, 2), cls_t)), -pos_norm);

    return add(add(obj_loss, box_loss), cls_loss);
}

}  // namespace detail

// ------------------------------------------------------------ fine-tune loop

// One training example, already resized to the encoder's input side and
// normalized. Classification tasks read `labels`; localization reads
// `boxes` (absolute pixels in this image's coordinates).
struct task_sample {
    tensor<float> img;  // [C, side, side]
    std::vector<label_state> labels;
    std::vector<box> boxes;
};

namespace detail {

inline std::size_t single_positive_index(const std::vector<label_state>& labels,
                                         std::size_t sample_idx) {
    std::size_t found = labels.size();
    std::size_t count = 0;
    for (std::size_t k = 0; k < labels.size(); ++k)
        if (labels[k] == label_state::positive) {
            found = k;
            ++count;
        }
    if (count != 1)
        throw validation_error("multiclass sample " + std::to_string(sample_idx) + " has " +
                               std::to_string(count) + " positive labels, expected exactly 1");
    return found;
}

// Class-membership pools for the shot cap. Classification: the classes a
// sample is positive for; binary adds a pool for the negatives so both
// sides of the task stay populated. Localization: the classes of the
// sample's boxes.
inline std::vector<std::size_t> sample_pools(const task_sample& s, const finetune_config& cfg) {
    std::vector<std::size_t> pools;
    if (cfg.task == task_kind::localization) {
        for (const box& b : s.boxes) {
            if (std::find(pools.begin(), pools.end(), b.class_id) == pools.end())
                pools.push_back(b.class_id);
        }
        return pools;
    }
    for (std::size_t k = 0; k < s.labels.size(); ++k)
        if (s.labels[k] == label_state::positive) pools.push_back(k);
    if (cfg.task == task_kind::binary && !s.labels.empty() &&
        s.labels[0] == label_state::negative)
        pools.push_back(cfg.num_classes);  // the negative pool
    return pools;
}

}  // namespace detail

// Caps the training set at `shots` samples per class, deterministically
// for a given seed. Samples are visited in a seeded random order and kept
// while any of their classes still has quota; with disjoint classes
// (multiclass, binary) each class ends up with exactly
// min(shots, available) samples. Samples positive for nothing are dropped.
// No cap configured: returns every index.
inline std::vector<std::size_t> few_shot_subset(const std::vector<task_sample>& samples,
                                                const finetune_config& cfg) {
    std::vector<std::size_t> keep;
    if (!cfg.shots) {
        keep.resize(samples.size());
        for (std::size_t i = 0; i < samples.size(); ++i) keep[i] = i;
        return keep;
    }
    const std::size_t quota = *cfg.shots;
    const std::size_t n_pools = cfg.num_classes + (cfg.task == task_kind::binary ? 1 : 0);
    std::vector<std::size_t> taken(n_pools, 0);

    rng r(mix_seed(cfg.seed, 4));
    for (std::size_t i : r.permutation(samples.size())) {
        const std::vector<std::size_t> pools = detail::sample_pools(samples[i], cfg);
        bool admit = false;
        for (std::size_t p : pools) {
            if (p >= n_pools)
                throw validation_error("sample " + std::to_string(i) + " references class " +
                                       std::to_string(p) + ", config has " +
                                       std::to_string(cfg.num_classes));
            admit = admit || taken[p] < quota;
        }
        if (!admit) continue;
        for (std::size_t p : pools) ++taken[p];
        keep.push_back(i);
    }
    std::sort(keep.begin(), keep.end());
    return keep;
}

struct finetune_epoch {
    std::size_t epoch = 0;
    double train_loss = 0;  // mean over the epoch's batches
    double val_metric = 0;  // macro AUROC, or macro AP50 for localization
    double lr_last = 0;     // learning rate of the epoch's final step
};

struct finetune_result {
    std::vector<finetune_epoch> history;
    std::size_t best_epoch = 0;
    double best_metric = 0;
    checkpoint best;  // parameters as of the best epoch
    std::vector<std::size_t> train_subset;  // indices actually trained on
};

namespace detail {

// Stacks samples into an image batch tensor [B, C, side, side].
inline tensor<float> stack_images(const std::vector<task_sample>& samples,
                                  const std::vector<std::size_t>& ids) {
    if (samples[ids[0]].img.rank() != 3)
        throw dim_error("sample images must be [C, H, W], got " +
                        shape_str(samples[ids[0]].img.shape()));
    const shape_t s = samples[ids[0]].img.shape();
    const std::size_t per = shape_numel(s);
    std::vector<float> vals(ids.size() * per);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const tensor<float>& im = samples[ids[i]].img;
        if (im.shape() != s)
            throw dim_error("sample " + std::to_string(ids[i]) + " has shape " +
                            shape_str(im.shape()) + ", batch expects " + shape_str(s));
        std::copy(im.data().begin(), im.data().end(),
                  vals.begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    return tensor<float>::from({ids.size(), s[0], s[1], s[2]}, std::move(vals));
}

// Row-wise probabilities from logit values: softmax for multiclass,
// element-wise sigmoid otherwise.
inline std::vector<std::vector<double>> class_probabilities(const std::vector<float>& logits,
                                                            std::size_t k, task_kind task) {
    const std::size_t bsz = logits.size() / k;
    std::vector<std::vector<double>> probs(bsz, std::vector<double>(k));
    for (std::size_t i = 0; i < bsz; ++i) {
        const float* row = logits.data() + i * k;
        if (task == task_kind::multiclass) {
            double mx = row[0];
            for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(row[j]));
            double denom = 0;
            for (std::size_t j = 0; j < k; ++j) {
                probs[i][j] = std::exp(static_cast<double>(row[j]) - mx);
                denom += probs[i][j];
            }
            for (std::size_t j = 0; j < k; ++j) probs[i][j] /= denom;
        } else {
            for (std::size_t j = 0; j < k; ++j) {
                const double z = row[j];
                probs[i][j] = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
            }
        }
    }
    return probs;
}

// Macro AUROC over the classes where it is defined; classes with one
// label value present are skipped the way absent table cells are.
inline double val_macro_auroc(const std::vector<std::vector<double>>& probs,
                              const std::vector<task_sample>& samples, std::size_t k) {
    std::vector<std::optional<double>> per_class(k);
    for (std::size_t c = 0; c < k; ++c) {
        std::vector<double> scores;
        std::vector<int> labels;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            if (samples[i].labels[c] == label_state::unannotated) continue;
            scores.push_back(probs[i][c]);
            labels.push_back(samples[i].labels[c] == label_state::positive ? 1 : 0);
        }
        try {
            if (!scores.empty()) per_class[c] = auroc(scores, labels);
        } catch (const undefined_metric_error&) {
        }
    }
    return macro_average(per_class);
}

inline double val_macro_ap50(const std::vector<std::vector<detection>>& dets,
                             const std::vector<task_sample>& samples, std::size_t k) {
    std::vector<std::vector<box>> gts(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) gts[i] = samples[i].boxes;
    std::vector<std::optional<double>> per_class(k);
    for (std::size_t c = 0; c < k; ++c) per_class[c] = ap50(dets, gts, c);
    return macro_average(per_class);
}

}  // namespace detail

// Adapts a pretrained encoder to one downstream task. The encoder weights
// come from the checkpoint (its config carries the geometry under
// "model"); the task head starts fresh. Each epoch shuffles with its own
// seeded stream, and after each epoch the validation metric is computed;
// the parameters of the best epoch (ties to the earlier one) are returned
// as a finetune checkpoint. With freeze_encoder only the head is updated.
inline finetune_result finetune_loop(const std::vector<task_sample>& train,
                                     const std::vector<task_sample>& val,
                                     const checkpoint& encoder_ckpt, const finetune_config& cfg) {
    cfg.validate();
    if (train.empty()) throw config_error("finetune: training set is empty");
    if (val.empty()) throw config_error("finetune: validation set is empty");
    if (!encoder_ckpt.config.contains("model"))
        throw config_error("encoder checkpoint config lacks a 'model' section");
    const vit_config mc = vit_config_from_json(encoder_ckpt.config.at("model"));

    for (const std::vector<task_sample>* split : {&train, &val})
        for (std::size_t i = 0; i < split->size(); ++i) {
            const task_sample& s = (*split)[i];
            if (is_classification(cfg.task) && s.labels.size() != cfg.num_classes)
                throw validation_error("sample " + std::to_string(i) + " carries " +
                                       std::to_string(s.labels.size()) + " labels, config says " +
                                       std::to_string(cfg.num_classes));
        }

    // Fresh model, then the pretrained encoder weights over it.
    rng enc_rng(mix_seed(cfg.seed, 0x1417));
    vit_params<float> enc = vit_params<float>::init(mc, enc_rng);
    const std::size_t hidden = cfg.head_hidden ? cfg.head_hidden : mc.embed_dim;
    rng head_rng(mix_seed(cfg.seed, 0x4EAD));
    mlp_head<float> cls_head;
    det_head<float> box_head;
    std::vector<std::pair<std::string, tensor<float>>> params = enc.named("encoder.");
    if (cfg.task == task_kind::localization) {
        box_head = det_head<float>::init(mc.embed_dim, cfg.num_classes, head_rng);
        for (auto& kv : box_head.named("head.")) params.push_back(kv);
    } else {
        cls_head = mlp_head<float>::init(mc.embed_dim, hidden, cfg.num_classes, head_rng);
        for (auto& kv : cls_head.named("head.")) params.push_back(kv);
    }
    load_encoder_into(encoder_ckpt, params);

    std::vector<tensor<float>> trainable;
    for (auto& [name, t] : params)
        if (!cfg.freeze_encoder || name.rfind("encoder.", 0) != 0) trainable.push_back(t);

    finetune_result result;
    result.train_subset = few_shot_subset(train, cfg);
    if (result.train_subset.empty())
        throw validation_error("finetune: shot cap left the training set empty");

    const std::size_t n_train = result.train_subset.size();
    const std::size_t steps_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = cfg.epochs * steps_per_epoch;
    const std::size_t warmup_steps = cfg.warmup_epochs * steps_per_epoch;

    optim_state<float> opt;
    opt.weight_decay = static_cast<float>(cfg.weight_decay);

    auto eval_metric = [&]() {
        if (cfg.task == task_kind::localization) {
            std::vector<std::vector<detection>> dets;
            for (std::size_t start = 0; start < val.size(); start += cfg.batch_size) {
                std::vector<std::size_t> ids;
                for (std::size_t i = start; i < std::min(val.size(), start + cfg.batch_size); ++i)
                    ids.push_back(i);
                auto batch_dets = localization_forward(detail::stack_images(val, ids), enc,
                                                       box_head, cfg.score_threshold, cfg.nms_iou);
                for (auto& d : batch_dets) dets.push_back(std::move(d));
            }
            return detail::val_macro_ap50(dets, val, cfg.num_classes);
        }
        std::vector<std::vector<double>> probs;
        for (std::size_t start = 0; start < val.size(); start += cfg.batch_size) {
            std::vector<std::size_t> ids;
            for (std::size_t i = start; i < std::min(val.size(), start + cfg.batch_size); ++i)
                ids.push_back(i);
            tensor<float> logits = classifier_forward(detail::stack_images(val, ids), enc, cls_head);
            auto batch = detail::class_probabilities(logits.data(), cfg.num_classes, cfg.task);
            for (auto& p : batch) probs.push_back(std::move(p));
        }
        return detail::val_macro_auroc(probs, val, cfg.num_classes);
    };

    std::size_t global_step = 0;
    double best = -std::numeric_limits<double>::infinity();
    std::vector<named_tensor> best_tensors;
    std::size_t best_step = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double epoch_loss = 0;
        double lr_last = 0;
        std::size_t batches = 0;
        for (const std::vector<std::size_t>& plan :
             index_batches(n_train, cfg.batch_size, mix_seed(cfg.seed, 1), epoch)) {
            std::vector<std::size_t> ids;
            for (std::size_t j : plan) ids.push_back(result.train_subset[j]);
            tensor<float> images = detail::stack_images(train, ids);

            tensor<float> loss;
            if (cfg.task == task_kind::localization) {
                tensor<float> x = detail::encode_all_patches(images, enc);
                const std::size_t cls_off = mc.use_cls ? 1 : 0;
                tensor<float> cells =
                    linear(slice(x, 1, cls_off, mc.n_patches()), box_head.w, box_head.b);
                std::vector<const std::vector<box>*> gt;
                for (std::size_t i : ids) gt.push_back(&train[i].boxes);
                const auto targets = detail::assign_cells(
                    gt, mc.grid(), static_cast<double>(mc.patch_side), cfg.num_classes);
                loss = detail::detection_loss(cells, targets, cfg.num_classes);
            } else if (cfg.task == task_kind::multiclass) {
                std::vector<std::size_t> target;
                for (std::size_t i : ids)
                    target.push_back(detail::single_positive_index(train[i].labels, i));
                loss = smoothed_loss(classifier_forward(images, enc, cls_head), target,
                                     cfg.label_smoothing, cfg.task);
            } else {
                std::vector<std::vector<label_state>> target;
                for (std::size_t i : ids) target.push_back(train[i].labels);
                loss = smoothed_loss(classifier_forward(images, enc, cls_head), target,
                                     cfg.label_smoothing, cfg.task);
            }

            const double loss_v = static_cast<double>(loss.item());
            if (!std::isfinite(loss_v))
                throw numeric_error("finetune: non-finite loss at step " +
                                    std::to_string(global_step));
            zero_grads(trainable);
            loss.backward();
            lr_last = lr_schedule(global_step + 1, total_steps, warmup_steps, cfg.peak_lr,
                                  cfg.min_lr);
            opt.lr = static_cast<float>(lr_last);
            optimizer_step(trainable, opt);

            epoch_loss += loss_v;
            batches += 1;
            global_step += 1;
        }

        const double metric = eval_metric();
        result.history.push_back(
            {epoch, epoch_loss / static_cast<double>(batches), metric, lr_last});
        if (metric > best) {
            best = metric;
            result.best_epoch = epoch;
            best_tensors = snapshot_params(params);
            best_step = global_step;
        }
    }

    result.best_metric = best;
    result.best.kind = "finetune";
    result.best.step = best_step;
    result.best.epoch = result.best_epoch;
    result.best.metric = best;
    result.best.config = nlohmann::json{{"model", vit_config_to_json(mc)},
                                        {"task", task_name(cfg.task)},
                                        {"num_classes", cfg.num_classes},
                                        {"head_hidden", hidden},
                                        {"label_smoothing", cfg.label_smoothing},
                                        {"score_threshold", cfg.score_threshold},
                                        {"nms_iou", cfg.nms_iou}};
    result.best.tensors = std::move(best_tensors);
    return result;
}

// A fine-tuned model rebuilt from its checkpoint: encoder plus whichever
// head the task used. Parameter name sets must match exactly.
struct adapted_model {
    vit_config mcfg;
    task_kind task = task_kind::multilabel;
    double score_threshold = 0.25;
    double nms_iou = 0.5;
    vit_params<float> enc;
    mlp_head<float> cls_head;
    det_head<float> box_head;
};

inline adapted_model restore_adapted(const checkpoint& c) {
    if (c.kind != "finetune")
        throw validation_error("expected a finetune checkpoint, got kind '" + c.kind + "'");
    for (const char* key : {"model", "task", "num_classes", "head_hidden"})
        if (!c.config.contains(key))
            throw config_error(std::string("finetune checkpoint config lacks '") + key + "'");

    adapted_model m;
    m.mcfg = vit_config_from_json(c.config.at("model"));
    m.task = parse_task(c.config.at("task").get<std::string>());
    if (c.config.contains("score_threshold")) m.score_threshold = c.config.at("score_threshold").get<double>();
    if (c.config.contains("nms_iou")) m.nms_iou = c.config.at("nms_iou").get<double>();
    const std::size_t k = c.config.at("num_classes").get<std::size_t>();
    const std::size_t hidden = c.config.at("head_hidden").get<std::size_t>();

    rng r(1);  // shapes only; every value is overwritten by the checkpoint
    m.enc = vit_params<float>::init(m.mcfg, r);
    std::vector<std::pair<std::string, tensor<float>>> params = m.enc.named("encoder.");
    if (m.task == task_kind::localization) {
        m.box_head = det_head<float>::init(m.mcfg.embed_dim, k, r);
        for (auto& kv : m.box_head.named("head.")) params.push_back(kv);
    } else {
        m.cls_head = mlp_head<float>::init(m.mcfg.embed_dim, hidden, k, r);
        for (auto& kv : m.cls_head.named("head.")) params.push_back(kv);
    }
    load_params_into(c, params);
    return m;
}

}  // namespace maebench
