// maebench: one binary for the whole desk-scale pipeline. Subcommands build
// dataset manifests (ingest), run masked-autoencoder pretraining (pretrain),
// adapt the encoder to a task (finetune), score an adapted checkpoint
// (evaluate), visualize reconstructions (reconstruct), and render metric
// tables (report). Runs are bitwise reproducible for identical (config,
// seed, inputs); every run directory carries its resolved config, a version
// stamp, and hashes of the files it consumed.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "maebench/checkpoint.hpp"
#include "maebench/config.hpp"
#include "maebench/dataset.hpp"
#include "maebench/errors.hpp"
#include "maebench/finetune.hpp"
#include "maebench/image.hpp"
#include "maebench/mae.hpp"
#include "maebench/metrics.hpp"
#include "maebench/vit.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "maebench 0.1.0";

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitIntegrity = 4;

struct error_class {
    int code;
    const char* kind;
    const char* type;
};

error_class classify(const std::exception& e) {
    using namespace maebench;
    if (dynamic_cast<const config_error*>(&e)) return {kExitConfig, "config", "config_error"};
    if (dynamic_cast<const io_error*>(&e)) return {kExitData, "data", "io_error"};
    if (dynamic_cast<const format_error*>(&e)) return {kExitData, "data", "format_error"};
    if (dynamic_cast<const parse_error*>(&e)) return {kExitData, "data", "parse_error"};
    if (dynamic_cast<const validation_error*>(&e)) return {kExitData, "data", "validation_error"};
    if (dynamic_cast<const schema_error*>(&e)) return {kExitData, "data", "schema_error"};
    if (dynamic_cast<const degenerate_sample_error*>(&e))
        return {kExitData, "data", "degenerate_sample_error"};
    if (dynamic_cast<const integrity_error*>(&e))
        return {kExitIntegrity, "integrity", "integrity_error"};
    if (dynamic_cast<const numeric_error*>(&e)) return {kExitIntegrity, "numeric", "numeric_error"};
    if (dynamic_cast<const undefined_metric_error*>(&e))
        return {kExitIntegrity, "numeric", "undefined_metric_error"};
    if (dynamic_cast<const maebench::error*>(&e)) return {kExitIntegrity, "internal", "error"};
    return {kExitIntegrity, "internal", "exception"};
}

// Commands run inside this guard; failures print one JSON object to stdout
// (machines) and a plain line to stderr (humans), and pick the exit code
// from the error family.
template <class F>
int run_guarded(const std::string& command, F&& body) {
    try {
        return body();
    } catch (const std::exception& e) {
        const error_class c = classify(e);
        json err;
        err["error"] = {{"kind", c.kind}, {"type", c.type}, {"message", e.what()}};
        std::cout << err.dump() << "\n";
        std::cerr << "maebench " << command << ": " << e.what() << "\n";
        return c.code;
    }
}

std::size_t resolve_threads(std::size_t flag_value) {
    if (flag_value > 0) return flag_value;
    if (const char* env = std::getenv("MAEBENCH_THREADS")) {
        char* end = nullptr;
        const unsigned long v = std::strtoul(env, &end, 10);
        if (end && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
        std::cerr << "note: ignoring unparsable MAEBENCH_THREADS='" << env << "'\n";
    }
    return 1;
}

std::uint64_t hash_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw maebench::io_error("cannot open for hashing: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    const std::string bytes = std::move(buf).str();
    return maebench::fnv1a64(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size());
}

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw maebench::io_error("cannot write " + path.string());
    out << text;
}

// Every run directory gets run.json (version stamp, command, seed, input
// hashes) and, when the command is config-driven, the fully resolved config.
// No clock output anywhere: reruns must be bitwise identical.
void stamp_run(const fs::path& out_dir, const std::string& command, std::uint64_t seed,
               const std::vector<std::string>& inputs,
               const maebench::experiment_config* cfg = nullptr) {
    fs::create_directories(out_dir);
    json stamp;
    stamp["version"] = kVersion;
    stamp["command"] = command;
    stamp["seed"] = seed;
    json hashes = json::object();
    for (const std::string& path : inputs)
        hashes[path] = maebench::hash_hex(hash_file(path));
    stamp["inputs"] = std::move(hashes);
    write_text_file(out_dir / "run.json", stamp.dump(2) + "\n");
    if (cfg) write_text_file(out_dir / "config.resolved.ini", render_experiment_config(*cfg));
}

maebench::tensor<float> image_to_tensor(const maebench::image& im) {
    return maebench::tensor<float>::from({1, im.height, im.width}, std::vector<float>(im.pix));
}

maebench::image tensor_to_image(const maebench::tensor<float>& t) {
    if (t.rank() != 3 || t.dim(0) != 1)
        throw maebench::dim_error("expected a [1, H, W] tensor, got " +
                                  maebench::shape_str(t.shape()));
    maebench::image im = maebench::image::make(t.dim(1), t.dim(2));
    im.pix = t.data();
    return im;
}

// The deterministic transform every command uses: manifest normalization
// constants, model input size. At the paper's 224 input the working
// resolution is the paper's 512; other sizes resize straight to the input.
maebench::augment_config transform_for(const maebench::manifest& m,
                                               std::size_t image_side) {
    maebench::augment_config cfg;
    cfg.out_side = image_side;
    cfg.resize_side = image_side == 224 ? 512 : image_side;
    cfg.normalize_mean = m.mean;
    cfg.normalize_std = m.std_dev;
    return cfg;
}

fs::path resolve_image_path(const fs::path& manifest_dir, const std::string& rel) {
    fs::path p(rel);
    return p.is_relative() ? manifest_dir / p : p;
}

// Loads and transforms every record's image, in manifest order, fanning the
// decode over `workers` threads. The records are independent, so the worker
// count cannot affect the result.
template <class Fn>
void parallel_records(std::size_t count, std::size_t workers, Fn&& body) {
    std::atomic<std::size_t> cursor{0};
    std::exception_ptr first_error;
    std::mutex error_mu;
    auto work = [&]() {
        for (;;) {
            const std::size_t i = cursor.fetch_add(1);
            if (i >= count) return;
            try {
                body(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };
    if (workers <= 1 || count <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        const std::size_t n = std::min(workers, count);
        pool.reserve(n);
        for (std::size_t t = 0; t < n; ++t) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    if (first_error) std::rethrow_exception(first_error);
}

std::vector<maebench::tensor<float>> load_image_tensors(const maebench::manifest& m,
                                                        const fs::path& manifest_dir,
                                                        const maebench::augment_config& t,
                                                        std::size_t workers) {
    std::vector<maebench::tensor<float>> out(m.records.size());
    parallel_records(m.records.size(), workers, [&](std::size_t i) {
        const maebench::image raw =
            maebench::load_image(resolve_image_path(manifest_dir, m.records[i].image_path).string());
        out[i] = image_to_tensor(maebench::eval_transform(raw, t));
    });
    return out;
}

// Builds task samples: transformed image plus labels, with box coordinates
// rescaled from original pixels to the model's input square. Both resizes in
// the eval transform act on the full frame, so the map is a pure per-axis
// scale.
std::vector<maebench::task_sample> load_task_samples(const maebench::manifest& m,
                                                     const fs::path& manifest_dir,
                                                     const maebench::augment_config& t,
                                                     std::size_t workers) {
    std::vector<maebench::task_sample> out(m.records.size());
    parallel_records(m.records.size(), workers, [&](std::size_t i) {
        const maebench::sample_record& rec = m.records[i];
        const maebench::image raw =
            maebench::load_image(resolve_image_path(manifest_dir, rec.image_path).string());
        out[i].img = image_to_tensor(maebench::eval_transform(raw, t));
        out[i].labels = rec.labels;
        const double sx = static_cast<double>(t.out_side) / static_cast<double>(raw.width);
        const double sy = static_cast<double>(t.out_side) / static_cast<double>(raw.height);
        for (maebench::box b : rec.boxes) {
            b.x_min *= sx;
            b.x_max *= sx;
            b.y_min *= sy;
            b.y_max *= sy;
            out[i].boxes.push_back(b);
        }
    });
    return out;
}

std::string dataset_label(const std::string& manifest_path) {
    return fs::path(manifest_path).stem().string();
}

// A manifest carries all splits of a dataset; each command works on the one
// split its stage owns, so held-out images never leak into training.
maebench::manifest take_split(const maebench::manifest& m, const std::string& split,
                              const std::string& from) {
    maebench::manifest out;
    out.classes = m.classes;
    out.mean = m.mean;
    out.std_dev = m.std_dev;
    for (const maebench::sample_record& r : m.records)
        if (r.split == split) out.records.push_back(r);
    if (out.records.empty())
        throw maebench::validation_error(from + " has no records in split '" + split + "'");
    return out;
}

// ------------------------------------------------------------------ ingest

struct ingest_args {
    std::string dir;
    std::string labels_csv;
    std::string out_manifest;
    bool chest_crop = false;
};

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) cells.push_back(maebench::detail::trim(cell));
    if (!line.empty() && line.back() == ',') cells.push_back("");
    return cells;
}

maebench::label_state parse_label_cell(const std::string& cell, std::size_t lineno) {
    if (cell == "1") return maebench::label_state::positive;
    if (cell == "0") return maebench::label_state::negative;
    if (cell.empty() || cell == "/") return maebench::label_state::unannotated;
    throw maebench::parse_error("labels line " + std::to_string(lineno) + ": label cell must be 1, 0, '/' or empty, got '" +
                                cell + "'");
}

std::vector<maebench::box> parse_box_cell(const std::string& cell, std::size_t lineno,
                                          std::size_t num_classes) {
    std::vector<maebench::box> boxes;
    if (cell.empty()) return boxes;
    std::istringstream groups(cell);
    std::string group;
    while (std::getline(groups, group, ';')) {
        std::istringstream parts(group);
        std::string part;
        std::vector<std::string> f;
        while (std::getline(parts, part, ':')) f.push_back(part);
        if (f.size() != 5)
            throw maebench::parse_error("labels line " + std::to_string(lineno) +
                                        ": box must be class:x_min:y_min:x_max:y_max, got '" +
                                        group + "'");
        try {
            maebench::box b;
            std::size_t used = 0;
            const unsigned long long cid = std::stoull(f[0], &used);
            if (used != f[0].size()) throw std::invalid_argument(f[0]);
            b.class_id = static_cast<std::size_t>(cid);
            b.x_min = std::stod(f[1]);
            b.y_min = std::stod(f[2]);
            b.x_max = std::stod(f[3]);
            b.y_max = std::stod(f[4]);
            if (b.class_id >= num_classes)
                throw maebench::parse_error("labels line " + std::to_string(lineno) + ": box class " +
                                            f[0] + " out of range for " +
                                            std::to_string(num_classes) + " classes");
            boxes.push_back(b);
        } catch (const maebench::parse_error&) {
            throw;
        } catch (const std::exception&) {
            throw maebench::parse_error("labels line " + std::to_string(lineno) +
                                        ": unparsable box '" + group + "'");
        }
    }
    return boxes;
}

// CSV layout: header `image,split,<class names...>[,boxes]`, one row per
// sample. Plain cells only (no quoting). Box cells pack
// class:x_min:y_min:x_max:y_max groups separated by ';'.
int cmd_ingest(const ingest_args& args) {
    std::ifstream csv(args.labels_csv);
    if (!csv) throw maebench::io_error("cannot open label file: " + args.labels_csv);

    std::string line;
    if (!std::getline(csv, line))
        throw maebench::parse_error("labels line 1: header row is missing");
    std::vector<std::string> header = split_csv_line(line);
    if (header.size() < 3 || header[0] != "image" || header[1] != "split")
        throw maebench::parse_error(
            "labels line 1: header must start 'image,split' followed by class names");
    bool has_boxes_col = header.back() == "boxes";
    maebench::manifest m;
    m.classes.assign(header.begin() + 2, header.end() - (has_boxes_col ? 1 : 0));
    if (m.classes.empty())
        throw maebench::parse_error("labels line 1: no class columns declared");
    if (has_boxes_col && args.chest_crop)
        throw maebench::validation_error(
            "chest-crop ingestion does not support box labels; boxes would need shifting by a "
            "per-image crop origin");

    const fs::path out_path(args.out_manifest);
    const fs::path manifest_dir = out_path.parent_path().empty() ? fs::path(".")
                                                                 : out_path.parent_path();
    fs::create_directories(manifest_dir);
    const fs::path crop_dir = manifest_dir / "cropped";
    if (args.chest_crop) fs::create_directories(crop_dir);

    double px_sum = 0, px_sumsq = 0;
    std::uint64_t px_count = 0;
    std::vector<std::string> problems;

    std::size_t lineno = 1;
    while (std::getline(csv, line)) {
        ++lineno;
        if (maebench::detail::trim(line).empty()) continue;
        std::vector<std::string> cells = split_csv_line(line);
        if (cells.size() != header.size())
            throw maebench::parse_error("labels line " + std::to_string(lineno) + ": expected " +
                                        std::to_string(header.size()) + " cells, got " +
                                        std::to_string(cells.size()));
        maebench::sample_record rec;
        // Manifest paths are relative to the manifest's own directory so the
        // dataset can be moved as a unit.
        std::error_code ec;
        const fs::path abs_img = fs::absolute(fs::path(args.dir) / cells[0]);
        const fs::path rel_img = fs::proximate(abs_img, fs::absolute(manifest_dir), ec);
        rec.image_path = ec ? abs_img.string() : rel_img.string();
        rec.id = fs::path(cells[0]).stem().string();
        rec.split = cells[1];
        if (rec.split != "train" && rec.split != "val" && rec.split != "test")
            throw maebench::parse_error("labels line " + std::to_string(lineno) +
                                        ": split must be train, val, or test, got '" + rec.split +
                                        "'");
        for (std::size_t c = 0; c < m.classes.size(); ++c)
            rec.labels.push_back(parse_label_cell(cells[2 + c], lineno));
        if (has_boxes_col) rec.boxes = parse_box_cell(cells.back(), lineno, m.classes.size());

        maebench::image im = maebench::load_image(abs_img.string());
        if (args.chest_crop) {
            im = maebench::chest_crop(im);
            const fs::path cropped = crop_dir / (rec.id + ".pgm");
            maebench::save_pgm(cropped.string(), im, 65535);
            rec.image_path = fs::relative(cropped, manifest_dir).string();
        }
        rec.width = im.width;
        rec.height = im.height;

        for (const maebench::box& b : rec.boxes)
            if (!(b.x_min < b.x_max && b.y_min < b.y_max && b.x_min >= 0 && b.y_min >= 0 &&
                  b.x_max <= static_cast<double>(rec.width) &&
                  b.y_max <= static_cast<double>(rec.height)))
                problems.push_back("record " + rec.id + ": box out of bounds for " +
                                   std::to_string(rec.width) + "x" + std::to_string(rec.height));

        if (rec.split == "train") {
            for (float v : im.pix) {
                px_sum += v;
                px_sumsq += static_cast<double>(v) * v;
            }
            px_count += im.pix.size();
        }
        m.records.push_back(std::move(rec));
    }
    if (!problems.empty()) {
        std::string msg = "invalid boxes:";
        for (const std::string& p : problems) msg += "\n  " + p;
        throw maebench::validation_error(msg);
    }

    if (px_count > 0) {
        const double mean = px_sum / static_cast<double>(px_count);
        const double var = px_sumsq / static_cast<double>(px_count) - mean * mean;
        m.mean = mean;
        if (var > 1e-12) {
            m.std_dev = std::sqrt(var);
        } else {
            std::cerr << "note: train pixels are constant; keeping default std 0.25\n";
        }
    } else {
        std::cerr << "note: no train-split pixels; keeping default normalization 0.5/0.25\n";
    }

    maebench::write_manifest(out_path.string(), m);
    json summary;
    summary["manifest"] = out_path.string();
    summary["records"] = m.records.size();
    summary["classes"] = m.classes.size();
    summary["mean"] = m.mean;
    summary["std"] = m.std_dev;
    std::cout << summary.dump() << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------- pretrain

struct flagged {
    std::string config_path;
    std::string data_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::size_t threads = 0;
};

maebench::experiment_config resolve_config(const flagged& f) {
    maebench::experiment_config cfg;
    if (!f.config_path.empty()) {
        try {
            cfg = maebench::parse_experiment_config(f.config_path);
        } catch (const maebench::io_error& e) {
            // an unreadable config file is a configuration problem, not a
            // data problem; keep it in the exit-2 family
            throw maebench::config_error(e.what());
        }
    }
    if (f.seed_set) {
        cfg.run.seed = f.seed;
        cfg.pretrain.seed = f.seed;
        cfg.finetune.seed = f.seed;
    }
    if (!f.out_dir.empty()) cfg.run.out = f.out_dir;
    return cfg;
}

// Per-epoch augmentation for pretraining, operating on the already-resized
// normalized input: crop scale and flip odds from the standard chain, output
// size pinned to the model input.
maebench::augment_fn<float> make_pretrain_augment(const maebench::augment_config& base) {
    maebench::augment_config cfg = base;
    cfg.resize_side = base.out_side;  // input is already at model size
    cfg.normalize_mean = 0.0;         // values arrive normalized; do not renormalize
    cfg.normalize_std = 1.0;
    return [cfg](const maebench::tensor<float>& img, maebench::rng& r) {
        maebench::image view = tensor_to_image(img);
        view = maebench::random_resized_crop(view, cfg, r);
        view = maebench::hflip(view, cfg.hflip_prob, r);
        return image_to_tensor(view);
    };
}

maebench::checkpoint make_pretrain_checkpoint(const maebench::experiment_config& cfg,
                                              const maebench::manifest& m,
                                              std::vector<maebench::named_tensor> tensors,
                                              std::uint64_t step, std::uint64_t epoch,
                                              double metric) {
    maebench::checkpoint c;
    c.kind = "pretrain";
    c.step = step;
    c.epoch = epoch;
    c.metric = metric;
    c.config["model"] = maebench::vit_config_to_json(cfg.model);
    c.config["decoder"] = {{"dim", cfg.decoder_dim},
                           {"depth", cfg.decoder_depth},
                           {"heads", cfg.decoder_heads}};
    c.config["data"] = {{"mean", m.mean}, {"std", m.std_dev}};
    c.config["normalize_targets"] = cfg.pretrain.normalize_targets;
    c.tensors = std::move(tensors);
    return c;
}

int cmd_pretrain(const flagged& f) {
    maebench::experiment_config cfg = resolve_config(f);
    if (!f.data_path.empty()) cfg.data.train = f.data_path;
    if (cfg.data.train.empty())
        throw maebench::config_error(
            "no training manifest: pass --data or set train under [data]");

    const maebench::manifest m =
        take_split(maebench::parse_manifest(cfg.data.train), "train", cfg.data.train);
    const fs::path manifest_dir = fs::path(cfg.data.train).parent_path();
    const auto transform = transform_for(m, cfg.model.image_side);
    const std::size_t workers = resolve_threads(f.threads);
    std::vector<maebench::tensor<float>> images =
        load_image_tensors(m, manifest_dir, transform, workers);

    auto model = maebench::mae_model<float>::init(cfg.model, cfg.decoder_dim, cfg.decoder_depth,
                                                  cfg.decoder_heads, cfg.run.seed);
    maebench::augment_fn<float> augment;
    if (cfg.pretrain_augment) augment = make_pretrain_augment(transform);
    const auto result = maebench::pretrain_loop(images, model, cfg.pretrain, augment);

    const fs::path out_dir(cfg.run.out);
    stamp_run(out_dir, "pretrain", cfg.run.seed, {cfg.data.train}, &cfg);

    std::ostringstream loss_lines;
    for (const maebench::loss_record& rec : result.history) {
        json row;
        row["epoch"] = rec.epoch;
        row["step"] = rec.step;
        row["loss"] = rec.loss;
        row["lr"] = rec.lr;
        loss_lines << row.dump() << "\n";
    }
    write_text_file(out_dir / "loss.jsonl", loss_lines.str());

    // Shapes come from the live model; the loop returns raw best-epoch values
    // in the same parameter order.
    const auto named = model.named();
    std::vector<maebench::named_tensor> best;
    for (std::size_t i = 0; i < named.size(); ++i) {
        if (named[i].first != result.best_params[i].first)
            throw maebench::contract_error("parameter order diverged: " + named[i].first + " vs " +
                                           result.best_params[i].first);
        best.push_back({named[i].first, named[i].second.shape(), result.best_params[i].second});
    }
    const std::size_t steps_per_epoch = result.history.size() / cfg.pretrain.epochs;
    maebench::save_checkpoint(
        make_pretrain_checkpoint(cfg, m, std::move(best),
                                 (result.best_epoch + 1) * steps_per_epoch, result.best_epoch,
                                 result.epoch_mean[result.best_epoch]),
        (out_dir / "best.ckpt").string());
    maebench::save_checkpoint(
        make_pretrain_checkpoint(cfg, m, maebench::snapshot_params(named), result.history.size(),
                                 cfg.pretrain.epochs - 1, result.epoch_mean.back()),
        (out_dir / "last.ckpt").string());

    json summary;
    summary["best_epoch"] = result.best_epoch;
    summary["best_loss"] = result.epoch_mean[result.best_epoch];
    summary["final_loss"] = result.epoch_mean.back();
    summary["checkpoint"] = (out_dir / "best.ckpt").string();
    std::cout << summary.dump() << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------- finetune

struct finetune_args {
    flagged common;
    std::string task;
    std::string encoder;
    std::string train_path;
    std::string val_path;
};

int cmd_finetune(const finetune_args& args) {
    maebench::experiment_config cfg = resolve_config(args.common);
    if (!args.train_path.empty()) cfg.data.train = args.train_path;
    if (!args.val_path.empty()) cfg.data.val = args.val_path;
    if (!args.task.empty()) cfg.finetune.task = maebench::parse_task(args.task);
    if (cfg.data.train.empty())
        throw maebench::config_error("finetune needs --train (or [data] train)");
    if (cfg.data.val.empty()) cfg.data.val = cfg.data.train;
    if (args.encoder.empty()) throw maebench::config_error("finetune needs --encoder <checkpoint>");

    const maebench::manifest train_m =
        take_split(maebench::parse_manifest(cfg.data.train), "train", cfg.data.train);
    const maebench::manifest val_m =
        take_split(maebench::parse_manifest(cfg.data.val), "val", cfg.data.val);
    if (train_m.classes != val_m.classes)
        throw maebench::validation_error("train and val manifests declare different class lists");

    if (cfg.finetune.num_classes != train_m.classes.size()) {
        std::cerr << "note: num_classes " << cfg.finetune.num_classes << " from config replaced by "
                  << train_m.classes.size() << " classes declared in the manifest\n";
        cfg.finetune.num_classes = train_m.classes.size();
    }

    const maebench::checkpoint encoder_ckpt = maebench::load_checkpoint(args.encoder);
    if (encoder_ckpt.config.contains("model")) {
        const auto mcfg = maebench::vit_config_from_json(encoder_ckpt.config.at("model"));
        cfg.model = mcfg;  // the resolved config records what actually ran
    }

    const std::size_t workers = resolve_threads(args.common.threads);
    const auto transform = transform_for(train_m, cfg.model.image_side);
    const auto train_samples =
        load_task_samples(train_m, fs::path(cfg.data.train).parent_path(), transform, workers);
    const auto val_samples =
        load_task_samples(val_m, fs::path(cfg.data.val).parent_path(), transform, workers);

    const auto result =
        maebench::finetune_loop(train_samples, val_samples, encoder_ckpt, cfg.finetune);

    const fs::path out_dir(cfg.run.out);
    stamp_run(out_dir, "finetune", cfg.run.seed, {args.encoder, cfg.data.train, cfg.data.val},
              &cfg);

    std::ostringstream lines;
    for (const maebench::finetune_epoch& e : result.history) {
        json row;
        row["epoch"] = e.epoch;
        row["train_loss"] = e.train_loss;
        row["val_metric"] = e.val_metric;
        row["lr_last"] = e.lr_last;
        lines << row.dump() << "\n";
    }
    write_text_file(out_dir / "history.jsonl", lines.str());
    maebench::save_checkpoint(result.best, (out_dir / "best.ckpt").string());

    json summary;
    summary["best_epoch"] = result.best_epoch;
    summary["best_metric"] = result.best_metric;
    summary["train_samples_used"] = result.train_subset.size();
    summary["checkpoint"] = (out_dir / "best.ckpt").string();
    std::cout << summary.dump() << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------- evaluate

struct evaluate_args {
    std::string checkpoint_path;
    std::string data_path;
    std::string out_dir;
    std::string name;
    std::string split = "test";
    double threshold = 0.5;
    std::size_t bootstrap = 0;
    double ci_level = 0.95;
    std::uint64_t seed = 0;
    std::size_t threads = 0;
};

int cmd_evaluate(const evaluate_args& args) {
    if (args.checkpoint_path.empty() || args.data_path.empty())
        throw maebench::config_error("evaluate needs --checkpoint and --data");

    const maebench::checkpoint ckpt = maebench::load_checkpoint(args.checkpoint_path);
    const maebench::adapted_model model = maebench::restore_adapted(ckpt);
    const maebench::manifest m =
        take_split(maebench::parse_manifest(args.data_path), args.split, args.data_path);
    const std::size_t k = m.classes.size();

    const std::size_t model_classes = maebench::is_classification(model.task)
                                          ? model.cls_head.fc2_w.dim(1)
                                          : model.box_head.num_classes;
    if (model_classes != k)
        throw maebench::validation_error("checkpoint predicts " + std::to_string(model_classes) +
                                         " classes but the manifest declares " +
                                         std::to_string(k));

    const auto transform = transform_for(m, model.mcfg.image_side);
    const auto samples = load_task_samples(m, fs::path(args.data_path).parent_path(), transform,
                                           resolve_threads(args.threads));

    maebench::metric_report rep;
    rep.dataset = args.name.empty() ? dataset_label(args.data_path) : args.name;
    rep.classes = m.classes;
    rep.n_samples = samples.size();
    rep.seed = args.seed;

    const std::size_t batch = 16;
    if (maebench::is_classification(model.task)) {
        std::vector<std::vector<double>> probs;
        for (std::size_t start = 0; start < samples.size(); start += batch) {
            std::vector<std::size_t> ids;
            for (std::size_t i = start; i < std::min(samples.size(), start + batch); ++i)
                ids.push_back(i);
            const auto logits = maebench::classifier_forward(
                maebench::detail::stack_images(samples, ids), model.enc, model.cls_head);
            auto rows = maebench::detail::class_probabilities(logits.data(), k, model.task);
            for (auto& r : rows) probs.push_back(std::move(r));
        }
        for (std::size_t c = 0; c < k; ++c) {
            std::vector<double> scores;
            std::vector<maebench::label_state> labels;
            for (std::size_t i = 0; i < samples.size(); ++i) {
                scores.push_back(probs[i][c]);
                labels.push_back(samples[i].labels[c]);
            }
            rep.per_class.push_back(
                maebench::classification_metrics(scores, labels, args.threshold));
        }
        if (args.bootstrap > 0) {
            if (k != 1)
                throw maebench::config_error(
                    "bootstrap intervals are only provided for single-class datasets; got " +
                    std::to_string(k) + " classes");
            std::vector<double> scores;
            std::vector<int> labels;
            for (std::size_t i = 0; i < samples.size(); ++i) {
                if (samples[i].labels[0] == maebench::label_state::unannotated) continue;
                scores.push_back(probs[i][0]);
                labels.push_back(samples[i].labels[0] == maebench::label_state::positive ? 1 : 0);
            }
            rep.ci["auc"] = maebench::bootstrap_ci(
                [](const std::vector<double>& s, const std::vector<int>& l) {
                    return maebench::auroc(s, l);
                },
                scores, labels, args.bootstrap, args.ci_level, args.seed);
        }
    } else {
        if (args.bootstrap > 0)
            throw maebench::config_error("bootstrap intervals are not defined for localization");
        std::vector<std::vector<maebench::detection>> dets;
        for (std::size_t start = 0; start < samples.size(); start += batch) {
            std::vector<std::size_t> ids;
            for (std::size_t i = start; i < std::min(samples.size(), start + batch); ++i)
                ids.push_back(i);
            auto batch_dets = maebench::localization_forward(
                maebench::detail::stack_images(samples, ids), model.enc, model.box_head,
                model.score_threshold, model.nms_iou);
            for (auto& d : batch_dets) dets.push_back(std::move(d));
        }
        std::vector<std::vector<maebench::box>> gts(samples.size());
        for (std::size_t i = 0; i < samples.size(); ++i) gts[i] = samples[i].boxes;
        for (std::size_t c = 0; c < k; ++c) {
            maebench::metric_values v;
            v.ap50 = maebench::ap50(dets, gts, c);
            rep.per_class.push_back(v);
        }
    }
    maebench::fill_macro(rep);

    const json out = maebench::report_to_json(rep);
    if (!args.out_dir.empty()) {
        const fs::path out_dir(args.out_dir);
        stamp_run(out_dir, "evaluate", args.seed, {args.checkpoint_path, args.data_path});
        write_text_file(out_dir / "metrics.json", out.dump(2) + "\n");
    }
    std::cout << out.dump() << "\n";
    return kExitOk;
}

// -------------------------------------------------------------- reconstruct

struct reconstruct_args {
    std::string encoder;
    std::string image_path;
    std::string out_dir;
    double mask_ratio = 0.75;
    std::uint64_t seed = 0;
};

maebench::mask_plan all_visible_plan(std::size_t n) {
    maebench::mask_plan plan;
    plan.ids_shuffle.resize(n);
    plan.ids_restore.resize(n);
    for (std::size_t i = 0; i < n; ++i) plan.ids_shuffle[i] = plan.ids_restore[i] = i;
    plan.len_keep = n;
    plan.mask.assign(n, 0);
    return plan;
}

int cmd_reconstruct(const reconstruct_args& args) {
    if (args.encoder.empty() || args.image_path.empty() || args.out_dir.empty())
        throw maebench::config_error("reconstruct needs --encoder, --image, and --out");
    if (!(args.mask_ratio >= 0.0 && args.mask_ratio < 1.0))
        throw maebench::config_error("mask ratio must lie in [0, 1), got " +
                                     std::to_string(args.mask_ratio));

    const maebench::checkpoint ckpt = maebench::load_checkpoint(args.encoder);
    if (ckpt.kind != "pretrain")
        throw maebench::validation_error("reconstruct expects a pretrain checkpoint, got kind '" +
                                         ckpt.kind + "'");
    for (const char* key : {"model", "decoder", "data", "normalize_targets"})
        if (!ckpt.config.contains(key))
            throw maebench::validation_error(std::string("pretrain checkpoint config lacks '") +
                                             key + "'");

    const maebench::vit_config mcfg = maebench::vit_config_from_json(ckpt.config.at("model"));
    const auto& dec = ckpt.config.at("decoder");
    auto model = maebench::mae_model<float>::init(mcfg, dec.at("dim").get<std::size_t>(),
                                                  dec.at("depth").get<std::size_t>(),
                                                  dec.at("heads").get<std::size_t>(), 0);
    maebench::load_params_into(ckpt, model.named());

    const double mean = ckpt.config.at("data").at("mean").get<double>();
    const double std_dev = ckpt.config.at("data").at("std").get<double>();
    const bool normalize_targets = ckpt.config.at("normalize_targets").get<bool>();

    maebench::augment_config t;
    t.out_side = mcfg.image_side;
    t.resize_side = mcfg.image_side == 224 ? 512 : mcfg.image_side;
    t.normalize_mean = mean;
    t.normalize_std = std_dev;
    const maebench::image input =
        maebench::eval_transform(maebench::load_image(args.image_path), t);

    const std::size_t n = mcfg.n_patches();
    const std::size_t pd = mcfg.patch_dim();
    const std::size_t p = mcfg.patch_side;
    const std::size_t g = mcfg.grid();

    maebench::tensor<float> patches =
        maebench::patchify(image_to_tensor(input), mcfg.patch_side);
    maebench::tensor<float> batch =
        maebench::tensor<float>::from({1, n, pd}, std::vector<float>(patches.data()));

    maebench::rng mask_rng(args.seed);
    maebench::tensor<float> tokens = maebench::embed_patches(batch, model.enc);
    maebench::token_sequence<float> seq{tokens, mcfg.use_cls};
    maebench::token_sequence<float> visible = seq;
    std::vector<maebench::mask_plan> plans;
    if (args.mask_ratio == 0.0) {
        // The standard sampler insists on hiding at least one patch; a
        // nothing-hidden pass is still useful to inspect the decoder, so
        // build its trivial plan by hand.
        plans.push_back(all_visible_plan(n));
    } else {
        auto masked_seq = maebench::random_masking(seq, args.mask_ratio, mask_rng);
        visible = std::move(masked_seq.first);
        plans = std::move(masked_seq.second);
    }
    maebench::tensor<float> latent = maebench::encoder_forward(visible.tokens, model.enc);
    maebench::tensor<float> pred = maebench::decode_with_mask_tokens(
        maebench::token_sequence<float>{latent, visible.has_cls}, plans, model.dec);

    // Panel assembly happens in [0,1] display space.
    const maebench::image original = maebench::denormalize(input, mean, std_dev);
    maebench::image masked = original;
    maebench::image recon = original;
    const std::vector<float>& pv = pred.data();
    const std::vector<float>& tv = batch.data();
    for (std::size_t j = 0; j < n; ++j) {
        const bool is_masked = plans[0].mask[j] != 0;
        // mask_ratio 0 shows the decoder's output for every patch; otherwise
        // predictions replace only the masked ones.
        const bool paint_pred = is_masked || args.mask_ratio == 0.0;
        if (!is_masked && !paint_pred) continue;

        double mu = 0, var = 0;
        if (normalize_targets) {
            // Predictions live in each target patch's standardized space;
            // map them back with that patch's own statistics.
            for (std::size_t q = 0; q < pd; ++q) mu += tv[j * pd + q];
            mu /= static_cast<double>(pd);
            for (std::size_t q = 0; q < pd; ++q) {
                const double d = tv[j * pd + q] - mu;
                var += d * d;
            }
            var /= static_cast<double>(pd);
        }
        const double sd = std::sqrt(var + 1e-6);
        const std::size_t y0 = (j / g) * p, x0 = (j % g) * p;
        for (std::size_t dy = 0; dy < p; ++dy)
            for (std::size_t dx = 0; dx < p; ++dx) {
                const std::size_t q = dy * p + dx;
                if (is_masked) masked.at(y0 + dy, x0 + dx) = 0.5f;
                if (paint_pred) {
                    double v = pv[j * pd + q];
                    if (normalize_targets) v = v * sd + mu;
                    v = v * std_dev + mean;  // undo input normalization
                    recon.at(y0 + dy, x0 + dx) =
                        static_cast<float>(std::min(1.0, std::max(0.0, v)));
                }
            }
    }

    const fs::path out_dir(args.out_dir);
    stamp_run(out_dir, "reconstruct", args.seed, {args.encoder, args.image_path});
    maebench::save_pgm((out_dir / "original.pgm").string(), original);
    maebench::save_pgm((out_dir / "masked.pgm").string(), masked);
    maebench::save_pgm((out_dir / "reconstruction.pgm").string(), recon);

    json summary;
    summary["original"] = (out_dir / "original.pgm").string();
    summary["masked"] = (out_dir / "masked.pgm").string();
    summary["reconstruction"] = (out_dir / "reconstruction.pgm").string();
    summary["masked_patches"] = n - plans[0].len_keep;
    summary["visible_patches"] = plans[0].len_keep;
    std::cout << summary.dump() << "\n";
    return kExitOk;
}

// ------------------------------------------------------------------ report

struct report_args {
    std::vector<std::string> inputs;
    std::string metric = "auc";
    std::string out_path;
    bool csv = false;
};

std::optional<double> maebench::metric_values::* metric_field(const std::string& name) {
    if (name == "auc") return &maebench::metric_values::auc;
    if (name == "aupr") return &maebench::metric_values::aupr;
    if (name == "f1") return &maebench::metric_values::f1;
    if (name == "acc") return &maebench::metric_values::acc;
    if (name == "ap50") return &maebench::metric_values::ap50;
    throw maebench::config_error("unknown metric '" + name +
                                 "': expected auc, aupr, f1, acc, or ap50");
}

std::string format_cell(const std::optional<double>& v) {
    if (!v) return "/";
    std::ostringstream s;
    s.setf(std::ios::fixed);
    s.precision(1);
    s << maebench::round_display(*v * 100.0);
    return std::move(s).str();
}

// Renders one metric as a grid: one row per report, one column per class
// plus a recomputed Mean. Values print as percentages rounded half-up to one
// decimal; absent cells print "/" and stay out of the mean.
int cmd_report(const report_args& args) {
    auto field = metric_field(args.metric);

    std::vector<maebench::metric_report> reports;
    for (const std::string& path : args.inputs) {
        std::ifstream in(path);
        if (!in) throw maebench::io_error("cannot open report: " + path);
        json j;
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw maebench::parse_error(path + ": not valid JSON: " + e.what());
        }
        maebench::metric_report rep = maebench::report_from_json(j);
        if (rep.dataset.empty()) rep.dataset = dataset_label(path);
        reports.push_back(std::move(rep));
    }
    for (const maebench::metric_report& rep : reports)
        if (rep.classes != reports.front().classes)
            throw maebench::schema_error("report '" + rep.dataset +
                                         "' declares a different class list; rows must share "
                                         "columns");

    const std::vector<std::string>& classes = reports.front().classes;
    std::vector<std::vector<std::string>> rows;
    for (const maebench::metric_report& rep : reports) {
        std::vector<std::string> row;
        row.push_back(rep.dataset);
        std::vector<std::optional<double>> column;
        for (std::size_t c = 0; c < classes.size(); ++c) {
            row.push_back(format_cell(rep.per_class[c].*field));
            column.push_back(rep.per_class[c].*field);
        }
        std::optional<double> mean;
        try {
            mean = maebench::macro_average(column);
        } catch (const maebench::undefined_metric_error&) {
        }
        row.push_back(format_cell(mean));
        rows.push_back(std::move(row));
    }

    std::vector<std::string> header{"Dataset"};
    header.insert(header.end(), classes.begin(), classes.end());
    header.push_back("Mean");

    std::ostringstream out;
    if (args.csv) {
        auto emit = [&out](const std::vector<std::string>& cells) {
            for (std::size_t i = 0; i < cells.size(); ++i)
                out << (i ? "," : "") << cells[i];
            out << "\n";
        };
        emit(header);
        for (const auto& row : rows) emit(row);
    } else {
        std::vector<std::size_t> width(header.size());
        for (std::size_t i = 0; i < header.size(); ++i) width[i] = header[i].size();
        for (const auto& row : rows)
            for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
        auto emit = [&](const std::vector<std::string>& cells) {
            for (std::size_t i = 0; i < cells.size(); ++i) {
                if (i) out << "  ";
                // row labels left-aligned, numbers right-aligned
                if (i == 0) out << cells[i] << std::string(width[i] - cells[i].size(), ' ');
                else out << std::string(width[i] - cells[i].size(), ' ') << cells[i];
            }
            out << "\n";
        };
        emit(header);
        for (const auto& row : rows) emit(row);
    }

    if (args.out_path.empty()) std::cout << out.str();
    else write_text_file(args.out_path, out.str());
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{std::string(kVersion) +
                 " - masked-autoencoder pretraining, adaptation, and evaluation"};
    app.require_subcommand(1);

    ingest_args ing;
    CLI::App* ingest = app.add_subcommand("ingest", "build a manifest from images and a label CSV");
    ingest->add_option("--dir", ing.dir, "image directory")->required();
    ingest->add_option("--labels", ing.labels_csv, "label CSV (image,split,<classes...>[,boxes])")
        ->required();
    ingest->add_option("--out", ing.out_manifest, "manifest path to write")->required();
    ingest->add_flag("--chest-crop", ing.chest_crop,
                     "crop to the bright region before measuring (rejects box labels)");

    flagged pre;
    CLI::App* pretrain = app.add_subcommand("pretrain", "masked-autoencoder pretraining");
    pretrain->add_option("--config", pre.config_path, "experiment config file");
    pretrain->add_option("--data", pre.data_path, "training manifest (overrides [data] train)");
    pretrain->add_option("--out", pre.out_dir, "run directory (overrides [run] out)");
    auto* pre_seed = pretrain->add_option("--seed", pre.seed, "seed (overrides [run] seed)");
    pretrain->add_option("--threads", pre.threads, "decode workers (or MAEBENCH_THREADS)");

    finetune_args fin;
    CLI::App* finetune = app.add_subcommand("finetune", "adapt a pretrained encoder to a task");
    finetune->add_option("--config", fin.common.config_path, "experiment config file");
    finetune->add_option("--task", fin.task, "binary|multiclass|multilabel|localization");
    finetune->add_option("--encoder", fin.encoder, "pretraining checkpoint")->required();
    finetune->add_option("--train", fin.train_path, "training manifest");
    finetune->add_option("--val", fin.val_path, "validation manifest");
    finetune->add_option("--out", fin.common.out_dir, "run directory (overrides [run] out)");
    auto* fin_seed = finetune->add_option("--seed", fin.common.seed, "seed (overrides [run] seed)");
    finetune->add_option("--threads", fin.common.threads, "decode workers (or MAEBENCH_THREADS)");

    evaluate_args ev;
    CLI::App* evaluate = app.add_subcommand("evaluate", "score an adapted checkpoint");
    evaluate->add_option("--checkpoint", ev.checkpoint_path, "finetune checkpoint")->required();
    evaluate->add_option("--data", ev.data_path, "evaluation manifest")->required();
    evaluate->add_option("--out", ev.out_dir, "directory for metrics.json (optional)");
    evaluate->add_option("--name", ev.name, "dataset row label (default: manifest stem)");
    evaluate->add_option("--split", ev.split, "manifest split to score (default test)");
    evaluate->add_option("--threshold", ev.threshold, "decision threshold for F1/accuracy");
    evaluate->add_option("--bootstrap", ev.bootstrap, "bootstrap resamples for CIs (single-class)");
    evaluate->add_option("--ci-level", ev.ci_level, "confidence level for --bootstrap");
    evaluate->add_option("--seed", ev.seed, "bootstrap seed");
    evaluate->add_option("--threads", ev.threads, "decode workers (or MAEBENCH_THREADS)");

    reconstruct_args rec;
    CLI::App* reconstruct =
        app.add_subcommand("reconstruct", "triptych: original, masked, reconstruction");
    reconstruct->add_option("--encoder", rec.encoder, "pretraining checkpoint")->required();
    reconstruct->add_option("--image", rec.image_path, "input image (PGM or grayscale PNG)")
        ->required();
    reconstruct->add_option("--out", rec.out_dir, "output directory")->required();
    reconstruct->add_option("--mask-ratio", rec.mask_ratio, "fraction of patches to hide [0,1)");
    reconstruct->add_option("--seed", rec.seed, "masking seed");

    report_args rp;
    CLI::App* report = app.add_subcommand("report", "render metric reports as a table");
    report->add_option("reports", rp.inputs, "metric report JSON files")->required();
    report->add_option("--metric", rp.metric, "auc|aupr|f1|acc|ap50 (default auc)");
    report->add_option("--out", rp.out_path, "write the table here instead of stdout");
    report->add_flag("--csv", rp.csv, "emit CSV instead of aligned text");

    CLI11_PARSE(app, argc, argv);

    if (ingest->parsed()) return run_guarded("ingest", [&] { return cmd_ingest(ing); });
    if (pretrain->parsed()) {
        pre.seed_set = pre_seed->count() > 0;
        return run_guarded("pretrain", [&] { return cmd_pretrain(pre); });
    }
    if (finetune->parsed()) {
        fin.common.seed_set = fin_seed->count() > 0;
        return run_guarded("finetune", [&] { return cmd_finetune(fin); });
    }
    if (evaluate->parsed()) return run_guarded("evaluate", [&] { return cmd_evaluate(ev); });
    if (reconstruct->parsed())
        return run_guarded("reconstruct", [&] { return cmd_reconstruct(rec); });
    if (report->parsed()) return run_guarded("report", [&] { return cmd_report(rp); });
    return kExitConfig;
}
