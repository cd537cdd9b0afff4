#pragma once

// Manifest-backed datasets. A manifest is line-delimited JSON: a header line
// carrying the class list and normalization constants, then one record per
// line. Per-class labels are 1 (present), 0 (absent), or null/"/" meaning the
// dataset never annotated that class for this sample.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <istream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "maebench/errors.hpp"
#include "maebench/image.hpp"
#include "maebench/rng.hpp"

namespace maebench {

enum class label_state : std::int8_t { negative = 0, positive = 1, unannotated = 2 };

struct box {
    std::size_t class_id = 0;
    double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

    bool operator==(const box&) const = default;
};

struct sample_record {
    std::string id;
    std::string image_path;
    std::vector<label_state> labels;
    std::vector<box> boxes;
    std::string split;  // train, val, or test
    // Pixel dimensions when the producer knows them (the ingest path always
    // does); 0 means unknown and box bounds are then only sign-checked.
    std::size_t width = 0;
    std::size_t height = 0;

    bool operator==(const sample_record&) const = default;
};

struct manifest {
    std::vector<std::string> classes;
    double mean = 0.5;
    double std_dev = 0.25;
    std::vector<sample_record> records;

    bool operator==(const manifest&) const = default;
};

namespace detail {

inline parse_error line_fail(std::size_t lineno, const std::string& why) {
    return parse_error("manifest line " + std::to_string(lineno) + ": " + why);
}

inline label_state parse_label(const nlohmann::json& v, std::size_t lineno) {
    if (v.is_null()) return label_state::unannotated;
    if (v.is_string()) {
        if (v.get<std::string>() == "/") return label_state::unannotated;
        throw line_fail(lineno, "label string must be \"/\", got \"" + v.get<std::string>() + "\"");
    }
    if (v.is_number_integer()) {
        const auto n = v.get<long long>();
        if (n == 0) return label_state::negative;
        if (n == 1) return label_state::positive;
        throw line_fail(lineno, "label must be 0, 1, null or \"/\", got " + std::to_string(n));
    }
    throw line_fail(lineno, "label must be 0, 1, null or \"/\"");
}

inline void check_keys(const nlohmann::json& obj, std::initializer_list<const char*> allowed,
                       std::size_t lineno) {
    for (const auto& item : obj.items()) {
        bool ok = false;
        for (const char* k : allowed)
            if (item.key() == k) ok = true;
        if (!ok) throw line_fail(lineno, "unexpected key '" + item.key() + "'");
    }
}

inline void validate_record(const sample_record& rec, std::size_t num_classes) {
    auto fail = [&](const std::string& why) {
        throw validation_error("record '" + rec.id + "': " + why);
    };
    if (rec.labels.size() != num_classes)
        fail("has " + std::to_string(rec.labels.size()) + " labels, manifest declares " +
             std::to_string(num_classes) + " classes");
    if (rec.split != "train" && rec.split != "val" && rec.split != "test")
        fail("split '" + rec.split + "' is not train/val/test");
    for (const box& b : rec.boxes) {
        if (b.class_id >= num_classes)
            fail("box class id " + std::to_string(b.class_id) + " out of range");
        if (!(b.x_min < b.x_max) || !(b.y_min < b.y_max))
            fail("box is empty or inverted: [" + std::to_string(b.x_min) + "," +
                 std::to_string(b.y_min) + "," + std::to_string(b.x_max) + "," +
                 std::to_string(b.y_max) + "]");
        if (b.x_min < 0 || b.y_min < 0) fail("box extends past the top-left corner");
        if (rec.width > 0 && b.x_max > static_cast<double>(rec.width))
            fail("box x_max " + std::to_string(b.x_max) + " exceeds image width " +
                 std::to_string(rec.width));
        if (rec.height > 0 && b.y_max > static_cast<double>(rec.height))
            fail("box y_max " + std::to_string(b.y_max) + " exceeds image height " +
                 std::to_string(rec.height));
    }
}

}  // namespace detail

inline manifest parse_manifest(std::istream& in) {
    using nlohmann::json;
    manifest m;
    std::string line;
    std::size_t lineno = 0;
    bool have_header = false;
    std::unordered_set<std::string> ids;

    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;

        json obj;
        try {
            obj = json::parse(line);
        } catch (const json::exception& e) {
            throw detail::line_fail(lineno, e.what());
        }
        if (!obj.is_object()) throw detail::line_fail(lineno, "expected a JSON object");

        if (!have_header) {
            detail::check_keys(obj, {"classes", "mean", "std"}, lineno);
            if (!obj.contains("classes") || !obj["classes"].is_array())
                throw detail::line_fail(lineno, "header needs a \"classes\" array");
            if (!obj.contains("mean") || !obj["mean"].is_number() ||
                !obj.contains("std") || !obj["std"].is_number())
                throw detail::line_fail(lineno, "header needs numeric \"mean\" and \"std\"");
            for (const auto& c : obj["classes"]) {
                if (!c.is_string())
                    throw detail::line_fail(lineno, "class names must be strings");
                m.classes.push_back(c.get<std::string>());
            }
            m.mean = obj["mean"].get<double>();
            m.std_dev = obj["std"].get<double>();
            if (!(m.std_dev > 0.0))
                throw detail::line_fail(lineno, "header std must be > 0");
            have_header = true;
            continue;
        }

        detail::check_keys(
            obj, {"id", "path", "labels", "boxes", "split", "width", "height"}, lineno);
        sample_record rec;
        try {
            if (!obj.contains("id") || !obj["id"].is_string())
                throw detail::line_fail(lineno, "record needs a string \"id\"");
            rec.id = obj["id"].get<std::string>();
            if (!obj.contains("path") || !obj["path"].is_string())
                throw detail::line_fail(lineno, "record needs a string \"path\"");
            rec.image_path = obj["path"].get<std::string>();
            if (!obj.contains("labels") || !obj["labels"].is_array())
                throw detail::line_fail(lineno, "record needs a \"labels\" array");
            for (const auto& v : obj["labels"])
                rec.labels.push_back(detail::parse_label(v, lineno));
            if (!obj.contains("split") || !obj["split"].is_string())
                throw detail::line_fail(lineno, "record needs a string \"split\"");
            rec.split = obj["split"].get<std::string>();
            if (obj.contains("width")) rec.width = obj["width"].get<std::size_t>();
            if (obj.contains("height")) rec.height = obj["height"].get<std::size_t>();
            if (obj.contains("boxes") && !obj["boxes"].is_null()) {
                if (!obj["boxes"].is_array())
                    throw detail::line_fail(lineno, "\"boxes\" must be an array");
                for (const auto& bj : obj["boxes"]) {
                    if (!bj.is_array() || bj.size() != 5)
                        throw detail::line_fail(
                            lineno, "each box must be [class,x_min,y_min,x_max,y_max]");
                    box b;
                    b.class_id = bj[0].get<std::size_t>();
                    b.x_min = bj[1].get<double>();
                    b.y_min = bj[2].get<double>();
                    b.x_max = bj[3].get<double>();
                    b.y_max = bj[4].get<double>();
                    rec.boxes.push_back(b);
                }
            }
        } catch (const nlohmann::json::exception& e) {
            throw detail::line_fail(lineno, e.what());
        }

        if (!ids.insert(rec.id).second)
            throw validation_error("record '" + rec.id + "': duplicate id");
        detail::validate_record(rec, m.classes.size());
        m.records.push_back(std::move(rec));
    }
    if (!have_header) throw parse_error("manifest is empty, expected a header line");
    return m;
}

inline manifest parse_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open manifest: " + path);
    return parse_manifest(in);
}

inline void write_manifest(std::ostream& out, const manifest& m) {
    using nlohmann::json;
    json header;
    header["classes"] = m.classes;
    header["mean"] = m.mean;
    header["std"] = m.std_dev;
    out << header.dump() << "\n";
    for (const sample_record& rec : m.records) {
        json obj;
        obj["id"] = rec.id;
        obj["path"] = rec.image_path;
        json labels = json::array();
        for (label_state s : rec.labels) {
            if (s == label_state::unannotated)
                labels.push_back(nullptr);
            else
                labels.push_back(s == label_state::positive ? 1 : 0);
        }
        obj["labels"] = std::move(labels);
        obj["split"] = rec.split;
        if (rec.width > 0) obj["width"] = rec.width;
        if (rec.height > 0) obj["height"] = rec.height;
        if (!rec.boxes.empty()) {
            json boxes = json::array();
            for (const box& b : rec.boxes)
                boxes.push_back({b.class_id, b.x_min, b.y_min, b.x_max, b.y_max});
            obj["boxes"] = std::move(boxes);
        }
        out << obj.dump() << "\n";
    }
}

inline void write_manifest(const std::string& path, const manifest& m) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot open manifest for writing: " + path);
    write_manifest(out, m);
    if (!out) throw io_error("manifest write failed: " + path);
}

// Epoch plan for a dataset of n records: a seeded shuffle chopped into
// batches, the last one short when batch_size does not divide n. The plan
// for a given (seed, epoch) never depends on how it is later consumed.
inline std::vector<std::vector<std::size_t>> index_batches(std::size_t n,
                                                           std::size_t batch_size,
                                                           std::uint64_t seed,
                                                           std::size_t epoch) {
    if (batch_size == 0) throw config_error("index_batches: batch_size must be >= 1");
    rng r(mix_seed(seed, epoch));
    const std::vector<std::size_t> order = r.permutation(n);
    std::vector<std::vector<std::size_t>> plan;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t stop = std::min(n, start + batch_size);
        plan.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                          order.begin() + static_cast<std::ptrdiff_t>(stop));
    }
    return plan;
}

struct image_batch {
    std::vector<std::size_t> indices;  // positions into manifest.records
    std::vector<image> images;         // one transformed image per index
};

// Streams decoded, transformed batches for one epoch at a time. Decoding may
// fan out over worker threads, but the batch plan and every per-sample
// augmentation stream are fixed up front by (seed, epoch, record index), so
// the output is identical for any worker count.
class batch_iterator {
  public:
    batch_iterator(const manifest& m, std::string image_root, std::size_t batch_size,
                   std::uint64_t seed, bool augment, augment_config cfg = {},
                   std::size_t workers = 1)
        : manifest_(m),
          root_(std::move(image_root)),
          batch_size_(batch_size),
          seed_(seed),
          augment_(augment),
          cfg_(cfg),
          workers_(workers == 0 ? 1 : workers) {
        if (batch_size_ == 0) throw config_error("batch_iterator: batch_size must be >= 1");
        cfg_.validate();
        begin_epoch(0);
    }

    void begin_epoch(std::size_t epoch) {
        epoch_ = epoch;
        plan_ = index_batches(manifest_.records.size(), batch_size_, seed_, epoch);
        cursor_ = 0;
    }

    std::size_t batches_per_epoch() const { return plan_.size(); }

    std::optional<image_batch> next() {
        if (cursor_ >= plan_.size()) return std::nullopt;
        const std::vector<std::size_t>& idx = plan_[cursor_++];
        image_batch out;
        out.indices = idx;
        out.images.resize(idx.size());

        std::atomic<std::size_t> cursor{0};
        std::exception_ptr first_error;
        std::mutex error_mu;
        auto work = [&]() {
            for (;;) {
                const std::size_t k = cursor.fetch_add(1);
                if (k >= idx.size()) return;
                try {
                    out.images[k] = load_sample(idx[k]);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mu);
                    if (!first_error) first_error = std::current_exception();
                    return;
                }
            }
        };
        if (workers_ <= 1 || idx.size() <= 1) {
            work();
        } else {
            std::vector<std::thread> pool;
            const std::size_t count = std::min(workers_, idx.size());
            pool.reserve(count);
            for (std::size_t t = 0; t < count; ++t) pool.emplace_back(work);
            for (auto& t : pool) t.join();
        }
        if (first_error) std::rethrow_exception(first_error);
        return out;
    }

  private:
    image load_sample(std::size_t record_idx) const {
        const sample_record& rec = manifest_.records[record_idx];
        std::filesystem::path p(rec.image_path);
        if (p.is_relative() && !root_.empty()) p = std::filesystem::path(root_) / p;
        const image raw = load_image(p.string());
        if (!augment_) return eval_transform(raw, cfg_);
        rng r(mix_seed(mix_seed(mix_seed(seed_, 3), epoch_), record_idx));
        return train_transform(raw, cfg_, r);
    }

    manifest manifest_;
    std::string root_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    bool augment_;
    augment_config cfg_;
    std::size_t workers_;
    std::size_t epoch_ = 0;
    std::vector<std::vector<std::size_t>> plan_;
    std::size_t cursor_ = 0;
};

}  // namespace maebench
