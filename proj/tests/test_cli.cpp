// End-to-end checks of the maebench binary. Each test shells out to the real
// executable against synthetic images in a scratch directory and inspects
// exit codes, stdout JSON, and the files the run leaves behind.

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include <json.hpp>

#include "maebench/dataset.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct run_result {
    int exit_code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return std::move(buf).str();
}

run_result run_cli(const fs::path& scratch, const std::string& args,
                   const std::string& env_prefix = "") {
    const fs::path out = scratch / "_stdout.txt";
    const fs::path err = scratch / "_stderr.txt";
    const std::string cmd = env_prefix + std::string(MAEBENCH_CLI_PATH) + " " + args + " >" +
                            out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    run_result r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
}

json error_payload(const run_result& r) {
    json j = json::parse(r.out);
    return j.at("error");
}

fs::path fresh_dir(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / ("maebench_cli_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

void write_pgm(const fs::path& path, std::size_t w, std::size_t h,
               const std::vector<unsigned char>& px) {
    std::ofstream f(path, std::ios::binary);
    f << "P5\n" << w << " " << h << "\n255\n";
    f.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

// Deterministic bright-square-on-noise images: even indices get a square
// (the positive class), odd ones stay background only.
std::vector<unsigned char> square_image(std::size_t w, std::size_t h, std::size_t i, bool square,
                                        std::size_t* x0_out = nullptr,
                                        std::size_t* y0_out = nullptr) {
    std::vector<unsigned char> px(w * h);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            px[y * w + x] = static_cast<unsigned char>(20 + (x * 31 + y * 17 + i * 7) % 41);
    if (square) {
        const std::size_t x0 = 2 + (i * 5) % (w - 18), y0 = 2 + (i * 11) % (h - 18);
        for (std::size_t y = y0; y < y0 + 14; ++y)
            for (std::size_t x = x0; x < x0 + 14; ++x)
                px[y * w + x] = static_cast<unsigned char>(215 + (x + y + i) % 41);
        if (x0_out) *x0_out = x0;
        if (y0_out) *y0_out = y0;
    }
    return px;
}

const char* split_for(std::size_t i, std::size_t n) {
    if (i < (n * 6) / 10) return "train";
    if (i < (n * 8) / 10) return "val";
    return "test";
}

// Images plus a label CSV; half positive. With boxes, every image gets a
// square and a matching box row instead of a diagnosis label split.
fs::path make_dataset(const fs::path& dir, std::size_t n, bool with_boxes) {
    fs::create_directories(dir / "images");
    std::ostringstream csv;
    csv << (with_boxes ? "image,split,spot,boxes\n" : "image,split,spot\n");
    for (std::size_t i = 0; i < n; ++i) {
        const bool pos = with_boxes || i % 2 == 0;
        std::size_t x0 = 0, y0 = 0;
        const auto px = square_image(48, 48, i, pos, &x0, &y0);
        char name[16];
        std::snprintf(name, sizeof name, "img%02zu.pgm", i);
        write_pgm(dir / "images" / name, 48, 48, px);
        csv << name << "," << split_for(i, n) << "," << (pos ? 1 : 0);
        if (with_boxes) {
            csv << ",";
            if (pos) csv << "0:" << x0 << ":" << y0 << ":" << (x0 + 14) << ":" << (y0 + 14);
        }
        csv << "\n";
    }
    const fs::path labels = dir / "labels.csv";
    std::ofstream(labels) << csv.str();
    return labels;
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream(path) << text;
}

// Tiny end-to-end geometry: 32px desk-tiny encoder, short schedules.
std::string tiny_config(const fs::path& manifest, const fs::path& out) {
    std::ostringstream ini;
    ini << "[run]\nseed = 7\nout = " << out.string() << "\n";
    ini << "[data]\ntrain = " << manifest.string() << "\n";
    ini << "[pretrain]\nepochs = 2\nwarmup_epochs = 1\nbatch_size = 4\n";
    ini << "[finetune]\ntask = binary\nnum_classes = 1\nepochs = 6\nwarmup_epochs = 1\n";
    return ini.str();
}

// Shared pipeline artifacts: ingest + pretrain once, reuse across tests.
struct pipeline {
    fs::path dir;
    fs::path manifest;
    fs::path config;
    fs::path pretrain_ckpt;
    fs::path finetune_ckpt;
    json finetune_summary;
};

const pipeline& shared_pipeline() {
    static const pipeline p = [] {
        pipeline q;
        q.dir = fresh_dir("pipeline");
        make_dataset(q.dir, 10, false);
        q.manifest = q.dir / "data" / "ds.manifest";
        run_result r = run_cli(q.dir, "ingest --dir " + (q.dir / "images").string() +
                                          " --labels " + (q.dir / "labels.csv").string() +
                                          " --out " + q.manifest.string());
        if (r.exit_code != 0) throw std::runtime_error("pipeline ingest failed: " + r.err);

        q.config = q.dir / "exp.ini";
        write_file(q.config, tiny_config(q.manifest, q.dir / "pre"));
        r = run_cli(q.dir, "pretrain --config " + q.config.string());
        if (r.exit_code != 0) throw std::runtime_error("pipeline pretrain failed: " + r.err);
        q.pretrain_ckpt = q.dir / "pre" / "best.ckpt";

        r = run_cli(q.dir, "finetune --config " + q.config.string() + " --encoder " +
                               q.pretrain_ckpt.string() + " --train " + q.manifest.string() +
                               " --out " + (q.dir / "ft").string());
        if (r.exit_code != 0) throw std::runtime_error("pipeline finetune failed: " + r.err);
        q.finetune_summary = json::parse(r.out);
        q.finetune_ckpt = q.dir / "ft" / "best.ckpt";
        return q;
    }();
    return p;
}

}  // namespace

TEST(CliIngest, BuildsAManifestWithMeasuredStats) {
    const fs::path dir = fresh_dir("ingest");
    const fs::path labels = make_dataset(dir, 10, false);
    const fs::path manifest = dir / "out" / "ds.manifest";

    const run_result r = run_cli(dir, "ingest --dir " + (dir / "images").string() + " --labels " +
                                          labels.string() + " --out " + manifest.string());
    ASSERT_EQ(r.exit_code, 0) << r.err;

    const json summary = json::parse(r.out);
    EXPECT_EQ(summary.at("records").get<int>(), 10);
    EXPECT_EQ(summary.at("classes").get<int>(), 1);

    const maebench::manifest m = maebench::parse_manifest(manifest.string());
    ASSERT_EQ(m.records.size(), 10u);
    EXPECT_EQ(m.classes, std::vector<std::string>{"spot"});
    // stats measured from train pixels, not the defaults
    EXPECT_NE(m.mean, 0.5);
    EXPECT_GT(m.mean, 0.0);
    EXPECT_LT(m.mean, 1.0);
    for (const auto& rec : m.records) {
        EXPECT_EQ(rec.width, 48u);
        EXPECT_TRUE(fs::exists(manifest.parent_path() / rec.image_path))
            << "manifest-relative path broken: " << rec.image_path;
    }
}

TEST(CliIngest, RejectsBadLabelCellWithDataExit) {
    const fs::path dir = fresh_dir("ingest_bad");
    make_dataset(dir, 4, false);
    write_file(dir / "labels.csv",
               "image,split,spot\nimg00.pgm,train,1\nimg01.pgm,train,2\n");

    const run_result r = run_cli(dir, "ingest --dir " + (dir / "images").string() + " --labels " +
                                          (dir / "labels.csv").string() + " --out " +
                                          (dir / "m").string());
    EXPECT_EQ(r.exit_code, 3);
    const json err = error_payload(r);
    EXPECT_EQ(err.at("kind").get<std::string>(), "data");
    EXPECT_NE(err.at("message").get<std::string>().find("line 3"), std::string::npos);
    EXPECT_FALSE(r.err.empty());
}

TEST(CliIngest, ChestCropRefusesBoxLabels) {
    const fs::path dir = fresh_dir("ingest_crop_boxes");
    const fs::path labels = make_dataset(dir, 4, true);
    const run_result r =
        run_cli(dir, "ingest --chest-crop --dir " + (dir / "images").string() + " --labels " +
                         labels.string() + " --out " + (dir / "m").string());
    EXPECT_EQ(r.exit_code, 3);
    EXPECT_EQ(error_payload(r).at("type").get<std::string>(), "validation_error");
}

TEST(CliConfig, BadValuesFailWithConfigExitAndFullList) {
    const fs::path dir = fresh_dir("badconfig");
    write_file(dir / "bad.ini", "[run]\nseed = -4\nmystery = 1\n");
    const run_result r = run_cli(dir, "pretrain --config " + (dir / "bad.ini").string());
    EXPECT_EQ(r.exit_code, 2);
    const json err = error_payload(r);
    EXPECT_EQ(err.at("kind").get<std::string>(), "config");
    const std::string msg = err.at("message").get<std::string>();
    // both problems in one report
    EXPECT_NE(msg.find("seed"), std::string::npos);
    EXPECT_NE(msg.find("mystery"), std::string::npos);
}

TEST(CliConfig, MissingConfigFileIsAConfigError) {
    const fs::path dir = fresh_dir("noconfig");
    const run_result r = run_cli(dir, "pretrain --config " + (dir / "absent.ini").string());
    EXPECT_EQ(r.exit_code, 2);
}

TEST(CliPretrain, RunsAreBitwiseReproducibleAcrossThreadCounts) {
    const pipeline& p = shared_pipeline();
    const fs::path dir = fresh_dir("repro");

    const std::string base = "pretrain --config " + p.config.string() + " --out ";
    run_result r = run_cli(dir, base + (dir / "a").string());
    ASSERT_EQ(r.exit_code, 0) << r.err;
    r = run_cli(dir, base + (dir / "b").string(), "MAEBENCH_THREADS=3 ");
    ASSERT_EQ(r.exit_code, 0) << r.err;

    EXPECT_EQ(slurp(dir / "a" / "best.ckpt"), slurp(dir / "b" / "best.ckpt"));
    EXPECT_EQ(slurp(dir / "a" / "last.ckpt"), slurp(dir / "b" / "last.ckpt"));
    EXPECT_EQ(slurp(dir / "a" / "loss.jsonl"), slurp(dir / "b" / "loss.jsonl"));

    // the run dir explains itself: version stamp, input hashes, resolved config
    const json stamp = json::parse(slurp(dir / "a" / "run.json"));
    EXPECT_EQ(stamp.at("command").get<std::string>(), "pretrain");
    EXPECT_NE(stamp.at("version").get<std::string>().find("maebench"), std::string::npos);
    EXPECT_EQ(stamp.at("inputs").size(), 1u);
    EXPECT_TRUE(fs::exists(dir / "a" / "config.resolved.ini"));
}

TEST(CliFinetune, AdaptsTheEncoderAndLogsHistory) {
    const pipeline& p = shared_pipeline();

    const json& summary = p.finetune_summary;
    EXPECT_EQ(summary.at("train_samples_used").get<int>(), 6);
    EXPECT_GE(summary.at("best_metric").get<double>(), 0.5);
    EXPECT_TRUE(fs::exists(p.finetune_ckpt));

    std::istringstream hist(slurp(p.dir / "ft" / "history.jsonl"));
    std::string line;
    std::size_t epochs = 0;
    while (std::getline(hist, line))
        if (!line.empty()) {
            const json row = json::parse(line);
            EXPECT_TRUE(row.contains("train_loss"));
            EXPECT_TRUE(row.contains("val_metric"));
            ++epochs;
        }
    EXPECT_EQ(epochs, 6u);
}

TEST(CliEvaluate, ScoresASplitAndRefusesTheWrongCheckpointKind) {
    const pipeline& p = shared_pipeline();
    const fs::path dir = fresh_dir("eval");

    run_result r = run_cli(dir, "evaluate --checkpoint " + p.finetune_ckpt.string() + " --data " +
                                    p.manifest.string() + " --split val --name alpha --out " +
                                    (dir / "e").string());
    ASSERT_EQ(r.exit_code, 0) << r.err;
    const json rep = json::parse(r.out);
    EXPECT_EQ(rep.at("dataset").get<std::string>(), "alpha");
    EXPECT_EQ(rep.at("n_samples").get<int>(), 2);
    EXPECT_TRUE(rep.at("per_class").contains("spot"));
    EXPECT_TRUE(fs::exists(dir / "e" / "metrics.json"));

    // a pretraining checkpoint has no task head to evaluate
    r = run_cli(dir, "evaluate --checkpoint " + p.pretrain_ckpt.string() + " --data " +
                         p.manifest.string());
    EXPECT_EQ(r.exit_code, 3);
    EXPECT_EQ(error_payload(r).at("type").get<std::string>(), "validation_error");
}

TEST(CliEvaluate, RefusesAManifestWithADifferentClassCount) {
    const pipeline& p = shared_pipeline();
    const fs::path dir = fresh_dir("eval_mismatch");

    fs::create_directories(dir / "images");
    write_pgm(dir / "images" / "a.pgm", 48, 48, square_image(48, 48, 0, true));
    write_file(dir / "labels.csv", "image,split,left,right\na.pgm,test,1,0\n");
    run_result r = run_cli(dir, "ingest --dir " + (dir / "images").string() + " --labels " +
                                    (dir / "labels.csv").string() + " --out " +
                                    (dir / "two.manifest").string());
    ASSERT_EQ(r.exit_code, 0) << r.err;

    r = run_cli(dir, "evaluate --checkpoint " + p.finetune_ckpt.string() + " --data " +
                         (dir / "two.manifest").string());
    EXPECT_EQ(r.exit_code, 3);
    EXPECT_NE(error_payload(r).at("message").get<std::string>().find("declares"),
              std::string::npos);
}

TEST(CliReconstruct, WritesPanelsAndHonorsZeroRatio) {
    const pipeline& p = shared_pipeline();
    const fs::path dir = fresh_dir("recon");

    run_result r = run_cli(dir, "reconstruct --encoder " + p.pretrain_ckpt.string() + " --image " +
                                    (p.dir / "images" / "img00.pgm").string() + " --out " +
                                    (dir / "half").string() + " --mask-ratio 0.5 --seed 2");
    ASSERT_EQ(r.exit_code, 0) << r.err;
    const json summary = json::parse(r.out);
    EXPECT_EQ(summary.at("masked_patches").get<int>(), 32);
    EXPECT_EQ(summary.at("visible_patches").get<int>(), 32);
    for (const char* panel : {"original.pgm", "masked.pgm", "reconstruction.pgm"})
        EXPECT_TRUE(fs::exists(dir / "half" / panel)) << panel;
    // hidden patches really are hidden
    EXPECT_NE(slurp(dir / "half" / "masked.pgm"), slurp(dir / "half" / "original.pgm"));

    // nothing hidden: the masked panel equals the input
    r = run_cli(dir, "reconstruct --encoder " + p.pretrain_ckpt.string() + " --image " +
                         (p.dir / "images" / "img00.pgm").string() + " --out " +
                         (dir / "zero").string() + " --mask-ratio 0");
    ASSERT_EQ(r.exit_code, 0) << r.err;
    EXPECT_EQ(slurp(dir / "zero" / "masked.pgm"), slurp(dir / "zero" / "original.pgm"));

    r = run_cli(dir, "reconstruct --encoder " + p.pretrain_ckpt.string() + " --image " +
                         (p.dir / "images" / "img00.pgm").string() + " --out " +
                         (dir / "full").string() + " --mask-ratio 1.0");
    EXPECT_EQ(r.exit_code, 2);

    r = run_cli(dir, "reconstruct --encoder " + p.finetune_ckpt.string() + " --image " +
                         (p.dir / "images" / "img00.pgm").string() + " --out " +
                         (dir / "wrong").string());
    EXPECT_EQ(r.exit_code, 3);
}

namespace {

// A minimal metric report the report command accepts.
json handmade_report(const std::string& dataset, json auc_a, json auc_b) {
    auto vals = [](json auc) {
        return json{{"auc", std::move(auc)},
                    {"aupr", nullptr},
                    {"f1", nullptr},
                    {"acc", nullptr},
                    {"ap50", nullptr}};
    };
    json rep;
    rep["dataset"] = dataset;
    rep["classes"] = {"a", "b"};
    rep["per_class"] = {{"a", vals(std::move(auc_a))}, {"b", vals(std::move(auc_b))}};
    rep["macro"] = vals(nullptr);
    rep["ci"] = json::object();
    rep["n_samples"] = 4;
    rep["seed"] = 0;
    return rep;
}

}  // namespace

TEST(CliReport, FormatsPercentagesAndRecomputesTheMean) {
    const fs::path dir = fresh_dir("report");
    write_file(dir / "one.json", handmade_report("ds1", 0.7465, nullptr).dump());
    write_file(dir / "two.json", handmade_report("ds2", 0.505, 0.495).dump());

    run_result r = run_cli(dir, "report " + (dir / "one.json").string() + " " +
                                    (dir / "two.json").string() + " --csv");
    ASSERT_EQ(r.exit_code, 0) << r.err;
    std::istringstream lines(r.out);
    std::string header, row1, row2;
    std::getline(lines, header);
    std::getline(lines, row1);
    std::getline(lines, row2);
    EXPECT_EQ(header, "Dataset,a,b,Mean");
    // absent cells print "/" and stay out of the mean; 0.7465 rounds half-up
    EXPECT_EQ(row1, "ds1,74.7,/,74.7");
    EXPECT_EQ(row2, "ds2,50.5,49.5,50.0");

    // aligned text mode carries the same cells
    r = run_cli(dir, "report " + (dir / "one.json").string());
    ASSERT_EQ(r.exit_code, 0) << r.err;
    EXPECT_NE(r.out.find("Dataset"), std::string::npos);
    EXPECT_NE(r.out.find("74.7"), std::string::npos);

    // rows must share columns
    json other = handmade_report("ds3", 0.5, 0.5);
    other["classes"] = {"a", "c"};
    other["per_class"] = {{"a", other["per_class"]["a"]}, {"c", other["per_class"]["b"]}};
    write_file(dir / "three.json", other.dump());
    r = run_cli(dir, "report " + (dir / "one.json").string() + " " + (dir / "three.json").string());
    EXPECT_EQ(r.exit_code, 3);
    EXPECT_EQ(error_payload(r).at("type").get<std::string>(), "schema_error");
}

TEST(CliReport, WritesToAFileWhenAsked) {
    const fs::path dir = fresh_dir("report_file");
    write_file(dir / "one.json", handmade_report("ds1", 0.25, 0.75).dump());
    const run_result r = run_cli(dir, "report " + (dir / "one.json").string() + " --csv --out " +
                                          (dir / "table.csv").string());
    ASSERT_EQ(r.exit_code, 0) << r.err;
    EXPECT_TRUE(r.out.empty());
    EXPECT_NE(slurp(dir / "table.csv").find("ds1,25.0,75.0,50.0"), std::string::npos);
}
