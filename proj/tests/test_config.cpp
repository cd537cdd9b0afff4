#include <gtest/gtest.h>

#include <sstream>
#include <string>

#include "maebench/config.hpp"

using maebench::config_error;
using maebench::experiment_config;
using maebench::parse_experiment_config;
using maebench::render_experiment_config;
using maebench::task_kind;

namespace {

experiment_config parse_text(const std::string& text) {
    std::istringstream in(text);
    return parse_experiment_config(in);
}

std::string error_text(const std::string& text) {
    try {
        parse_text(text);
    } catch (const config_error& e) {
        return e.what();
    }
    ADD_FAILURE() << "config was accepted:\n" << text;
    return "";
}

}  // namespace

TEST(ConfigRender, DefaultsAreAFixpointUnderParse) {
    const std::string once = render_experiment_config(experiment_config{});
    const std::string twice = render_experiment_config(parse_text(once));
    EXPECT_EQ(once, twice);
}

TEST(ConfigRender, EveryKeyAppearsInResolvedText) {
    const std::string text = render_experiment_config(experiment_config{});
    for (const char* key :
         {"seed", "out", "train", "val", "test", "preset", "image_side", "patch_side", "embed_dim",
          "depth", "num_heads", "mlp_ratio", "in_channels", "use_cls", "decoder_dim",
          "decoder_depth", "decoder_heads", "mask_ratio", "epochs", "warmup_epochs", "batch_size",
          "peak_lr", "min_lr", "weight_decay", "normalize_targets", "augment", "task",
          "num_classes", "label_smoothing", "freeze_encoder", "shots", "head_hidden",
          "score_threshold", "nms_iou"})
        EXPECT_NE(text.find(std::string(key) + " = "), std::string::npos) << key;
    for (const char* sec : {"[run]", "[data]", "[model]", "[pretrain]", "[finetune]"})
        EXPECT_NE(text.find(sec), std::string::npos) << sec;
}

TEST(ConfigParse, RoundTripsNonDefaultValues) {
    experiment_config c;
    c.run.seed = 99;
    c.run.out = "runs/exp a";  // paths may contain spaces
    c.data.train = "data/train.jsonl";
    c.model_preset = "paper-encoder";
    c.model = maebench::vit_preset("paper-encoder");
    c.decoder_dim = 512;
    c.decoder_depth = 8;
    c.decoder_heads = 16;
    c.pretrain.mask_ratio = 0.6;
    c.pretrain.peak_lr = 2.5e-4;
    c.finetune.task = task_kind::localization;
    c.finetune.num_classes = 15;
    c.finetune.shots = 50;

    const experiment_config back = parse_text(render_experiment_config(c));
    EXPECT_EQ(back.run.seed, 99u);
    EXPECT_EQ(back.run.out, "runs/exp a");
    EXPECT_EQ(back.data.train, "data/train.jsonl");
    EXPECT_EQ(back.model.embed_dim, 1024u);
    EXPECT_EQ(back.decoder_depth, 8u);
    EXPECT_DOUBLE_EQ(back.pretrain.mask_ratio, 0.6);
    EXPECT_DOUBLE_EQ(back.pretrain.peak_lr, 2.5e-4);
    EXPECT_EQ(back.finetune.task, task_kind::localization);
    EXPECT_EQ(back.finetune.num_classes, 15u);
    ASSERT_TRUE(back.finetune.shots.has_value());
    EXPECT_EQ(*back.finetune.shots, 50u);
}

TEST(ConfigParse, PresetActsAsBaseRegardlessOfKeyOrder) {
    // embed_dim appears before preset; the preset must not clobber it.
    const experiment_config c = parse_text(
        "[model]\n"
        "embed_dim = 256\n"
        "num_heads = 8\n"
        "preset = paper-encoder\n");
    EXPECT_EQ(c.model.image_side, 224u);
    EXPECT_EQ(c.model.depth, 24u);
    EXPECT_EQ(c.model.embed_dim, 256u);
    EXPECT_EQ(c.model.num_heads, 8u);
    EXPECT_EQ(c.decoder_dim, 512u);
    EXPECT_EQ(c.model_preset, "paper-encoder");
}

TEST(ConfigParse, CommentsBlankLinesAndWhitespaceAreIgnored) {
    const experiment_config c = parse_text(
        "# a comment\n"
        "\n"
        "   ; another comment\n"
        "[run]\n"
        "  seed   =   7\n"
        "\t out = x\n");
    EXPECT_EQ(c.run.seed, 7u);
    EXPECT_EQ(c.run.out, "x");
}

TEST(ConfigParse, SeedFlowsIntoBothLoops)
{
    const experiment_config c = parse_text("[run]\nseed = 1234\n");
    EXPECT_EQ(c.pretrain.seed, 1234u);
    EXPECT_EQ(c.finetune.seed, 1234u);
}

TEST(ConfigParse, ShotsAcceptsNoneAndNumbers) {
    EXPECT_FALSE(parse_text("[finetune]\nshots = none\n").finetune.shots.has_value());
    const auto c = parse_text("[finetune]\nshots = 50\n");
    ASSERT_TRUE(c.finetune.shots.has_value());
    EXPECT_EQ(*c.finetune.shots, 50u);
    EXPECT_NE(error_text("[finetune]\nshots = 0\n").find("shots"), std::string::npos);
}

TEST(ConfigErrors, AllProblemsAreListedAtOnce) {
    const std::string msg = error_text(
        "stray = 1\n"            // key before any section
        "[model]\n"
        "embde_dim = 64\n"       // typo: unknown key
        "depth = -3\n"           // bad number
        "depth = 4\n"            // duplicate
        "[nosuch]\n"             // unknown section
        "x = 1\n"
        "[pretrain]\n"
        "mask_ratio = 1.5\n");   // semantic violation
    EXPECT_NE(msg.find("line 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("before any [section]"), std::string::npos);
    EXPECT_NE(msg.find("embde_dim"), std::string::npos);
    EXPECT_NE(msg.find("line 4"), std::string::npos);
    EXPECT_NE(msg.find("duplicate key 'depth'"), std::string::npos);
    EXPECT_NE(msg.find("unknown section [nosuch]"), std::string::npos);
    EXPECT_NE(msg.find("mask_ratio"), std::string::npos);
    EXPECT_NE(msg.find("6 problems"), std::string::npos) << msg;
}

TEST(ConfigErrors, ValueProblemsNameSectionKeyAndLine) {
    const std::string msg = error_text("[finetune]\nepochs = soon\n");
    EXPECT_NE(msg.find("line 2: finetune.epochs"), std::string::npos) << msg;
    EXPECT_NE(msg.find("'soon'"), std::string::npos);
}

TEST(ConfigErrors, BooleansAreStrict) {
    const std::string msg = error_text("[model]\nuse_cls = yes\n");
    EXPECT_NE(msg.find("model.use_cls"), std::string::npos);
    EXPECT_NE(msg.find("expected true or false"), std::string::npos);
}

TEST(ConfigErrors, NegativeCountsAreRejected) {
    EXPECT_NE(error_text("[run]\nseed = -1\n").find("run.seed"), std::string::npos);
    EXPECT_NE(error_text("[finetune]\nhead_hidden = -2\n").find("finetune.head_hidden"),
              std::string::npos);
}

TEST(ConfigErrors, UnknownPresetListsTheChoices) {
    const std::string msg = error_text("[model]\npreset = gigantic\n");
    EXPECT_NE(msg.find("desk-tiny, paper-encoder, or paper-decoder"), std::string::npos) << msg;
}

TEST(ConfigErrors, UnknownTaskListsTheChoices) {
    const std::string msg = error_text("[finetune]\ntask = regression\n");
    EXPECT_NE(msg.find("binary, multiclass, multilabel, localization"), std::string::npos) << msg;
}

TEST(ConfigErrors, RepeatedSectionIsReported) {
    const std::string msg = error_text("[run]\nseed = 1\n[run]\nseed = 2\n");
    EXPECT_NE(msg.find("section [run] appears twice"), std::string::npos) << msg;
}

TEST(ConfigErrors, DecoderGeometryIsChecked) {
    const std::string msg = error_text("[model]\ndecoder_dim = 30\ndecoder_heads = 4\n");
    EXPECT_NE(msg.find("decoder_dim"), std::string::npos) << msg;
}

TEST(ConfigErrors, SemanticCrossFieldChecksFold) {
    // binary task with 3 classes and warmup > epochs: both reported.
    const std::string msg = error_text(
        "[finetune]\n"
        "task = binary\n"
        "num_classes = 3\n"
        "epochs = 2\n"
        "warmup_epochs = 5\n");
    EXPECT_NE(msg.find("binary"), std::string::npos) << msg;
    EXPECT_NE(msg.find("warmup_epochs exceeds epochs"), std::string::npos);
}

TEST(ConfigParse, MissingFileIsAnIoError) {
    EXPECT_THROW(parse_experiment_config(std::string("/nonexistent/cfg.ini")), maebench::io_error);
}
