#pragma once

// Experiment configuration: one INI-style text file describing a whole run.
// Sections are [run], [data], [model], [pretrain], [finetune]; every key has
// a default, unknown sections or keys are errors, and parsing reports every
// problem in the file at once rather than stopping at the first. The same
// struct renders back to canonical text so a run can write its fully
// resolved settings next to its outputs.

#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "maebench/errors.hpp"
#include "maebench/finetune.hpp"
#include "maebench/mae.hpp"
#include "maebench/vit.hpp"

namespace maebench {

struct data_config {
    std::string train;  // manifest paths; empty means "not provided"
    std::string val;
    std::string test;
};

struct run_config {
    std::uint64_t seed = 0;
    std::string out = "runs/out";
};

// Everything a command needs, resolved. The [model] section covers both the
// encoder and the pretraining decoder; `preset` names one of the reference
// shapes from vit_preset and acts as the base that explicit keys override,
// wherever it appears in the section.
struct experiment_config {
    run_config run;
    data_config data;
    std::string model_preset = "desk-tiny";
    vit_config model;
    std::size_t decoder_dim = 32;
    std::size_t decoder_depth = 2;
    std::size_t decoder_heads = 4;
    pretrain_config pretrain;
    finetune_config finetune;
    bool pretrain_augment = false;

    experiment_config() {
        // File-free default is the desk-scale run; paper-scale counts would
        // make every smoke path absurd. num_classes starts valid-but-small;
        // commands cross-check it against the manifest's class list.
        pretrain.epochs = 30;
        pretrain.warmup_epochs = 3;
        pretrain.batch_size = 16;
        finetune.num_classes = 2;
    }
};

namespace detail {

inline std::size_t decoder_dim_for_preset(const std::string& name) {
    return name == "desk-tiny" ? 32 : 512;
}
inline std::size_t decoder_depth_for_preset(const std::string& name) {
    return name == "desk-tiny" ? 2 : 8;
}
inline std::size_t decoder_heads_for_preset(const std::string& name) {
    return name == "desk-tiny" ? 4 : 16;
}

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

struct ini_pair {
    std::size_t lineno = 0;
    std::string key;
    std::string value;
};

struct ini_section {
    std::size_t lineno = 0;
    std::string name;
    std::vector<ini_pair> pairs;
};

// Line-level scan: full-line comments (# or ;), [section] headers, key =
// value pairs. Anything else is a violation. Values keep interior spaces
// (paths may contain them); there are no trailing comments.
inline std::vector<ini_section> scan_ini(std::istream& in, std::vector<std::string>& problems) {
    std::vector<ini_section> sections;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']' || t.size() < 3) {
                problems.push_back("line " + std::to_string(lineno) + ": malformed section header '" +
                                   t + "'");
                continue;
            }
            sections.push_back({lineno, trim(t.substr(1, t.size() - 2)), {}});
            continue;
        }
        const std::size_t eq = t.find('=');
        if (eq == std::string::npos) {
            problems.push_back("line " + std::to_string(lineno) + ": expected 'key = value', got '" +
                               t + "'");
            continue;
        }
        ini_pair p{lineno, trim(t.substr(0, eq)), trim(t.substr(eq + 1))};
        if (p.key.empty()) {
            problems.push_back("line " + std::to_string(lineno) + ": empty key");
            continue;
        }
        if (sections.empty()) {
            problems.push_back("line " + std::to_string(lineno) + ": key '" + p.key +
                               "' appears before any [section]");
            continue;
        }
        sections.back().pairs.push_back(std::move(p));
    }
    return sections;
}

// Typed setters collect violations instead of throwing so one pass can
// report the whole file.
class ini_reader {
  public:
    ini_reader(const std::string& section, std::vector<std::string>& problems)
        : section_(section), problems_(problems) {}

    void fail(const ini_pair& p, const std::string& why) {
        problems_.push_back("line " + std::to_string(p.lineno) + ": " + section_ + "." + p.key +
                            ": " + why + ", got '" + p.value + "'");
    }

    void read(const ini_pair& p, std::string& out) { out = p.value; }

    void read(const ini_pair& p, bool& out) {
        if (p.value == "true") out = true;
        else if (p.value == "false") out = false;
        else fail(p, "expected true or false");
    }

    void read(const ini_pair& p, std::uint64_t& out) {
        if (!parse_u64(p.value, out)) fail(p, "expected a non-negative integer");
    }

    void read(const ini_pair& p, double& out) {
        try {
            std::size_t used = 0;
            const double v = std::stod(p.value, &used);
            if (used != p.value.size()) throw std::invalid_argument("trailing characters");
            out = v;
        } catch (const std::exception&) {
            fail(p, "expected a number");
        }
    }

    // Optional count: the word "none" clears it.
    void read(const ini_pair& p, std::optional<std::size_t>& out) {
        if (p.value == "none") {
            out.reset();
            return;
        }
        std::uint64_t v = 0;
        if (parse_u64(p.value, v)) out = static_cast<std::size_t>(v);
        else fail(p, "expected a non-negative integer or none");
    }

    void read(const ini_pair& p, task_kind& out) {
        try {
            out = parse_task(p.value);
        } catch (const config_error&) {
            fail(p, "expected one of binary, multiclass, multilabel, localization");
        }
    }

  private:
    static bool parse_u64(const std::string& s, std::uint64_t& out) {
        if (s.empty() || s[0] == '-' || s[0] == '+') return false;
        try {
            std::size_t used = 0;
            out = std::stoull(s, &used);
            return used == s.size();
        } catch (const std::exception&) {
            return false;
        }
    }

    std::string section_;
    std::vector<std::string>& problems_;
};

}  // namespace detail

// Parses and fully validates a config file. Every scan error, unknown
// name, duplicate, bad value, and semantic violation from the section
// validators is listed in one config_error.
inline experiment_config parse_experiment_config(std::istream& in) {
    std::vector<std::string> problems;
    std::vector<detail::ini_section> sections = detail::scan_ini(in, problems);

    experiment_config cfg;
    std::vector<std::string> seen_sections;
    for (const detail::ini_section& sec : sections) {
        for (const std::string& prior : seen_sections)
            if (prior == sec.name)
                problems.push_back("line " + std::to_string(sec.lineno) + ": section [" + sec.name +
                                   "] appears twice");
        seen_sections.push_back(sec.name);

        detail::ini_reader rd(sec.name, problems);
        std::vector<std::string> seen_keys;
        auto once = [&](const detail::ini_pair& p) {
            for (const std::string& k : seen_keys)
                if (k == p.key) {
                    problems.push_back("line " + std::to_string(p.lineno) + ": duplicate key '" +
                                       p.key + "' in [" + sec.name + "]");
                    return false;
                }
            seen_keys.push_back(p.key);
            return true;
        };

        if (sec.name == "run") {
            for (const auto& p : sec.pairs) {
                if (!once(p)) continue;
                if (p.key == "seed") rd.read(p, cfg.run.seed);
                else if (p.key == "out") rd.read(p, cfg.run.out);
                else problems.push_back("line " + std::to_string(p.lineno) + ": unknown key '" +
                                        p.key + "' in [run]");
            }
        } else if (sec.name == "data") {
            for (const auto& p : sec.pairs) {
                if (!once(p)) continue;
                if (p.key == "train") rd.read(p, cfg.data.train);
                else if (p.key == "val") rd.read(p, cfg.data.val);
                else if (p.key == "test") rd.read(p, cfg.data.test);
                else problems.push_back("line " + std::to_string(p.lineno) + ": unknown key '" +
                                        p.key + "' in [data]");
            }
        } else if (sec.name == "model") {
            // The preset is a base layer: apply it first so explicit keys
            // override it regardless of their order in the file.
            for (const auto& p : sec.pairs) {
                if (p.key != "preset") continue;
                try {
                    cfg.model = vit_preset(p.value);
                    cfg.model_preset = p.value;
                    cfg.decoder_dim = detail::decoder_dim_for_preset(p.value);
                    cfg.decoder_depth = detail::decoder_depth_for_preset(p.value);
                    cfg.decoder_heads = detail::decoder_heads_for_preset(p.value);
                } catch (const config_error&) {
                    rd.fail(p, "expected desk-tiny, paper-encoder, or paper-decoder");
                }
            }
            for (const auto& p : sec.pairs) {
                if (!once(p)) continue;
                if (p.key == "preset") continue;  // handled above
                else if (p.key == "image_side") rd.read(p, cfg.model.image_side);
                else if (p.key == "patch_side") rd.read(p, cfg.model.patch_side);
                else if (p.key == "embed_dim") rd.read(p, cfg.model.embed_dim);
                else if (p.key == "depth") rd.read(p, cfg.model.depth);
                else if (p.key == "num_heads") rd.read(p, cfg.model.num_heads);
                else if (p.key == "mlp_ratio") rd.read(p, cfg.model.mlp_ratio);
                else if (p.key == "in_channels") rd.read(p, cfg.model.in_channels);
                else if (p.key == "use_cls") rd.read(p, cfg.model.use_cls);
                else if (p.key == "decoder_dim") rd.read(p, cfg.decoder_dim);
                else if (p.key == "decoder_depth") rd.read(p, cfg.decoder_depth);
                else if (p.key == "decoder_heads") rd.read(p, cfg.decoder_heads);
                else problems.push_back("line " + std::to_string(p.lineno) + ": unknown key '" +
                                        p.key + "' in [model]");
            }
        } else if (sec.name == "pretrain") {
            for (const auto& p : sec.pairs) {
                if (!once(p)) continue;
                if (p.key == "mask_ratio") rd.read(p, cfg.pretrain.mask_ratio);
                else if (p.key == "epochs") rd.read(p, cfg.pretrain.epochs);
                else if (p.key == "warmup_epochs") rd.read(p, cfg.pretrain.warmup_epochs);
                else if (p.key == "batch_size") rd.read(p, cfg.pretrain.batch_size);
                else if (p.key == "peak_lr") rd.read(p, cfg.pretrain.peak_lr);
                else if (p.key == "min_lr") rd.read(p, cfg.pretrain.min_lr);
                else if (p.key == "weight_decay") rd.read(p, cfg.pretrain.weight_decay);
                else if (p.key == "normalize_targets") rd.read(p, cfg.pretrain.normalize_targets);
                else if (p.key == "augment") rd.read(p, cfg.pretrain_augment);
                else problems.push_back("line " + std::to_string(p.lineno) + ": unknown key '" +
                                        p.key + "' in [pretrain]");
            }
        } else if (sec.name == "finetune") {
            for (const auto& p : sec.pairs) {
                if (!once(p)) continue;
                if (p.key == "task") rd.read(p, cfg.finetune.task);
                else if (p.key == "num_classes") rd.read(p, cfg.finetune.num_classes);
                else if (p.key == "label_smoothing") rd.read(p, cfg.finetune.label_smoothing);
                else if (p.key == "batch_size") rd.read(p, cfg.finetune.batch_size);
                else if (p.key == "epochs") rd.read(p, cfg.finetune.epochs);
                else if (p.key == "warmup_epochs") rd.read(p, cfg.finetune.warmup_epochs);
                else if (p.key == "peak_lr") rd.read(p, cfg.finetune.peak_lr);
                else if (p.key == "min_lr") rd.read(p, cfg.finetune.min_lr);
                else if (p.key == "weight_decay") rd.read(p, cfg.finetune.weight_decay);
                else if (p.key == "freeze_encoder") rd.read(p, cfg.finetune.freeze_encoder);
                else if (p.key == "shots") rd.read(p, cfg.finetune.shots);
                else if (p.key == "head_hidden") rd.read(p, cfg.finetune.head_hidden);
                else if (p.key == "score_threshold") rd.read(p, cfg.finetune.score_threshold);
                else if (p.key == "nms_iou") rd.read(p, cfg.finetune.nms_iou);
                else problems.push_back("line " + std::to_string(p.lineno) + ": unknown key '" +
                                        p.key + "' in [finetune]");
            }
        } else {
            problems.push_back("line " + std::to_string(sec.lineno) + ": unknown section [" +
                               sec.name + "]");
        }
    }

    // One seed rules the run; the per-section copies exist because the loops
    // own their randomness.
    cfg.pretrain.seed = cfg.run.seed;
    cfg.finetune.seed = cfg.run.seed;

    // Semantic checks only make sense on values that parsed; fold their
    // messages into the same report.
    auto fold = [&problems](const char* where, const auto& section_cfg) {
        try {
            section_cfg.validate();
        } catch (const config_error& e) {
            std::istringstream lines(e.what());
            std::string l;
            std::getline(lines, l);  // drop the generic first line
            while (std::getline(lines, l))
                if (!detail::trim(l).empty()) problems.push_back(std::string(where) + ": " + detail::trim(l));
        }
    };
    fold("model", cfg.model);
    fold("pretrain", cfg.pretrain);
    fold("finetune", cfg.finetune);
    if (cfg.decoder_heads == 0 || cfg.decoder_dim % cfg.decoder_heads != 0)
        problems.push_back("model: decoder_dim " + std::to_string(cfg.decoder_dim) +
                           " not divisible by decoder_heads " + std::to_string(cfg.decoder_heads));
    if (cfg.decoder_dim % 4 != 0)
        problems.push_back("model: decoder_dim must be a multiple of 4 for 2D sine-cosine positions");
    if (cfg.decoder_depth == 0) problems.push_back("model: decoder_depth must be positive");

    if (!problems.empty()) {
        std::string msg = "invalid config (" + std::to_string(problems.size()) + " problem" +
                          (problems.size() == 1 ? "" : "s") + "):\n";
        for (const std::string& p : problems) msg += "  " + p + "\n";
        throw config_error(msg);
    }
    return cfg;
}

inline experiment_config parse_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open config file: " + path);
    return parse_experiment_config(in);
}

// Canonical text form with every key present. parse(render(c)) reproduces c,
// and render(parse(text)) is a fixpoint, which is what makes the resolved
// copy written next to run outputs trustworthy.
inline std::string render_experiment_config(const experiment_config& cfg) {
    std::ostringstream out;
    out.precision(17);
    auto b = [](bool v) { return v ? "true" : "false"; };
    out << "[run]\n";
    out << "seed = " << cfg.run.seed << "\n";
    out << "out = " << cfg.run.out << "\n";
    out << "\n[data]\n";
    out << "train = " << cfg.data.train << "\n";
    out << "val = " << cfg.data.val << "\n";
    out << "test = " << cfg.data.test << "\n";
    out << "\n[model]\n";
    out << "preset = " << cfg.model_preset << "\n";
    out << "image_side = " << cfg.model.image_side << "\n";
    out << "patch_side = " << cfg.model.patch_side << "\n";
    out << "embed_dim = " << cfg.model.embed_dim << "\n";
    out << "depth = " << cfg.model.depth << "\n";
    out << "num_heads = " << cfg.model.num_heads << "\n";
    out << "mlp_ratio = " << cfg.model.mlp_ratio << "\n";
    out << "in_channels = " << cfg.model.in_channels << "\n";
    out << "use_cls = " << b(cfg.model.use_cls) << "\n";
    out << "decoder_dim = " << cfg.decoder_dim << "\n";
    out << "decoder_depth = " << cfg.decoder_depth << "\n";
    out << "decoder_heads = " << cfg.decoder_heads << "\n";
    out << "\n[pretrain]\n";
    out << "mask_ratio = " << cfg.pretrain.mask_ratio << "\n";
    out << "epochs = " << cfg.pretrain.epochs << "\n";
    out << "warmup_epochs = " << cfg.pretrain.warmup_epochs << "\n";
    out << "batch_size = " << cfg.pretrain.batch_size << "\n";
    out << "peak_lr = " << cfg.pretrain.peak_lr << "\n";
    out << "min_lr = " << cfg.pretrain.min_lr << "\n";
    out << "weight_decay = " << cfg.pretrain.weight_decay << "\n";
    out << "normalize_targets = " << b(cfg.pretrain.normalize_targets) << "\n";
    out << "augment = " << b(cfg.pretrain_augment) << "\n";
    out << "\n[finetune]\n";
    out << "task = " << task_name(cfg.finetune.task) << "\n";
    out << "num_classes = " << cfg.finetune.num_classes << "\n";
    out << "label_smoothing = " << cfg.finetune.label_smoothing << "\n";
    out << "batch_size = " << cfg.finetune.batch_size << "\n";
    out << "epochs = " << cfg.finetune.epochs << "\n";
    out << "warmup_epochs = " << cfg.finetune.warmup_epochs << "\n";
    out << "peak_lr = " << cfg.finetune.peak_lr << "\n";
    out << "min_lr = " << cfg.finetune.min_lr << "\n";
    out << "weight_decay = " << cfg.finetune.weight_decay << "\n";
    out << "freeze_encoder = " << b(cfg.finetune.freeze_encoder) << "\n";
    out << "shots = ";
    if (cfg.finetune.shots) out << *cfg.finetune.shots;
    else out << "none";
    out << "\n";
    out << "head_hidden = " << cfg.finetune.head_hidden << "\n";
    out << "score_threshold = " << cfg.finetune.score_threshold << "\n";
    out << "nms_iou = " << cfg.finetune.nms_iou << "\n";
    return std::move(out).str();
}

}  // namespace maebench
