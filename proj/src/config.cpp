#include "fsm/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <vector>

namespace fsm {

namespace {

std::string trim(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

bool valid_key(const std::string& key) {
    if (key.empty() || key.front() == '.' || key.back() == '.') return false;
    if (key.find('.') == std::string::npos) return false;
    if (key.find("..") != std::string::npos) return false;
    for (char c : key) {
        if (!(std::islower(static_cast<unsigned char>(c)) ||
              std::isdigit(static_cast<unsigned char>(c)) || c == '_' || c == '.'))
            return false;
    }
    return true;
}

[[noreturn]] void fail_at(const std::string& origin, int line, const std::string& what) {
    throw ConfigError("config: " + origin + ":" + std::to_string(line) + ": " + what);
}

// One pass over the text. Include lines recurse through `on_include`; the
// text-only entry point passes a handler that rejects them.
void parse_into(const std::string& text, const std::string& origin, KeyValues& out,
                const std::function<void(const std::string&, int, KeyValues&)>& on_include) {
    std::istringstream in(text);
    std::string raw;
    int line = 0;
    while (std::getline(in, raw)) {
        ++line;
        if (!raw.empty() && raw.back() == '\r') raw.pop_back();
        if (auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
        std::string s = trim(raw);
        if (s.empty()) continue;
        if (s.rfind("include", 0) == 0 &&
            (s.size() == 7 || std::isspace(static_cast<unsigned char>(s[7])))) {
            std::string path = trim(s.substr(7));
            if (path.empty()) fail_at(origin, line, "include needs a file path");
            on_include(path, line, out);
            continue;
        }
        auto eq = s.find('=');
        if (eq == std::string::npos)
            fail_at(origin, line, "expected 'section.key = value'");
        std::string key = trim(s.substr(0, eq));
        std::string value = trim(s.substr(eq + 1));
        if (!valid_key(key))
            fail_at(origin, line, "bad key '" + key + "' (want section.key, lower_snake)");
        out[key] = value;  // later assignment wins
    }
}

void parse_file_into(const std::string& path, KeyValues& out, int depth) {
    if (depth > 16) throw ConfigError("config: include depth exceeds 16 (cycle?)");
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    std::filesystem::path base = std::filesystem::path(path).parent_path();
    parse_into(buf.str(), path, out,
               [&](const std::string& inc, int, KeyValues& kv) {
                   std::filesystem::path p(inc);
                   if (p.is_relative()) p = base / p;
                   parse_file_into(p.string(), kv, depth + 1);
               });
}

// ---- typed value parsing ------------------------------------------------

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const char* want) {
    throw ConfigError("config: key '" + key + "': cannot parse '" + value + "' as " + want);
}

void parse_value(const std::string& key, const std::string& v, int& out) {
    int x = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "an integer");
    out = x;
}

void parse_value(const std::string& key, const std::string& v, uint64_t& out) {
    uint64_t x = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc() || p != v.data() + v.size())
        bad_value(key, v, "an unsigned integer");
    out = x;
}

void parse_value(const std::string& key, const std::string& v, double& out) {
    double x = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "a number");
    out = x;
}

void parse_value(const std::string& key, const std::string& v, bool& out) {
    if (v == "true") out = true;
    else if (v == "false") out = false;
    else bad_value(key, v, "true or false");
}

void parse_value(const std::string&, const std::string& v, std::string& out) { out = v; }

// ---- printing (shortest round-trip for floats) ---------------------------

std::string show(int v) { return std::to_string(v); }
std::string show(uint64_t v) { return std::to_string(v); }
std::string show(bool v) { return v ? "true" : "false"; }
std::string show(const std::string& v) { return v; }
std::string show(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    (void)ec;
    return std::string(buf, p);
}

// Single source of truth for the key set: calls f(key, field) for every
// configuration field. Both the loader and the echo iterate this.
template <class F>
void for_each_field(ExperimentConfig& c, F&& f) {
    f("dataset.id", c.dataset.id);
    f("dataset.dir", c.dataset.dir);
    f("dataset.manifest", c.dataset.manifest);
    f("dataset.classes", c.dataset.classes);
    f("dataset.speakers", c.dataset.speakers);
    f("dataset.items_per_class", c.dataset.items_per_class);
    f("dataset.image_noise", c.dataset.image_noise);
    f("dataset.speech_noise", c.dataset.speech_noise);
    f("dataset.base_word_sec", c.dataset.base_word_sec);
    f("dataset.class_offset", c.dataset.class_offset);

    f("background.enabled", c.background_enabled);
    f("background.id", c.background.id);
    f("background.dir", c.background.dir);
    f("background.manifest", c.background.manifest);
    f("background.classes", c.background.classes);
    f("background.speakers", c.background.speakers);
    f("background.items_per_class", c.background.items_per_class);
    f("background.image_noise", c.background.image_noise);
    f("background.speech_noise", c.background.speech_noise);
    f("background.base_word_sec", c.background.base_word_sec);
    f("background.class_offset", c.background.class_offset);

    f("mfcc.frame_ms", c.mfcc.frame_ms);
    f("mfcc.hop_ms", c.mfcc.hop_ms);
    f("mfcc.filters", c.mfcc.n_filters);
    f("mfcc.cepstra", c.mfcc.n_cepstra);
    f("mfcc.preemphasis", c.mfcc.preemphasis);
    f("mfcc.cmvn", c.mfcc.cmvn);

    f("model.modality", c.model_modality);
    f("model.objective", c.model_objective);
    f("model.embed_dim", c.embed_dim);
    f("model.conv1", c.conv1);
    f("model.conv2", c.conv2);
    f("model.conv3", c.conv3);
    f("model.gru_units", c.gru_units);
    f("model.gru_layers", c.gru_layers);
    f("model.margin", c.margin);
    f("model.classes", c.model_classes);

    f("pairs.source", c.pairs_source);
    f("pairs.k", c.pairs_k);
    f("pairs.file", c.pairs_file);
    f("pairs.encoder", c.pairs_encoder);

    f("train.epochs", c.train_epochs);
    f("train.pretrain_epochs", c.train_pretrain_epochs);
    f("train.batch", c.train_batch);
    f("train.lr", c.train_lr);
    f("train.patience", c.train_patience);
    f("train.seeds", c.train_seeds);
    f("train.verbose", c.train_verbose);

    f("eval.task", c.eval_task);
    f("eval.l", c.eval_l);
    f("eval.k", c.eval_k);
    f("eval.episodes", c.eval_episodes);
    f("eval.queries", c.eval_queries);
    f("eval.seeds", c.eval_seeds);
    f("eval.class_mean", c.eval_class_mean);
    f("eval.speech_models", c.eval_speech_models);
    f("eval.vision_models", c.eval_vision_models);
    f("eval.label", c.eval_label);
    f("eval.audit", c.eval_audit);

    f("run.seed", c.seed);
    f("run.threads", c.threads);
    f("run.out", c.out);
}

void require(bool ok, const std::string& what) {
    if (!ok) throw ConfigError("config: " + what);
}

void check_dataset(const char* section, const DatasetParams& d) {
    std::string s(section);
    require(!d.id.empty(), s + ".id must not be empty");
    require(d.classes >= 1, s + ".classes must be at least 1");
    require(d.speakers >= 1, s + ".speakers must be at least 1");
    require(d.items_per_class >= 1, s + ".items_per_class must be at least 1");
    require(d.image_noise >= 0.0, s + ".image_noise must not be negative");
    require(d.speech_noise >= 0.0, s + ".speech_noise must not be negative");
    require(d.base_word_sec > 0.0, s + ".base_word_sec must be positive");
    require(d.class_offset >= 0, s + ".class_offset must not be negative");
}

bool one_of(const std::string& v, std::initializer_list<const char*> allowed) {
    return std::any_of(allowed.begin(), allowed.end(),
                       [&](const char* a) { return v == a; });
}

void validate(const ExperimentConfig& c) {
    check_dataset("dataset", c.dataset);
    check_dataset("background", c.background);
    require(c.mfcc.frame_ms > 0.0, "mfcc.frame_ms must be positive");
    require(c.mfcc.hop_ms > 0.0, "mfcc.hop_ms must be positive");
    require(c.mfcc.n_filters >= 1, "mfcc.filters must be at least 1");
    require(c.mfcc.n_cepstra >= 1 && c.mfcc.n_cepstra <= c.mfcc.n_filters,
            "mfcc.cepstra must be in [1, mfcc.filters]");
    require(c.mfcc.preemphasis >= 0.0 && c.mfcc.preemphasis < 1.0,
            "mfcc.preemphasis must be in [0, 1)");
    require(one_of(c.model_modality, {"speech", "vision"}),
            "model.modality must be speech or vision, got '" + c.model_modality + "'");
    require(one_of(c.model_objective, {"ae", "cae", "ae_cae", "classifier", "siamese"}),
            "model.objective must be one of ae, cae, ae_cae, classifier, siamese; got '" +
                c.model_objective + "'");
    require(c.embed_dim >= 1, "model.embed_dim must be at least 1");
    require(c.conv1 >= 1 && c.conv2 >= 1 && c.conv3 >= 1,
            "model.conv1..conv3 must be at least 1");
    require(c.gru_units >= 1, "model.gru_units must be at least 1");
    require(c.gru_layers >= 1, "model.gru_layers must be at least 1");
    require(c.margin > 0.0, "model.margin must be positive");
    require(c.model_classes >= 0, "model.classes must not be negative");
    require(one_of(c.pairs_source, {"unsupervised", "encoder", "oracle"}),
            "pairs.source must be unsupervised, encoder, or oracle; got '" +
                c.pairs_source + "'");
    require(c.pairs_k >= 1, "pairs.k must be at least 1");
    require(c.train_epochs >= 1, "train.epochs must be at least 1");
    require(c.train_pretrain_epochs >= 0, "train.pretrain_epochs must not be negative");
    require(c.train_batch >= 0, "train.batch must not be negative");
    require(c.train_lr >= 0.0, "train.lr must not be negative");
    require(c.train_patience >= 0, "train.patience must not be negative");
    require(c.train_seeds >= 1, "train.seeds must be at least 1");
    std::string task = c.eval_task;
    std::replace(task.begin(), task.end(), '-', '_');
    require(one_of(task, {"unimodal_speech", "unimodal_vision", "multimodal"}),
            "eval.task must be unimodal-speech, unimodal-vision, or multimodal; got '" +
                c.eval_task + "'");
    require(c.eval_l >= 2, "eval.l must be at least 2");
    require(c.eval_k >= 1, "eval.k must be at least 1");
    require(c.eval_episodes >= 1, "eval.episodes must be at least 1");
    require(c.eval_queries >= 1, "eval.queries must be at least 1");
    require(c.eval_seeds >= 1, "eval.seeds must be at least 1");
    require(c.threads >= 0, "run.threads must not be negative");
    require(!c.out.empty(), "run.out must not be empty");
}

}  // namespace

KeyValues parse_config_text(const std::string& text, const std::string& origin) {
    KeyValues out;
    parse_into(text, origin, out, [&](const std::string&, int line, KeyValues&) {
        fail_at(origin, line, "include is only available when parsing a file");
    });
    return out;
}

KeyValues parse_config_file(const std::string& path) {
    KeyValues out;
    parse_file_into(path, out, 0);
    return out;
}

ExperimentConfig config_from(const KeyValues& kv) {
    ExperimentConfig cfg;
    std::set<std::string> known;
    for_each_field(cfg, [&](const char* key, auto& field) {
        known.insert(key);
        auto it = kv.find(key);
        if (it != kv.end()) parse_value(key, it->second, field);
    });
    for (const auto& [key, value] : kv) {
        (void)value;
        if (!known.count(key)) throw ConfigError("config: unknown key '" + key + "'");
    }
    validate(cfg);
    return cfg;
}

std::string resolved_config(const ExperimentConfig& cfg) {
    std::string text;
    ExperimentConfig& mut = const_cast<ExperimentConfig&>(cfg);
    for_each_field(mut, [&](const char* key, auto& field) {
        text += key;
        text += " = ";
        text += show(field);
        text += "\n";
    });
    return text;
}

}  // namespace fsm
