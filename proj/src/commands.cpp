#include "fsm/commands.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <vector>

#include "fsm/data.hpp"
#include "fsm/episodes.hpp"
#include "fsm/models.hpp"
#include "fsm/pairs.hpp"
#include "fsm/rng.hpp"
#include "fsm/threading.hpp"

namespace fsm {

namespace fs = std::filesystem;

namespace {

constexpr uint64_t kDataStream = 0x64617461;  // dataset generation

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string fmt_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    (void)ec;
    return std::string(buf, p);
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("commands: cannot write '" + path + "'");
    out << content;
    if (!out) throw std::runtime_error("commands: short write to '" + path + "'");
}

void echo_config(const ExperimentConfig& cfg, const char* command) {
    fs::create_directories(cfg.out);
    write_file(cfg.out + "/resolved_" + command + ".cfg", resolved_config(cfg));
}

void apply_thread_cap(const ExperimentConfig& cfg) {
    if (cfg.threads > 0) set_max_threads(cfg.threads);
}

SyntheticConfig synth_config(const ExperimentConfig& cfg, const DatasetParams& d) {
    SyntheticConfig sc;
    sc.n_classes = d.classes;
    sc.n_speakers = d.speakers;
    sc.items_per_class = d.items_per_class;
    sc.image_noise = d.image_noise;
    sc.speech_noise = d.speech_noise;
    sc.class_id_offset = d.class_offset;
    sc.seed = derive_seed(cfg.seed, kDataStream, fnv1a(d.id));
    sc.base_word_sec = d.base_word_sec;
    sc.mfcc = cfg.mfcc;
    return sc;
}

const std::set<std::string>& split_names() {
    static const std::set<std::string> names{"train", "validation", "test"};
    return names;
}

// ---- image sidecar (labels + splits next to the IDX pixels) ----------------

void save_image_sidecar(const std::string& path, const std::vector<ImageItem>& items) {
    std::string text = "label\tsplit\n";
    for (const auto& it : items) text += it.label + "\t" + it.split + "\n";
    write_file(path, text);
}

void load_image_sidecar(const std::string& path, std::vector<ImageItem>& items) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("commands: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line) || (line != "label\tsplit" && line != "label\tsplit\r"))
        throw std::runtime_error("commands: '" + path + "': expected header 'label\\tsplit'");
    size_t i = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw std::runtime_error("commands: '" + path + "' row " + std::to_string(i + 1) +
                                     ": expected 'label\\tsplit'");
        if (i >= items.size())
            throw std::runtime_error("commands: '" + path + "' has more rows than images");
        items[i].label = line.substr(0, tab);
        items[i].split = line.substr(tab + 1);
        ++i;
    }
    if (i != items.size())
        throw std::runtime_error("commands: '" + path + "' covers " + std::to_string(i) +
                                 " of " + std::to_string(items.size()) + " images");
}

std::vector<ImageItem> load_images(const std::string& dir) {
    std::vector<ImageItem> items = load_idx(dir + "/images.idx");
    load_image_sidecar(dir + "/images.tsv", items);
    return items;
}

std::vector<SpeechItem> load_speech(const std::string& dir, const MfccConfig& mfcc) {
    return load_speech_manifest(dir + "/manifest.tsv", mfcc);
}

template <class Item>
std::vector<Item> without_test(const std::vector<Item>& items) {
    std::vector<Item> out;
    for (const auto& it : items)
        if (it.split != "test") out.push_back(it);
    return out;
}

template <class Item>
std::vector<Item> test_only(const std::vector<Item>& items) {
    std::vector<Item> out;
    for (const auto& it : items)
        if (it.split == "test") out.push_back(it);
    return out;
}

// ---- prepare ----------------------------------------------------------------

// External manifest validation: split values must be legal and no WAV path may
// sit in more than one split (or appear twice). Returns the label column.
std::vector<std::string> validate_external_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("prepare: cannot open manifest '" + path + "'");
    std::string line;
    if (!std::getline(in, line))
        throw ConfigError("prepare: manifest '" + path + "' is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "path\tspeaker\tlabel\tsplit")
        throw ConfigError("prepare: manifest '" + path +
                          "': expected header 'path\\tspeaker\\tlabel\\tsplit'");
    std::map<std::string, std::string> split_of;
    std::vector<std::string> labels;
    int row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        size_t start = 0;
        for (size_t tab = line.find('\t'); tab != std::string::npos;
             tab = line.find('\t', start)) {
            fields.push_back(line.substr(start, tab - start));
            start = tab + 1;
        }
        fields.push_back(line.substr(start));
        if (fields.size() != 4)
            throw ConfigError("prepare: manifest '" + path + "' row " + std::to_string(row) +
                              ": expected 4 tab-separated fields");
        const std::string& wav = fields[0];
        const std::string& split = fields[3];
        if (!split_names().count(split))
            throw ConfigError("prepare: manifest '" + path + "' row " + std::to_string(row) +
                              ": unknown split '" + split + "'");
        auto [it, inserted] = split_of.emplace(wav, split);
        if (!inserted)
            throw ConfigError("prepare: manifest '" + path + "': '" + wav +
                              "' appears in splits '" + it->second + "' and '" + split +
                              "' — splits must be disjoint");
        labels.push_back(fields[2]);
    }
    return labels;
}

struct PreparedDataset {
    std::vector<std::string> labels;  // all class labels seen (speech + images)
    size_t images = 0;
    size_t utterances = 0;
    bool external = false;
};

PreparedDataset prepare_dataset(const ExperimentConfig& cfg, const DatasetParams& d) {
    PreparedDataset out;
    if (!d.manifest.empty()) {
        out.labels = validate_external_manifest(d.manifest);
        out.utterances = out.labels.size();
        out.external = true;
        return out;
    }

    SyntheticConfig sc = synth_config(cfg, d);
    SyntheticDataset data = generate_synthetic(sc);
    std::vector<Waveform> waves = synthetic_waveforms(sc);

    for (const auto& it : data.speech) {
        if (!split_names().count(it.split))
            throw ConfigError("prepare: item with unknown split '" + it.split + "'");
        out.labels.push_back(it.utt.label);
    }
    for (const auto& it : data.images) {
        if (!split_names().count(it.split))
            throw ConfigError("prepare: item with unknown split '" + it.split + "'");
        out.labels.push_back(it.label);
    }

    std::string dir = dataset_dir(cfg, d);
    fs::create_directories(dir + "/wav");
    save_idx(dir + "/images.idx", data.images);
    save_image_sidecar(dir + "/images.tsv", data.images);

    std::vector<std::string> paths, speakers, labels, splits;
    char name[32];
    for (size_t i = 0; i < data.speech.size(); ++i) {
        std::snprintf(name, sizeof name, "wav/%04zu.wav", i);
        paths.emplace_back(name);
        speakers.push_back(data.speech[i].utt.speaker_id);
        labels.push_back(data.speech[i].utt.label);
        splits.push_back(data.speech[i].split);
        write_wav(dir + "/" + name, waves[i]);
    }
    save_speech_manifest(dir + "/manifest.tsv", paths, speakers, labels, splits);

    out.images = data.images.size();
    out.utterances = data.speech.size();
    return out;
}

// ---- eval helpers -------------------------------------------------------------

std::vector<std::string> split_csv(const std::string& s, const std::string& key) {
    std::vector<std::string> out;
    size_t start = 0;
    while (start <= s.size()) {
        size_t comma = s.find(',', start);
        std::string field = s.substr(start, comma == std::string::npos ? comma : comma - start);
        size_t b = field.find_first_not_of(" \t");
        size_t e = field.find_last_not_of(" \t");
        field = b == std::string::npos ? "" : field.substr(b, e - b + 1);
        if (field.empty())
            throw ConfigError("config: " + key + " has an empty entry");
        out.push_back(field);
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

std::string pretty_pair_source(const std::string& source) {
    if (source == "cosine_nn") return "cosine";
    if (source == "dtw_nn") return "DTW";
    if (source == "classifier_nn") return "encoder";
    if (source == "oracle") return "oracle";
    if (source == "ground_truth") return "ground-truth";
    return source;
}

std::string derive_label(const EncoderModel& m) {
    std::string label;
    switch (m.cfg.objective) {
        case Objective::ae: label = "AE"; break;
        case Objective::cae: label = "CAE"; break;
        case Objective::ae_cae: label = "AE-CAE"; break;
        case Objective::classifier: label = "Classifier"; break;
        case Objective::siamese: label = "Siamese"; break;
    }
    if (!m.prov.pair_source.empty())
        label += " (" + pretty_pair_source(m.prov.pair_source) + " pairs)";
    return label;
}

}  // namespace

// ---- paths --------------------------------------------------------------------

std::string dataset_dir(const ExperimentConfig& cfg, const DatasetParams& d) {
    return d.dir.empty() ? cfg.out + "/" + d.id : d.dir;
}

std::string checkpoint_path(const ExperimentConfig& cfg, uint64_t model_seed) {
    return cfg.out + "/model_" + cfg.model_modality + "_" + cfg.model_objective + "_seed" +
           std::to_string(model_seed) + ".bin";
}

std::string curve_path(const ExperimentConfig& cfg, uint64_t model_seed) {
    return cfg.out + "/curve_" + cfg.model_modality + "_" + cfg.model_objective + "_seed" +
           std::to_string(model_seed) + ".tsv";
}

std::string pairs_path(const ExperimentConfig& cfg) {
    if (!cfg.pairs_file.empty()) return cfg.pairs_file;
    std::string source;
    if (cfg.pairs_source == "unsupervised")
        source = cfg.model_modality == "vision" ? "cosine_nn" : "dtw_nn";
    else if (cfg.pairs_source == "encoder")
        source = "classifier_nn";
    else
        source = "oracle";
    return cfg.out + "/pairs_" + cfg.model_modality + "_" + source + ".txt";
}

std::string report_path(const ExperimentConfig& cfg, const std::string& ext) {
    std::string task = cfg.eval_task;
    std::replace(task.begin(), task.end(), '-', '_');
    return cfg.out + "/report_" + task + "_k" + std::to_string(cfg.eval_k) + ext;
}

// ---- commands -------------------------------------------------------------------

void run_prepare(const ExperimentConfig& cfg) {
    apply_thread_cap(cfg);
    echo_config(cfg, "prepare");

    PreparedDataset in_domain = prepare_dataset(cfg, cfg.dataset);
    if (in_domain.external)
        std::cout << "prepare: validated manifest '" << cfg.dataset.manifest << "' ("
                  << in_domain.utterances << " rows)\n";
    else
        std::cout << "prepare: " << cfg.dataset.id << ": " << in_domain.images << " images, "
                  << in_domain.utterances << " utterances -> " << dataset_dir(cfg, cfg.dataset)
                  << "\n";

    if (cfg.background_enabled) {
        PreparedDataset bg = prepare_dataset(cfg, cfg.background);
        try {
            check_background_disjoint(in_domain.labels, bg.labels);
        } catch (const std::exception& e) {
            throw ConfigError(e.what());
        }
        if (bg.external)
            std::cout << "prepare: validated manifest '" << cfg.background.manifest << "' ("
                      << bg.utterances << " rows)\n";
        else
            std::cout << "prepare: " << cfg.background.id << ": " << bg.images << " images, "
                      << bg.utterances << " utterances -> "
                      << dataset_dir(cfg, cfg.background) << "\n";
    }
}

void run_mine_pairs(const ExperimentConfig& cfg) {
    apply_thread_cap(cfg);
    echo_config(cfg, "mine_pairs");

    std::string dir = dataset_dir(cfg, cfg.dataset);
    PairSet set;
    std::vector<std::string> labels;

    if (cfg.model_modality == "vision") {
        std::vector<ImageItem> items = without_test(load_images(dir));
        for (const auto& it : items) labels.push_back(it.label);
        if (cfg.pairs_source == "unsupervised") {
            set = mine_unsupervised(items, cfg.dataset.id, cfg.pairs_k);
        } else if (cfg.pairs_source == "encoder") {
            if (cfg.pairs_encoder.empty())
                throw ConfigError("config: pairs.source = encoder needs pairs.encoder "
                                  "(checkpoint path)");
            EncoderModel enc = load_model(cfg.pairs_encoder);
            set = mine_with_encoder(items, enc, cfg.dataset.id, cfg.pairs_k);
        } else {
            set = make_oracle_pairs(items, cfg.dataset.id, cfg.seed, cfg.pairs_k);
        }
    } else {
        std::vector<SpeechItem> items = without_test(load_speech(dir, cfg.mfcc));
        for (const auto& it : items) labels.push_back(it.utt.label);
        if (cfg.pairs_source == "unsupervised") {
            set = mine_unsupervised(items, cfg.dataset.id, cfg.pairs_k);
        } else if (cfg.pairs_source == "encoder") {
            if (cfg.pairs_encoder.empty())
                throw ConfigError("config: pairs.source = encoder needs pairs.encoder "
                                  "(checkpoint path)");
            EncoderModel enc = load_model(cfg.pairs_encoder);
            set = mine_with_encoder(items, enc, cfg.dataset.id, cfg.pairs_k);
        } else {
            set = make_oracle_pairs(items, cfg.dataset.id, cfg.seed, cfg.pairs_k);
        }
    }

    std::string path = pairs_path(cfg);
    save_pairs(path, set);
    std::cout << "mine-pairs: " << set.pairs.size() << " pairs (" << set.skipped
              << " skipped) -> " << path << "\n";
    bool labelled = !labels.empty() &&
                    std::all_of(labels.begin(), labels.end(),
                                [](const std::string& l) { return !l.empty(); });
    if (labelled) {
        char line[64];
        std::snprintf(line, sizeof line, "mine-pairs: precision %.4f\n",
                      pair_precision(set, labels));
        std::cout << line;
    }
}

namespace {

std::string curve_text(const TrainLog& log) {
    std::string text = "epoch\ttrain_loss\tval_metric\timproved\n";
    for (const auto& rec : log.epochs) {
        text += std::to_string(rec.epoch) + "\t" + fmt_double(rec.train_loss) + "\t" +
                fmt_double(rec.val_metric) + "\t" + (rec.improved ? "1" : "0") + "\n";
    }
    return text;
}

template <class Item>
void train_all_seeds(const ExperimentConfig& cfg, const std::vector<Item>& items,
                     const PairSet* pairs, const ModelConfig& mc) {
    for (int s = 0; s < cfg.train_seeds; ++s) {
        uint64_t model_seed = cfg.seed + static_cast<uint64_t>(s);
        EncoderModel model = init_model(mc, model_seed);
        model.prov.dataset_id = cfg.dataset.id;

        TrainSchedule sched;
        sched.epochs = cfg.train_epochs;
        sched.batch_size = cfg.train_batch;
        sched.lr = static_cast<float>(cfg.train_lr);
        sched.patience = cfg.train_patience;
        sched.seed = model_seed;
        sched.verbose = cfg.train_verbose;

        TrainLog log;
        if (mc.objective == Objective::ae_cae) {
            TrainSchedule phase1 = sched;
            phase1.epochs = cfg.train_pretrain_epochs;
            log = pretrain_then_switch(model, items, *pairs, phase1, sched);
        } else {
            log = train(model, items, pairs, sched);
        }

        std::string path = checkpoint_path(cfg, model_seed);
        save_model(path, model);
        write_file(curve_path(cfg, model_seed), curve_text(log));
        char line[192];
        std::snprintf(line, sizeof line,
                      "train: seed %llu: best epoch %d, val metric %.6f -> %s\n",
                      static_cast<unsigned long long>(model_seed), log.best_epoch,
                      log.best_metric, path.c_str());
        std::cout << line;
    }
}

}  // namespace

void run_train(const ExperimentConfig& cfg) {
    apply_thread_cap(cfg);
    echo_config(cfg, "train");

    std::string dir = dataset_dir(cfg, cfg.dataset);
    bool wants_pairs = cfg.model_objective == "cae" || cfg.model_objective == "ae_cae";

    PairSet pairs;
    if (wants_pairs) {
        if (cfg.pairs_file.empty())
            throw ConfigError("config: objective " + cfg.model_objective +
                              " trains on mined pairs; set pairs.file to a PairSet "
                              "(see mine-pairs)");
        pairs = load_pairs(cfg.pairs_file);
        if (pairs.dataset_id != cfg.dataset.id)
            throw ConfigError("config: pairs.file '" + cfg.pairs_file + "' was mined on '" +
                              pairs.dataset_id + "', config trains on '" + cfg.dataset.id +
                              "'");
    }

    ModelConfig mc;
    mc.modality = modality_from_name(cfg.model_modality);
    mc.objective = objective_from_name(cfg.model_objective);
    mc.embed_dim = cfg.embed_dim;
    mc.conv1 = cfg.conv1;
    mc.conv2 = cfg.conv2;
    mc.conv3 = cfg.conv3;
    mc.gru_units = cfg.gru_units;
    mc.gru_layers = cfg.gru_layers;
    mc.feat_dim = cfg.mfcc.n_cepstra;
    mc.margin = static_cast<float>(cfg.margin);
    mc.n_classes = cfg.model_classes;

    auto check_pair_range = [&](size_t n_items) {
        for (const auto& p : pairs.pairs) {
            if (p.a >= static_cast<int>(n_items) || p.b >= static_cast<int>(n_items))
                throw ConfigError("config: pairs.file '" + cfg.pairs_file + "' indexes item " +
                                  std::to_string(std::max(p.a, p.b)) + " but the dataset has " +
                                  std::to_string(n_items) +
                                  " non-test items; mine pairs over this dataset first");
        }
    };

    auto derive_classes = [&](const std::vector<std::string>& labels) {
        if (mc.n_classes > 0 || mc.objective != Objective::classifier) return;
        std::set<std::string> distinct(labels.begin(), labels.end());
        mc.n_classes = static_cast<int>(distinct.size());
    };

    if (cfg.model_modality == "vision") {
        std::vector<ImageItem> items = without_test(load_images(dir));
        if (wants_pairs) check_pair_range(items.size());
        std::vector<std::string> labels;
        for (const auto& it : items) labels.push_back(it.label);
        derive_classes(labels);
        train_all_seeds(cfg, items, wants_pairs ? &pairs : nullptr, mc);
    } else {
        std::vector<SpeechItem> items = without_test(load_speech(dir, cfg.mfcc));
        if (wants_pairs) check_pair_range(items.size());
        std::vector<std::string> labels;
        for (const auto& it : items) labels.push_back(it.utt.label);
        derive_classes(labels);
        train_all_seeds(cfg, items, wants_pairs ? &pairs : nullptr, mc);
    }
}

void run_eval(const ExperimentConfig& cfg, const std::string& baseline) {
    apply_thread_cap(cfg);
    echo_config(cfg, "eval");

    std::string task_name = cfg.eval_task;
    std::replace(task_name.begin(), task_name.end(), '-', '_');
    BenchmarkConfig bc;
    try {
        bc.task = eval_task_from_name(task_name);
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    bc.l_classes = cfg.eval_l;
    bc.k_shot = cfg.eval_k;
    bc.episodes = cfg.eval_episodes;
    bc.queries = cfg.eval_queries;
    bc.seeds = cfg.eval_seeds;
    bc.seed = cfg.seed;
    bc.class_mean = cfg.eval_class_mean;

    std::string dir = dataset_dir(cfg, cfg.dataset);
    std::vector<SpeechItem> speech = test_only(load_speech(dir, cfg.mfcc));
    std::vector<ImageItem> images = test_only(load_images(dir));

    std::vector<EncoderModel> storage;
    std::vector<SeedModels> per_seed(static_cast<size_t>(cfg.eval_seeds));
    std::string label = cfg.eval_label;

    if (!baseline.empty()) {
        if (baseline != "dtw+pixels")
            throw ConfigError("config: unknown baseline '" + baseline +
                              "' (only dtw+pixels)");
        if (label.empty()) label = "DTW + Pixels";
    } else {
        bool need_speech = bc.task != EvalTask::unimodal_vision;
        bool need_vision = bc.task != EvalTask::unimodal_speech;
        std::vector<std::string> speech_paths, vision_paths;
        if (need_speech) {
            if (cfg.eval_speech_models.empty())
                throw ConfigError("config: eval.speech_models must list checkpoints "
                                  "(or pass --baseline dtw+pixels)");
            speech_paths = split_csv(cfg.eval_speech_models, "eval.speech_models");
            if (static_cast<int>(speech_paths.size()) != cfg.eval_seeds)
                throw ConfigError("config: eval.speech_models lists " +
                                  std::to_string(speech_paths.size()) +
                                  " checkpoints but eval.seeds = " +
                                  std::to_string(cfg.eval_seeds));
        }
        if (need_vision) {
            if (cfg.eval_vision_models.empty())
                throw ConfigError("config: eval.vision_models must list checkpoints "
                                  "(or pass --baseline dtw+pixels)");
            vision_paths = split_csv(cfg.eval_vision_models, "eval.vision_models");
            if (static_cast<int>(vision_paths.size()) != cfg.eval_seeds)
                throw ConfigError("config: eval.vision_models lists " +
                                  std::to_string(vision_paths.size()) +
                                  " checkpoints but eval.seeds = " +
                                  std::to_string(cfg.eval_seeds));
        }
        storage.reserve(speech_paths.size() + vision_paths.size());
        for (int s = 0; s < cfg.eval_seeds; ++s) {
            if (need_speech) {
                storage.push_back(load_model(speech_paths[s]));
                if (storage.back().cfg.modality != Modality::speech)
                    throw ConfigError("config: '" + speech_paths[s] +
                                      "' is not a speech model");
                per_seed[s].speech = &storage.back();
            }
            if (need_vision) {
                storage.push_back(load_model(vision_paths[s]));
                if (storage.back().cfg.modality != Modality::vision)
                    throw ConfigError("config: '" + vision_paths[s] +
                                      "' is not a vision model");
                per_seed[s].vision = &storage.back();
            }
        }
        if (label.empty()) label = derive_label(storage.front());
    }

    EvalReport report = run_benchmark(per_seed, speech, images, bc);

    std::string table = report_header() + report_row(label, report) + "\n" +
                        format_report(report);
    write_file(report_path(cfg, ".txt"), table);
    write_file(report_path(cfg, ".jsonl"), report_records(report));
    if (cfg.eval_audit)
        write_file(cfg.out + "/audit_" + task_name + "_k" + std::to_string(cfg.eval_k) +
                       ".jsonl",
                   audit_records(report));
    std::cout << table;
}

int exit_code_of(const std::function<void()>& fn) {
    try {
        fn();
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "fsm: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "fsm: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace fsm
