#include "fsm/models.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "fsm/rng.hpp"
#include "fsm/threading.hpp"

namespace fsm {

namespace {

using T = ad::Tensor<float>;

[[noreturn]] void model_error(const std::string& what) {
    throw std::runtime_error("model: " + what);
}

constexpr uint64_t kInitStream = 0x6d696e69;     // weight init draws
constexpr uint64_t kShuffleStream = 0x6d736866;  // per-epoch batch order

bool has_decoder(Objective o) {
    return o == Objective::ae || o == Objective::cae || o == Objective::ae_cae;
}

void check_config(const ModelConfig& cfg) {
    if (cfg.embed_dim <= 0) model_error("embed_dim must be positive");
    if (cfg.modality == Modality::vision) {
        if (cfg.conv1 <= 0 || cfg.conv2 <= 0 || cfg.conv3 <= 0)
            model_error("conv filter counts must be positive");
    } else {
        if (cfg.gru_units <= 0) model_error("gru_units must be positive");
        if (cfg.gru_layers < 1) model_error("gru_layers must be at least 1");
        if (cfg.feat_dim <= 0) model_error("feat_dim must be positive");
    }
    if (cfg.objective == Objective::classifier && cfg.n_classes < 2)
        model_error("classifier objective needs n_classes >= 2");
    if (cfg.margin < 0) model_error("margin must be non-negative");
}

// parameter lookup by name; layouts are fixed at init so a miss is a bug
const T& P(const EncoderModel& m, const std::string& name) {
    for (const auto& [n, t] : m.params)
        if (n == name) return t;
    model_error("missing parameter '" + name + "'");
}

struct GruStack {
    std::vector<ad::GruWeights<float>> layers;
};

GruStack gru_stack(const EncoderModel& m, const std::string& prefix) {
    GruStack s;
    for (int l = 1; l <= m.cfg.gru_layers; ++l) {
        std::string base = prefix + ".gru" + std::to_string(l) + ".";
        s.layers.push_back({P(m, base + "wx"), P(m, base + "wh"), P(m, base + "bx"),
                            P(m, base + "bh")});
    }
    return s;
}

// --- forward passes ---------------------------------------------------------

// x [B,28,28,1] -> z [B,E]; three conv/pool stages then a dense bottleneck
T vision_encode(const EncoderModel& m, const T& x) {
    T h1 = ad::max_pool2x2(ad::relu(ad::conv2d_same(x, P(m, "enc.conv1.w"), P(m, "enc.conv1.b"))));
    T h2 = ad::max_pool2x2(ad::relu(ad::conv2d_same(h1, P(m, "enc.conv2.w"), P(m, "enc.conv2.b"))));
    T h3 = ad::max_pool2x2(ad::relu(ad::conv2d_same(h2, P(m, "enc.conv3.w"), P(m, "enc.conv3.b"))));
    int b = x.shape()[0];
    T flat = ad::reshape(h3, {b, 3 * 3 * m.cfg.conv3});
    return ad::dense(flat, P(m, "enc.fc.w"), P(m, "enc.fc.b"));
}

// z [B,E] -> sigmoid pixels [B,28,28,1]; mirrors the encoder with transposed
// convolutions (3 -> 7 -> 14 -> 28)
T vision_decode(const EncoderModel& m, const T& z) {
    int b = z.shape()[0];
    T h = ad::relu(ad::dense(z, P(m, "dec.fc.w"), P(m, "dec.fc.b")));
    T g = ad::reshape(h, {b, 3, 3, m.cfg.conv3});
    T u2 = ad::relu(ad::transposed_conv2d(g, P(m, "dec.tconv3.w"), P(m, "dec.tconv3.b"), 2, 0, 0));
    T u1 = ad::relu(ad::transposed_conv2d(u2, P(m, "dec.tconv2.w"), P(m, "dec.tconv2.b"), 2, 1, 1));
    return ad::sigmoid(
        ad::transposed_conv2d(u1, P(m, "dec.tconv1.w"), P(m, "dec.tconv1.b"), 2, 1, 1));
}

// Batched GRU encoder over variable-length utterances. Shorter items freeze
// their state once exhausted, so every row of the result equals the one-item
// forward pass on that utterance alone.
T speech_encode_batch(const EncoderModel& m, const std::vector<const Utterance*>& utts) {
    int bsz = static_cast<int>(utts.size());
    int feat = m.cfg.feat_dim;
    int tmax = 0;
    for (int b = 0; b < bsz; ++b) {
        if (utts[b]->t <= 0) model_error("utterance " + std::to_string(b) + " has no frames");
        if (utts[b]->d != feat)
            model_error("utterance has " + std::to_string(utts[b]->d) +
                        " coefficients per frame, model expects " + std::to_string(feat));
        tmax = std::max(tmax, utts[b]->t);
    }
    GruStack stack = gru_stack(m, "enc");
    int hidden = m.cfg.gru_units;
    std::vector<T> h(stack.layers.size(), T::zeros({bsz, hidden}));
    std::vector<float> xv(static_cast<size_t>(bsz) * feat);
    std::vector<float> mask(bsz);
    for (int t = 0; t < tmax; ++t) {
        bool all_live = true;
        std::fill(xv.begin(), xv.end(), 0.f);
        for (int b = 0; b < bsz; ++b) {
            bool live = t < utts[b]->t;
            mask[b] = live ? 1.f : 0.f;
            all_live = all_live && live;
            if (live)
                std::copy_n(utts[b]->frames.begin() + static_cast<size_t>(t) * feat, feat,
                            xv.begin() + static_cast<size_t>(b) * feat);
        }
        T x = T::from({bsz, feat}, xv);
        T cur = x;
        for (size_t l = 0; l < stack.layers.size(); ++l) {
            T hn = ad::gru_cell_step(cur, h[l], stack.layers[l]);
            if (all_live) {
                h[l] = hn;
            } else {
                T mt = T::from({bsz}, mask);
                h[l] = ad::add(ad::scale_rows(hn, mt), ad::scale_rows(h[l], ad::one_minus(mt)));
            }
            cur = h[l];
        }
    }
    return ad::dense(h.back(), P(m, "enc.fc.w"), P(m, "enc.fc.b"));
}

// z [B,E] -> one [B,feat] frame per step; the embedding is fed as the input of
// every step so the whole reconstruction is conditioned on it
std::vector<T> speech_decode_batch(const EncoderModel& m, const T& z, int tmax) {
    GruStack stack = gru_stack(m, "dec");
    int bsz = z.shape()[0];
    int hidden = m.cfg.gru_units;
    std::vector<T> h(stack.layers.size(), T::zeros({bsz, hidden}));
    std::vector<T> out;
    out.reserve(tmax);
    for (int t = 0; t < tmax; ++t) {
        T cur = z;
        for (size_t l = 0; l < stack.layers.size(); ++l) {
            h[l] = ad::gru_cell_step(cur, h[l], stack.layers[l]);
            cur = h[l];
        }
        out.push_back(ad::dense(h.back(), P(m, "dec.proj.w"), P(m, "dec.proj.b")));
    }
    return out;
}

// --- label handling ----------------------------------------------------------

// sorted-unique mapping of label strings to dense ids; every item must carry one
std::vector<int> map_labels(const std::vector<std::string>& labels, int expect_classes) {
    std::map<std::string, int> ids;
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i].empty())
            model_error("item " + std::to_string(i) + " has an empty label");
        ids.emplace(labels[i], 0);
    }
    int next = 0;
    for (auto& [name, id] : ids) id = next++;
    if (expect_classes > 0 && next != expect_classes)
        model_error("model head expects " + std::to_string(expect_classes) +
                    " classes but the dataset has " + std::to_string(next) + " labels");
    std::vector<int> out(labels.size());
    for (size_t i = 0; i < labels.size(); ++i) out[i] = ids[labels[i]];
    return out;
}

// --- batch losses ------------------------------------------------------------

struct BatchLoss {
    T loss;              // undefined when the batch yields no trainable term
    int64_t weight = 0;  // instances the loss value averages over
};

// hinge sum over semi-hard triplets mined from the batch embeddings
BatchLoss triplet_batch_loss(const EncoderModel& m, const T& z, const std::vector<int>& ids) {
    int bsz = z.shape()[0];
    int dim = z.shape()[1];
    std::vector<std::vector<float>> rows(bsz);
    for (int b = 0; b < bsz; ++b)
        rows[b].assign(z.values().begin() + static_cast<size_t>(b) * dim,
                       z.values().begin() + static_cast<size_t>(b + 1) * dim);
    std::vector<Triplet> trips = mine_semi_hard(rows, ids, m.cfg.margin);
    if (trips.empty()) return {};
    T acc;
    for (const Triplet& tr : trips) {
        T term = triplet_loss(ad::slice_rows(z, tr.anchor, tr.anchor + 1),
                              ad::slice_rows(z, tr.positive, tr.positive + 1),
                              ad::slice_rows(z, tr.negative, tr.negative + 1), m.cfg.margin);
        acc = acc.defined() ? ad::add(acc, term) : term;
    }
    return {ad::scale(acc, 1.f / static_cast<float>(trips.size())),
            static_cast<int64_t>(trips.size())};
}

BatchLoss batch_loss_vision(const EncoderModel& m, const std::vector<ImageItem>& items,
                            const std::vector<int>& anchors, const std::vector<int>& targets,
                            const std::vector<int>& class_ids) {
    int bsz = static_cast<int>(anchors.size());
    std::vector<float> xv;
    xv.reserve(static_cast<size_t>(bsz) * kImagePixels);
    for (int idx : anchors) {
        if (items[idx].pixels.size() != kImagePixels)
            model_error("image " + std::to_string(idx) + " has " +
                        std::to_string(items[idx].pixels.size()) + " pixels, expected " +
                        std::to_string(kImagePixels));
        xv.insert(xv.end(), items[idx].pixels.begin(), items[idx].pixels.end());
    }
    T x = T::from({bsz, kImageSide, kImageSide, 1}, std::move(xv));
    T z = vision_encode(m, x);

    switch (m.cfg.objective) {
        case Objective::classifier: {
            std::vector<int> ids;
            for (int idx : anchors) ids.push_back(class_ids[idx]);
            T logits = ad::dense(z, P(m, "head.w"), P(m, "head.b"));
            return {ad::cross_entropy(logits, ids), bsz};
        }
        case Objective::siamese: {
            std::vector<int> ids;
            for (int idx : anchors) ids.push_back(class_ids[idx]);
            return triplet_batch_loss(m, z, ids);
        }
        default: {
            std::vector<float> tv;
            tv.reserve(static_cast<size_t>(bsz) * kImagePixels);
            for (int idx : targets)
                tv.insert(tv.end(), items[idx].pixels.begin(), items[idx].pixels.end());
            T target = T::from({bsz, kImageSide, kImageSide, 1}, std::move(tv));
            T y = vision_decode(m, z);
            return {ad::scale(ad::squared_error(y, target), 1.f / static_cast<float>(bsz)), bsz};
        }
    }
}

BatchLoss batch_loss_speech(const EncoderModel& m, const std::vector<SpeechItem>& items,
                            const std::vector<int>& anchors, const std::vector<int>& targets,
                            const std::vector<int>& class_ids) {
    int bsz = static_cast<int>(anchors.size());
    int feat = m.cfg.feat_dim;
    std::vector<const Utterance*> utts(bsz);
    for (int b = 0; b < bsz; ++b) utts[b] = &items[anchors[b]].utt;
    T z = speech_encode_batch(m, utts);

    switch (m.cfg.objective) {
        case Objective::classifier: {
            std::vector<int> ids;
            for (int idx : anchors) ids.push_back(class_ids[idx]);
            T logits = ad::dense(z, P(m, "head.w"), P(m, "head.b"));
            return {ad::cross_entropy(logits, ids), bsz};
        }
        case Objective::siamese: {
            std::vector<int> ids;
            for (int idx : anchors) ids.push_back(class_ids[idx]);
            return triplet_batch_loss(m, z, ids);
        }
        default: {
            // reconstruction target per item, aligned to the anchor's length
            int tmax = 0;
            for (int b = 0; b < bsz; ++b) tmax = std::max(tmax, utts[b]->t);
            std::vector<std::vector<float>> tgt(bsz);
            for (int b = 0; b < bsz; ++b) {
                if (targets[b] == anchors[b])
                    tgt[b] = utts[b]->frames;
                else
                    tgt[b] = resample_frames(items[targets[b]].utt, utts[b]->t);
            }
            std::vector<T> ys = speech_decode_batch(m, z, tmax);
            T acc;
            std::vector<float> tv(static_cast<size_t>(bsz) * feat);
            std::vector<float> wv(bsz);
            for (int t = 0; t < tmax; ++t) {
                std::fill(tv.begin(), tv.end(), 0.f);
                for (int b = 0; b < bsz; ++b) {
                    bool live = t < utts[b]->t;
                    wv[b] = live ? 1.f / (static_cast<float>(utts[b]->t) * bsz) : 0.f;
                    if (live)
                        std::copy_n(tgt[b].begin() + static_cast<size_t>(t) * feat, feat,
                                    tv.begin() + static_cast<size_t>(b) * feat);
                }
                T diff = ad::sub(ys[t], T::from({bsz, feat}, tv));
                T term = ad::sum_all(ad::scale_rows(ad::mul(diff, diff), T::from({bsz}, wv)));
                acc = acc.defined() ? ad::add(acc, term) : term;
            }
            return {acc, bsz};
        }
    }
}

// --- generic training loop ---------------------------------------------------

struct TrainerHooks {
    std::function<BatchLoss(const std::vector<int>&, const std::vector<int>&)> batch;
    std::vector<std::pair<int, int>> train_ex;  // (anchor, target) pairs
    std::vector<std::pair<int, int>> val_ex;
    int default_batch = 64;
};

TrainLog run_training(EncoderModel& model, const TrainerHooks& hooks, const TrainSchedule& sched,
                      const ValScore& score) {
    if (sched.epochs < 0) model_error("negative epoch count");
    if (sched.lr < 0) model_error("learning rate must be non-negative");
    if (sched.patience < 1) model_error("patience must be at least 1");
    if (sched.batch_size < 0) model_error("negative batch size");
    int bsz = sched.batch_size > 0 ? sched.batch_size : hooks.default_batch;

    TrainLog log;
    if (sched.epochs == 0) return log;
    if (hooks.train_ex.empty()) model_error("no training examples (split \"train\" is empty)");

    std::vector<T> ptensors;
    for (auto& [name, t] : model.params) ptensors.push_back(t);
    auto st = ad::AdamState<float>::init(ptensors, sched.lr);

    auto snapshot = [&] {
        std::vector<std::vector<float>> s;
        for (auto& t : ptensors) s.push_back(t.values());
        return s;
    };

    auto eval_loss = [&](const std::vector<std::pair<int, int>>& ex) {
        double lsum = 0;
        int64_t wsum = 0;
        for (size_t off = 0; off < ex.size(); off += static_cast<size_t>(bsz)) {
            size_t end = std::min(ex.size(), off + static_cast<size_t>(bsz));
            std::vector<int> anchors, targets;
            for (size_t i = off; i < end; ++i) {
                anchors.push_back(ex[i].first);
                targets.push_back(ex[i].second);
            }
            BatchLoss bl = hooks.batch(anchors, targets);
            if (!bl.loss.defined()) continue;
            lsum += bl.loss.item() * static_cast<double>(bl.weight);
            wsum += bl.weight;
        }
        return wsum ? lsum / static_cast<double>(wsum) : 0.0;
    };

    std::vector<std::vector<float>> best = snapshot();
    const bool higher_better = static_cast<bool>(score);
    double best_metric = higher_better ? -std::numeric_limits<double>::infinity()
                                       : std::numeric_limits<double>::infinity();
    int stale = 0;

    std::vector<int> order(hooks.train_ex.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 1; epoch <= sched.epochs; ++epoch) {
        Rng rng(derive_seed(sched.seed, kShuffleStream, static_cast<uint64_t>(epoch)));
        rng.shuffle(order);
        double lsum = 0;
        int64_t wsum = 0;
        for (size_t off = 0; off < order.size(); off += static_cast<size_t>(bsz)) {
            size_t end = std::min(order.size(), off + static_cast<size_t>(bsz));
            std::vector<int> anchors, targets;
            for (size_t i = off; i < end; ++i) {
                anchors.push_back(hooks.train_ex[order[i]].first);
                targets.push_back(hooks.train_ex[order[i]].second);
            }
            for (auto& t : ptensors) t.zero_grad();
            BatchLoss bl = hooks.batch(anchors, targets);
            if (!bl.loss.defined()) continue;
            ad::backward(bl.loss);
            ad::adam_step(ptensors, st);
            lsum += bl.loss.item() * static_cast<double>(bl.weight);
            wsum += bl.weight;
        }
        double train_loss = wsum ? lsum / static_cast<double>(wsum) : 0.0;

        double metric;
        if (score)
            metric = score(model);
        else if (!hooks.val_ex.empty())
            metric = eval_loss(hooks.val_ex);
        else
            metric = train_loss;

        bool improved = higher_better ? metric > best_metric : metric < best_metric;
        if (improved) {
            best_metric = metric;
            best = snapshot();
            stale = 0;
            log.best_epoch = epoch;
        } else {
            ++stale;
        }
        log.epochs.push_back({epoch, train_loss, metric, improved});
        if (sched.verbose)
            std::fprintf(stderr, "epoch %3d  train %.6f  val %.6f%s\n", epoch, train_loss, metric,
                         improved ? "  *" : "");
        if (stale >= sched.patience) break;
    }

    for (size_t i = 0; i < ptensors.size(); ++i) ptensors[i].values() = best[i];
    log.best_metric = best_metric;
    return log;
}

// split items/pairs into train and validation example lists
template <class Item>
TrainerHooks make_hooks(const EncoderModel& model, const std::vector<Item>& items,
                        const PairSet* pairs) {
    if (model.cfg.objective == Objective::ae_cae)
        model_error("train ae_cae models with pretrain_then_switch");
    if (model.cfg.objective == Objective::cae && pairs == nullptr)
        model_error("cae training requires pairs");

    TrainerHooks hooks;
    auto split_of = [&](int idx) -> const std::string& { return items[idx].split; };

    if (model.cfg.objective == Objective::cae) {
        int n = static_cast<int>(items.size());
        for (const ItemPair& pr : pairs->pairs) {
            if (pr.a < 0 || pr.a >= n || pr.b < 0 || pr.b >= n)
                model_error("pair (" + std::to_string(pr.a) + ", " + std::to_string(pr.b) +
                            ") out of range for " + std::to_string(n) + " items");
            // each pair trains both directions
            for (auto [a, b] : {std::pair{pr.a, pr.b}, std::pair{pr.b, pr.a}}) {
                if (split_of(a) == "train")
                    hooks.train_ex.emplace_back(a, b);
                else if (split_of(a) == "validation")
                    hooks.val_ex.emplace_back(a, b);
            }
        }
    } else {
        for (int i = 0; i < static_cast<int>(items.size()); ++i) {
            if (split_of(i) == "train")
                hooks.train_ex.emplace_back(i, i);
            else if (split_of(i) == "validation")
                hooks.val_ex.emplace_back(i, i);
        }
    }
    return hooks;
}

void stamp_provenance(EncoderModel& model, const PairSet* pairs, Objective phase) {
    std::string phase_str = objective_name(phase);
    if (pairs != nullptr) {
        model.prov.pair_source = pair_source_name(pairs->source);
        if (model.prov.dataset_id.empty()) model.prov.dataset_id = pairs->dataset_id;
        phase_str += "@" + pairs->dataset_id;
    } else if (!model.prov.dataset_id.empty()) {
        phase_str += "@" + model.prov.dataset_id;
    }
    model.prov.phases.push_back(phase_str);
}

}  // namespace

// --- names -------------------------------------------------------------------

const char* modality_name(Modality m) {
    return m == Modality::vision ? "vision" : "speech";
}

const char* objective_name(Objective o) {
    switch (o) {
        case Objective::ae: return "ae";
        case Objective::cae: return "cae";
        case Objective::ae_cae: return "ae_cae";
        case Objective::classifier: return "classifier";
        case Objective::siamese: return "siamese";
    }
    return "?";
}

Modality modality_from_name(const std::string& name) {
    if (name == "vision") return Modality::vision;
    if (name == "speech") return Modality::speech;
    model_error("unknown modality '" + name + "' (expected vision or speech)");
}

Objective objective_from_name(const std::string& name) {
    for (Objective o : {Objective::ae, Objective::cae, Objective::ae_cae, Objective::classifier,
                        Objective::siamese})
        if (name == objective_name(o)) return o;
    model_error("unknown objective '" + name +
                "' (expected ae, cae, ae_cae, classifier, or siamese)");
}

// --- init ----------------------------------------------------------------------

EncoderModel init_model(const ModelConfig& cfg, uint64_t seed) {
    check_config(cfg);
    EncoderModel m;
    m.cfg = cfg;
    m.prov.seed = seed;
    Rng rng(derive_seed(seed, kInitStream));

    auto weight = [&](const std::string& name, ad::Shape shape, int fan_in, int fan_out) {
        m.params.emplace_back(name, ad::glorot_uniform<float>(shape, fan_in, fan_out, rng));
    };
    auto bias = [&](const std::string& name, int n) {
        m.params.emplace_back(name, T::zeros({n}, true));
    };

    if (cfg.modality == Modality::vision) {
        int c1 = cfg.conv1, c2 = cfg.conv2, c3 = cfg.conv3;
        weight("enc.conv1.w", {3, 3, 1, c1}, 9, 9 * c1);
        bias("enc.conv1.b", c1);
        weight("enc.conv2.w", {3, 3, c1, c2}, 9 * c1, 9 * c2);
        bias("enc.conv2.b", c2);
        weight("enc.conv3.w", {3, 3, c2, c3}, 9 * c2, 9 * c3);
        bias("enc.conv3.b", c3);
        weight("enc.fc.w", {9 * c3, cfg.embed_dim}, 9 * c3, cfg.embed_dim);
        bias("enc.fc.b", cfg.embed_dim);
        if (has_decoder(cfg.objective)) {
            weight("dec.fc.w", {cfg.embed_dim, 9 * c3}, cfg.embed_dim, 9 * c3);
            bias("dec.fc.b", 9 * c3);
            weight("dec.tconv3.w", {3, 3, c2, c3}, 9 * c3, 9 * c2);
            bias("dec.tconv3.b", c2);
            weight("dec.tconv2.w", {3, 3, c1, c2}, 9 * c2, 9 * c1);
            bias("dec.tconv2.b", c1);
            weight("dec.tconv1.w", {3, 3, 1, c1}, 9 * c1, 9);
            bias("dec.tconv1.b", 1);
        }
    } else {
        int hid = cfg.gru_units;
        // gate matrices are fused [in, 3H]; fan-out uses the per-gate width
        auto gru = [&](const std::string& base, int in) {
            weight(base + ".wx", {in, 3 * hid}, in, hid);
            weight(base + ".wh", {hid, 3 * hid}, hid, hid);
            bias(base + ".bx", 3 * hid);
            bias(base + ".bh", 3 * hid);
        };
        for (int l = 1; l <= cfg.gru_layers; ++l)
            gru("enc.gru" + std::to_string(l), l == 1 ? cfg.feat_dim : hid);
        weight("enc.fc.w", {hid, cfg.embed_dim}, hid, cfg.embed_dim);
        bias("enc.fc.b", cfg.embed_dim);
        if (has_decoder(cfg.objective)) {
            for (int l = 1; l <= cfg.gru_layers; ++l)
                gru("dec.gru" + std::to_string(l), l == 1 ? cfg.embed_dim : hid);
            weight("dec.proj.w", {hid, cfg.feat_dim}, hid, cfg.feat_dim);
            bias("dec.proj.b", cfg.feat_dim);
        }
    }

    if (cfg.objective == Objective::classifier) {
        weight("head.w", {cfg.embed_dim, cfg.n_classes}, cfg.embed_dim, cfg.n_classes);
        bias("head.b", cfg.n_classes);
    }
    return m;
}

// --- semi-hard mining -----------------------------------------------------------

std::vector<Triplet> mine_semi_hard(const std::vector<std::vector<float>>& embeddings,
                                    const std::vector<int>& labels, float margin) {
    (void)margin;  // margin shapes the hinge, not the selection
    int n = static_cast<int>(embeddings.size());
    if (static_cast<int>(labels.size()) != n)
        model_error(std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                    " embeddings");
    for (int i = 1; i < n; ++i)
        if (embeddings[i].size() != embeddings[0].size())
            model_error("embedding " + std::to_string(i) + " has a different dimension");

    auto dist = [&](int i, int j) {
        double acc = 0;
        for (size_t k = 0; k < embeddings[i].size(); ++k) {
            double d = static_cast<double>(embeddings[i][k]) - embeddings[j][k];
            acc += d * d;
        }
        return acc;
    };

    std::vector<Triplet> out;
    for (int a = 0; a < n; ++a) {
        for (int p = 0; p < n; ++p) {
            if (p == a || labels[p] != labels[a]) continue;
            double dp = dist(a, p);
            int semi = -1, far = -1;
            double semi_d = std::numeric_limits<double>::infinity();
            double far_d = -std::numeric_limits<double>::infinity();
            for (int g = 0; g < n; ++g) {
                if (labels[g] == labels[a]) continue;
                double dn = dist(a, g);
                if (dn > dp && dn < semi_d) {
                    semi_d = dn;
                    semi = g;
                }
                if (dn > far_d) {
                    far_d = dn;
                    far = g;
                }
            }
            if (far < 0) continue;  // single-class batch: nothing to contrast with
            out.push_back({a, p, semi >= 0 ? semi : far});
        }
    }
    return out;
}

// --- inference -------------------------------------------------------------------

std::vector<float> embed(const EncoderModel& model, const ImageItem& item) {
    if (model.cfg.modality != Modality::vision)
        model_error("image given to a speech model");
    if (item.pixels.size() != kImagePixels)
        model_error("image has " + std::to_string(item.pixels.size()) + " pixels, expected " +
                    std::to_string(kImagePixels));
    T x = T::from({1, kImageSide, kImageSide, 1}, item.pixels);
    return vision_encode(model, x).values();
}

std::vector<float> embed(const EncoderModel& model, const Utterance& utt) {
    if (model.cfg.modality != Modality::speech)
        model_error("utterance given to a vision model");
    return speech_encode_batch(model, {&utt}).values();
}

namespace {

constexpr size_t kEmbedChunk = 64;

// split a [B,E] embedding matrix into per-item vectors
void scatter_rows(const T& z, size_t base, std::vector<std::vector<float>>& out) {
    int dim = z.shape()[1];
    for (int b = 0; b < z.shape()[0]; ++b)
        out[base + b].assign(z.values().begin() + static_cast<size_t>(b) * dim,
                             z.values().begin() + static_cast<size_t>(b + 1) * dim);
}

}  // namespace

std::vector<std::vector<float>> embed_all(const EncoderModel& model,
                                          const std::vector<ImageItem>& items) {
    if (model.cfg.modality != Modality::vision)
        model_error("images given to a speech model");
    std::vector<std::vector<float>> out(items.size());
    for (size_t off = 0; off < items.size(); off += kEmbedChunk) {
        size_t end = std::min(items.size(), off + kEmbedChunk);
        int bsz = static_cast<int>(end - off);
        std::vector<float> xv;
        xv.reserve(static_cast<size_t>(bsz) * kImagePixels);
        for (size_t i = off; i < end; ++i) {
            if (items[i].pixels.size() != kImagePixels)
                model_error("image " + std::to_string(i) + " has " +
                            std::to_string(items[i].pixels.size()) + " pixels, expected " +
                            std::to_string(kImagePixels));
            xv.insert(xv.end(), items[i].pixels.begin(), items[i].pixels.end());
        }
        T z = vision_encode(model, T::from({bsz, kImageSide, kImageSide, 1}, std::move(xv)));
        scatter_rows(z, off, out);
    }
    return out;
}

std::vector<std::vector<float>> embed_all(const EncoderModel& model,
                                          const std::vector<SpeechItem>& items) {
    if (model.cfg.modality != Modality::speech)
        model_error("utterances given to a vision model");
    std::vector<std::vector<float>> out(items.size());
    for (size_t off = 0; off < items.size(); off += kEmbedChunk) {
        size_t end = std::min(items.size(), off + kEmbedChunk);
        std::vector<const Utterance*> utts;
        for (size_t i = off; i < end; ++i) utts.push_back(&items[i].utt);
        T z = speech_encode_batch(model, utts);
        scatter_rows(z, off, out);
    }
    return out;
}

std::vector<float> reconstruct(const EncoderModel& model, const ImageItem& item) {
    if (model.cfg.modality != Modality::vision)
        model_error("image given to a speech model");
    if (!has_decoder(model.cfg.objective))
        model_error(std::string("the ") + objective_name(model.cfg.objective) +
                    " objective trains no decoder");
    T x = T::from({1, kImageSide, kImageSide, 1}, item.pixels);
    return vision_decode(model, vision_encode(model, x)).values();
}

std::vector<float> reconstruct(const EncoderModel& model, const Utterance& utt) {
    if (model.cfg.modality != Modality::speech)
        model_error("utterance given to a vision model");
    if (!has_decoder(model.cfg.objective))
        model_error(std::string("the ") + objective_name(model.cfg.objective) +
                    " objective trains no decoder");
    T z = speech_encode_batch(model, {&utt});
    std::vector<T> ys = speech_decode_batch(model, z, utt.t);
    std::vector<float> out;
    out.reserve(static_cast<size_t>(utt.t) * model.cfg.feat_dim);
    for (const T& y : ys) out.insert(out.end(), y.values().begin(), y.values().end());
    return out;
}

std::vector<float> resample_frames(const Utterance& utt, int new_t) {
    if (new_t <= 0) model_error("cannot resample to " + std::to_string(new_t) + " frames");
    if (utt.t <= 0) model_error("cannot resample an empty utterance");
    std::vector<float> out(static_cast<size_t>(new_t) * utt.d);
    for (int t = 0; t < new_t; ++t) {
        double pos = (new_t == 1 || utt.t == 1)
                         ? 0.0
                         : static_cast<double>(t) * (utt.t - 1) / (new_t - 1);
        int lo = static_cast<int>(pos);
        int hi = std::min(lo + 1, utt.t - 1);
        float w = static_cast<float>(pos - lo);
        for (int c = 0; c < utt.d; ++c)
            out[static_cast<size_t>(t) * utt.d + c] =
                (1.f - w) * utt.at(lo, c) + w * utt.at(hi, c);
    }
    return out;
}

// --- training entry points --------------------------------------------------------

TrainLog train(EncoderModel& model, const std::vector<ImageItem>& items, const PairSet* pairs,
               const TrainSchedule& sched, const ValScore& score) {
    if (model.cfg.modality != Modality::vision)
        model_error("vision items given to a speech model");
    TrainerHooks hooks = make_hooks(model, items, pairs);
    hooks.default_batch = 64;

    std::vector<int> class_ids;
    if (model.cfg.objective == Objective::classifier || model.cfg.objective == Objective::siamese) {
        std::vector<std::string> labels;
        for (const auto& it : items) labels.push_back(it.label);
        class_ids = map_labels(
            labels, model.cfg.objective == Objective::classifier ? model.cfg.n_classes : 0);
    }
    hooks.batch = [&model, &items, class_ids](const std::vector<int>& anchors,
                                              const std::vector<int>& targets) {
        return batch_loss_vision(model, items, anchors, targets, class_ids);
    };
    stamp_provenance(model, model.cfg.objective == Objective::cae ? pairs : nullptr,
                     model.cfg.objective);
    return run_training(model, hooks, sched, score);
}

TrainLog train(EncoderModel& model, const std::vector<SpeechItem>& items, const PairSet* pairs,
               const TrainSchedule& sched, const ValScore& score) {
    if (model.cfg.modality != Modality::speech)
        model_error("speech items given to a vision model");
    TrainerHooks hooks = make_hooks(model, items, pairs);
    hooks.default_batch = 32;

    std::vector<int> class_ids;
    if (model.cfg.objective == Objective::classifier || model.cfg.objective == Objective::siamese) {
        std::vector<std::string> labels;
        for (const auto& it : items) labels.push_back(it.utt.label);
        class_ids = map_labels(
            labels, model.cfg.objective == Objective::classifier ? model.cfg.n_classes : 0);
    }
    hooks.batch = [&model, &items, class_ids](const std::vector<int>& anchors,
                                              const std::vector<int>& targets) {
        return batch_loss_speech(model, items, anchors, targets, class_ids);
    };
    stamp_provenance(model, model.cfg.objective == Objective::cae ? pairs : nullptr,
                     model.cfg.objective);
    return run_training(model, hooks, sched, score);
}

namespace {

// shared two-phase driver: autoencode first, then train towards pair targets
// starting from the best autoencoder weights
template <class Item>
TrainLog pretrain_then_switch_impl(EncoderModel& model, const std::vector<Item>& items,
                                   const PairSet& pairs, const TrainSchedule& phase1,
                                   const TrainSchedule& phase2) {
    if (model.cfg.objective != Objective::ae_cae)
        model_error("pretrain_then_switch needs the ae_cae objective");
    model.cfg.objective = Objective::ae;
    TrainLog log = train(model, items, nullptr, phase1);
    model.cfg.objective = Objective::cae;
    TrainLog second = train(model, items, &pairs, phase2);
    model.cfg.objective = Objective::ae_cae;

    int offset = static_cast<int>(log.epochs.size());
    for (EpochRecord r : second.epochs) {
        r.epoch += offset;
        log.epochs.push_back(r);
    }
    if (second.best_epoch >= 0) {
        log.best_epoch = second.best_epoch + offset;
        log.best_metric = second.best_metric;
    }
    return log;
}

template <class Item>
TrainLog fine_tune_impl(EncoderModel& model, const std::vector<Item>& items, const PairSet* pairs,
                        const TrainSchedule& sched, const std::string& dataset_id) {
    Objective obj = model.cfg.objective;
    TrainLog log;
    if (obj == Objective::ae_cae) {
        // continuing a switched model means continuing its correspondence phase
        if (pairs == nullptr) model_error("fine-tuning an ae_cae model requires pairs");
        model.cfg.objective = Objective::cae;
        log = train(model, items, pairs, sched);
        model.cfg.objective = obj;
    } else {
        log = train(model, items, pairs, sched);
    }
    if (!model.prov.phases.empty()) model.prov.phases.back() += ":fine-tune";
    if (model.prov.dataset_id.empty())
        model.prov.dataset_id = dataset_id;
    else if (model.prov.dataset_id != dataset_id)
        model.prov.dataset_id += "->" + dataset_id;
    return log;
}

}  // namespace

TrainLog pretrain_then_switch(EncoderModel& model, const std::vector<ImageItem>& items,
                              const PairSet& pairs, const TrainSchedule& phase1,
                              const TrainSchedule& phase2) {
    return pretrain_then_switch_impl(model, items, pairs, phase1, phase2);
}

TrainLog pretrain_then_switch(EncoderModel& model, const std::vector<SpeechItem>& items,
                              const PairSet& pairs, const TrainSchedule& phase1,
                              const TrainSchedule& phase2) {
    return pretrain_then_switch_impl(model, items, pairs, phase1, phase2);
}

TrainLog fine_tune(EncoderModel& model, const std::vector<ImageItem>& items, const PairSet* pairs,
                   const TrainSchedule& sched, const std::string& dataset_id) {
    return fine_tune_impl(model, items, pairs, sched, dataset_id);
}

TrainLog fine_tune(EncoderModel& model, const std::vector<SpeechItem>& items, const PairSet* pairs,
                   const TrainSchedule& sched, const std::string& dataset_id) {
    return fine_tune_impl(model, items, pairs, sched, dataset_id);
}

// --- persistence --------------------------------------------------------------------

namespace {

// stable FNV-1a digest of every config field, for spotting hand-edited or
// mismatched sidecars
std::string config_hash(const ModelConfig& cfg) {
    char margin[32];
    std::snprintf(margin, sizeof margin, "%.9g", static_cast<double>(cfg.margin));
    std::string canon = std::string(modality_name(cfg.modality)) + "|" +
                        objective_name(cfg.objective) + "|" + std::to_string(cfg.embed_dim) + "|" +
                        std::to_string(cfg.conv1) + "," + std::to_string(cfg.conv2) + "," +
                        std::to_string(cfg.conv3) + "|" + std::to_string(cfg.gru_units) + "," +
                        std::to_string(cfg.gru_layers) + "," + std::to_string(cfg.feat_dim) + "|" +
                        std::to_string(cfg.n_classes) + "|" + margin;
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : canon) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace

void save_model(const std::string& path, const EncoderModel& model) {
    save_checkpoint(path, model.params);
    char margin[32];
    std::snprintf(margin, sizeof margin, "%.9g", static_cast<double>(model.cfg.margin));
    std::string phases;
    for (size_t i = 0; i < model.prov.phases.size(); ++i) {
        if (i) phases += ";";
        phases += model.prov.phases[i];
    }
    MetaEntries meta{
        {"modality", modality_name(model.cfg.modality)},
        {"objective", objective_name(model.cfg.objective)},
        {"embed_dim", std::to_string(model.cfg.embed_dim)},
        {"conv1", std::to_string(model.cfg.conv1)},
        {"conv2", std::to_string(model.cfg.conv2)},
        {"conv3", std::to_string(model.cfg.conv3)},
        {"gru_units", std::to_string(model.cfg.gru_units)},
        {"gru_layers", std::to_string(model.cfg.gru_layers)},
        {"feat_dim", std::to_string(model.cfg.feat_dim)},
        {"n_classes", std::to_string(model.cfg.n_classes)},
        {"margin", margin},
        {"config_hash", config_hash(model.cfg)},
        {"dataset_id", model.prov.dataset_id},
        {"pair_source", model.prov.pair_source},
        {"seed", std::to_string(model.prov.seed)},
        {"phases", phases},
    };
    save_meta(path + ".meta", meta);
}

EncoderModel load_model(const std::string& path) {
    MetaEntries meta = load_meta(path + ".meta");
    auto get = [&](const std::string& key) -> const std::string& {
        for (const auto& [k, v] : meta)
            if (k == key) return v;
        model_error("meta file " + path + ".meta is missing key '" + key + "'");
    };
    ModelConfig cfg;
    cfg.modality = modality_from_name(get("modality"));
    cfg.objective = objective_from_name(get("objective"));
    cfg.embed_dim = std::stoi(get("embed_dim"));
    cfg.conv1 = std::stoi(get("conv1"));
    cfg.conv2 = std::stoi(get("conv2"));
    cfg.conv3 = std::stoi(get("conv3"));
    cfg.gru_units = std::stoi(get("gru_units"));
    cfg.gru_layers = std::stoi(get("gru_layers"));
    cfg.feat_dim = std::stoi(get("feat_dim"));
    cfg.n_classes = std::stoi(get("n_classes"));
    cfg.margin = std::stof(get("margin"));
    if (get("config_hash") != config_hash(cfg))
        model_error("meta file " + path + ".meta does not match its own config fields " +
                    "(stored hash " + get("config_hash") + ", recomputed " + config_hash(cfg) +
                    ")");

    EncoderModel model = init_model(cfg, std::stoull(get("seed")));
    NamedParams stored = load_checkpoint(path);
    assign_params(model.params, stored);

    model.prov.dataset_id = get("dataset_id");
    model.prov.pair_source = get("pair_source");
    model.prov.seed = std::stoull(get("seed"));
    const std::string& phases = get("phases");
    size_t start = 0;
    while (start < phases.size()) {
        size_t semi = phases.find(';', start);
        if (semi == std::string::npos) semi = phases.size();
        if (semi > start) model.prov.phases.push_back(phases.substr(start, semi - start));
        start = semi + 1;
    }
    return model;
}

}  // namespace fsm
