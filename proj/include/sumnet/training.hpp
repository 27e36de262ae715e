#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sumnet/dataset.hpp"
#include "sumnet/metrics.hpp"
#include "sumnet/model.hpp"
#include "sumnet/optimizer.hpp"
#include "sumnet/weighting.hpp"

namespace sumnet {

struct TrainConfig {
    double lr = 1e-3;
    int batch_size = 14;
    int epochs = 1;
    std::uint64_t seed = 0;
    double w0 = 10.0;
    double sigma = 5.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps_adam = 1e-8;
    std::string manifest;
    std::string fold = "all";  // fold index, or "all" to train on every patient
    std::string checkpoint_dir = "checkpoints";
    double threshold = 0.5;
    std::string structure;       // mask structure to train on; "" = the only one
    int k_folds = 0;             // 0 = leave-one-patient-out
    int checkpoint_every = 1;    // epochs between checkpoint writes
    bool keep_fold_checkpoints = false;

    void validate() const {
        if (lr <= 0.0) throw validation_error("config: lr must be positive");
        if (batch_size < 1) throw validation_error("config: batch_size must be >= 1");
        if (epochs < 0) throw validation_error("config: epochs must be >= 0");
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
            throw validation_error("config: betas must lie in [0,1)");
        if (eps_adam <= 0.0) throw validation_error("config: eps_adam must be positive");
        if (sigma <= 0.0) throw validation_error("config: sigma must be positive");
        if (w0 < 0.0) throw validation_error("config: w0 must be >= 0");
        if (threshold < 0.0 || threshold > 1.0)
            throw validation_error("config: threshold must lie in [0,1]");
        if (checkpoint_every < 1)
            throw validation_error("config: checkpoint_every must be >= 1");
        if (manifest.empty()) throw validation_error("config: manifest path required");
        if (fold != "all") {
            try {
                std::size_t pos = 0;
                if (std::stoi(fold, &pos) < 0 || pos != fold.size())
                    throw std::invalid_argument("");
            } catch (const std::exception&) {
                throw validation_error("config: fold must be a non-negative index or 'all'");
            }
        }
    }

    AdamConfig adam() const { return {lr, beta1, beta2, eps_adam}; }
};

// UTF-8 key=value lines; '#' starts a comment line; unknown keys rejected.
inline TrainConfig parse_train_config(std::istream& in, const std::filesystem::path& base_dir) {
    TrainConfig cfg;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw validation_error("config: line " + std::to_string(line_no) +
                                   " is not key=value: " + line);
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        try {
            if (key == "lr") cfg.lr = std::stod(value);
            else if (key == "batch_size") cfg.batch_size = std::stoi(value);
            else if (key == "epochs") cfg.epochs = std::stoi(value);
            else if (key == "seed") cfg.seed = std::stoull(value);
            else if (key == "w0") cfg.w0 = std::stod(value);
            else if (key == "sigma") cfg.sigma = std::stod(value);
            else if (key == "beta1") cfg.beta1 = std::stod(value);
            else if (key == "beta2") cfg.beta2 = std::stod(value);
            else if (key == "eps_adam") cfg.eps_adam = std::stod(value);
            else if (key == "manifest") cfg.manifest = (base_dir / value).string();
            else if (key == "fold") cfg.fold = value;
            else if (key == "checkpoint_dir") cfg.checkpoint_dir = (base_dir / value).string();
            else if (key == "threshold") cfg.threshold = std::stod(value);
            else if (key == "structure") cfg.structure = value;
            else if (key == "k_folds") cfg.k_folds = std::stoi(value);
            else if (key == "checkpoint_every") cfg.checkpoint_every = std::stoi(value);
            else if (key == "keep_fold_checkpoints") cfg.keep_fold_checkpoints = value == "1" || value == "true";
            else throw validation_error("config: unknown key '" + key + "'");
        } catch (const validation_error&) {
            throw;
        } catch (const std::exception&) {
            throw validation_error("config: bad value for " + key + ": " + value);
        }
    }
    cfg.validate();
    return cfg;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw validation_error("config: cannot open " + path.string());
    return parse_train_config(in, path.parent_path());
}

// ------------------------------------------------------------- dataset set

// Loaded records plus cached per-frame weight maps for the chosen structure.
struct TrainingData {
    std::vector<VolumeRecord> records;
    std::vector<Tensor> weight_maps;  // per record, (F,1,H,W)
    std::string structure;

    const VolumeRecord* record_of(const std::string& patient) const {
        for (const VolumeRecord& r : records)
            if (r.patient_id == patient) return &r;
        return nullptr;
    }
};

inline TrainingData load_training_data(const TrainConfig& cfg) {
    const DatasetManifest manifest = load_manifest(cfg.manifest);
    TrainingData data;
    data.structure = cfg.structure;
    if (data.structure.empty()) {
        const auto& masks = manifest.entries.front().mask_paths;
        if (masks.size() != 1)
            throw validation_error(
                "config: dataset has multiple mask structures; set structure=<name>");
        data.structure = masks.begin()->first;
    }
    for (const ManifestEntry& e : manifest.entries) {
        if (!e.mask_paths.count(data.structure))
            throw validation_error("dataset: patient " + e.patient_id + " lacks structure '" +
                                   data.structure + "'");
        VolumeRecord rec = load_volume(e);
        data.weight_maps.push_back(
            weight_map_stack(rec.masks.at(data.structure), cfg.w0, cfg.sigma));
        data.records.push_back(std::move(rec));
    }
    return data;
}

inline std::vector<std::string> patient_ids(const TrainingData& data) {
    std::vector<std::string> ids;
    for (const VolumeRecord& r : data.records) ids.push_back(r.patient_id);
    return ids;
}

// ------------------------------------------------------------ checkpoints

// Training checkpoints carry the optimizer moments and progress counters next
// to the parameters, so a resumed run replays the exact trace of an unbroken
// one. Weight-only files (save_weights) stay loadable for inference.
struct TrainerSnapshot {
    ModelParams params;
    AdamState adam;
    int completed_epochs = 0;
    std::int64_t global_step = 0;
    double best_epoch_loss = std::numeric_limits<double>::infinity();
};

inline void save_trainer_snapshot(const TrainerSnapshot& snap,
                                  const std::filesystem::path& path) {
    std::vector<CheckpointEntry> entries = params_to_entries(snap.params);
    const auto& layers = snap.params.layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const Tensor& mk = snap.adam.first_moments()[2 * i];
        const Tensor& mb = snap.adam.first_moments()[2 * i + 1];
        const Tensor& vk = snap.adam.second_moments()[2 * i];
        const Tensor& vb = snap.adam.second_moments()[2 * i + 1];
        entries.push_back({"adam." + layers[i].name + ".kernel.m", detail::kernel_dims(mk),
                           {mk.data().begin(), mk.data().end()}});
        entries.push_back({"adam." + layers[i].name + ".kernel.v", detail::kernel_dims(vk),
                           {vk.data().begin(), vk.data().end()}});
        entries.push_back({"adam." + layers[i].name + ".bias.m",
                           {static_cast<std::uint32_t>(mb.shape().c)},
                           {mb.data().begin(), mb.data().end()}});
        entries.push_back({"adam." + layers[i].name + ".bias.v",
                           {static_cast<std::uint32_t>(vb.shape().c)},
                           {vb.data().begin(), vb.data().end()}});
    }
    entries.push_back({"meta.adam_t", {1}, {static_cast<double>(snap.adam.step_count())}});
    entries.push_back({"meta.completed_epochs", {1}, {static_cast<double>(snap.completed_epochs)}});
    entries.push_back({"meta.global_step", {1}, {static_cast<double>(snap.global_step)}});
    entries.push_back({"meta.best_epoch_loss", {1}, {snap.best_epoch_loss}});
    write_checkpoint(path, entries);
}

inline TrainerSnapshot load_trainer_snapshot(const std::filesystem::path& path,
                                             const SumNetConfig& cfg = SumNetConfig{}) {
    const std::vector<CheckpointEntry> entries = read_checkpoint(path);
    TrainerSnapshot snap;
    snap.params = build_shell(cfg);
    detail::load_params_from_entries(snap.params, entries);
    snap.adam = AdamState(snap.params);

    std::map<std::string, const CheckpointEntry*> by_name;
    for (const CheckpointEntry& e : entries) by_name[e.name] = &e;
    auto copy_into = [&](const std::string& name, Tensor& dst) {
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw validation_error("checkpoint: missing optimizer entry " + name);
        if (it->second->numel() != dst.numel())
            throw validation_error("checkpoint: shape mismatch for " + name);
        std::copy(it->second->values.begin(), it->second->values.end(),
                  dst.mutable_data().begin());
    };
    const auto& layers = snap.params.layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        copy_into("adam." + layers[i].name + ".kernel.m", snap.adam.first_moments()[2 * i]);
        copy_into("adam." + layers[i].name + ".kernel.v", snap.adam.second_moments()[2 * i]);
        copy_into("adam." + layers[i].name + ".bias.m", snap.adam.first_moments()[2 * i + 1]);
        copy_into("adam." + layers[i].name + ".bias.v", snap.adam.second_moments()[2 * i + 1]);
    }
    auto scalar_of = [&](const std::string& name) {
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw validation_error("checkpoint: missing entry " + name);
        return it->second->values.at(0);
    };
    snap.adam.set_step_count(static_cast<std::int64_t>(scalar_of("meta.adam_t")));
    snap.completed_epochs = static_cast<int>(scalar_of("meta.completed_epochs"));
    snap.global_step = static_cast<std::int64_t>(scalar_of("meta.global_step"));
    snap.best_epoch_loss = scalar_of("meta.best_epoch_loss");
    return snap;
}

// ---------------------------------------------------------------- training

struct TrainResult {
    ModelParams params;
    std::vector<double> step_losses;
    std::set<std::string> gradient_contributors;  // patients whose frames fed gradients
    std::filesystem::path latest_checkpoint;
    std::filesystem::path best_checkpoint;
    std::filesystem::path log_path;
};

namespace detail {

struct AssembledBatch {
    Tensor frames;
    Tensor masks;
    Tensor weights;
    std::vector<std::string> provenance;  // "patient:frame" per item
};

inline AssembledBatch assemble_batch(const TrainingData& data,
                                     const std::vector<const VolumeRecord*>& training,
                                     const std::vector<int>& training_record_idx,
                                     const std::vector<FrameRef>& refs) {
    const TensorShape fs = training.front()->frames.shape();
    const int b = static_cast<int>(refs.size());
    AssembledBatch batch;
    batch.frames = Tensor::zeros({b, 1, fs.h, fs.w});
    batch.masks = Tensor::zeros({b, 1, fs.h, fs.w});
    batch.weights = Tensor::zeros({b, 1, fs.h, fs.w});
    const std::size_t map = static_cast<std::size_t>(fs.h) * fs.w;
    for (int i = 0; i < b; ++i) {
        const VolumeRecord& rec = *training[refs[i].record];
        if (rec.frames.shape().h != fs.h || rec.frames.shape().w != fs.w)
            throw validation_error("batch: mixed frame sizes in dataset");
        const Tensor& wm = data.weight_maps[training_record_idx[refs[i].record]];
        const std::size_t src = static_cast<std::size_t>(refs[i].frame) * map;
        std::copy_n(rec.frames.data().begin() + src, map,
                    batch.frames.mutable_data().begin() + i * map);
        std::copy_n(rec.masks.at(data.structure).data().begin() + src, map,
                    batch.masks.mutable_data().begin() + i * map);
        std::copy_n(wm.data().begin() + src, map,
                    batch.weights.mutable_data().begin() + i * map);
        batch.provenance.push_back(rec.patient_id + ":" + std::to_string(refs[i].frame));
    }
    return batch;
}

inline std::string join(const std::vector<std::string>& parts, const char* sep) {
    std::string s;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) s += sep;
        s += parts[i];
    }
    return s;
}

}  // namespace detail

// Trains on the configured fold's training patients (or all patients when
// fold=all). Writes a per-step CSV log plus latest/best checkpoints under
// checkpoint_dir; resumes from a snapshot when one is given.
inline TrainResult train(const TrainConfig& cfg,
                         const std::optional<std::filesystem::path>& resume_from = std::nullopt) {
    cfg.validate();
    const TrainingData data = load_training_data(cfg);

    std::vector<std::string> training_patients = patient_ids(data);
    std::set<std::string> held_out;
    if (cfg.fold != "all") {
        const int fold_idx = std::stoi(cfg.fold);
        const int k = cfg.k_folds > 0 ? cfg.k_folds : static_cast<int>(data.records.size());
        const FoldSplit split = make_folds(patient_ids(data), k, cfg.seed);
        if (fold_idx >= static_cast<int>(split.folds.size()))
            throw validation_error("config: fold " + cfg.fold + " out of range for k=" +
                                   std::to_string(k));
        training_patients = split.folds[fold_idx].training;
        held_out.insert(split.folds[fold_idx].held_out.begin(),
                        split.folds[fold_idx].held_out.end());
    }

    std::vector<const VolumeRecord*> training;
    std::vector<int> training_record_idx;
    for (std::size_t i = 0; i < data.records.size(); ++i)
        if (std::find(training_patients.begin(), training_patients.end(),
                      data.records[i].patient_id) != training_patients.end()) {
            training.push_back(&data.records[i]);
            training_record_idx.push_back(static_cast<int>(i));
        }
    if (training.empty()) throw validation_error("train: no training patients selected");

    std::filesystem::create_directories(cfg.checkpoint_dir);
    const std::filesystem::path dir = cfg.checkpoint_dir;

    TrainerSnapshot snap;
    if (resume_from) {
        snap = load_trainer_snapshot(*resume_from);
    } else {
        snap.params = build(SumNetConfig{}, cfg.seed);
        snap.adam = AdamState(snap.params);
    }

    TrainResult result;
    result.latest_checkpoint = dir / "ckpt_latest.sumn";
    result.best_checkpoint = dir / "ckpt_best.sumn";
    result.log_path = dir / "log.csv";

    std::ofstream log(result.log_path, resume_from ? std::ios::app : std::ios::trunc);
    if (!log) throw validation_error("train: cannot write log at " + result.log_path.string());
    if (!resume_from) log << "step,epoch,loss,wall_time_s\n";

    const auto t0 = std::chrono::steady_clock::now();
    auto wall = [&]() {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };

    if (cfg.epochs == 0 && !resume_from) {
        save_trainer_snapshot(snap, result.latest_checkpoint);
        save_weights(snap.params, result.best_checkpoint);
        result.params = snap.params;
        return result;
    }

    const AdamConfig adam_cfg = cfg.adam();
    for (int epoch = snap.completed_epochs; epoch < cfg.epochs; ++epoch) {
        const auto plan = batch_plan(training, cfg.batch_size, cfg.seed, epoch);
        double epoch_loss = 0.0;
        for (const std::vector<FrameRef>& refs : plan) {
            detail::AssembledBatch batch =
                detail::assemble_batch(data, training, training_record_idx, refs);
            for (const std::string& prov : batch.provenance) {
                const std::string patient = prov.substr(0, prov.find(':'));
                if (held_out.count(patient))
                    throw validation_error("train: held-out frame " + prov +
                                           " reached the training loop");
                result.gradient_contributors.insert(patient);
            }

            Tape tape;
            Tensor pred = forward(snap.params, batch.frames, &tape);
            Tensor loss = wce_loss(pred, batch.masks, batch.weights, &tape);
            const double loss_v = loss.item();
            if (!std::isfinite(loss_v))
                throw numeric_error("train: non-finite loss at step " +
                                    std::to_string(snap.global_step + 1) + " on batch [" +
                                    detail::join(batch.provenance, ", ") + "]");
            tape.backward(loss);
            adam_step(snap.params, snap.adam, adam_cfg);

            ++snap.global_step;
            epoch_loss += loss_v;
            result.step_losses.push_back(loss_v);
            char row[128];
            std::snprintf(row, sizeof(row), "%lld,%d,%.17g,%.3f\n",
                          static_cast<long long>(snap.global_step), epoch, loss_v, wall());
            log << row;
        }
        snap.completed_epochs = epoch + 1;
        epoch_loss /= plan.empty() ? 1.0 : static_cast<double>(plan.size());

        if ((epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == cfg.epochs) {
            save_trainer_snapshot(snap, result.latest_checkpoint);
            if (epoch_loss < snap.best_epoch_loss) {
                snap.best_epoch_loss = epoch_loss;
                save_weights(snap.params, result.best_checkpoint);
            }
        }
    }
    log.flush();
    result.params = snap.params;
    return result;
}

// --------------------------------------------------------------- inference

struct TimingStats {
    std::vector<double> per_frame_s;
    double mean_s = 0.0;
    double median_s = 0.0;
    double total_s = 0.0;
};

inline TimingStats timing_from(std::vector<double> per_frame) {
    TimingStats t;
    t.per_frame_s = std::move(per_frame);
    if (t.per_frame_s.empty()) return t;
    for (double v : t.per_frame_s) t.total_s += v;
    t.mean_s = t.total_s / t.per_frame_s.size();
    std::vector<double> sorted = t.per_frame_s;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    t.median_s = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    return t;
}

struct FrameInference {
    Tensor prob;  // (1,1,h,w), cropped to pre-padding dims
    Tensor mask;  // binary, same shape
    double seconds = 0.0;
};

// Single-frame inference. The clock covers forward + thresholding only.
inline FrameInference infer_frame(const ModelParams& params, const Tensor& padded_frame,
                                  double threshold, int orig_h, int orig_w) {
    const auto start = std::chrono::steady_clock::now();
    Tensor prob = forward(params, padded_frame);
    ensure_finite(prob, "infer_frame activations");
    Tensor mask = Tensor::zeros(prob.shape());
    std::span<const double> p = prob.data();
    std::span<double> m = mask.mutable_data();
    for (std::size_t i = 0; i < p.size(); ++i) m[i] = p[i] >= threshold ? 1.0 : 0.0;
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    FrameInference out;
    out.prob = crop_to(prob, orig_h, orig_w);
    out.mask = crop_to(mask, orig_h, orig_w);
    out.seconds = seconds;
    return out;
}

struct VolumeInference {
    Tensor probs;  // (F,1,h,w)
    Tensor masks;  // (F,1,h,w), binary
    TimingStats timing;
};

inline VolumeInference infer_volume(const ModelParams& params, const VolumeRecord& vol,
                                    double threshold) {
    const TensorShape s = vol.frames.shape();
    VolumeInference out;
    out.probs = Tensor::zeros({s.n, 1, vol.orig_h, vol.orig_w});
    out.masks = Tensor::zeros({s.n, 1, vol.orig_h, vol.orig_w});
    std::vector<double> per_frame;
    const std::size_t map = static_cast<std::size_t>(vol.orig_h) * vol.orig_w;
    for (int f = 0; f < s.n; ++f) {
        const FrameInference fi =
            infer_frame(params, frame_of(vol.frames, f), threshold, vol.orig_h, vol.orig_w);
        std::copy_n(fi.prob.data().begin(), map, out.probs.mutable_data().begin() + f * map);
        std::copy_n(fi.mask.data().begin(), map, out.masks.mutable_data().begin() + f * map);
        per_frame.push_back(fi.seconds);
    }
    out.timing = timing_from(std::move(per_frame));
    return out;
}

// ----------------------------------------------------------- cross-validation

struct CrossvalResult {
    std::vector<FrameMetrics> frames;
    std::vector<AggregateRow> table;  // one row per fold + pooled "all" row
    std::filesystem::path frame_csv;
    std::filesystem::path aggregate_csv;
};

// Leave-one-patient-out (or k-fold) cross-validation: trains per fold,
// evaluates every frame of the held-out patients exactly once, and emits the
// per-frame and aggregate tables. Fold checkpoints are discarded afterwards
// unless the config keeps them.
inline CrossvalResult crossval(const TrainConfig& cfg) {
    cfg.validate();
    const TrainingData data = load_training_data(cfg);
    const std::vector<std::string> ids = patient_ids(data);
    const int k = cfg.k_folds > 0 ? cfg.k_folds : static_cast<int>(ids.size());
    const FoldSplit split = make_folds(ids, k, cfg.seed);

    const std::filesystem::path out_dir = cfg.checkpoint_dir;
    std::filesystem::create_directories(out_dir);

    CrossvalResult result;
    for (int fold = 0; fold < k; ++fold) {
        TrainConfig fold_cfg = cfg;
        fold_cfg.fold = std::to_string(fold);
        fold_cfg.checkpoint_dir = (out_dir / ("fold_" + std::to_string(fold))).string();
        const TrainResult tr = train(fold_cfg);

        for (const std::string& held : split.folds[fold].held_out) {
            if (tr.gradient_contributors.count(held))
                throw validation_error("crossval: held-out patient " + held +
                                       " contributed gradients in fold " + std::to_string(fold));
            const VolumeRecord* rec = data.record_of(held);
            const VolumeInference vi = infer_volume(tr.params, *rec, cfg.threshold);
            const Tensor gt_stack = crop_to(rec->masks.at(data.structure), rec->orig_h,
                                            rec->orig_w);
            for (int f = 0; f < vi.masks.shape().n; ++f) {
                FrameMetrics m = frame_metrics(frame_of(vi.masks, f), frame_of(gt_stack, f),
                                               rec->spacing);
                m.fold = fold;
                m.patient = held;
                m.frame = f;
                result.frames.push_back(std::move(m));
            }
        }
        if (!cfg.keep_fold_checkpoints)
            std::filesystem::remove_all(fold_cfg.checkpoint_dir);
    }

    result.table = aggregate(result.frames, GroupBy::Fold);
    const std::vector<AggregateRow> overall = aggregate(result.frames, GroupBy::All);
    result.table.push_back(overall.front());

    result.frame_csv = out_dir / "frame_metrics.csv";
    result.aggregate_csv = out_dir / "aggregate.csv";
    write_frame_csv(result.frame_csv, result.frames);
    write_aggregate_csv(result.aggregate_csv, result.table);
    return result;
}

}  // namespace sumnet
