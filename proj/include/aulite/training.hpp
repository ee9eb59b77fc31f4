#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "aulite/data_synth.hpp"
#include "aulite/model.hpp"
#include "aulite/task.hpp"

namespace aulite {

struct TrainConfig {
    double peak_lr = 5e-4;
    double weight_decay = 0.05;
    double warmup_ratio = 0.03;
    int epochs = 5;
    int micro_batch = 1;
    int grad_accum_steps = 16;
    int lora_rank = 8;
    TuneMode tune_mode = TuneMode::Both;
    uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const;
};

// Linear warmup over W = max(1, round(warmup_ratio * T)) steps up to peak_lr,
// then cosine decay to exactly 0 at t == T. lr(W) == peak_lr exactly.
double lr_at_step(int64_t t, int64_t total_steps, const TrainConfig& cfg);

template <typename T>
struct OptimizerStateT {
    std::vector<std::vector<T>> first_moment;
    std::vector<std::vector<T>> second_moment;
    int64_t step = 0;
};

// Decoupled-weight-decay Adam with bias-corrected moments. Decay applies only
// to parameters flagged `decay` (matrices; never bias/normalization).
template <typename T>
void adamw_step(std::vector<NamedParamT<T>>& params, OptimizerStateT<T>& state, double lr,
                const TrainConfig& cfg);

struct TrainLogEntry {
    int64_t step;
    double lr;
    double loss;
};

struct TrainStats {
    std::vector<TrainLogEntry> log;
    int64_t total_steps = 0;
};

// Fine-tunes adapters + projector on the train split. Attaches adapters if
// the model has none, restricts them per cfg.tune_mode, accumulates grads
// over grad_accum_steps micro-batches with 1/grad_accum_steps loss scaling,
// and steps AdamW on the cosine schedule. Base weights stay bitwise intact.
template <typename T>
TrainStats train_model(ModelT<T>& model, const DatasetManifest& manifest,
                       const std::vector<size_t>& train_idx, const TaskSpec& task,
                       const TrainConfig& cfg, std::ostream* jsonl_log = nullptr,
                       const std::function<void(int)>& on_epoch_end = {});

// Teacher-forced fraction of answer positions whose argmax logit matches the
// target token.
template <typename T>
double masked_token_accuracy(const ModelT<T>& model, const DatasetManifest& manifest,
                             const std::vector<size_t>& indices, const TaskSpec& task);

// Builds the training sequence (prompt + serialized labels) for one sample.
TokenSequence training_sequence(const Sample& sample, const TaskSpec& task,
                                int n_image_tokens);

struct CheckpointMeta {
    std::string prompt_version = kPromptVersion;
    TaskSpec task;
    TuneMode tune_mode = TuneMode::Both;
    int lora_rank = 0;
    LoraTargets lora_targets;
    VisionConfig vision;
    LmConfig lm;
};

// Format: UTF-8 JSON header (config, prompt version, tensor index with
// name/shape/byte offset), a '\0' separator, then a little-endian float32
// payload. load(save(m)) reproduces every tensor bitwise.
template <typename T>
void save_checkpoint(ModelT<T>& model, const CheckpointMeta& meta,
                     const std::string& path);

std::pair<ModelT<float>, CheckpointMeta> load_checkpoint(const std::string& path);

}  // namespace aulite
