#include "aulite/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <ostream>

#include <json.hpp>

namespace aulite {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian float32");

void TrainConfig::validate() const {
    if (peak_lr <= 0 || weight_decay < 0 || epochs < 1 || micro_batch < 1 ||
        grad_accum_steps < 1 || lora_rank < 1)
        throw ValueError("train config: all sizes and rates must be positive");
    if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0))
        throw ValueError("train config: warmup_ratio must lie in [0,1)");
}

double lr_at_step(int64_t t, int64_t total_steps, const TrainConfig& cfg) {
    if (total_steps <= 0) throw ValueError("lr schedule: total steps must be positive");
    if (t < 0 || t > total_steps)
        throw ValueError("lr schedule: step " + std::to_string(t) + " outside [0, " +
                         std::to_string(total_steps) + "]");
    const int64_t warmup =
        std::max<int64_t>(1, std::llround(cfg.warmup_ratio * static_cast<double>(total_steps)));
    if (t < warmup)
        return cfg.peak_lr * static_cast<double>(t + 1) / static_cast<double>(warmup);
    if (total_steps == warmup) return cfg.peak_lr;
    const double progress =
        static_cast<double>(t - warmup) / static_cast<double>(total_steps - warmup);
    return cfg.peak_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

template <typename T>
void adamw_step(std::vector<NamedParamT<T>>& params, OptimizerStateT<T>& state, double lr,
                const TrainConfig& cfg) {
    if (lr < 0) throw ValueError("adamw: negative learning rate");
    if (state.first_moment.empty()) {
        state.first_moment.resize(params.size());
        state.second_moment.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            state.first_moment[i].assign(params[i].tensor.data().size(), T(0));
            state.second_moment[i].assign(params[i].tensor.data().size(), T(0));
        }
    }
    if (state.first_moment.size() != params.size())
        throw ShapeError("adamw: optimizer state does not match parameter list");

    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

    for (size_t i = 0; i < params.size(); ++i) {
        NamedParamT<T>& p = params[i];
        auto& theta = p.tensor.data();
        auto& m = state.first_moment[i];
        auto& v = state.second_moment[i];
        if (m.size() != theta.size())
            throw ShapeError("adamw: state shape mismatch for " + p.name);
        const bool has_grad = p.tensor.has_grad();
        const std::vector<T>* grad = has_grad ? &p.tensor.grad() : nullptr;
        const double decay = p.decay ? cfg.weight_decay : 0.0;
        for (size_t j = 0; j < theta.size(); ++j) {
            const double g = grad ? static_cast<double>((*grad)[j]) : 0.0;
            if (!std::isfinite(g))
                throw ValueError("adamw: non-finite gradient in '" + p.name + "'");
            const double m_new = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            const double v_new = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            m[j] = static_cast<T>(m_new);
            v[j] = static_cast<T>(v_new);
            const double m_hat = m_new / bc1;
            const double v_hat = v_new / bc2;
            const double update =
                m_hat / (std::sqrt(v_hat) + cfg.adam_eps) + decay * theta[j];
            theta[j] = static_cast<T>(theta[j] - lr * update);
        }
    }
}

TokenSequence training_sequence(const Sample& sample, const TaskSpec& task,
                                int n_image_tokens) {
    const std::string prompt = build_description(task);
    const std::string answer = serialize(derive_labels(sample, task));
    return build_sequence(prompt, answer, n_image_tokens);
}

namespace {

// Next-token targets/mask aligned to logits rows: position i predicts token
// i+1; loss only where the predicted token is in the answer region.
void shifted_targets(const TokenSequence& seq, std::vector<int>& targets,
                     std::vector<bool>& mask) {
    const size_t n = seq.ids.size();
    targets.assign(n, 0);
    mask.assign(n, false);
    for (size_t i = 0; i + 1 < n; ++i) {
        targets[i] = seq.ids[i + 1];
        mask[i] = seq.answer_mask[i + 1];
    }
}

}  // namespace

template <typename T>
TrainStats train_model(ModelT<T>& model, const DatasetManifest& manifest,
                       const std::vector<size_t>& train_idx, const TaskSpec& task,
                       const TrainConfig& cfg, std::ostream* jsonl_log,
                       const std::function<void(int)>& on_epoch_end) {
    cfg.validate();
    task.validate();
    if (train_idx.empty()) throw ValueError("train: empty dataset split");
    if (task.au_ids != manifest.au_ids)
        throw ValueError("train: task AU ids do not match the dataset");

    bool has_adapters = false;
    for (const BlockT<T>& b : model.lm.blocks)
        if (b.attn.q.adapter) has_adapters = true;
    if (!has_adapters) attach_adapters(model, cfg.lora_rank, derive_seed(cfg.seed, 7));

    std::vector<NamedParamT<T>> tuned = select_tuned_parameters(model, cfg.tune_mode);
    OptimizerStateT<T> opt;

    // pixels and token sequences are fixed across steps; cache them once
    namespace fs = std::filesystem;
    const int n_img = model.vision_cfg.n_patches();
    std::vector<std::vector<float>> pixels(train_idx.size());
    std::vector<TokenSequence> sequences(train_idx.size());
    std::vector<std::vector<int>> targets(train_idx.size());
    std::vector<std::vector<bool>> masks(train_idx.size());
    for (size_t i = 0; i < train_idx.size(); ++i) {
        const Sample& s = manifest.samples[train_idx[i]];
        pixels[i] = load_image((fs::path(manifest.root_dir) / s.image).string(),
                               model.vision_cfg.image_size);
        sequences[i] = training_sequence(s, task, n_img);
        shifted_targets(sequences[i], targets[i], masks[i]);
    }

    const int64_t micro_total =
        static_cast<int64_t>(cfg.epochs) * static_cast<int64_t>(train_idx.size()) /
        cfg.micro_batch;
    const int64_t total_steps = micro_total / cfg.grad_accum_steps;
    if (total_steps < 1)
        throw ValueError("train: " + std::to_string(train_idx.size()) +
                         " samples x " + std::to_string(cfg.epochs) +
                         " epochs cannot fill one optimizer step at accumulation " +
                         std::to_string(cfg.grad_accum_steps));

    TrainStats stats;
    stats.total_steps = total_steps;
    Rng shuffle_rng(derive_seed(cfg.seed, 8));

    int64_t step = 0;
    int accum = 0;
    double accum_loss = 0.0;
    std::vector<size_t> order(train_idx.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs && step < total_steps; ++epoch) {
        shuffle_rng.shuffle(order);
        for (size_t pos = 0; pos + cfg.micro_batch <= order.size() && step < total_steps;
             pos += cfg.micro_batch) {
            // one micro-batch: mean loss over its samples, pre-scaled by the
            // accumulation factor so accumulated grads form a batch mean
            TensorT<T> micro_loss;
            for (int b = 0; b < cfg.micro_batch; ++b) {
                const size_t i = order[pos + static_cast<size_t>(b)];
                TensorT<T> image_tokens = model.project(model.encode_image(pixels[i]));
                TensorT<T> logits = model.lm_forward(sequences[i], image_tokens);
                TensorT<T> loss = cross_entropy(logits, targets[i], masks[i]);
                micro_loss = micro_loss.defined() ? add(micro_loss, loss) : loss;
            }
            micro_loss = scale(micro_loss,
                               T(1) / static_cast<T>(cfg.micro_batch * cfg.grad_accum_steps));
            const double micro_value = static_cast<double>(micro_loss.item());
            if (!std::isfinite(micro_value))
                throw ValueError("train: non-finite loss at optimizer step " +
                                 std::to_string(step));
            accum_loss += micro_value;
            backward(micro_loss);
            ++accum;

            if (accum == cfg.grad_accum_steps) {
                const double lr = lr_at_step(step, total_steps, cfg);
                adamw_step(tuned, opt, lr, cfg);
                for (NamedParamT<T>& p : tuned) p.tensor.zero_grad();
                ++step;
                stats.log.push_back({step, lr, accum_loss});
                if (jsonl_log) {
                    nlohmann::ordered_json rec;
                    rec["step"] = step;
                    rec["lr"] = lr;
                    rec["loss"] = accum_loss;
                    (*jsonl_log) << rec.dump() << "\n";
                }
                accum = 0;
                accum_loss = 0.0;
            }
        }
        if (on_epoch_end) on_epoch_end(epoch);
    }
    return stats;
}

template <typename T>
double masked_token_accuracy(const ModelT<T>& model, const DatasetManifest& manifest,
                             const std::vector<size_t>& indices, const TaskSpec& task) {
    NoGradGuard no_grad;
    namespace fs = std::filesystem;
    int64_t hits = 0, total = 0;
    const int vocab = model.lm_cfg.vocab_size;
    for (size_t idx : indices) {
        const Sample& s = manifest.samples[idx];
        std::vector<float> image = load_image(
            (fs::path(manifest.root_dir) / s.image).string(), model.vision_cfg.image_size);
        TokenSequence seq = training_sequence(s, task, model.vision_cfg.n_patches());
        std::vector<int> targets;
        std::vector<bool> mask;
        shifted_targets(seq, targets, mask);
        TensorT<T> logits = model.lm_forward(seq, model.project(model.encode_image(image)));
        for (size_t i = 0; i < mask.size(); ++i) {
            if (!mask[i]) continue;
            const T* row = logits.data().data() + i * static_cast<size_t>(vocab);
            int best = 0;
            for (int j = 1; j < vocab; ++j)
                if (row[j] > row[best]) best = j;
            hits += best == targets[i] ? 1 : 0;
            ++total;
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {

nlohmann::ordered_json vision_to_json(const VisionConfig& c) {
    return {{"image_size", c.image_size}, {"patch_size", c.patch_size},
            {"channels", c.channels},     {"dim", c.dim},
            {"depth", c.depth},           {"heads", c.heads}};
}

VisionConfig vision_from_json(const nlohmann::json& j) {
    VisionConfig c;
    c.image_size = j.at("image_size");
    c.patch_size = j.at("patch_size");
    c.channels = j.at("channels");
    c.dim = j.at("dim");
    c.depth = j.at("depth");
    c.heads = j.at("heads");
    return c;
}

nlohmann::ordered_json lm_to_json(const LmConfig& c) {
    return {{"vocab_size", c.vocab_size},
            {"dim", c.dim},
            {"depth", c.depth},
            {"heads", c.heads},
            {"max_sequence_length", c.max_sequence_length}};
}

LmConfig lm_from_json(const nlohmann::json& j) {
    LmConfig c;
    c.vocab_size = j.at("vocab_size");
    c.dim = j.at("dim");
    c.depth = j.at("depth");
    c.heads = j.at("heads");
    c.max_sequence_length = j.at("max_sequence_length");
    return c;
}

}  // namespace

template <typename T>
void save_checkpoint(ModelT<T>& model, const CheckpointMeta& meta, const std::string& path) {
    std::vector<NamedParamT<T>> params = named_parameters(model);

    nlohmann::ordered_json header;
    header["format_version"] = 1;
    header["prompt_version"] = meta.prompt_version;
    header["task"] = task_kind_name(meta.task.kind);
    header["au_ids"] = meta.task.au_ids;
    header["tune_mode"] = tune_mode_name(meta.tune_mode);
    header["lora_rank"] = meta.lora_rank;
    header["lora_targets"] = {{"q", meta.lora_targets.q},
                              {"k", meta.lora_targets.k},
                              {"v", meta.lora_targets.v},
                              {"o", meta.lora_targets.o}};
    header["vision"] = vision_to_json(meta.vision);
    header["lm"] = lm_to_json(meta.lm);

    nlohmann::ordered_json index = nlohmann::ordered_json::array();
    uint64_t offset = 0;
    for (const NamedParamT<T>& p : params) {
        nlohmann::ordered_json entry;
        entry["name"] = p.name;
        entry["shape"] = p.tensor.shape();
        entry["offset"] = offset;
        index.push_back(std::move(entry));
        offset += static_cast<uint64_t>(p.tensor.numel()) * sizeof(float);
    }
    header["tensors"] = std::move(index);

    std::filesystem::create_directories(std::filesystem::path(path).parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path);
    const std::string header_text = header.dump();
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    out.put('\0');
    std::vector<float> row;
    for (const NamedParamT<T>& p : params) {
        row.resize(p.tensor.data().size());
        for (size_t i = 0; i < row.size(); ++i)
            row[i] = static_cast<float>(p.tensor.data()[i]);
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size() * sizeof(float)));
    }
    if (!out) throw IoError("short write to checkpoint " + path);
}

std::pair<ModelT<float>, CheckpointMeta> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path);
    std::string header_text;
    std::getline(in, header_text, '\0');
    if (!in.good()) throw FormatError("checkpoint " + path + " has no header separator");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint header is not valid JSON: " + std::string(e.what()));
    }

    CheckpointMeta meta;
    try {
        if (header.at("format_version").get<int>() != 1)
            throw FormatError("unsupported checkpoint format version");
        meta.prompt_version = header.at("prompt_version").get<std::string>();
        meta.task.kind = task_kind_from_name(header.at("task").get<std::string>());
        meta.task.au_ids = header.at("au_ids").get<std::vector<int>>();
        meta.tune_mode = tune_mode_from_name(header.at("tune_mode").get<std::string>());
        meta.lora_rank = header.at("lora_rank").get<int>();
        const auto& lt = header.at("lora_targets");
        meta.lora_targets = {lt.at("q").get<bool>(), lt.at("k").get<bool>(),
                             lt.at("v").get<bool>(), lt.at("o").get<bool>()};
        meta.vision = vision_from_json(header.at("vision"));
        meta.lm = lm_from_json(header.at("lm"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint header missing fields: " + std::string(e.what()));
    }
    if (meta.prompt_version != kPromptVersion)
        throw FormatError("checkpoint prompt version '" + meta.prompt_version +
                          "' does not match this build's " + kPromptVersion);

    ModelT<float> model = build_model<float>(meta.vision, meta.lm, /*seed=*/0);
    if (meta.lora_rank > 0)
        attach_adapters(model, meta.lora_rank, /*seed=*/0, true, true, meta.lora_targets);

    std::vector<NamedParamT<float>> params = named_parameters(model);
    // read the full payload once, then validate the index against its length
    std::vector<char> payload(std::istreambuf_iterator<char>(in), {});
    const auto& index = header.at("tensors");
    if (index.size() != params.size())
        throw FormatError("checkpoint lists " + std::to_string(index.size()) +
                          " tensors, model has " + std::to_string(params.size()));
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& entry = index[i];
        if (entry.at("name").get<std::string>() != params[i].name)
            throw FormatError("checkpoint tensor '" +
                              entry.at("name").get<std::string>() +
                              "' does not match expected '" + params[i].name + "'");
        if (entry.at("shape").get<std::vector<int>>() != params[i].tensor.shape())
            throw FormatError("checkpoint tensor '" + params[i].name + "' has wrong shape");
        const uint64_t offset = entry.at("offset").get<uint64_t>();
        const uint64_t bytes = static_cast<uint64_t>(params[i].tensor.numel()) * sizeof(float);
        if (offset + bytes > payload.size())
            throw FormatError("checkpoint payload truncated at tensor '" + params[i].name +
                              "'");
        std::memcpy(params[i].tensor.data().data(), payload.data() + offset, bytes);
    }
    return {std::move(model), std::move(meta)};
}

#define AULITE_INSTANTIATE(T)                                                           \
    template void adamw_step(std::vector<NamedParamT<T>>&, OptimizerStateT<T>&, double, \
                             const TrainConfig&);                                       \
    template TrainStats train_model(ModelT<T>&, const DatasetManifest&,                 \
                                    const std::vector<size_t>&, const TaskSpec&,        \
                                    const TrainConfig&, std::ostream*,                  \
                                    const std::function<void(int)>&);                   \
    template double masked_token_accuracy(const ModelT<T>&, const DatasetManifest&,     \
                                          const std::vector<size_t>&, const TaskSpec&); \
    template void save_checkpoint(ModelT<T>&, const CheckpointMeta&, const std::string&);

AULITE_INSTANTIATE(float)
AULITE_INSTANTIATE(double)
#undef AULITE_INSTANTIATE

}  // namespace aulite
