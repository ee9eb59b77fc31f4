#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "aulite/au_codec.hpp"
#include "aulite/lora.hpp"
#include "aulite/prompt.hpp"
#include "aulite/task.hpp"
#include "aulite/tensor.hpp"

namespace aulite {

struct VisionConfig {
    int image_size = 64;  // square; 224 also supported
    int patch_size = 8;
    int channels = 3;
    int dim = 64;
    int depth = 2;
    int heads = 4;

    int n_patches() const {
        return (image_size / patch_size) * (image_size / patch_size);
    }
    void validate() const;
};

struct LmConfig {
    int vocab_size = 260;  // 256 bytes + PAD/BOS/EOS/SEP
    int dim = 128;
    int depth = 2;
    int heads = 4;
    int max_sequence_length = 2048;

    void validate() const;
};

// Byte-level ASCII tokenizer: specials {PAD=0, BOS=1, EOS=2, SEP=3}, byte b
// maps to id b+4. decode(encode(s)) == s for any ASCII s.
struct Tokenizer {
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kSep = 3;
    static constexpr int kByteOffset = 4;

    static int vocab_size() { return 256 + kByteOffset; }
    static std::vector<int> encode(const std::string& text);
    static std::string decode(const std::vector<int>& ids);
};

// Grammar: BOS [image] SEP [prompt] SEP [answer] EOS. Image-span positions
// hold PAD placeholders in `ids`; their embeddings come from the projector.
struct TokenSequence {
    std::vector<int> ids;
    int image_begin = 0;
    int image_end = 0;  // [image_begin, image_end)
    std::vector<bool> answer_mask;  // true on answer tokens and the final EOS

    int length() const { return static_cast<int>(ids.size()); }
};

TokenSequence build_sequence(const std::string& prompt, const std::string& answer,
                             int n_image_tokens);
// Open-ended sequence for generation (no answer, no EOS).
TokenSequence build_generation_prefix(const std::string& prompt, int n_image_tokens);

template <typename T>
struct AttentionT {
    LinearT<T> q, k, v, o;
    int heads = 1;
};

template <typename T>
struct BlockT {
    TensorT<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias;
    AttentionT<T> attn;
    LinearT<T> fc1, fc2;  // MLP with 4x hidden and gelu
};

template <typename T>
struct VisionEncoderT {
    LinearT<T> patch_embed;  // [P*P*3 x dim]
    TensorT<T> pos_embed;    // [n_patches x dim]
    std::vector<BlockT<T>> blocks;
    TensorT<T> ln_f_gain, ln_f_bias;
};

template <typename T>
struct LanguageModelT {
    TensorT<T> token_embed;  // [vocab x dim]
    TensorT<T> pos_embed;    // [max_seq x dim]
    std::vector<BlockT<T>> blocks;
    TensorT<T> ln_f_gain, ln_f_bias;
    LinearT<T> head;  // [dim x vocab], no bias
};

enum class TuneMode { Visual, Llm, Both };
const char* tune_mode_name(TuneMode mode);
TuneMode tune_mode_from_name(const std::string& name);

// Which attention projections receive adapters (all four by default).
struct LoraTargets {
    bool q = true, k = true, v = true, o = true;
};

template <typename T>
struct NamedParamT {
    std::string name;
    TensorT<T> tensor;
    bool decay = false;  // weight decay applies (matrices; never bias/norm)
};

struct GenerationResult {
    std::string text;
    bool truncated = false;  // budget exhausted before EOS
};

// The composed pipeline: encoder -> single affine projector -> causal LM.
// Base weights are frozen; only adapters and the projector ever train.
template <typename T>
struct ModelT {
    VisionConfig vision_cfg;
    LmConfig lm_cfg;
    VisionEncoderT<T> vision;
    LinearT<T> projector;  // [vision dim x lm dim], exactly one affine map
    LanguageModelT<T> lm;
    std::string prompt_version = kPromptVersion;

    // test instrumentation: observes pipeline stage order
    std::function<void(const char*)> stage_hook;

    // image [S*S*3] in [0,1] row-major -> per-patch features [(S/P)^2 x dim]
    TensorT<T> encode_image(const std::vector<float>& image) const;
    // features -> image tokens in LM embedding space (affine map only)
    TensorT<T> project(const TensorT<T>& features) const;
    // spliced causal forward -> logits [T x vocab]
    TensorT<T> lm_forward(const TokenSequence& seq, const TensorT<T>& image_tokens) const;
    // logits for the final position only (prunes unused rows in the last
    // block; no state is kept between calls)
    TensorT<T> lm_forward_last(const TokenSequence& seq,
                               const TensorT<T>& image_tokens) const;

    GenerationResult generate_greedy(const std::vector<float>& image,
                                     const std::string& prompt, int max_new_tokens) const;
    AuAnswer recognize(const std::vector<float>& image, const TaskSpec& task) const;
};

using Model = ModelT<float>;

template <typename T>
ModelT<T> build_model(const VisionConfig& vision_cfg, const LmConfig& lm_cfg,
                      uint64_t seed);

// Adapters on every self-attention projection of the selected components.
template <typename T>
void attach_adapters(ModelT<T>& model, int rank, uint64_t seed,
                     bool visual = true, bool llm = true, LoraTargets targets = {});

// Every tensor in the model, stably ordered and named; adapters appear as
// <layer>.lora_u / <layer>.lora_v.
template <typename T>
std::vector<NamedParamT<T>> named_parameters(ModelT<T>& model);

// Exactly the adapter factors plus the projector (the designated
// fully-trainable module); never a frozen base weight.
template <typename T>
std::vector<NamedParamT<T>> trainable_parameters(ModelT<T>& model);

// Restrict the trainable set to the given tune mode (projector always
// included); adapters outside the mode stop requiring grad.
template <typename T>
std::vector<NamedParamT<T>> select_tuned_parameters(ModelT<T>& model, TuneMode mode);

template <typename T>
int64_t parameter_count(const std::vector<NamedParamT<T>>& params);

extern template struct ModelT<float>;
extern template struct ModelT<double>;

}  // namespace aulite
