#include "aulite/model.hpp"

#include <algorithm>
#include <cmath>

namespace aulite {

namespace {
constexpr float kLnEps = 1e-5f;
}

void VisionConfig::validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
        throw ValueError("vision config: image size " + std::to_string(image_size) +
                         " must be a positive multiple of patch size " +
                         std::to_string(patch_size));
    if (channels != 3) throw ValueError("vision config: expected 3 channels");
    if (dim <= 0 || heads <= 0 || dim % heads != 0)
        throw ValueError("vision config: dim " + std::to_string(dim) +
                         " must be divisible by heads " + std::to_string(heads));
    if (depth < 1) throw ValueError("vision config: depth must be >= 1");
}

void LmConfig::validate() const {
    if (vocab_size < Tokenizer::vocab_size())
        throw ValueError("lm config: vocab must hold " +
                         std::to_string(Tokenizer::vocab_size()) + " ids");
    if (dim <= 0 || heads <= 0 || dim % heads != 0)
        throw ValueError("lm config: dim " + std::to_string(dim) +
                         " must be divisible by heads " + std::to_string(heads));
    if (depth < 1) throw ValueError("lm config: depth must be >= 1");
    if (max_sequence_length < 8) throw ValueError("lm config: max sequence too small");
}

// ---------------------------------------------------------------------------
// tokenizer
// ---------------------------------------------------------------------------

std::vector<int> Tokenizer::encode(const std::string& text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (char c : text) {
        const auto byte = static_cast<unsigned char>(c);
        if (byte > 127)
            throw FormatError("tokenizer: non-ASCII byte " + std::to_string(byte));
        ids.push_back(static_cast<int>(byte) + kByteOffset);
    }
    return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) {
    std::string text;
    text.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || id >= vocab_size())
            throw FormatError("tokenizer: id " + std::to_string(id) + " outside vocab");
        if (id < kByteOffset) continue;  // specials carry no text
        text.push_back(static_cast<char>(id - kByteOffset));
    }
    return text;
}

// ---------------------------------------------------------------------------
// token sequences
// ---------------------------------------------------------------------------

TokenSequence build_generation_prefix(const std::string& prompt, int n_image_tokens) {
    TokenSequence seq;
    seq.ids.push_back(Tokenizer::kBos);
    seq.image_begin = 1;
    seq.image_end = 1 + n_image_tokens;
    seq.ids.insert(seq.ids.end(), static_cast<size_t>(n_image_tokens), Tokenizer::kPad);
    seq.ids.push_back(Tokenizer::kSep);
    for (int id : Tokenizer::encode(prompt)) seq.ids.push_back(id);
    seq.ids.push_back(Tokenizer::kSep);
    seq.answer_mask.assign(seq.ids.size(), false);
    return seq;
}

TokenSequence build_sequence(const std::string& prompt, const std::string& answer,
                             int n_image_tokens) {
    TokenSequence seq = build_generation_prefix(prompt, n_image_tokens);
    for (int id : Tokenizer::encode(answer)) {
        seq.ids.push_back(id);
        seq.answer_mask.push_back(true);
    }
    seq.ids.push_back(Tokenizer::kEos);
    seq.answer_mask.push_back(true);  // learning to stop is part of the answer
    return seq;
}

// ---------------------------------------------------------------------------
// transformer blocks
// ---------------------------------------------------------------------------

namespace {

// Multi-head attention over pre-normalized input. Rows [query_begin, T) of
// the output are produced; keys/values always cover the full sequence.
template <typename T>
TensorT<T> attention_forward(const AttentionT<T>& attn, const TensorT<T>& x_norm,
                             bool causal, int query_begin) {
    const int t = x_norm.dim(0);
    const int dim = attn.q.out_dim();
    const int head_dim = dim / attn.heads;
    TensorT<T> xq = query_begin > 0 ? slice_rows(x_norm, query_begin, t) : x_norm;
    TensorT<T> q = attn.q.forward(xq);
    TensorT<T> k = attn.k.forward(x_norm);
    TensorT<T> v = attn.v.forward(x_norm);
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(head_dim));

    std::vector<TensorT<T>> outputs;
    outputs.reserve(static_cast<size_t>(attn.heads));
    for (int h = 0; h < attn.heads; ++h) {
        TensorT<T> qh = slice_cols(q, h * head_dim, (h + 1) * head_dim);
        TensorT<T> kh = slice_cols(k, h * head_dim, (h + 1) * head_dim);
        TensorT<T> vh = slice_cols(v, h * head_dim, (h + 1) * head_dim);
        TensorT<T> scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
        TensorT<T> probs =
            causal ? causal_softmax(scores, query_begin) : softmax(scores, 1);
        outputs.push_back(matmul(probs, vh));
    }
    return attn.o.forward(concat_cols(outputs));
}

// Pre-LN block; with query_begin > 0 only the tail rows are produced (used by
// the last block when just the final position's logits are needed).
template <typename T>
TensorT<T> block_forward(const BlockT<T>& block, const TensorT<T>& x, bool causal,
                         int query_begin) {
    const int t = x.dim(0);
    TensorT<T> xn = layer_norm(x, block.ln1_gain, block.ln1_bias, static_cast<T>(kLnEps));
    TensorT<T> attn_out = attention_forward(block.attn, xn, causal, query_begin);
    TensorT<T> residual = query_begin > 0 ? slice_rows(x, query_begin, t) : x;
    TensorT<T> h = add(residual, attn_out);
    TensorT<T> hn = layer_norm(h, block.ln2_gain, block.ln2_bias, static_cast<T>(kLnEps));
    TensorT<T> mlp_out = block.fc2.forward(gelu(block.fc1.forward(hn)));
    return add(h, mlp_out);
}

// image [S x S x 3] row-major -> [(S/P)^2 x P*P*3] patch matrix (a leaf).
template <typename T>
TensorT<T> patchify(const std::vector<float>& image, const VisionConfig& cfg) {
    const int size = cfg.image_size, patch = cfg.patch_size;
    const int per_side = size / patch;
    const int patch_dim = patch * patch * 3;
    TensorT<T> out = TensorT<T>::zeros({per_side * per_side, patch_dim});
    auto& data = out.data();
    for (int py = 0; py < per_side; ++py)
        for (int px = 0; px < per_side; ++px) {
            const size_t row = static_cast<size_t>(py) * per_side + px;
            size_t idx = row * patch_dim;
            for (int dy = 0; dy < patch; ++dy)
                for (int dx = 0; dx < patch; ++dx)
                    for (int c = 0; c < 3; ++c)
                        data[idx++] = static_cast<T>(
                            image[((static_cast<size_t>(py) * patch + dy) * size +
                                   (static_cast<size_t>(px) * patch + dx)) * 3 + c]);
        }
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// pipeline stages
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> ModelT<T>::encode_image(const std::vector<float>& image) const {
    if (stage_hook) stage_hook("encode");
    const size_t expected = static_cast<size_t>(vision_cfg.image_size) *
                            vision_cfg.image_size * vision_cfg.channels;
    if (image.size() != expected)
        throw ValueError("encode_image: got " + std::to_string(image.size()) +
                         " values, config wants " + std::to_string(expected) + " (" +
                         std::to_string(vision_cfg.image_size) + "x" +
                         std::to_string(vision_cfg.image_size) + "x3)");
    for (float v : image)
        if (!(v >= 0.0f && v <= 1.0f))
            throw ValueError("encode_image: pixel value " + std::to_string(v) +
                             " outside [0,1]");

    TensorT<T> x = vision.patch_embed.forward(patchify<T>(image, vision_cfg));
    x = add(x, vision.pos_embed);
    for (const BlockT<T>& block : vision.blocks)
        x = block_forward(block, x, /*causal=*/false, /*query_begin=*/0);
    return layer_norm(x, vision.ln_f_gain, vision.ln_f_bias, static_cast<T>(kLnEps));
}

template <typename T>
TensorT<T> ModelT<T>::project(const TensorT<T>& features) const {
    if (stage_hook) stage_hook("project");
    if (features.rank() != 2 || features.dim(1) != projector.in_dim())
        throw ShapeError("project: features " + format_shape(features.shape()) +
                         " do not match projector input dim " +
                         std::to_string(projector.in_dim()));
    return projector.forward(features);
}

namespace {

template <typename T>
TensorT<T> spliced_embeddings(const LanguageModelT<T>& lm, const LmConfig& cfg,
                              const TokenSequence& seq, const TensorT<T>& image_tokens) {
    const int total = seq.length();
    if (total > cfg.max_sequence_length)
        throw ValueError("sequence of " + std::to_string(total) +
                         " tokens overflows max length " +
                         std::to_string(cfg.max_sequence_length));
    if (image_tokens.dim(0) != seq.image_end - seq.image_begin)
        throw ShapeError("sequence expects " +
                         std::to_string(seq.image_end - seq.image_begin) +
                         " image tokens, got " + std::to_string(image_tokens.dim(0)));
    if (image_tokens.dim(1) != cfg.dim)
        throw ShapeError("image tokens have dim " + std::to_string(image_tokens.dim(1)) +
                         ", LM wants " + std::to_string(cfg.dim));

    std::vector<int> pre(seq.ids.begin(), seq.ids.begin() + seq.image_begin);
    std::vector<int> post(seq.ids.begin() + seq.image_end, seq.ids.end());
    std::vector<TensorT<T>> parts;
    parts.push_back(embedding_lookup(lm.token_embed, pre));
    parts.push_back(image_tokens);
    if (!post.empty()) parts.push_back(embedding_lookup(lm.token_embed, post));
    TensorT<T> e = concat_rows(parts);
    return add(e, slice_rows(lm.pos_embed, 0, total));
}

}  // namespace

template <typename T>
TensorT<T> ModelT<T>::lm_forward(const TokenSequence& seq,
                                 const TensorT<T>& image_tokens) const {
    if (stage_hook) stage_hook("lm");
    TensorT<T> h = spliced_embeddings(lm, lm_cfg, seq, image_tokens);
    for (const BlockT<T>& block : lm.blocks)
        h = block_forward(block, h, /*causal=*/true, /*query_begin=*/0);
    h = layer_norm(h, lm.ln_f_gain, lm.ln_f_bias, static_cast<T>(kLnEps));
    return lm.head.forward(h);
}

template <typename T>
TensorT<T> ModelT<T>::lm_forward_last(const TokenSequence& seq,
                                      const TensorT<T>& image_tokens) const {
    if (stage_hook) stage_hook("lm");
    TensorT<T> h = spliced_embeddings(lm, lm_cfg, seq, image_tokens);
    const int last = seq.length() - 1;
    for (size_t i = 0; i < lm.blocks.size(); ++i) {
        const bool final_block = i + 1 == lm.blocks.size();
        h = block_forward(lm.blocks[i], h, /*causal=*/true,
                          /*query_begin=*/final_block ? last : 0);
    }
    h = layer_norm(h, lm.ln_f_gain, lm.ln_f_bias, static_cast<T>(kLnEps));
    return lm.head.forward(h);
}

template <typename T>
GenerationResult ModelT<T>::generate_greedy(const std::vector<float>& image,
                                            const std::string& prompt,
                                            int max_new_tokens) const {
    if (max_new_tokens < 1) throw ValueError("generate: max_new_tokens must be >= 1");
    NoGradGuard no_grad;
    TensorT<T> image_tokens = project(encode_image(image));
    TokenSequence seq =
        build_generation_prefix(prompt, vision_cfg.n_patches());

    std::vector<int> emitted;
    bool truncated = true;
    for (int step = 0; step < max_new_tokens; ++step) {
        if (seq.length() + 1 > lm_cfg.max_sequence_length) break;
        TensorT<T> logits = lm_forward_last(seq, image_tokens);
        const auto& row = logits.data();
        int best = 0;
        for (int j = 1; j < lm_cfg.vocab_size; ++j)
            if (row[static_cast<size_t>(j)] > row[static_cast<size_t>(best)]) best = j;
        if (best == Tokenizer::kEos) {
            truncated = false;
            break;
        }
        emitted.push_back(best);
        seq.ids.push_back(best);
    }
    return GenerationResult{Tokenizer::decode(emitted), truncated};
}

template <typename T>
AuAnswer ModelT<T>::recognize(const std::vector<float>& image, const TaskSpec& task) const {
    task.validate();
    const std::string prompt = build_description(task);
    const int budget = static_cast<int>(task.au_ids.size()) * 12 + 8;
    GenerationResult gen = generate_greedy(image, prompt, budget);
    return parse(gen.text, task);  // ParseError carries the raw text on failure
}

// ---------------------------------------------------------------------------
// construction
// ---------------------------------------------------------------------------

const char* tune_mode_name(TuneMode mode) {
    switch (mode) {
        case TuneMode::Visual: return "visual";
        case TuneMode::Llm: return "llm";
        case TuneMode::Both: return "both";
    }
    return "?";
}

TuneMode tune_mode_from_name(const std::string& name) {
    if (name == "visual") return TuneMode::Visual;
    if (name == "llm") return TuneMode::Llm;
    if (name == "both") return TuneMode::Both;
    throw ValueError("unknown tune mode '" + name + "' (expected visual|llm|both)");
}

namespace {

template <typename T>
BlockT<T> make_block(const std::string& prefix, int dim, int heads, Rng& rng) {
    BlockT<T> block;
    block.ln1_gain = TensorT<T>::full({dim}, T(1));
    block.ln1_bias = TensorT<T>::zeros({dim});
    block.ln2_gain = TensorT<T>::full({dim}, T(1));
    block.ln2_bias = TensorT<T>::zeros({dim});
    block.attn.heads = heads;
    block.attn.q = make_linear<T>(prefix + ".attn.q", dim, dim, rng);
    block.attn.k = make_linear<T>(prefix + ".attn.k", dim, dim, rng);
    block.attn.v = make_linear<T>(prefix + ".attn.v", dim, dim, rng);
    block.attn.o = make_linear<T>(prefix + ".attn.o", dim, dim, rng);
    block.fc1 = make_linear<T>(prefix + ".mlp.fc1", dim, 4 * dim, rng);
    block.fc2 = make_linear<T>(prefix + ".mlp.fc2", 4 * dim, dim, rng);
    return block;
}

}  // namespace

template <typename T>
ModelT<T> build_model(const VisionConfig& vision_cfg, const LmConfig& lm_cfg,
                      uint64_t seed) {
    vision_cfg.validate();
    lm_cfg.validate();

    ModelT<T> model;
    model.vision_cfg = vision_cfg;
    model.lm_cfg = lm_cfg;

    Rng rng(derive_seed(seed, 100));
    const int patch_dim = vision_cfg.patch_size * vision_cfg.patch_size * 3;
    model.vision.patch_embed =
        make_linear<T>("vision.patch_embed", patch_dim, vision_cfg.dim, rng);
    model.vision.pos_embed =
        TensorT<T>::randn({vision_cfg.n_patches(), vision_cfg.dim}, T(0.02), rng);
    for (int i = 0; i < vision_cfg.depth; ++i)
        model.vision.blocks.push_back(make_block<T>("vision.block" + std::to_string(i),
                                                    vision_cfg.dim, vision_cfg.heads, rng));
    model.vision.ln_f_gain = TensorT<T>::full({vision_cfg.dim}, T(1));
    model.vision.ln_f_bias = TensorT<T>::zeros({vision_cfg.dim});

    model.projector = make_linear<T>("projector", vision_cfg.dim, lm_cfg.dim, rng);
    model.projector.weight.set_requires_grad(true);  // trains in every mode
    model.projector.bias.set_requires_grad(true);

    model.lm.token_embed =
        TensorT<T>::randn({lm_cfg.vocab_size, lm_cfg.dim}, T(0.02), rng);
    model.lm.pos_embed =
        TensorT<T>::randn({lm_cfg.max_sequence_length, lm_cfg.dim}, T(0.02), rng);
    for (int i = 0; i < lm_cfg.depth; ++i)
        model.lm.blocks.push_back(
            make_block<T>("lm.block" + std::to_string(i), lm_cfg.dim, lm_cfg.heads, rng));
    model.lm.ln_f_gain = TensorT<T>::full({lm_cfg.dim}, T(1));
    model.lm.ln_f_bias = TensorT<T>::zeros({lm_cfg.dim});
    model.lm.head = make_linear<T>("lm.head", lm_cfg.dim, lm_cfg.vocab_size, rng,
                                   /*with_bias=*/false);
    return model;
}

namespace {

template <typename T>
void for_each_attention(ModelT<T>& model, bool visual, bool llm,
                        const std::function<void(AttentionT<T>&)>& fn) {
    if (visual)
        for (BlockT<T>& block : model.vision.blocks) fn(block.attn);
    if (llm)
        for (BlockT<T>& block : model.lm.blocks) fn(block.attn);
}

}  // namespace

template <typename T>
void attach_adapters(ModelT<T>& model, int rank, uint64_t seed, bool visual, bool llm,
                     LoraTargets targets) {
    uint64_t counter = 0;
    for_each_attention<T>(model, visual, llm, [&](AttentionT<T>& attn) {
        if (targets.q) attach_lora(attn.q, rank, derive_seed(seed, 200 + counter++));
        if (targets.k) attach_lora(attn.k, rank, derive_seed(seed, 200 + counter++));
        if (targets.v) attach_lora(attn.v, rank, derive_seed(seed, 200 + counter++));
        if (targets.o) attach_lora(attn.o, rank, derive_seed(seed, 200 + counter++));
    });
}

namespace {

template <typename T>
void collect_linear(LinearT<T>& layer, std::vector<NamedParamT<T>>& out) {
    out.push_back({layer.name + ".weight", layer.weight, /*decay=*/true});
    if (layer.bias.defined()) out.push_back({layer.name + ".bias", layer.bias, false});
    if (layer.adapter) {
        out.push_back({layer.name + ".lora_u", layer.adapter->u, /*decay=*/true});
        out.push_back({layer.name + ".lora_v", layer.adapter->v, /*decay=*/true});
    }
}

template <typename T>
void collect_block(BlockT<T>& block, const std::string& prefix,
                   std::vector<NamedParamT<T>>& out) {
    out.push_back({prefix + ".ln1.gain", block.ln1_gain, false});
    out.push_back({prefix + ".ln1.bias", block.ln1_bias, false});
    collect_linear(block.attn.q, out);
    collect_linear(block.attn.k, out);
    collect_linear(block.attn.v, out);
    collect_linear(block.attn.o, out);
    out.push_back({prefix + ".ln2.gain", block.ln2_gain, false});
    out.push_back({prefix + ".ln2.bias", block.ln2_bias, false});
    collect_linear(block.fc1, out);
    collect_linear(block.fc2, out);
}

}  // namespace

template <typename T>
std::vector<NamedParamT<T>> named_parameters(ModelT<T>& model) {
    std::vector<NamedParamT<T>> out;
    collect_linear(model.vision.patch_embed, out);
    out.push_back({"vision.pos_embed", model.vision.pos_embed, false});
    for (size_t i = 0; i < model.vision.blocks.size(); ++i)
        collect_block(model.vision.blocks[i], "vision.block" + std::to_string(i), out);
    out.push_back({"vision.ln_f.gain", model.vision.ln_f_gain, false});
    out.push_back({"vision.ln_f.bias", model.vision.ln_f_bias, false});
    collect_linear(model.projector, out);
    out.push_back({"lm.token_embed", model.lm.token_embed, false});
    out.push_back({"lm.pos_embed", model.lm.pos_embed, false});
    for (size_t i = 0; i < model.lm.blocks.size(); ++i)
        collect_block(model.lm.blocks[i], "lm.block" + std::to_string(i), out);
    out.push_back({"lm.ln_f.gain", model.lm.ln_f_gain, false});
    out.push_back({"lm.ln_f.bias", model.lm.ln_f_bias, false});
    collect_linear(model.lm.head, out);
    return out;
}

template <typename T>
std::vector<NamedParamT<T>> trainable_parameters(ModelT<T>& model) {
    std::vector<NamedParamT<T>> out;
    for (NamedParamT<T>& p : named_parameters(model)) {
        const bool is_adapter = p.name.ends_with(".lora_u") || p.name.ends_with(".lora_v");
        const bool is_projector = p.name == "projector.weight" || p.name == "projector.bias";
        if (is_adapter || is_projector) out.push_back(p);
    }
    return out;
}

template <typename T>
std::vector<NamedParamT<T>> select_tuned_parameters(ModelT<T>& model, TuneMode mode) {
    std::vector<NamedParamT<T>> out;
    for (NamedParamT<T>& p : trainable_parameters(model)) {
        const bool is_projector = p.name.starts_with("projector.");
        bool keep = is_projector;
        if (!keep) {
            const bool visual = p.name.starts_with("vision.");
            keep = (mode == TuneMode::Both) || (mode == TuneMode::Visual && visual) ||
                   (mode == TuneMode::Llm && !visual);
        }
        p.tensor.set_requires_grad(keep);
        if (keep) out.push_back(p);
    }
    return out;
}

template <typename T>
int64_t parameter_count(const std::vector<NamedParamT<T>>& params) {
    int64_t total = 0;
    for (const NamedParamT<T>& p : params) total += p.tensor.numel();
    return total;
}

template struct ModelT<float>;
template struct ModelT<double>;

#define AULITE_INSTANTIATE(T)                                                        \
    template ModelT<T> build_model(const VisionConfig&, const LmConfig&, uint64_t);  \
    template void attach_adapters(ModelT<T>&, int, uint64_t, bool, bool, LoraTargets); \
    template std::vector<NamedParamT<T>> named_parameters(ModelT<T>&);               \
    template std::vector<NamedParamT<T>> trainable_parameters(ModelT<T>&);           \
    template std::vector<NamedParamT<T>> select_tuned_parameters(ModelT<T>&, TuneMode); \
    template int64_t parameter_count(const std::vector<NamedParamT<T>>&);

AULITE_INSTANTIATE(float)
AULITE_INSTANTIATE(double)
#undef AULITE_INSTANTIATE

}  // namespace aulite
