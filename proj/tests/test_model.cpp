#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "aulite/model.hpp"
#include "test_helpers.hpp"

using namespace aulite;
using aulite::testing::finite_diff_max_rel_error;

namespace {

ModelT<float> tiny_model(uint64_t seed = 7) {
    VisionConfig vc{16, 8, 3, 16, 1, 2};
    LmConfig lc{260, 32, 2, 2, 512};
    return build_model<float>(vc, lc, seed);
}

std::vector<float> gray_image(int size, float value = 0.5f) {
    return std::vector<float>(static_cast<size_t>(size) * size * 3, value);
}

}  // namespace

TEST_CASE("tokenizer round trips ASCII") {
    CHECK(Tokenizer::encode("").empty());
    CHECK(Tokenizer::decode({}).empty());
    const std::string text = "AU1: 1";
    CHECK(Tokenizer::decode(Tokenizer::encode(text)) == text);
    for (int id : Tokenizer::encode(text)) CHECK(id < Tokenizer::vocab_size());
    CHECK_THROWS_AS(Tokenizer::encode("caf\xc3\xa9"), FormatError);
}

TEST_CASE("token sequence grammar") {
    TokenSequence seq = build_sequence("Q", "A!", 4);
    // BOS [image x4] SEP 'Q' SEP 'A' '!' EOS
    REQUIRE(seq.length() == 11);
    CHECK(seq.ids[0] == Tokenizer::kBos);
    CHECK(seq.image_begin == 1);
    CHECK(seq.image_end == 5);
    CHECK(seq.ids[5] == Tokenizer::kSep);
    CHECK(seq.ids[7] == Tokenizer::kSep);
    CHECK(seq.ids[10] == Tokenizer::kEos);
    // answer mask covers the answer bytes and EOS only
    for (int i = 0; i < 8; ++i) CHECK_FALSE(seq.answer_mask[static_cast<size_t>(i)]);
    CHECK(seq.answer_mask[8]);
    CHECK(seq.answer_mask[9]);
    CHECK(seq.answer_mask[10]);
}

TEST_CASE("token-count law") {
    CHECK(VisionConfig{64, 8, 3, 16, 1, 2}.n_patches() == 64);
    CHECK(VisionConfig{224, 14, 3, 16, 1, 2}.n_patches() == 256);
}

TEST_CASE("encode_image geometry and value checks") {
    ModelT<float> model = tiny_model();
    Tensor features = model.encode_image(gray_image(16));
    CHECK(features.shape() == std::vector<int>{4, 16});

    CHECK_THROWS_AS(model.encode_image(gray_image(8)), ValueError);
    std::vector<float> bad = gray_image(16);
    bad[10] = 1.5f;
    CHECK_THROWS_AS(model.encode_image(bad), ValueError);
}

TEST_CASE("perturbing one patch changes that patch's features") {
    ModelT<float> model = tiny_model();
    std::vector<float> image = gray_image(16, 0.4f);
    std::vector<float> poked = image;
    // patch index 3 covers rows 8..15, cols 8..15
    poked[((8 * 16) + 8) * 3] = 0.9f;
    Tensor a = model.encode_image(image);
    Tensor b = model.encode_image(poked);
    bool row3_differs = false;
    for (int j = 0; j < 16; ++j)
        if (a.data()[3 * 16 + j] != b.data()[3 * 16 + j]) row3_differs = true;
    CHECK(row3_differs);
}

TEST_CASE("projector is exactly affine") {
    ModelT<float> model = tiny_model();
    Rng rng(12);

    Tensor zero = Tensor::zeros({4, 16});
    model.projector.bias = Tensor::zeros({32});
    Tensor out_zero = model.project(zero);
    for (float v : out_zero.data()) CHECK(v == 0.0f);

    Tensor f = Tensor::randn({4, 16}, 1.0f, rng);
    Tensor f2 = scale(f, 2.0f);
    Tensor p0 = model.project(zero);
    Tensor p1 = model.project(f);
    Tensor p2 = model.project(f2);
    for (size_t i = 0; i < p1.data().size(); ++i) {
        const float lhs = p2.data()[i] - p0.data()[i];
        const float rhs = 2.0f * (p1.data()[i] - p0.data()[i]);
        CHECK(std::abs(lhs - rhs) < 1e-5f);
    }

    // identity-initialized square projector passes features through
    ModelT<float> square = tiny_model();
    square.projector.weight = Tensor::zeros({16, 16});
    // dims differ in tiny config; rebuild a model whose LM dim matches vision
    VisionConfig vc{16, 8, 3, 16, 1, 2};
    LmConfig lc{260, 16, 1, 2, 512};
    ModelT<float> m2 = build_model<float>(vc, lc, 3);
    m2.projector.weight = Tensor::zeros({16, 16});
    for (int i = 0; i < 16; ++i) m2.projector.weight.data()[i * 16 + i] = 1.0f;
    m2.projector.bias = Tensor::zeros({16});
    Tensor feats = Tensor::randn({4, 16}, 1.0f, rng);
    Tensor tokens = m2.project(feats);
    CHECK(tokens.data() == feats.data());

    CHECK_THROWS_AS(model.project(Tensor::zeros({4, 7})), ShapeError);
}

TEST_CASE("lm_forward is causal and deterministic") {
    ModelT<float> model = tiny_model();
    std::vector<float> image = gray_image(16, 0.3f);
    Tensor image_tokens = model.project(model.encode_image(image));

    TokenSequence seq = build_sequence("ABCD", "XY", model.vision_cfg.n_patches());
    Tensor logits_a = model.lm_forward(seq, image_tokens);
    Tensor logits_b = model.lm_forward(seq, image_tokens);
    CHECK(logits_a.data() == logits_b.data());
    CHECK(all_finite(logits_a));

    // mutate a late token: logits strictly before it are bitwise unchanged
    const int j = seq.length() - 2;
    TokenSequence mutated = seq;
    mutated.ids[static_cast<size_t>(j)] = Tokenizer::encode("Z")[0];
    Tensor logits_c = model.lm_forward(mutated, image_tokens);
    const int vocab = model.lm_cfg.vocab_size;
    for (int i = 0; i < j; ++i)
        for (int v = 0; v < vocab; ++v)
            REQUIRE(logits_a.data()[static_cast<size_t>(i) * vocab + v] ==
                    logits_c.data()[static_cast<size_t>(i) * vocab + v]);

    bool last_changed = false;
    for (int v = 0; v < vocab; ++v)
        if (logits_a.data()[static_cast<size_t>(j) * vocab + v] !=
            logits_c.data()[static_cast<size_t>(j) * vocab + v])
            last_changed = true;
    CHECK(last_changed);
}

TEST_CASE("last-position fast path matches the full forward bitwise") {
    ModelT<float> model = tiny_model();
    Tensor image_tokens = model.project(model.encode_image(gray_image(16, 0.6f)));
    TokenSequence seq = build_sequence("what now", "AU1: 0", model.vision_cfg.n_patches());

    Tensor full = model.lm_forward(seq, image_tokens);
    Tensor last = model.lm_forward_last(seq, image_tokens);
    REQUIRE(last.dim(0) == 1);
    const int vocab = model.lm_cfg.vocab_size;
    const size_t offset = static_cast<size_t>(seq.length() - 1) * vocab;
    for (int v = 0; v < vocab; ++v)
        REQUIRE(last.data()[static_cast<size_t>(v)] == full.data()[offset + v]);
}

TEST_CASE("greedy generation respects budget and is deterministic") {
    ModelT<float> model = tiny_model();
    std::vector<float> image = gray_image(16, 0.2f);

    GenerationResult one = model.generate_greedy(image, "hi", 1);
    CHECK(one.text.size() <= 1);

    GenerationResult a = model.generate_greedy(image, "hi", 24);
    GenerationResult b = model.generate_greedy(image, "hi", 24);
    CHECK(a.text == b.text);
    CHECK(a.truncated == b.truncated);

    CHECK_THROWS_AS(model.generate_greedy(image, "hi", 0), ValueError);
}

TEST_CASE("recognize surfaces unparseable generations with raw text") {
    ModelT<float> model = tiny_model();
    TaskSpec task = make_task(TaskKind::Detect, {1, 2});
    try {
        model.recognize(gray_image(16, 0.5f), task);
        // an untrained model conceivably emits a valid answer; nothing to check then
    } catch (const ParseError& e) {
        const bool carries_raw = !e.raw_text.empty() || e.issue == ParseIssue::Malformed;
        CHECK(carries_raw);
    }
}

TEST_CASE("pipeline stage order is encode, project, then lm") {
    ModelT<float> model = tiny_model();
    std::vector<std::string> stages;
    model.stage_hook = [&stages](const char* s) { stages.emplace_back(s); };
    try {
        model.recognize(gray_image(16, 0.5f), make_task(TaskKind::Detect, {1}));
    } catch (const ParseError&) {
        // generation content is irrelevant here
    }
    REQUIRE(stages.size() >= 3);
    CHECK(stages[0] == "encode");
    CHECK(stages[1] == "project");
    for (size_t i = 2; i < stages.size(); ++i) CHECK(stages[i] == "lm");
}

TEST_CASE("end-to-end loss gradient w.r.t. projector passes finite differences") {
    VisionConfig vc{16, 8, 3, 8, 1, 2};
    LmConfig lc{260, 16, 1, 2, 256};
    ModelT<double> model = build_model<double>(vc, lc, 21);
    std::vector<float> image = gray_image(16, 0.35f);
    TokenSequence seq = build_sequence("q", "AU1: 1", vc.n_patches());

    std::vector<int> targets(seq.ids.size(), 0);
    std::vector<bool> mask(seq.ids.size(), false);
    for (size_t i = 0; i + 1 < seq.ids.size(); ++i) {
        targets[i] = seq.ids[i + 1];
        mask[i] = seq.answer_mask[i + 1];
    }

    std::vector<TensorD> inputs = {model.projector.weight, model.projector.bias};
    auto fn = [&](const std::vector<TensorD>&) {
        TensorD logits = model.lm_forward(seq, model.project(model.encode_image(image)));
        return cross_entropy(logits, targets, mask);
    };
    CHECK(finite_diff_max_rel_error(fn, inputs, 1e-5) < 1e-3);
}
