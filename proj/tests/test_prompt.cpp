#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "aulite/prompt.hpp"

using namespace aulite;

TEST_CASE("three labeled parts in fixed order") {
    TaskSpec task = make_task(TaskKind::Detect, {1, 2});
    std::string text = build_description(task);
    size_t p1 = text.find("TASK: ");
    size_t p2 = text.find("AU DEFINITIONS: ");
    size_t p3 = text.find("OUTPUT FORMAT: ");
    REQUIRE(p1 != std::string::npos);
    REQUIRE(p2 != std::string::npos);
    REQUIRE(p3 != std::string::npos);
    CHECK(p1 < p2);
    CHECK(p2 < p3);

    // detect task mentions the binary range and defines both AUs
    CHECK(text.find("0 or 1") != std::string::npos);
    CHECK(text.find("AU1 inner brow raiser") != std::string::npos);
    CHECK(text.find("AU2 outer brow raiser") != std::string::npos);
}

TEST_CASE("deterministic bytes for equal task specs") {
    TaskSpec task = make_task(TaskKind::Level, {4, 6, 12});
    CHECK(build_description(task) == build_description(task));
}

TEST_CASE("task framing changes, AU definitions do not") {
    TaskSpec level = make_task(TaskKind::Level, {1, 4});
    TaskSpec intensity = make_task(TaskKind::Intensity, {1, 4});
    std::string a = build_description(level);
    std::string b = build_description(intensity);
    CHECK(a != b);

    auto part2 = [](const std::string& s) {
        size_t begin = s.find("AU DEFINITIONS: ");
        size_t end = s.find("OUTPUT FORMAT: ");
        return s.substr(begin, end - begin);
    };
    CHECK(part2(a) == part2(b));
}

TEST_CASE("ASCII-only output") {
    TaskSpec task = make_task(TaskKind::Intensity, feafa_au_ids());
    for (char c : build_description(task))
        CHECK(static_cast<unsigned char>(c) <= 127);
}

TEST_CASE("builtin table covers the three dataset conventions") {
    CHECK(lookup_au(12).region == FaceRegion::Lower);
    CHECK(lookup_au(1).region == FaceRegion::Upper);
    for (int id : bp4d_au_ids()) CHECK_NOTHROW(lookup_au(id));
    for (int id : disfa_au_ids()) CHECK_NOTHROW(lookup_au(id));
    for (int id : feafa_au_ids()) CHECK_NOTHROW(lookup_au(id));
    CHECK(feafa_au_ids().size() == 24);
    CHECK_THROWS_AS(lookup_au(99), ValueError);
    CHECK_THROWS_AS(build_description(make_task(TaskKind::Detect, {99})), ValueError);
}
