#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "aulite/data_synth.hpp"

using namespace aulite;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& name) {
    fs::path dir = fs::path("tmp_test_data") / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

double region_mean(const std::vector<float>& img, int size, const RegionRect& r) {
    double total = 0.0;
    int count = 0;
    for (int y = r.row0; y < r.row1; ++y)
        for (int x = r.col0; x < r.col1; ++x) {
            total += img[(static_cast<size_t>(y) * size + x) * 3];
            ++count;
        }
    return total / count;
}

// Solves the small normal equations for a least-squares probe.
std::vector<double> solve_least_squares(std::vector<std::vector<double>> xtx,
                                        std::vector<double> xty) {
    const size_t n = xty.size();
    for (size_t col = 0; col < n; ++col) {
        size_t pivot = col;
        for (size_t r = col + 1; r < n; ++r)
            if (std::abs(xtx[r][col]) > std::abs(xtx[pivot][col])) pivot = r;
        std::swap(xtx[col], xtx[pivot]);
        std::swap(xty[col], xty[pivot]);
        const double diag = xtx[col][col];
        REQUIRE(std::abs(diag) > 1e-12);
        for (size_t r = 0; r < n; ++r) {
            if (r == col) continue;
            const double f = xtx[r][col] / diag;
            for (size_t c = col; c < n; ++c) xtx[r][c] -= f * xtx[col][c];
            xty[r] -= f * xty[col];
        }
    }
    std::vector<double> w(n);
    for (size_t i = 0; i < n; ++i) w[i] = xty[i] / xtx[i][i];
    return w;
}

}  // namespace

TEST_CASE("generation is deterministic and reloadable") {
    std::string dir_a = fresh_dir("det_a");
    std::string dir_b = fresh_dir("det_b");
    DatasetManifest a = generate_dataset(8, 3, 4, 32, 42, dir_a);
    DatasetManifest b = generate_dataset(8, 3, 4, 32, 42, dir_b);

    CHECK(slurp(fs::path(dir_a) / "manifest.json") == slurp(fs::path(dir_b) / "manifest.json"));
    for (const Sample& s : a.samples)
        CHECK(slurp(fs::path(dir_a) / s.image) == slurp(fs::path(dir_b) / s.image));

    DatasetManifest loaded = load_manifest(dir_a);
    CHECK(loaded.k == 8);
    CHECK(loaded.au_ids == disfa_au_ids());
    CHECK(loaded.samples.size() == 12);
    for (size_t i = 0; i < loaded.samples.size(); ++i)
        CHECK(loaded.samples[i].intensities == a.samples[i].intensities);
}

TEST_CASE("region brightness tracks intensity against a background reference") {
    std::string dir = fresh_dir("regions");
    DatasetManifest m = generate_dataset(8, 2, 6, 32, 7, dir);
    for (const Sample& s : m.samples) {
        std::vector<float> img = load_image((fs::path(dir) / s.image).string(), 32);
        // background cell: grid position K (first cell owned by no AU)
        RegionRect bg = au_region(8, 9, 32);
        const double base = region_mean(img, 32, bg);
        for (int k = 0; k < 8; ++k) {
            const double mean_k = region_mean(img, 32, au_region(k, 8, 32));
            const double expected = kRegionAmplitude * s.intensities[static_cast<size_t>(k)];
            CHECK(std::abs((mean_k - base) - expected) < 0.02);
        }
    }
}

TEST_CASE("derive_labels boundary rules") {
    TaskSpec detect = make_task(TaskKind::Detect, {1, 2, 4});
    TaskSpec level = make_task(TaskKind::Level, {1, 2, 4});
    TaskSpec intensity = make_task(TaskKind::Intensity, {1, 2, 4});
    Sample s{"x.ppm", "s0", {0.74, 0.0, 0.5}};

    AuAnswer d = derive_labels(s, detect);
    CHECK(d.values == std::vector<double>{1, 0, 0});  // strict >0.5

    AuAnswer l = derive_labels(s, level);
    CHECK(l.values == std::vector<double>{4, 0, 3});  // round(2.5) away from zero

    AuAnswer i = derive_labels(s, intensity);
    CHECK(i.values == std::vector<double>{0.74, 0.0, 0.5});
}

TEST_CASE("label derivability from stored intensities") {
    std::string dir = fresh_dir("derive");
    DatasetManifest m = generate_dataset(4, 2, 3, 32, 3, dir);
    TaskSpec task = make_task(TaskKind::Level, m.au_ids);
    DatasetManifest reloaded = load_manifest(dir);
    for (size_t i = 0; i < m.samples.size(); ++i) {
        AuAnswer fresh = derive_labels(m.samples[i], task);
        AuAnswer restored = derive_labels(reloaded.samples[i], task);
        CHECK(fresh.values == restored.values);
    }
}

TEST_CASE("load_image crop and resize rules") {
    std::string dir = fresh_dir("img");
    // constant 2S x 2S image resizes to the same constant
    std::vector<uint8_t> big(64 * 64 * 3, 200);
    write_ppm(dir + "/big.ppm", big, 64, 64);
    std::vector<float> out = load_image(dir + "/big.ppm", 32);
    CHECK(out.size() == 32 * 32 * 3);
    for (float v : out) CHECK(v == doctest::Approx(200.0 / 255.0));

    // all-255 maps to all-1.0 and identity resize keeps pixels
    std::vector<uint8_t> exact(16 * 16 * 3);
    for (size_t i = 0; i < exact.size(); ++i) exact[i] = static_cast<uint8_t>(i % 251);
    write_ppm(dir + "/exact.ppm", exact, 16, 16);
    std::vector<float> same = load_image(dir + "/exact.ppm", 16);
    for (size_t i = 0; i < exact.size(); ++i)
        CHECK(same[i] == doctest::Approx(exact[i] / 255.0f));

    std::vector<uint8_t> white(8 * 8 * 3, 255);
    write_ppm(dir + "/white.ppm", white, 8, 8);
    for (float v : load_image(dir + "/white.ppm", 8)) CHECK(v == 1.0f);
}

TEST_CASE("ppm error paths") {
    std::string dir = fresh_dir("ppm_err");
    {
        std::ofstream bad(dir + "/bad.ppm", std::ios::binary);
        bad << "P5\n8 8\n255\n";
    }
    int w, h;
    CHECK_THROWS_AS(read_ppm(dir + "/bad.ppm", w, h), FormatError);
    {
        std::ofstream trunc(dir + "/trunc.ppm", std::ios::binary);
        trunc << "P6\n8 8\n255\nshort";
    }
    CHECK_THROWS_AS(read_ppm(dir + "/trunc.ppm", w, h), FormatError);
    CHECK_THROWS_AS(read_ppm(dir + "/missing.ppm", w, h), IoError);
}

TEST_CASE("cv folds are subject-disjoint partitions") {
    std::string dir = fresh_dir("folds");
    DatasetManifest m = generate_dataset(4, 9, 2, 32, 11, dir);

    for (uint64_t seed = 0; seed < 25; ++seed) {
        FoldPlan plan = make_cv_folds(m, 3, seed);
        std::set<std::string> all_val_subjects;
        for (int fold = 0; fold < 3; ++fold) {
            auto train = plan.train_indices(m, fold);
            auto val = plan.val_indices(m, fold);
            CHECK(train.size() + val.size() == m.samples.size());
            CHECK(!val.empty());
            std::set<std::string> train_subjects, val_subjects;
            for (size_t i : train) train_subjects.insert(m.samples[i].subject_id);
            for (size_t i : val) val_subjects.insert(m.samples[i].subject_id);
            for (const auto& s : val_subjects) {
                CHECK(train_subjects.count(s) == 0);
                CHECK(all_val_subjects.count(s) == 0);
                all_val_subjects.insert(s);
            }
        }
        CHECK(all_val_subjects.size() == 9);  // every subject exactly once
    }

    // minimal case: 3 subjects, 3 folds -> one subject per fold
    DatasetManifest tiny = generate_dataset(4, 3, 2, 32, 1, fresh_dir("folds_tiny"));
    FoldPlan plan = make_cv_folds(tiny, 3, 0);
    for (int fold = 0; fold < 3; ++fold) {
        std::set<std::string> subj;
        for (size_t i : plan.val_indices(tiny, fold)) subj.insert(tiny.samples[i].subject_id);
        CHECK(subj.size() == 1);
    }

    DatasetManifest two = generate_dataset(4, 2, 2, 32, 1, fresh_dir("folds_two"));
    CHECK_THROWS_AS(make_cv_folds(two, 3, 0), ValueError);
}

TEST_CASE("ratio split sizes and determinism") {
    std::string dir = fresh_dir("ratio");
    DatasetManifest m = generate_dataset(4, 5, 2, 32, 17, dir);  // n = 10
    FoldPlan a = make_ratio_split(m, 5);
    FoldPlan b = make_ratio_split(m, 5);
    CHECK(a.train_samples.size() == 8);
    CHECK(a.val_samples.size() == 2);
    CHECK(a.train_samples == b.train_samples);
    CHECK(a.val_samples == b.val_samples);

    std::set<size_t> all(a.train_samples.begin(), a.train_samples.end());
    for (size_t i : a.val_samples) CHECK(all.insert(i).second);
    CHECK(all.size() == 10);
}

TEST_CASE("linear probe on region means recovers intensities") {
    // noiseless regeneration; background mean cancels the subject bias
    std::string dir = fresh_dir("probe");
    DatasetManifest m = generate_dataset(8, 6, 20, 32, 23, dir, /*noise_sigma=*/0.0);

    const int K = 8, size = 32;
    const size_t n_features = K + 2;  // region means + background + intercept
    std::vector<std::vector<double>> features;
    std::vector<std::vector<double>> targets;
    for (const Sample& s : m.samples) {
        std::vector<float> img = load_image((fs::path(dir) / s.image).string(), size);
        std::vector<double> f(n_features, 1.0);  // last = intercept
        for (int k = 0; k < K; ++k) f[static_cast<size_t>(k)] = region_mean(img, size, au_region(k, K, size));
        f[K] = region_mean(img, size, au_region(K, 9, size));  // unused grid cell
        features.push_back(std::move(f));
        targets.push_back(s.intensities);
    }

    double total_abs_err = 0.0;
    size_t count = 0;
    for (int k = 0; k < K; ++k) {
        std::vector<std::vector<double>> xtx(n_features, std::vector<double>(n_features, 0.0));
        std::vector<double> xty(n_features, 0.0);
        for (size_t s = 0; s < features.size(); ++s) {
            for (size_t i = 0; i < n_features; ++i) {
                xty[i] += features[s][i] * targets[s][static_cast<size_t>(k)];
                for (size_t j = 0; j < n_features; ++j)
                    xtx[i][j] += features[s][i] * features[s][j];
            }
        }
        std::vector<double> w = solve_least_squares(xtx, xty);
        for (size_t s = 0; s < features.size(); ++s) {
            double pred = 0.0;
            for (size_t i = 0; i < n_features; ++i) pred += w[i] * features[s][i];
            total_abs_err += std::abs(pred - targets[s][static_cast<size_t>(k)]);
            ++count;
        }
    }
    CHECK(total_abs_err / count < 0.05);
}
