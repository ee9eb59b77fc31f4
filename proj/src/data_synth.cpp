#include "aulite/data_synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

namespace fs = std::filesystem;

namespace aulite {

std::vector<std::string> DatasetManifest::distinct_subjects() const {
    std::set<std::string> seen;
    std::vector<std::string> out;
    for (const Sample& s : samples)
        if (seen.insert(s.subject_id).second) out.push_back(s.subject_id);
    return out;
}

std::vector<int> au_ids_for_k(int K) {
    if (K == 12) return bp4d_au_ids();
    if (K == 8) return disfa_au_ids();
    if (K >= 1 && K <= 24) {
        const auto& all = feafa_au_ids();
        return std::vector<int>(all.begin(), all.begin() + K);
    }
    throw ValueError("unsupported AU count " + std::to_string(K) + " (expected 1..24)");
}

RegionRect au_region(int k, int K, int image_size) {
    const int grid = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(K))));
    const int cell = image_size / grid;
    if (cell < 2)
        throw ValueError("AU count " + std::to_string(K) + " too large for image size " +
                         std::to_string(image_size));
    const int row = k / grid, col = k % grid;
    return RegionRect{row * cell, (row + 1) * cell, col * cell, (col + 1) * cell};
}

DatasetManifest generate_dataset(int K, int n_subjects, int samples_per_subject,
                                 int image_size, uint64_t seed, const std::string& out_dir,
                                 double noise_sigma) {
    if (n_subjects < 1 || samples_per_subject < 1)
        throw ValueError("dataset needs at least one subject and one sample per subject");
    au_region(K - 1, K, image_size);  // geometry capacity check

    DatasetManifest manifest;
    manifest.k = K;
    manifest.au_ids = au_ids_for_k(K);
    manifest.image_size = image_size;
    manifest.seed = seed;
    manifest.root_dir = out_dir;

    fs::create_directories(fs::path(out_dir) / "images");

    Rng rng(derive_seed(seed, 0));
    const int n_pixels = image_size * image_size;

    std::vector<double> pixels(static_cast<size_t>(n_pixels));
    std::vector<uint8_t> rgb(static_cast<size_t>(n_pixels) * 3);

    for (int s = 0; s < n_subjects; ++s) {
        char subj[16];
        std::snprintf(subj, sizeof(subj), "s%03d", s);
        const double bias = (rng.uniform() * 2.0 - 1.0) * kSubjectBiasRange;

        for (int i = 0; i < samples_per_subject; ++i) {
            Sample sample;
            sample.subject_id = subj;
            char name[48];
            std::snprintf(name, sizeof(name), "images/%s_%04d.ppm", subj, i);
            sample.image = name;

            sample.intensities.resize(static_cast<size_t>(K));
            for (double& v : sample.intensities) v = rng.uniform();
            // zero half the entries: sparse activations
            std::vector<int> order(static_cast<size_t>(K));
            for (int k = 0; k < K; ++k) order[static_cast<size_t>(k)] = k;
            rng.shuffle(order);
            for (int z = 0; z < K / 2; ++z)
                sample.intensities[static_cast<size_t>(order[static_cast<size_t>(z)])] = 0.0;

            std::fill(pixels.begin(), pixels.end(), 0.5 + bias);
            for (int k = 0; k < K; ++k) {
                const RegionRect r = au_region(k, K, image_size);
                const double offset = kRegionAmplitude * sample.intensities[static_cast<size_t>(k)];
                for (int y = r.row0; y < r.row1; ++y)
                    for (int x = r.col0; x < r.col1; ++x)
                        pixels[static_cast<size_t>(y) * image_size + x] += offset;
            }
            for (size_t p = 0; p < pixels.size(); ++p) {
                double v = pixels[p];
                if (noise_sigma > 0.0) v += rng.gaussian() * noise_sigma;
                v = std::clamp(v, 0.0, 1.0);
                const auto byte = static_cast<uint8_t>(std::lround(v * 255.0));
                rgb[p * 3 + 0] = byte;
                rgb[p * 3 + 1] = byte;
                rgb[p * 3 + 2] = byte;
            }
            write_ppm((fs::path(out_dir) / sample.image).string(), rgb, image_size,
                      image_size);
            manifest.samples.push_back(std::move(sample));
        }
    }

    nlohmann::ordered_json doc;
    doc["version"] = manifest.version;
    doc["k"] = manifest.k;
    doc["au_ids"] = manifest.au_ids;
    doc["image_size"] = manifest.image_size;
    doc["seed"] = manifest.seed;
    nlohmann::ordered_json samples = nlohmann::ordered_json::array();
    for (const Sample& s : manifest.samples) {
        nlohmann::ordered_json row;
        row["image"] = s.image;
        row["subject_id"] = s.subject_id;
        row["intensities"] = s.intensities;
        samples.push_back(std::move(row));
    }
    doc["samples"] = std::move(samples);

    std::ofstream out(fs::path(out_dir) / "manifest.json", std::ios::binary);
    if (!out) throw IoError("cannot write manifest under " + out_dir);
    out << doc.dump(2) << "\n";
    return manifest;
}

DatasetManifest load_manifest(const std::string& dataset_dir) {
    std::ifstream in(fs::path(dataset_dir) / "manifest.json", std::ios::binary);
    if (!in) throw IoError("no manifest.json under " + dataset_dir);
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest.json is not valid JSON: " + std::string(e.what()));
    }

    DatasetManifest manifest;
    try {
        manifest.version = doc.at("version").get<int>();
        manifest.k = doc.at("k").get<int>();
        manifest.au_ids = doc.at("au_ids").get<std::vector<int>>();
        manifest.image_size = doc.at("image_size").get<int>();
        manifest.seed = doc.at("seed").get<uint64_t>();
        for (const auto& row : doc.at("samples")) {
            Sample s;
            s.image = row.at("image").get<std::string>();
            s.subject_id = row.at("subject_id").get<std::string>();
            s.intensities = row.at("intensities").get<std::vector<double>>();
            manifest.samples.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest.json missing fields: " + std::string(e.what()));
    }
    manifest.root_dir = dataset_dir;

    if (manifest.version != 1)
        throw FormatError("unsupported manifest version " + std::to_string(manifest.version));
    for (const Sample& s : manifest.samples) {
        if (s.subject_id.empty()) throw FormatError("sample with empty subject_id");
        if (s.intensities.size() != static_cast<size_t>(manifest.k))
            throw FormatError("sample '" + s.image + "' has " +
                              std::to_string(s.intensities.size()) + " intensities, expected " +
                              std::to_string(manifest.k));
        const fs::path path = fs::path(dataset_dir) / s.image;
        int w = 0, h = 0;
        read_ppm(path.string(), w, h);
        if (w != manifest.image_size || h != manifest.image_size)
            throw FormatError("image '" + s.image + "' is " + std::to_string(w) + "x" +
                              std::to_string(h) + ", manifest says " +
                              std::to_string(manifest.image_size));
    }
    return manifest;
}

AuAnswer derive_labels(const Sample& sample, const TaskSpec& task) {
    if (sample.intensities.size() != task.au_ids.size())
        throw ValueError("sample '" + sample.image + "' has " +
                         std::to_string(sample.intensities.size()) + " intensities for " +
                         std::to_string(task.au_ids.size()) + " task AUs");
    AuAnswer answer;
    answer.kind = task.kind;
    answer.au_ids = task.au_ids;
    answer.values.reserve(sample.intensities.size());
    for (double v : sample.intensities) {
        switch (task.kind) {
            case TaskKind::Detect: answer.values.push_back(v > 0.5 ? 1.0 : 0.0); break;
            case TaskKind::Level:
                answer.values.push_back(std::clamp(std::round(v * 5.0), 0.0, 5.0));
                break;
            case TaskKind::Intensity: answer.values.push_back(quantize_intensity(v)); break;
        }
    }
    return answer;
}

void write_ppm(const std::string& path, const std::vector<uint8_t>& rgb, int width,
               int height) {
    if (rgb.size() != static_cast<size_t>(width) * height * 3)
        throw ValueError("write_ppm: buffer size does not match geometry");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << "P6\n" << width << " " << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(rgb.data()),
              static_cast<std::streamsize>(rgb.size()));
    if (!out) throw IoError("short write to " + path);
}

namespace {

// Skips whitespace and '#' comment lines between PPM header tokens.
int next_ppm_int(std::istream& in, const std::string& path) {
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (std::isspace(c)) {
            c = in.get();
        } else {
            break;
        }
    }
    if (c == EOF || !std::isdigit(c)) throw FormatError("malformed PPM header in " + path);
    int value = 0;
    while (c != EOF && std::isdigit(c)) {
        value = value * 10 + (c - '0');
        c = in.get();
    }
    return value;
}

}  // namespace

std::vector<uint8_t> read_ppm(const std::string& path, int& width, int& height) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    char magic[2] = {0, 0};
    in.read(magic, 2);
    if (magic[0] != 'P' || magic[1] != '6')
        throw FormatError(path + " is not a binary PPM (P6)");
    width = next_ppm_int(in, path);
    height = next_ppm_int(in, path);
    const int maxval = next_ppm_int(in, path);
    if (width <= 0 || height <= 0) throw FormatError(path + " has zero-size geometry");
    if (maxval != 255) throw FormatError(path + " must be 8-bit (maxval 255)");
    std::vector<uint8_t> rgb(static_cast<size_t>(width) * height * 3);
    in.read(reinterpret_cast<char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (in.gcount() != static_cast<std::streamsize>(rgb.size()))
        throw FormatError(path + " is truncated");
    return rgb;
}

std::vector<float> load_image(const std::string& path, int target_size) {
    if (target_size <= 0) throw ValueError("load_image: target size must be positive");
    int w = 0, h = 0;
    std::vector<uint8_t> rgb = read_ppm(path, w, h);

    const int side = std::min(w, h);
    const int x_off = (w - side) / 2;
    const int y_off = (h - side) / 2;

    std::vector<float> out(static_cast<size_t>(target_size) * target_size * 3);
    for (int y = 0; y < target_size; ++y) {
        const int sy = y_off + static_cast<int>((static_cast<int64_t>(y) * side + side / 2) /
                                                target_size);
        for (int x = 0; x < target_size; ++x) {
            const int sx = x_off + static_cast<int>(
                                       (static_cast<int64_t>(x) * side + side / 2) / target_size);
            for (int c = 0; c < 3; ++c)
                out[(static_cast<size_t>(y) * target_size + x) * 3 + c] =
                    static_cast<float>(rgb[(static_cast<size_t>(sy) * w + sx) * 3 + c]) / 255.0f;
        }
    }
    return out;
}

std::vector<size_t> FoldPlan::train_indices(const DatasetManifest& manifest, int fold) const {
    if (kind == Kind::RatioSplit) {
        if (fold != 0) throw ValueError("ratio split has a single fold");
        return train_samples;
    }
    std::vector<size_t> out;
    for (size_t i = 0; i < manifest.samples.size(); ++i)
        if (subject_to_fold.at(manifest.samples[i].subject_id) != fold) out.push_back(i);
    return out;
}

std::vector<size_t> FoldPlan::val_indices(const DatasetManifest& manifest, int fold) const {
    if (kind == Kind::RatioSplit) {
        if (fold != 0) throw ValueError("ratio split has a single fold");
        return val_samples;
    }
    std::vector<size_t> out;
    for (size_t i = 0; i < manifest.samples.size(); ++i)
        if (subject_to_fold.at(manifest.samples[i].subject_id) == fold) out.push_back(i);
    return out;
}

FoldPlan make_cv_folds(const DatasetManifest& manifest, int n_folds, uint64_t seed) {
    if (n_folds < 2) throw ValueError("cross-validation needs at least 2 folds");
    std::vector<std::string> subjects = manifest.distinct_subjects();
    if (subjects.size() < static_cast<size_t>(n_folds))
        throw ValueError("only " + std::to_string(subjects.size()) + " subjects for " +
                         std::to_string(n_folds) + " folds");
    std::sort(subjects.begin(), subjects.end());
    Rng rng(derive_seed(seed, 1));
    rng.shuffle(subjects);

    FoldPlan plan;
    plan.kind = FoldPlan::Kind::SubjectCv;
    plan.n_folds = n_folds;
    for (size_t i = 0; i < subjects.size(); ++i)
        plan.subject_to_fold[subjects[i]] = static_cast<int>(i % static_cast<size_t>(n_folds));
    return plan;
}

FoldPlan make_ratio_split(const DatasetManifest& manifest, uint64_t seed) {
    const size_t n = manifest.samples.size();
    if (n < 5) throw ValueError("ratio 4:1 split needs at least 5 samples");
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, 2));
    rng.shuffle(order);

    const size_t n_train = (n * 4 + 4) / 5;  // ceil(0.8 n)
    FoldPlan plan;
    plan.kind = FoldPlan::Kind::RatioSplit;
    plan.n_folds = 1;
    plan.train_samples.assign(order.begin(), order.begin() + static_cast<long>(n_train));
    plan.val_samples.assign(order.begin() + static_cast<long>(n_train), order.end());
    std::sort(plan.train_samples.begin(), plan.train_samples.end());
    std::sort(plan.val_samples.begin(), plan.val_samples.end());
    return plan;
}

}  // namespace aulite
