#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "aulite/au_codec.hpp"
#include "aulite/task.hpp"

namespace aulite {

struct Sample {
    std::string image;       // path relative to the dataset directory
    std::string subject_id;  // non-empty
    std::vector<double> intensities;  // K reals in [0,1]; source of all labels
};

struct DatasetManifest {
    int version = 1;
    int k = 0;
    std::vector<int> au_ids;
    int image_size = 0;
    uint64_t seed = 0;
    std::vector<Sample> samples;
    std::string root_dir;  // set on load; not serialized

    std::vector<std::string> distinct_subjects() const;
};

// Synthetic image model: base gray 0.5 + per-subject brightness bias in
// [-0.1, 0.1]; AU k owns one cell of a G x G raster grid (G = ceil(sqrt(K)))
// whose brightness is offset by kRegionAmplitude * intensity_k; Gaussian
// pixel noise; clipped to [0,1] and quantized to 8 bits.
inline constexpr double kRegionAmplitude = 0.35;
inline constexpr double kSubjectBiasRange = 0.1;
inline constexpr double kPixelNoiseSigma = 0.02;

struct RegionRect {
    int row0, row1, col0, col1;
};

// Raster-order grid cell owned by AU index k (documented, stable layout).
RegionRect au_region(int k, int K, int image_size);

// Generates images under <out_dir>/images plus <out_dir>/manifest.json.
// Deterministic given the seed. noise_sigma is exposed so tests can probe the
// noiseless construction.
DatasetManifest generate_dataset(int K, int n_subjects, int samples_per_subject,
                                 int image_size, uint64_t seed,
                                 const std::string& out_dir,
                                 double noise_sigma = kPixelNoiseSigma);

DatasetManifest load_manifest(const std::string& dataset_dir);

// AU id list used for a given K (dataset-convention lists when K matches).
std::vector<int> au_ids_for_k(int K);

// detect: 1 iff intensity > 0.5; level: round(5 * intensity), half away from
// zero; intensity: quantized to 2 decimals.
AuAnswer derive_labels(const Sample& sample, const TaskSpec& task);

// 8-bit binary PPM (P6) I/O.
void write_ppm(const std::string& path, const std::vector<uint8_t>& rgb, int width,
               int height);
std::vector<uint8_t> read_ppm(const std::string& path, int& width, int& height);

// Pixel/255 conversion, center-crop to square, nearest-neighbor resize.
std::vector<float> load_image(const std::string& path, int target_size);

struct FoldPlan {
    enum class Kind { SubjectCv, RatioSplit } kind = Kind::SubjectCv;
    int n_folds = 1;
    std::map<std::string, int> subject_to_fold;  // SubjectCv
    std::vector<size_t> train_samples;           // RatioSplit
    std::vector<size_t> val_samples;             // RatioSplit

    std::vector<size_t> train_indices(const DatasetManifest& manifest, int fold) const;
    std::vector<size_t> val_indices(const DatasetManifest& manifest, int fold) const;
};

// Subject-independent cross-validation: seeded shuffle of subjects, then
// round-robin fold assignment. No subject straddles folds.
FoldPlan make_cv_folds(const DatasetManifest& manifest, int n_folds, uint64_t seed);

// Frame-level 4:1 split: seeded shuffle, first ceil(0.8 n) train, rest val.
FoldPlan make_ratio_split(const DatasetManifest& manifest, uint64_t seed);

}  // namespace aulite
