#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "polypflow/tensor.hpp"

namespace pf {
namespace data {

namespace fs = std::filesystem;

enum class Dataset { KvasirSEG, ClinicDB, ColonDB, Endoscene, ETIS };
enum class Split { train, seen_test, unseen_test };

inline const char* dataset_name(Dataset d) {
    switch (d) {
        case Dataset::KvasirSEG: return "kvasir";
        case Dataset::ClinicDB: return "clinicdb";
        case Dataset::ColonDB: return "colondb";
        case Dataset::Endoscene: return "endoscene";
        case Dataset::ETIS: return "etis";
    }
    return "?";
}

inline std::optional<Dataset> dataset_from_name(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    s.erase(std::remove_if(s.begin(), s.end(), [](char c) { return c == '-' || c == '_'; }),
            s.end());
    if (s == "kvasir" || s == "kvasirseg") return Dataset::KvasirSEG;
    if (s == "clinicdb" || s == "cvcclinicdb") return Dataset::ClinicDB;
    if (s == "colondb" || s == "cvccolondb") return Dataset::ColonDB;
    if (s == "endoscene") return Dataset::Endoscene;
    if (s == "etis" || s == "etislarib") return Dataset::ETIS;
    return std::nullopt;
}

inline const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::seen_test: return "seen_test";
        case Split::unseen_test: return "unseen_test";
    }
    return "?";
}

struct SampleRecord {
    fs::path image_path;
    fs::path mask_path;
    Dataset dataset = Dataset::KvasirSEG;
    Split split = Split::unseen_test;
    std::string basename;  // shared stem of image and mask
};

inline bool is_image_file(const fs::path& p) {
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
    return e == ".png" || e == ".jpg" || e == ".jpeg" || e == ".bmp" || e == ".tif" ||
           e == ".tiff";
}

// Scans <root>/images and <root>/masks, pairing files by stem. Records come
// back sorted lexicographically by basename.
inline std::vector<SampleRecord> load_dataset(const fs::path& root, Dataset name) {
    const fs::path img_dir = root / "images";
    const fs::path mask_dir = root / "masks";
    if (!fs::is_directory(img_dir))
        throw std::runtime_error("missing directory: " + img_dir.string());
    if (!fs::is_directory(mask_dir))
        throw std::runtime_error("missing directory: " + mask_dir.string());

    std::map<std::string, fs::path> images, masks;
    for (const auto& e : fs::directory_iterator(img_dir))
        if (e.is_regular_file() && is_image_file(e.path())) images[e.path().stem().string()] = e.path();
    for (const auto& e : fs::directory_iterator(mask_dir))
        if (e.is_regular_file() && is_image_file(e.path())) masks[e.path().stem().string()] = e.path();

    std::vector<std::string> orphans;
    for (const auto& [stem, p] : images)
        if (!masks.count(stem)) orphans.push_back(p.filename().string());
    for (const auto& [stem, p] : masks)
        if (!images.count(stem)) orphans.push_back(p.filename().string());
    if (!orphans.empty()) {
        std::sort(orphans.begin(), orphans.end());
        std::string msg = "unmatched image/mask basenames under " + root.string() + ":";
        for (const auto& o : orphans) msg += " " + o;
        throw std::runtime_error(msg);
    }
    if (images.empty()) throw std::runtime_error("no image/mask pairs found under " + root.string());

    std::vector<SampleRecord> out;
    out.reserve(images.size());
    for (const auto& [stem, p] : images) {
        SampleRecord r;
        r.image_path = p;
        r.mask_path = masks.at(stem);
        r.dataset = name;
        r.basename = stem;
        out.push_back(std::move(r));
    }
    // std::map iteration is already sorted by stem
    return out;
}

// Assigns splits: 900/100 for Kvasir-SEG, 550/62 for ClinicDB (train /
// seen_test, chosen by a seeded shuffle over lexicographic order); the other
// three datasets pass through as unseen_test.
inline std::vector<SampleRecord> make_splits(std::vector<SampleRecord> records, unsigned seed) {
    struct Pool {
        Dataset ds;
        std::size_t train_n, test_n;
    };
    const Pool pools[] = {{Dataset::KvasirSEG, 900, 100}, {Dataset::ClinicDB, 550, 62}};

    for (auto& r : records) r.split = Split::unseen_test;
    for (const Pool& pool : pools) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < records.size(); ++i)
            if (records[i].dataset == pool.ds) idx.push_back(i);
        if (idx.empty()) continue;
        if (idx.size() != pool.train_n + pool.test_n)
            throw std::runtime_error(std::string("make_splits: dataset ") +
                                     dataset_name(pool.ds) + " expected " +
                                     std::to_string(pool.train_n + pool.test_n) +
                                     " records, found " + std::to_string(idx.size()));
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            return records[a].basename < records[b].basename;
        });
        // per-dataset stream so adding one pool never perturbs the other
        std::seed_seq seq{seed, static_cast<unsigned>(pool.ds)};
        std::mt19937 rng(seq);
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t i = 0; i < idx.size(); ++i)
            records[idx[i]].split = i < pool.train_n ? Split::train : Split::seen_test;
    }
    return records;
}

inline void write_split_csv(const std::vector<SampleRecord>& records, const fs::path& out) {
    std::ofstream os(out);
    if (!os) throw std::runtime_error("cannot write split manifest: " + out.string());
    os << "dataset,basename,split\n";
    for (const auto& r : records)
        os << dataset_name(r.dataset) << "," << r.basename << "," << split_name(r.split) << "\n";
}

// Decodes and resizes one image to [0,1] CHW, bilinear.
inline Tensor load_image_chw(const fs::path& path, int size) {
    cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (img.empty()) throw std::runtime_error("cannot decode image: " + path.string());
    if (img.rows != size || img.cols != size)
        cv::resize(img, img, cv::Size(size, size), 0, 0, cv::INTER_LINEAR);
    Tensor t({3, size, size});
    for (int h = 0; h < size; ++h)
        for (int w = 0; w < size; ++w) {
            const cv::Vec3b px = img.at<cv::Vec3b>(h, w);
            // BGR -> RGB channel order
            t.at3(0, h, w) = px[2] / 255.0;
            t.at3(1, h, w) = px[1] / 255.0;
            t.at3(2, h, w) = px[0] / 255.0;
        }
    return t;
}

// Decodes a mask: nearest-neighbor resize, then threshold at 0.5 to {0,1}.
inline Tensor load_mask_chw(const fs::path& path, int size) {
    cv::Mat img = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    if (img.empty()) throw std::runtime_error("cannot decode mask: " + path.string());
    if (img.rows != size || img.cols != size)
        cv::resize(img, img, cv::Size(size, size), 0, 0, cv::INTER_NEAREST);
    Tensor t({1, size, size});
    for (int h = 0; h < size; ++h)
        for (int w = 0; w < size; ++w)
            t.at3(0, h, w) = img.at<std::uint8_t>(h, w) / 255.0 >= 0.5 ? 1.0 : 0.0;
    return t;
}

inline std::pair<Tensor, Tensor> preprocess(const SampleRecord& r, int size = 352) {
    return {load_image_chw(r.image_path, size), load_mask_chw(r.mask_path, size)};
}

struct Batch {
    Tensor images;  // [B,3,S,S] in [0,1]
    Tensor masks;   // [B,1,S,S] in {0,1}
};

inline Batch make_batch(const std::vector<const SampleRecord*>& records, int size) {
    if (records.empty()) throw std::invalid_argument("make_batch: empty record list");
    const int B = static_cast<int>(records.size());
    Batch b{Tensor({B, 3, size, size}), Tensor({B, 1, size, size})};
    for (int n = 0; n < B; ++n) {
        auto [img, mask] = preprocess(*records[n], size);
        std::copy(img.data.begin(), img.data.end(), b.images.data.begin() + n * img.size());
        std::copy(mask.data.begin(), mask.data.end(), b.masks.data.begin() + n * mask.size());
    }
    return b;
}

// Optional flip / 90-degree rotation augmentation (applied jointly to image
// and mask), off by default in training.
inline void augment_pair(Tensor& img, Tensor& mask, std::mt19937& rng) {
    const int C = img.dim(0), S = img.dim(1);
    auto apply = [&](auto&& f) {
        Tensor i2(img.shape), m2(mask.shape);
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < S; ++h)
                for (int w = 0; w < S; ++w) {
                    auto [sh, sw] = f(h, w);
                    i2.at3(c, h, w) = img.at3(c, sh, sw);
                    if (c == 0) m2.at3(0, h, w) = mask.at3(0, sh, sw);
                }
        img = std::move(i2);
        mask = std::move(m2);
    };
    std::uniform_int_distribution<int> coin(0, 1), rot(0, 3);
    if (coin(rng)) apply([&](int h, int w) { return std::pair{h, S - 1 - w}; });
    if (coin(rng)) apply([&](int h, int w) { return std::pair{S - 1 - h, w}; });
    int k = rot(rng);
    for (int i = 0; i < k; ++i) apply([&](int h, int w) { return std::pair{S - 1 - w, h}; });
}

}  // namespace data
}  // namespace pf
