#pragma once

#include <filesystem>
#include <map>

#include <opencv2/imgcodecs.hpp>

#include "polypflow/data.hpp"
#include "polypflow/metrics.hpp"

namespace pf {
namespace metrics {

namespace fs = std::filesystem;

inline Tensor load_gray(const fs::path& path, bool binarize) {
    cv::Mat img = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    if (img.empty()) throw std::runtime_error("cannot decode image: " + path.string());
    Tensor t({img.rows, img.cols});
    for (int h = 0; h < img.rows; ++h)
        for (int w = 0; w < img.cols; ++w) {
            double v = img.at<std::uint8_t>(h, w) / 255.0;
            t.at2(h, w) = binarize ? (v >= 0.5 ? 1.0 : 0.0) : v;
        }
    return t;
}

// Evaluates every prediction in preds against the same-stem ground truth in
// gts. Predictions are read as soft grayscale maps, ground truths binarized.
inline MetricsReport evaluate_dataset(const fs::path& preds, const fs::path& gts) {
    if (!fs::is_directory(preds)) throw std::runtime_error("missing directory: " + preds.string());
    if (!fs::is_directory(gts)) throw std::runtime_error("missing directory: " + gts.string());
    std::map<std::string, fs::path> pred_files, gt_files;
    for (const auto& e : fs::directory_iterator(preds))
        if (e.is_regular_file() && data::is_image_file(e.path()))
            pred_files[e.path().stem().string()] = e.path();
    for (const auto& e : fs::directory_iterator(gts))
        if (e.is_regular_file() && data::is_image_file(e.path()))
            gt_files[e.path().stem().string()] = e.path();

    std::vector<std::string> unmatched;
    for (const auto& [stem, p] : pred_files)
        if (!gt_files.count(stem)) unmatched.push_back(p.filename().string());
    for (const auto& [stem, p] : gt_files)
        if (!pred_files.count(stem)) unmatched.push_back(p.filename().string());
    if (!unmatched.empty()) {
        std::sort(unmatched.begin(), unmatched.end());
        std::string msg = "unmatched prediction/ground-truth files:";
        for (const auto& u : unmatched) msg += " " + u;
        throw std::runtime_error(msg);
    }
    if (pred_files.empty()) throw std::runtime_error("no predictions found in " + preds.string());

    std::vector<std::tuple<std::string, Tensor, Tensor>> pairs;
    for (const auto& [stem, p] : pred_files)
        pairs.emplace_back(stem, load_gray(p, false), load_gray(gt_files.at(stem), true));
    return evaluate_pairs(pairs);
}

}  // namespace metrics
}  // namespace pf
