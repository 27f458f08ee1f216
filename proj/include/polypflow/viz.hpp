#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "polypflow/metrics.hpp"
#include "polypflow/ode.hpp"

namespace pf {
namespace viz {

namespace fs = std::filesystem;

inline cv::Mat tensor_to_gray8(const Tensor& plane) {
    const int H = plane.dim(plane.ndim() - 2), W = plane.dim(plane.ndim() - 1);
    cv::Mat m(H, W, CV_8UC1);
    for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
            double v = plane.data[static_cast<std::size_t>(h) * W + w];
            m.at<std::uint8_t>(h, w) = static_cast<std::uint8_t>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
        }
    return m;
}

constexpr int kCaptionHeight = 18;

// One horizontal grid, one panel per trajectory state: sigmoid(z) in
// grayscale, captioned with the step index and t.
inline void emit_step_grid(const Trajectory& traj, const fs::path& out) {
    if (traj.states.empty()) throw std::invalid_argument("emit_step_grid: empty trajectory");
    if (traj.n_steps() < 1) throw std::invalid_argument("emit_step_grid: n_steps >= 1 required");
    const Tensor& z0 = traj.states[0].z.val();
    const int H = z0.dim(2), W = z0.dim(3);
    const int panels = static_cast<int>(traj.states.size());
    cv::Mat grid(H + kCaptionHeight, W * panels, CV_8UC1, cv::Scalar(0));
    for (int i = 0; i < panels; ++i) {
        cv::Mat panel = tensor_to_gray8(sigmoid_tensor(traj.states[i].z.val()));
        panel.copyTo(grid(cv::Rect(i * W, 0, W, H)));
        std::ostringstream cap;
        cap << "n=" << i << " t=" << std::fixed << std::setprecision(2) << traj.states[i].t;
        cv::putText(grid, cap.str(), cv::Point(i * W + 2, H + kCaptionHeight - 5),
                    cv::FONT_HERSHEY_PLAIN, 0.7, cv::Scalar(255), 1);
    }
    if (!cv::imwrite(out.string(), grid))
        throw std::runtime_error("emit_step_grid: cannot write " + out.string());
}

// Per-step grayscale PNGs plus a JSON index {step, t, file}.
inline void export_trajectory(const Trajectory& traj, const fs::path& dir) {
    fs::create_directories(dir);
    nlohmann::json index = nlohmann::json::array();
    for (std::size_t i = 0; i < traj.states.size(); ++i) {
        std::string file = "step_" + std::to_string(i) + ".png";
        cv::Mat panel = tensor_to_gray8(sigmoid_tensor(traj.states[i].z.val()));
        if (!cv::imwrite((dir / file).string(), panel))
            throw std::runtime_error("export_trajectory: cannot write " + (dir / file).string());
        index.push_back({{"step", i}, {"t", traj.states[i].t}, {"file", file}});
    }
    std::ofstream os(dir / "index.json");
    os << index.dump(2) << "\n";
}

// Comparison panel: one row per method, columns input | GT | prediction overlay.
inline void emit_comparison(const std::vector<std::pair<std::string, cv::Mat>>& rows,
                            const cv::Mat& gt, const cv::Mat& image, const fs::path& out) {
    const int H = image.rows, W = image.cols;
    if (gt.rows != H || gt.cols != W)
        throw std::invalid_argument("emit_comparison: GT size mismatch");
    for (const auto& [name, m] : rows)
        if (m.rows != H || m.cols != W)
            throw std::invalid_argument("emit_comparison: mask size mismatch for " + name);

    const int nrows = std::max<std::size_t>(1, rows.size());
    cv::Mat canvas(static_cast<int>(nrows) * (H + kCaptionHeight), 3 * W, CV_8UC3,
                   cv::Scalar(0, 0, 0));
    cv::Mat img_bgr;
    if (image.channels() == 1)
        cv::cvtColor(image, img_bgr, cv::COLOR_GRAY2BGR);
    else
        img_bgr = image;
    cv::Mat gt_bgr;
    cv::cvtColor(gt, gt_bgr, cv::COLOR_GRAY2BGR);

    auto overlay = [&](const cv::Mat& pred) {
        cv::Mat o = img_bgr.clone();
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                const bool p = pred.at<std::uint8_t>(h, w) > 127;
                const bool g = gt.at<std::uint8_t>(h, w) > 127;
                auto& px = o.at<cv::Vec3b>(h, w);
                if (p && g)
                    px = cv::Vec3b(0, 200, 0);  // agreement
                else if (p)
                    px = cv::Vec3b(0, 0, 200);  // false positive
                else if (g)
                    px = cv::Vec3b(200, 120, 0);  // miss
            }
        return o;
    };

    auto place = [&](int r, int c, const cv::Mat& m, const std::string& cap) {
        m.copyTo(canvas(cv::Rect(c * W, r * (H + kCaptionHeight), W, H)));
        cv::putText(canvas, cap, cv::Point(c * W + 2, r * (H + kCaptionHeight) + H + 13),
                    cv::FONT_HERSHEY_PLAIN, 0.8, cv::Scalar(255, 255, 255), 1);
    };

    if (rows.empty()) {
        place(0, 0, img_bgr, "input");
        place(0, 1, gt_bgr, "GT");
    } else {
        for (std::size_t r = 0; r < rows.size(); ++r) {
            place(static_cast<int>(r), 0, img_bgr, "input");
            place(static_cast<int>(r), 1, gt_bgr, "GT");
            place(static_cast<int>(r), 2, overlay(rows[r].second), rows[r].first);
        }
    }
    if (!cv::imwrite(out.string(), canvas))
        throw std::runtime_error("emit_comparison: cannot write " + out.string());
}

// CSV + JSON metric reports: dataset,basename,dice,iou,fbw,sm,em,mae rows
// plus a MEAN row.
inline void write_report_csv(const metrics::MetricsReport& rep, const std::string& dataset,
                             const fs::path& out) {
    std::ofstream os(out);
    if (!os) throw std::runtime_error("cannot write report: " + out.string());
    os << "dataset,basename,dice,iou,fbw,sm,em,mae\n";
    os << std::setprecision(6) << std::fixed;
    for (const auto& r : rep.rows)
        os << dataset << "," << r.name << "," << r.dice << "," << r.iou << "," << r.fbw << ","
           << r.sm << "," << r.em << "," << r.mae << "\n";
    const auto& m = rep.mean_row;
    os << dataset << ",MEAN," << m.dice << "," << m.iou << "," << m.fbw << "," << m.sm << ","
       << m.em << "," << m.mae << "\n";
}

inline void write_report_json(const metrics::MetricsReport& rep, const std::string& dataset,
                              const fs::path& out) {
    nlohmann::json j;
    j["dataset"] = dataset;
    j["images"] = nlohmann::json::array();
    auto row_json = [](const metrics::ImageMetrics& r) {
        return nlohmann::json{{"basename", r.name}, {"dice", r.dice}, {"iou", r.iou},
                              {"fbw", r.fbw},       {"sm", r.sm},     {"em", r.em},
                              {"mae", r.mae}};
    };
    for (const auto& r : rep.rows) j["images"].push_back(row_json(r));
    j["mean"] = row_json(rep.mean_row);
    std::ofstream os(out);
    os << j.dump(2) << "\n";
}

}  // namespace viz
}  // namespace pf
