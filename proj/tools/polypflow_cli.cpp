#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "polypflow/evaluate.hpp"
#include "polypflow/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

std::string default_data_root() {
    const char* env = std::getenv("POLYPFLOW_DATA_ROOT");
    return env ? env : "";
}

pf::KeyValueConfig load_kv(const std::string& config_path,
                           const std::vector<std::string>& overrides) {
    pf::KeyValueConfig kv;
    if (!config_path.empty()) kv = pf::KeyValueConfig::load(config_path);
    for (const auto& o : overrides) {
        auto eq = o.find('=');
        if (eq == std::string::npos)
            throw CLI::ValidationError("--set", "expected key=value, got: " + o);
        kv.set(pf::KeyValueConfig::trim(o.substr(0, eq)),
               pf::KeyValueConfig::trim(o.substr(eq + 1)));
    }
    return kv;
}

std::vector<pf::data::SampleRecord> load_all_datasets(const fs::path& root, unsigned seed) {
    using pf::data::Dataset;
    std::vector<pf::data::SampleRecord> records;
    for (Dataset ds : {Dataset::KvasirSEG, Dataset::ClinicDB, Dataset::ColonDB,
                       Dataset::Endoscene, Dataset::ETIS}) {
        fs::path dir = root / pf::data::dataset_name(ds);
        if (!fs::is_directory(dir)) continue;
        auto part = pf::data::load_dataset(dir, ds);
        records.insert(records.end(), part.begin(), part.end());
    }
    if (records.empty())
        throw std::runtime_error("no datasets found under " + root.string() +
                                 " (expected <root>/<dataset>/{images,masks})");
    return pf::data::make_splits(std::move(records), seed);
}

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, ',')) out.push_back(std::stoi(tok));
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"PolypFlow: flow-matching refinement for polyp segmentation"};
    app.require_subcommand(1);
    app.fallthrough();  // allow the global options after the subcommand name

    std::string config_path, out_dir = ".";
    std::vector<std::string> overrides;
    app.add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
    app.add_option("--set", overrides, "override a config key (key=value, repeatable)");
    app.add_option("--out-dir", out_dir, "root directory for all emitted files");

    // split
    auto* split_cmd = app.add_subcommand("split", "build deterministic dataset splits");
    std::string root = default_data_root();
    unsigned seed = 0;
    std::string split_out = "splits.csv";
    split_cmd->add_option("--root", root, "dataset root (default: POLYPFLOW_DATA_ROOT)");
    split_cmd->add_option("--seed", seed, "split shuffle seed");
    split_cmd->add_option("--out", split_out, "manifest CSV filename");

    // train
    auto* train_cmd = app.add_subcommand("train", "train the model");
    train_cmd->add_option("--root", root, "dataset root (default: POLYPFLOW_DATA_ROOT)");

    // infer
    auto* infer_cmd = app.add_subcommand("infer", "segment one image");
    std::string image_path, ckpt_path;
    int steps_override = -1;
    infer_cmd->add_option("--image", image_path, "input image")->required();
    infer_cmd->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    infer_cmd->add_option("--steps", steps_override, "integration step count override");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "compute metrics for a prediction directory");
    std::string preds_dir, gts_dir, report_out = "report.csv", report_json, eval_dataset = "eval";
    eval_cmd->add_option("--preds", preds_dir, "predictions directory")->required();
    eval_cmd->add_option("--gts", gts_dir, "ground-truth directory")->required();
    eval_cmd->add_option("--out", report_out, "report CSV filename");
    eval_cmd->add_option("--json", report_json, "also write a JSON report");
    eval_cmd->add_option("--dataset", eval_dataset, "dataset label for the report");

    // ablate
    auto* ablate_cmd = app.add_subcommand("ablate", "component and step-count ablation grids");
    std::string ablate_dataset = "clinicdb", steps_grid = "1,5,8,10,15";
    std::size_t ablate_limit = 0;
    ablate_cmd->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    ablate_cmd->add_option("--root", root, "dataset root (default: POLYPFLOW_DATA_ROOT)");
    ablate_cmd->add_option("--dataset", ablate_dataset, "dataset to evaluate on");
    ablate_cmd->add_option("--steps-grid", steps_grid, "comma-separated step counts");
    ablate_cmd->add_option("--limit", ablate_limit, "evaluate at most this many images");

    // viz-steps
    auto* viz_cmd = app.add_subcommand("viz-steps", "render the per-step trajectory grid");
    viz_cmd->add_option("--image", image_path, "input image")->required();
    viz_cmd->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    viz_cmd->add_option("--steps", steps_override, "integration step count override");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp")
            return app.exit(e);
        app.exit(e);
        return 2;
    }

    try {
        fs::create_directories(out_dir);
        const fs::path out_root(out_dir);
        pf::KeyValueConfig kv = load_kv(config_path, overrides);

        if (split_cmd->parsed()) {
            if (root.empty()) throw std::runtime_error("no dataset root: pass --root or set POLYPFLOW_DATA_ROOT");
            auto records = load_all_datasets(root, seed);
            pf::data::write_split_csv(records, out_root / split_out);
            std::cout << "wrote " << (out_root / split_out).string() << " (" << records.size()
                      << " records)\n";
        } else if (train_cmd->parsed()) {
            if (root.empty()) throw std::runtime_error("no dataset root: pass --root or set POLYPFLOW_DATA_ROOT");
            pf::TrainConfig cfg = pf::TrainConfig::from_kv(kv);
            auto records = load_all_datasets(root, cfg.seed);
            pf::Model model(cfg);
            std::ofstream log((out_root / "train_log.csv").string());
            auto result = pf::train_on_records(model, records, out_root.string(), &log,
                                               /*probe_every=*/50);
            if (result.aborted_nan) {
                std::cerr << "training aborted on non-finite loss; last good checkpoint kept\n";
                return 1;
            }
            std::cout << "trained " << result.log.size() << " steps, final loss "
                      << result.final_loss << "\n";
        } else if (infer_cmd->parsed()) {
            auto model = pf::load_model(ckpt_path);
            const int n_steps = steps_override > 0 ? steps_override : model->config.n_steps;
            pf::Tensor img = pf::data::load_image_chw(image_path, model->config.image_size);
            auto [mask, traj] = pf::infer(*model, img, n_steps);
            pf::Tensor plane({mask.dim(2), mask.dim(3)});
            plane.data = mask.data;
            cv::imwrite((out_root / "mask.png").string(), pf::viz::tensor_to_gray8(plane));
            pf::viz::export_trajectory(traj, out_root / "trajectory");
            std::cout << "wrote " << (out_root / "mask.png").string() << " and "
                      << (out_root / "trajectory").string() << "\n";
        } else if (eval_cmd->parsed()) {
            auto rep = pf::metrics::evaluate_dataset(preds_dir, gts_dir);
            pf::viz::write_report_csv(rep, eval_dataset, out_root / report_out);
            if (!report_json.empty())
                pf::viz::write_report_json(rep, eval_dataset, out_root / report_json);
            std::cout << "mDice " << rep.mean_row.dice << "  mIoU " << rep.mean_row.iou
                      << "  MAE " << rep.mean_row.mae << "\n";
        } else if (ablate_cmd->parsed()) {
            if (root.empty()) throw std::runtime_error("no dataset root: pass --root or set POLYPFLOW_DATA_ROOT");
            auto model = pf::load_model(ckpt_path);
            auto ds = pf::data::dataset_from_name(ablate_dataset);
            if (!ds) throw std::runtime_error("unknown dataset: " + ablate_dataset);
            auto records = load_all_datasets(root, model->config.seed);
            const pf::data::Split split = (*ds == pf::data::Dataset::KvasirSEG ||
                                           *ds == pf::data::Dataset::ClinicDB)
                                              ? pf::data::Split::seen_test
                                              : pf::data::Split::unseen_test;
            std::vector<pf::data::SampleRecord> subset;
            for (const auto& r : records)
                if (r.dataset == *ds) subset.push_back(r);
            auto eval_set = pf::load_eval_set(subset, split, model->config.image_size, ablate_limit);
            if (eval_set.empty()) throw std::runtime_error("ablate: empty evaluation set");

            auto comp_rows = pf::ablate_components(
                *model, eval_set, model->config.n_steps,
                {{false, false}, {true, false}, {false, true}, {true, true}});
            auto step_rows = pf::ablate_steps(*model, eval_set, parse_int_list(steps_grid));

            std::ofstream os((out_root / "ablation.csv").string());
            os << "setting,mdice,miou\n";
            for (const auto& r : comp_rows)
                os << r.setting << "," << r.mdice << "," << r.miou << "\n";
            for (const auto& r : step_rows)
                os << r.setting << "," << r.mdice << "," << r.miou << "\n";
            std::cout << "wrote " << (out_root / "ablation.csv").string() << "\n";
        } else if (viz_cmd->parsed()) {
            auto model = pf::load_model(ckpt_path);
            const int n_steps = steps_override > 0 ? steps_override : model->config.n_steps;
            pf::Tensor img = pf::data::load_image_chw(image_path, model->config.image_size);
            auto [mask, traj] = pf::infer(*model, img, n_steps);
            pf::viz::emit_step_grid(traj, out_root / "steps.png");
            std::cout << "wrote " << (out_root / "steps.png").string() << " ("
                      << traj.states.size() << " panels)\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
