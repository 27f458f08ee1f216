#pragma once

#include "polypflow/data.hpp"
#include "polypflow/train.hpp"
#include "polypflow/viz.hpp"

namespace pf {

// Dataset-backed glue between the data pipeline and the training engine:
// batches load from disk on demand so the full corpus never has to be
// resident.
inline TrainResult train_on_records(Model& model, const std::vector<data::SampleRecord>& records,
                                    const std::string& ckpt_dir, std::ostream* log_csv,
                                    int probe_every = 0) {
    std::vector<const data::SampleRecord*> train_recs;
    for (const auto& r : records)
        if (r.split == data::Split::train) train_recs.push_back(&r);
    if (train_recs.empty()) throw std::runtime_error("train: no records in the train split");

    const TrainConfig& cfg = model.config;
    const int S = cfg.image_size;
    AdamW opt(cfg.lr, cfg.weight_decay);
    std::mt19937 rng(cfg.seed + 1);
    std::mt19937 aug_rng(cfg.seed + 2);

    std::vector<std::pair<Tensor, Tensor>> probe;
    for (std::size_t i = 0; i < std::min<std::size_t>(train_recs.size(), 8); ++i) {
        auto [img, mask] = data::preprocess(*train_recs[i], S);
        probe.emplace_back(std::move(img), std::move(mask));
    }

    const int steps_per_epoch =
        static_cast<int>((train_recs.size() + cfg.batch_size - 1) / cfg.batch_size);
    TrainResult res;
    if (log_csv) *log_csv << "step,epoch,loss_seg,loss_fm,probe_mdice\n";
    std::uint64_t global_step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<const data::SampleRecord*> order = train_recs;
        std::shuffle(order.begin(), order.end(), rng);
        for (int s = 0; s < steps_per_epoch; ++s) {
            std::vector<const data::SampleRecord*> batch_recs;
            for (int b = 0; b < cfg.batch_size; ++b)
                batch_recs.push_back(order[(s * cfg.batch_size + b) % order.size()]);
            data::Batch batch = data::make_batch(batch_recs, S);
            if (cfg.augment) {
                for (int b = 0; b < static_cast<int>(batch_recs.size()); ++b) {
                    Tensor img({3, S, S}), mask({1, S, S});
                    std::copy_n(batch.images.data.begin() + b * img.size(), img.size(),
                                img.data.begin());
                    std::copy_n(batch.masks.data.begin() + b * mask.size(), mask.size(),
                                mask.data.begin());
                    data::augment_pair(img, mask, aug_rng);
                    std::copy_n(img.data.begin(), img.size(),
                                batch.images.data.begin() + b * img.size());
                    std::copy_n(mask.data.begin(), mask.size(),
                                batch.masks.data.begin() + b * mask.size());
                }
            }
            double seg, fm;
            try {
                std::tie(seg, fm) = train_step(model, opt, batch.images, batch.masks, rng);
            } catch (const std::runtime_error&) {
                res.aborted_nan = true;
                return res;
            }
            ++global_step;
            StepLog entry{global_step, epoch, seg, fm, -1.0};
            if (probe_every > 0 && global_step % static_cast<std::uint64_t>(probe_every) == 0)
                entry.probe_mdice = probe_mdice(model, probe, cfg.n_steps);
            if (global_step == 1) res.initial_loss = seg + cfg.lambda_fm * fm;
            res.final_loss = seg + cfg.lambda_fm * fm;
            res.log.push_back(entry);
            if (log_csv)
                *log_csv << entry.step << "," << entry.epoch << "," << entry.loss_seg << ","
                         << entry.loss_fm << "," << entry.probe_mdice << "\n";
        }
        if (!ckpt_dir.empty())
            checkpoint::save(ckpt_dir + "/epoch_" + std::to_string(epoch + 1) + ".ckpt",
                             model.params, cfg, epoch + 1, opt.step_count);
    }
    if (!ckpt_dir.empty())
        checkpoint::save(ckpt_dir + "/final.ckpt", model.params, cfg, cfg.epochs, opt.step_count);
    return res;
}

inline std::vector<std::pair<Tensor, Tensor>> load_eval_set(
    const std::vector<data::SampleRecord>& records, data::Split split, int size,
    std::size_t limit = 0) {
    std::vector<std::pair<Tensor, Tensor>> out;
    for (const auto& r : records) {
        if (r.split != split) continue;
        auto [img, mask] = data::preprocess(r, size);
        out.emplace_back(std::move(img), std::move(mask));
        if (limit && out.size() >= limit) break;
    }
    return out;
}

inline std::unique_ptr<Model> load_model(const std::string& ckpt_path) {
    auto model = std::make_unique<Model>(checkpoint::load_config(ckpt_path));
    checkpoint::load(ckpt_path, model->params);
    return model;
}

}  // namespace pf
