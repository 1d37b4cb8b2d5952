#pragma once

#include "condseg/trainer.hpp"

namespace condseg {

struct CompareRow {
    std::string protocol;
    std::string seed; // a number, or "median" for the aggregate rows
    int64_t modality = 0;
    double mean_dice = 0.0;
    double whole_foreground = 0.0;
};

struct CompareOutputs {
    std::string csv;
    std::vector<CompareRow> rows;

    const CompareRow* median(const std::string& protocol, int64_t modality) const {
        for (const auto& r : rows)
            if (r.seed == "median" && r.protocol == protocol && r.modality == modality) return &r;
        return nullptr;
    }
};

namespace detail {

inline double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace detail

// runs baseline on each modality, fine-tune on the target seeded from the
// assistant baseline, joint training, and conditional interleaved training,
// for every seed; test metrics land in one summary CSV with median rows
template <class T>
CompareOutputs compare(const TrainConfig& base, const std::vector<uint64_t>& seeds,
                       const std::string& out_dir, int64_t assistant = 0, int64_t target = 1) {
    if (seeds.empty()) throw ConfigError("compare needs at least one seed");
    std::filesystem::create_directories(out_dir);
    CompareOutputs out;
    out.csv = out_dir + "/compare.csv";

    // eval_modality: single-modality protocols are scored on their own
    // modality only; joint/conditional on every modality (-1)
    auto run_one = [&](TrainConfig cfg, uint64_t seed, const std::string& label,
                       const std::string& source, int64_t eval_modality) {
        cfg.seed = seed;
        std::string dir = out_dir + "/s" + std::to_string(seed) + "_" + label;
        auto res = train<T>(cfg, dir, source);
        return evaluate_checkpoint<T>(cfg, res.best_ckpt, "test", eval_modality,
                                      dir + "/eval_test.csv");
    };

    for (uint64_t seed : seeds) {
        TrainConfig cfg = base;

        cfg.protocol = Protocol::baseline;
        cfg.target_modality = assistant;
        auto base_a = run_one(cfg, seed, "baseline_a", "", assistant);
        for (const auto& r : base_a)
            out.rows.push_back({"baseline", std::to_string(seed), r.modality, r.mean_dice,
                                r.whole_foreground});

        cfg.target_modality = target;
        auto base_b = run_one(cfg, seed, "baseline_b", "", target);
        for (const auto& r : base_b)
            out.rows.push_back({"baseline", std::to_string(seed), r.modality, r.mean_dice,
                                r.whole_foreground});

        cfg.protocol = Protocol::fine_tune;
        cfg.target_modality = target;
        std::string source = out_dir + "/s" + std::to_string(seed) + "_baseline_a/best.ckpt";
        auto ft = run_one(cfg, seed, "finetune_b", source, target);
        for (const auto& r : ft)
            out.rows.push_back({"fine-tune", std::to_string(seed), r.modality, r.mean_dice,
                                r.whole_foreground});

        cfg = base;
        cfg.protocol = Protocol::joint;
        auto joint = run_one(cfg, seed, "joint", "", -1);
        for (const auto& r : joint)
            out.rows.push_back({"joint", std::to_string(seed), r.modality, r.mean_dice,
                                r.whole_foreground});

        cfg.protocol = Protocol::conditional_interleaved;
        auto cond = run_one(cfg, seed, "conditional", "", -1);
        for (const auto& r : cond)
            out.rows.push_back({"conditional-interleaved", std::to_string(seed), r.modality, r.mean_dice,
                                r.whole_foreground});
    }

    // median rows per (protocol, modality), in first-appearance order
    std::vector<std::pair<std::string, int64_t>> keys;
    for (const auto& r : out.rows) {
        auto key = std::make_pair(r.protocol, r.modality);
        if (std::find(keys.begin(), keys.end(), key) == keys.end()) keys.push_back(key);
    }
    for (const auto& [protocol, modality] : keys) {
        std::vector<double> dice, wh;
        for (const auto& r : out.rows)
            if (r.protocol == protocol && r.modality == modality && r.seed != "median") {
                dice.push_back(r.mean_dice);
                wh.push_back(r.whole_foreground);
            }
        out.rows.push_back(
            {protocol, "median", modality, detail::median_of(dice), detail::median_of(wh)});
    }

    std::ofstream csv(out.csv);
    csv << "protocol,seed,modality,mean_dice,whole_foreground_dice\n";
    for (const auto& r : out.rows)
        csv << r.protocol << "," << r.seed << "," << r.modality << "," << detail::csv_num(r.mean_dice)
            << "," << detail::csv_num(r.whole_foreground) << "\n";
    return out;
}

} // namespace condseg
