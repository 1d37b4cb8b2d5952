#include <CLI11.hpp>

#include "condseg/compare.hpp"
#include "condseg/gradcheck_suite.hpp"

using namespace condseg;

namespace {

struct CommonOpts {
    std::string config_path;
    int64_t seed = -1;
    bool deterministic = false; // execution is always serial and deterministic
    std::string precision = "f32";
    int64_t modality = -1;
    std::string out;
    std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "ini-style config file");
    cmd->add_option("--seed", o.seed, "override train.seed");
    cmd->add_flag("--deterministic", o.deterministic, "serial deterministic mode (always on)");
    cmd->add_option("--precision", o.precision, "float width")
        ->check(CLI::IsMember({"f32", "f64"}))
        ->capture_default_str();
    cmd->add_option("--modality", o.modality, "modality id");
    cmd->add_option("--out", o.out, "output directory");
    cmd->add_option("--set", o.sets, "override any config key as section.key=value");
}

ConfigMap resolve(const CommonOpts& o) {
    ConfigMap m;
    if (!o.config_path.empty()) m = read_config_file(o.config_path);
    apply_overrides(m, o.sets);
    if (o.seed >= 0) m.set("train.seed", std::to_string(o.seed));
    return m;
}

int cmd_gen_data(const CommonOpts& o) {
    if (o.out.empty()) throw ConfigError("gen-data needs --out");
    ConfigMap m = resolve(o);
    PhantomSpec spec = PhantomSpec::defaults();
    spec.size = m.get_i64("data.size", 48);
    DatasetCounts counts;
    counts.train_a = m.get_i64("data.train_a", counts.train_a);
    counts.train_b = m.get_i64("data.train_b", counts.train_b);
    counts.val_a = m.get_i64("data.val_a", counts.val_a);
    counts.val_b = m.get_i64("data.val_b", counts.val_b);
    counts.test_a = m.get_i64("data.test_a", counts.test_a);
    counts.test_b = m.get_i64("data.test_b", counts.test_b);
    uint64_t seed = o.seed >= 0 ? static_cast<uint64_t>(o.seed)
                                : static_cast<uint64_t>(m.get_i64("data.seed", 1));
    auto manifest = gen_dataset(o.out, seed, spec, counts);
    std::cout << "wrote " << manifest.entries.size() << " volumes, manifest at " << o.out
              << "/manifest.txt\n";
    return 0;
}

template <class T>
int run_train(const CommonOpts& o, const ConfigMap& m) {
    TrainConfig cfg = TrainConfig::from_map(m);
    if (o.modality >= 0) cfg.target_modality = o.modality;
    std::string source = m.get_str("train.source_ckpt", "");
    auto res = train<T>(cfg, o.out, source);
    std::cout << "trained " << res.steps << " steps; best validation dice "
              << detail::csv_num(res.best_metric) << " at epoch " << res.best_epoch << "\n"
              << "best checkpoint: " << res.best_ckpt << "\n";
    return 0;
}

int cmd_train(const CommonOpts& o) {
    if (o.out.empty()) throw ConfigError("train needs --out");
    ConfigMap m = resolve(o);
    return o.precision == "f64" ? run_train<double>(o, m) : run_train<float>(o, m);
}

template <class T>
int run_evaluate(const CommonOpts& o, const ConfigMap& m, const std::string& ckpt,
                 const std::string& split) {
    TrainConfig cfg = TrainConfig::from_map(m);
    std::string csv = o.out.empty() ? "" : o.out + "/eval_" + split + ".csv";
    if (!o.out.empty()) std::filesystem::create_directories(o.out);
    auto rows = evaluate_checkpoint<T>(cfg, ckpt, split, o.modality, csv);
    for (const auto& r : rows)
        std::cout << "modality " << r.modality << ": mean dice " << detail::csv_num(r.mean_dice)
                  << ", whole foreground " << detail::csv_num(r.whole_foreground) << " over " << r.volumes
                  << " volumes\n";
    if (!csv.empty()) std::cout << "per-volume rows: " << csv << "\n";
    return 0;
}

int cmd_evaluate(const CommonOpts& o, const std::string& ckpt, const std::string& split) {
    ConfigMap m = resolve(o);
    return o.precision == "f64" ? run_evaluate<double>(o, m, ckpt, split)
                                : run_evaluate<float>(o, m, ckpt, split);
}

template <class T>
int run_infer(const CommonOpts& o, const ConfigMap& m, const std::string& ckpt,
              const std::string& input) {
    TrainConfig cfg = TrainConfig::from_map(m);
    auto r = read_volume(input);
    int64_t modality = o.modality >= 0 ? o.modality : static_cast<int64_t>(r.vol.modality);

    bool single = cfg.protocol == Protocol::baseline || cfg.protocol == Protocol::fine_tune;
    int64_t model_mods = single ? 1 : std::max<int64_t>(1, modality + 1);
    if (cfg.protocol == Protocol::conditional_interleaved) model_mods = std::max<int64_t>(2, model_mods);
    auto model = build_model<T>(cfg, model_mods);
    restore_params(*model, load_checkpoint(ckpt), cfg.hash(), false);

    auto plan = plan_windows(r.vol.dims, cfg.crop, 0.5);
    auto res = sliding_infer(*model, r.vol, model->num_modalities() == 1 ? 0 : modality, plan);

    std::filesystem::create_directories(o.out);
    write_volume(o.out + "/prediction.csg", r.vol, &res.labels);
    std::vector<int64_t> mids{r.vol.dims[0] / 4, r.vol.dims[0] / 2, (3 * r.vol.dims[0]) / 4};
    dump_slices(r.vol, r.has_labels ? &r.labels : nullptr, &res.labels, 0, mids, o.out + "/slices");
    std::cout << "prediction written to " << o.out << "/prediction.csg (" << plan.num_windows()
              << " windows)\n";
    if (r.has_labels) {
        auto dice = dice_metric(res.labels.classes, r.labels.classes, cfg.num_classes);
        std::cout << "mean dice vs labels: " << detail::csv_num(dice.mean_foreground) << "\n";
    }
    return 0;
}

int cmd_infer(const CommonOpts& o, const std::string& ckpt, const std::string& input) {
    if (o.out.empty()) throw ConfigError("infer needs --out");
    ConfigMap m = resolve(o);
    return o.precision == "f64" ? run_infer<double>(o, m, ckpt, input) : run_infer<float>(o, m, ckpt, input);
}

int cmd_gradcheck() {
    auto results = run_gradcheck_suite(true);
    size_t failed = 0;
    for (const auto& r : results) {
        std::cout << (r.ok ? "pass" : "FAIL") << "  " << r.name << "  max_rel_err=" << r.max_rel_err
                  << "  tol=" << r.tol << "  (" << r.checked << " elements)\n";
        failed += r.ok ? 0 : 1;
    }
    std::cout << (failed == 0 ? "all " : "FAILED ") << results.size() << " checks"
              << (failed ? " (" + std::to_string(failed) + " failing)" : "") << "\n";
    return failed == 0 ? 0 : 1;
}

template <class T>
int run_compare(const CommonOpts& o, const ConfigMap& m) {
    TrainConfig cfg = TrainConfig::from_map(m);
    std::vector<uint64_t> seeds;
    for (int64_t s : m.get_i64_list("compare.seeds", {1, 2, 3})) seeds.push_back(static_cast<uint64_t>(s));
    int64_t assistant = m.get_i64("compare.assistant", 0);
    int64_t target = m.get_i64("compare.target", 1);
    auto res = compare<T>(cfg, seeds, o.out, assistant, target);
    std::cout << "protocol,seed,modality,mean_dice,whole_foreground_dice\n";
    for (const auto& r : res.rows)
        if (r.seed == "median")
            std::cout << r.protocol << "," << r.seed << "," << r.modality << ","
                      << detail::csv_num(r.mean_dice) << "," << detail::csv_num(r.whole_foreground)
                      << "\n";
    std::cout << "full table: " << res.csv << "\n";
    return 0;
}

int cmd_compare(const CommonOpts& o) {
    if (o.out.empty()) throw ConfigError("compare needs --out");
    ConfigMap m = resolve(o);
    return o.precision == "f64" ? run_compare<double>(o, m) : run_compare<float>(o, m);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"conditional cross-modality volumetric segmentation"};
    app.require_subcommand(1);

    CommonOpts gen_o, train_o, eval_o, infer_o, grad_o, cmp_o;
    std::string eval_ckpt, eval_split = "test", infer_ckpt, infer_input;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic phantom dataset");
    add_common(gen, gen_o);

    auto* tr = app.add_subcommand("train", "train one protocol");
    add_common(tr, train_o);

    auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint on a manifest split");
    add_common(ev, eval_o);
    ev->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
    ev->add_option("--split", eval_split, "manifest split")->capture_default_str();

    auto* in = app.add_subcommand("infer", "segment a single volume");
    add_common(in, infer_o);
    in->add_option("--ckpt", infer_ckpt, "checkpoint file")->required();
    in->add_option("input", infer_input, "volume file")->required();

    auto* gc = app.add_subcommand("gradcheck", "run the 64-bit gradient verification suites");
    add_common(gc, grad_o);

    auto* cm = app.add_subcommand("compare", "run all four protocols and summarize");
    add_common(cm, cmp_o);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(gen_o);
        if (tr->parsed()) return cmd_train(train_o);
        if (ev->parsed()) return cmd_evaluate(eval_o, eval_ckpt, eval_split);
        if (in->parsed()) return cmd_infer(infer_o, infer_ckpt, infer_input);
        if (gc->parsed()) return cmd_gradcheck();
        if (cm->parsed()) return cmd_compare(cmp_o);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
