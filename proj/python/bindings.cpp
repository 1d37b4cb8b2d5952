#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "condseg/gradcheck_suite.hpp"
#include "condseg/infer.hpp"
#include "condseg/trainer.hpp"

namespace py = pybind11;
using namespace condseg;

namespace {

Volume volume_from_array(py::array_t<float, py::array::c_style | py::array::forcecast> arr,
                         std::array<float, 3> spacing, int64_t modality) {
    if (arr.ndim() != 3) throw ShapeError("volume array must be 3-d");
    Volume vol;
    vol.dims = {arr.shape(0), arr.shape(1), arr.shape(2)};
    vol.spacing = spacing;
    vol.modality = static_cast<uint32_t>(modality);
    vol.intensities.assign(arr.data(), arr.data() + arr.size());
    return vol;
}

py::array_t<float> array_from_volume(const Volume& vol) {
    py::array_t<float> arr({vol.dims[0], vol.dims[1], vol.dims[2]});
    std::copy(vol.intensities.begin(), vol.intensities.end(), arr.mutable_data());
    return arr;
}

LabelMap labels_from_array(py::array_t<uint8_t, py::array::c_style | py::array::forcecast> arr) {
    if (arr.ndim() != 3) throw ShapeError("label array must be 3-d");
    LabelMap lab;
    lab.dims = {arr.shape(0), arr.shape(1), arr.shape(2)};
    lab.classes.assign(arr.data(), arr.data() + arr.size());
    return lab;
}

py::array_t<uint8_t> array_from_labels(const LabelMap& lab) {
    py::array_t<uint8_t> arr({lab.dims[0], lab.dims[1], lab.dims[2]});
    std::copy(lab.classes.begin(), lab.classes.end(), arr.mutable_data());
    return arr;
}

ConfigMap map_from_dict(const std::map<std::string, std::string>& d) {
    ConfigMap m;
    for (const auto& [k, v] : d) m.set(k, v);
    return m;
}

} // namespace

PYBIND11_MODULE(_condseg, mod) {
    mod.doc() = "conditional cross-modality volumetric segmentation";

    mod.def(
        "generate_phantom",
        [](uint64_t seed, int64_t modality, int64_t size) {
            PhantomSpec spec = PhantomSpec::defaults();
            spec.size = size;
            auto [vol, lab] = generate_phantom(seed, spec, modality);
            return py::make_tuple(array_from_volume(vol), array_from_labels(lab));
        },
        py::arg("seed"), py::arg("modality"), py::arg("size") = 48,
        "render one synthetic two-modality phantom as (volume, labels)");

    mod.def(
        "gen_dataset",
        [](const std::string& dir, uint64_t seed, int64_t size,
           const std::map<std::string, std::string>& config) {
            ConfigMap m = map_from_dict(config);
            PhantomSpec spec = PhantomSpec::defaults();
            spec.size = size;
            DatasetCounts counts;
            counts.train_a = m.get_i64("data.train_a", counts.train_a);
            counts.train_b = m.get_i64("data.train_b", counts.train_b);
            counts.val_a = m.get_i64("data.val_a", counts.val_a);
            counts.val_b = m.get_i64("data.val_b", counts.val_b);
            counts.test_a = m.get_i64("data.test_a", counts.test_a);
            counts.test_b = m.get_i64("data.test_b", counts.test_b);
            gen_dataset(dir, seed, spec, counts);
            return dir + "/manifest.txt";
        },
        py::arg("dir"), py::arg("seed"), py::arg("size") = 48,
        py::arg("config") = std::map<std::string, std::string>{},
        "write a dataset plus manifest and return the manifest path");

    mod.def(
        "read_volume",
        [](const std::string& path) {
            auto r = read_volume(path);
            py::dict out;
            out["data"] = array_from_volume(r.vol);
            out["spacing"] = r.vol.spacing;
            out["modality"] = r.vol.modality;
            if (r.has_labels) out["labels"] = array_from_labels(r.labels);
            return out;
        },
        py::arg("path"));

    mod.def(
        "write_volume",
        [](const std::string& path, py::array_t<float, py::array::c_style | py::array::forcecast> data,
           std::array<float, 3> spacing, int64_t modality,
           std::optional<py::array_t<uint8_t, py::array::c_style | py::array::forcecast>> labels) {
            Volume vol = volume_from_array(data, spacing, modality);
            if (labels) {
                LabelMap lab = labels_from_array(*labels);
                write_volume(path, vol, &lab);
            } else {
                write_volume(path, vol, nullptr);
            }
        },
        py::arg("path"), py::arg("data"), py::arg("spacing") = std::array<float, 3>{1.0f, 1.0f, 1.0f},
        py::arg("modality") = 0, py::arg("labels") = std::nullopt);

    mod.def(
        "normalize_intensity",
        [](py::array_t<float, py::array::c_style | py::array::forcecast> data) {
            Volume vol = volume_from_array(data, {1.0f, 1.0f, 1.0f}, 0);
            return array_from_volume(normalize_intensity(vol));
        },
        py::arg("data"), "min-max rescale to [0, 1]");

    mod.def(
        "dice",
        [](py::array_t<uint8_t, py::array::c_style | py::array::forcecast> pred,
           py::array_t<uint8_t, py::array::c_style | py::array::forcecast> gt, int64_t num_classes) {
            if (pred.size() != gt.size()) throw ShapeError("pred and gt sizes differ");
            std::vector<uint8_t> p(pred.data(), pred.data() + pred.size());
            std::vector<uint8_t> g(gt.data(), gt.data() + gt.size());
            auto d = dice_metric(p, g, num_classes);
            py::dict out;
            out["per_class"] = d.per_class;
            out["mean_foreground"] = d.mean_foreground;
            out["whole_foreground"] = d.whole_foreground;
            return out;
        },
        py::arg("pred"), py::arg("gt"), py::arg("num_classes"));

    mod.def(
        "train",
        [](const std::map<std::string, std::string>& config, const std::string& out_dir,
           const std::string& source_ckpt) {
            TrainConfig cfg = TrainConfig::from_map(map_from_dict(config));
            auto res = train<float>(cfg, out_dir, source_ckpt);
            py::dict out;
            out["best_ckpt"] = res.best_ckpt;
            out["last_ckpt"] = res.last_ckpt;
            out["best_metric"] = res.best_metric;
            out["best_epoch"] = res.best_epoch;
            out["steps"] = res.steps;
            return out;
        },
        py::arg("config"), py::arg("out_dir"), py::arg("source_ckpt") = std::string{},
        "train per the flat section.key config dict; returns checkpoint paths and metrics");

    mod.def(
        "evaluate",
        [](const std::map<std::string, std::string>& config, const std::string& ckpt,
           const std::string& split, int64_t modality, const std::string& out_csv) {
            TrainConfig cfg = TrainConfig::from_map(map_from_dict(config));
            auto rows = evaluate_checkpoint<float>(cfg, ckpt, split, modality, out_csv);
            py::list out;
            for (const auto& r : rows) {
                py::dict d;
                d["modality"] = r.modality;
                d["mean_dice"] = r.mean_dice;
                d["whole_foreground"] = r.whole_foreground;
                d["volumes"] = r.volumes;
                out.append(d);
            }
            return out;
        },
        py::arg("config"), py::arg("ckpt"), py::arg("split") = "test", py::arg("modality") = -1,
        py::arg("out_csv") = std::string{});

    mod.def(
        "infer",
        [](const std::map<std::string, std::string>& config, const std::string& ckpt,
           py::array_t<float, py::array::c_style | py::array::forcecast> data, int64_t modality,
           double overlap) {
            TrainConfig cfg = TrainConfig::from_map(map_from_dict(config));
            bool single = cfg.protocol == Protocol::baseline || cfg.protocol == Protocol::fine_tune;
            int64_t mods = single ? 1 : std::max<int64_t>(2, modality + 1);
            auto model = build_model<float>(cfg, mods);
            restore_params(*model, load_checkpoint(ckpt), cfg.hash(), false);
            Volume vol = volume_from_array(data, {1.0f, 1.0f, 1.0f}, modality);
            auto plan = plan_windows(vol.dims, cfg.crop, overlap);
            auto res = sliding_infer(*model, vol, single ? 0 : modality, plan);
            return array_from_labels(res.labels);
        },
        py::arg("config"), py::arg("ckpt"), py::arg("data"), py::arg("modality") = 0,
        py::arg("overlap") = 0.5, "sliding-window segmentation of one volume");

    mod.def(
        "gradcheck",
        [](bool include_models) {
            auto results = run_gradcheck_suite(include_models);
            py::list out;
            for (const auto& r : results) {
                py::dict d;
                d["name"] = r.name;
                d["max_rel_err"] = r.max_rel_err;
                d["tol"] = r.tol;
                d["ok"] = r.ok;
                out.append(d);
            }
            return out;
        },
        py::arg("include_models") = false,
        "run the 64-bit gradient verification suite; op checks only by default");

    py::register_exception<BadMagicError>(mod, "BadMagicError", PyExc_ValueError);
    py::register_exception<BadVersionError>(mod, "BadVersionError", PyExc_ValueError);
    py::register_exception<TruncatedError>(mod, "TruncatedError", PyExc_ValueError);
    py::register_exception<ConfigError>(mod, "ConfigError", PyExc_ValueError);
    py::register_exception<ShapeError>(mod, "ShapeError", PyExc_ValueError);
    py::register_exception<ModalityError>(mod, "ModalityError", PyExc_IndexError);
    py::register_exception<NonFiniteError>(mod, "NonFiniteError", PyExc_ArithmeticError);
}
