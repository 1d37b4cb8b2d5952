#pragma once

#include <filesystem>

#include "condseg/loss.hpp"
#include "condseg/models.hpp"
#include "condseg/volume.hpp"

namespace condseg {

struct WindowPlan {
    int64_t window = 0;
    double overlap = 0.0;
    std::array<std::vector<int64_t>, 3> offsets; // per axis, raster order
    Shape dims;

    int64_t num_windows() const {
        return static_cast<int64_t>(offsets[0].size() * offsets[1].size() * offsets[2].size());
    }
};

inline WindowPlan plan_windows(const Shape& dims, int64_t window, double overlap) {
    if (dims.size() != 3) throw ShapeError("plan_windows: expected three axes");
    if (overlap < 0.0 || overlap >= 1.0) throw std::invalid_argument("plan_windows: overlap must be in [0, 1)");
    WindowPlan plan;
    plan.window = window;
    plan.overlap = overlap;
    plan.dims = dims;
    int64_t stride = std::max<int64_t>(1, llround(static_cast<double>(window) * (1.0 - overlap)));
    for (int axis = 0; axis < 3; ++axis) {
        if (window > dims[axis]) throw ShapeError("plan_windows: window exceeds volume extent");
        auto& offs = plan.offsets[axis];
        for (int64_t o = 0; o + window < dims[axis]; o += stride) offs.push_back(o);
        int64_t last = dims[axis] - window;
        if (offs.empty() || offs.back() != last) offs.push_back(last);
    }
    return plan;
}

namespace detail {

template <class T>
Tensor<T> window_tensor(const Volume& vol, int64_t z0, int64_t y0, int64_t x0, int64_t w) {
    std::vector<T> buf(static_cast<size_t>(w * w * w));
    const auto& d = vol.dims;
    for (int64_t z = 0; z < w; ++z)
        for (int64_t y = 0; y < w; ++y) {
            const float* src = vol.intensities.data() + ((z0 + z) * d[1] + (y0 + y)) * d[2] + x0;
            T* dst = buf.data() + (z * w + y) * w;
            for (int64_t x = 0; x < w; ++x) dst[x] = static_cast<T>(src[x]);
        }
    return Tensor<T>::from({1, 1, w, w, w}, std::move(buf));
}

} // namespace detail

template <class T>
struct InferResult {
    Tensor<T> logits; // [1, C, D, H, W], overlap-averaged
    LabelMap labels;
};

// tiles the volume with the plan's windows, averages logits where windows
// overlap, then takes the per-voxel argmax
template <class T>
InferResult<T> sliding_infer(Model<T>& model, const Volume& vol, int64_t m, const WindowPlan& plan) {
    if (plan.dims != vol.dims) throw ShapeError("sliding_infer: plan was made for different dims");
    NoGradGuard ng;
    const int64_t C = model.num_classes();
    const int64_t w = plan.window;
    const auto& d = vol.dims;
    const int64_t spatial = numel(d);
    std::vector<T> acc(static_cast<size_t>(C * spatial), T(0));
    std::vector<int32_t> hits(static_cast<size_t>(spatial), 0);

    for (int64_t z0 : plan.offsets[0])
        for (int64_t y0 : plan.offsets[1])
            for (int64_t x0 : plan.offsets[2]) {
                Tensor<T> xw = detail::window_tensor<T>(vol, z0, y0, x0, w);
                Tensor<T> logits = model.forward(xw, m);
                const auto& lv = logits.data();
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t z = 0; z < w; ++z)
                        for (int64_t y = 0; y < w; ++y) {
                            const T* src = lv.data() + ((c * w + z) * w + y) * w;
                            T* dst = acc.data() + ((c * d[0] + z0 + z) * d[1] + y0 + y) * d[2] + x0;
                            const int32_t* h =
                                hits.data() + ((z0 + z) * d[1] + y0 + y) * d[2] + x0;
                            for (int64_t x = 0; x < w; ++x) dst[x] = h[x] ? dst[x] + src[x] : src[x];
                        }
                for (int64_t z = 0; z < w; ++z)
                    for (int64_t y = 0; y < w; ++y) {
                        int32_t* h = hits.data() + ((z0 + z) * d[1] + y0 + y) * d[2] + x0;
                        for (int64_t x = 0; x < w; ++x) ++h[x];
                    }
            }

    for (int64_t v = 0; v < spatial; ++v) {
        if (hits[static_cast<size_t>(v)] == 0) throw ShapeError("sliding_infer: uncovered voxel");
        if (hits[static_cast<size_t>(v)] == 1) continue;
        T inv = T(1) / static_cast<T>(hits[static_cast<size_t>(v)]);
        for (int64_t c = 0; c < C; ++c) acc[static_cast<size_t>(c * spatial + v)] *= inv;
    }

    InferResult<T> out;
    out.labels.dims = d;
    out.labels.classes.resize(static_cast<size_t>(spatial));
    for (int64_t v = 0; v < spatial; ++v) {
        int64_t best = 0;
        T bestv = acc[static_cast<size_t>(v)];
        for (int64_t c = 1; c < C; ++c)
            if (acc[static_cast<size_t>(c * spatial + v)] > bestv) {
                bestv = acc[static_cast<size_t>(c * spatial + v)];
                best = c;
            }
        out.labels.classes[static_cast<size_t>(v)] = static_cast<uint8_t>(best);
    }
    out.logits = Tensor<T>::from({1, C, d[0], d[1], d[2]}, std::move(acc));
    return out;
}

inline constexpr uint8_t kClassPalette[][3] = {
    {230, 60, 60},  {60, 160, 230}, {80, 200, 100}, {240, 200, 60}, {180, 90, 220},
    {255, 140, 40}, {90, 220, 210}, {230, 110, 170}, {140, 110, 80}, {120, 130, 220},
    {170, 220, 70}, {100, 100, 100},
};
inline constexpr size_t kClassPaletteSize = sizeof(kClassPalette) / sizeof(kClassPalette[0]);

namespace detail {

inline uint8_t gray_byte(float v) {
    float c = std::min(std::max(v, 0.0f), 1.0f);
    return static_cast<uint8_t>(llround(c * 255.0));
}

// (row, col) in the slice image -> flat voxel index
inline int64_t slice_voxel(const Shape& d, int64_t axis, int64_t index, int64_t row, int64_t col) {
    switch (axis) {
        case 0: return (index * d[1] + row) * d[2] + col;  // rows y, cols x
        case 1: return (row * d[1] + index) * d[2] + col;  // rows z, cols x
        default: return (row * d[1] + col) * d[2] + index; // rows z, cols y
    }
}

inline void write_ppm(const std::string& path, int64_t width, int64_t height,
                      const std::vector<uint8_t>& rgb) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write image: " + path);
    f << "P6\n" << width << " " << height << "\n255\n";
    f.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
}

inline void slice_image(const Volume& vol, const LabelMap* labels, int64_t axis, int64_t index,
                        const std::string& path) {
    const auto& d = vol.dims;
    int64_t height = axis == 0 ? d[1] : d[0];
    int64_t width = axis == 2 ? d[1] : d[2];
    std::vector<uint8_t> rgb(static_cast<size_t>(width * height * 3));
    for (int64_t r = 0; r < height; ++r)
        for (int64_t c = 0; c < width; ++c) {
            int64_t v = slice_voxel(d, axis, index, r, c);
            uint8_t* px = rgb.data() + (r * width + c) * 3;
            uint8_t cls = labels ? labels->classes[static_cast<size_t>(v)] : 0;
            if (cls == 0) {
                uint8_t g = gray_byte(vol.intensities[static_cast<size_t>(v)]);
                px[0] = px[1] = px[2] = g;
            } else {
                const uint8_t* col = kClassPalette[(cls - 1) % kClassPaletteSize];
                px[0] = col[0];
                px[1] = col[1];
                px[2] = col[2];
            }
        }
    write_ppm(path, width, height, rgb);
}

} // namespace detail

// one grayscale image per index plus label overlays for whichever of gt/pred
// are provided; files land in out_dir as slice_a<axis>_i<index>_{img,gt,pred}.ppm
inline void dump_slices(const Volume& vol, const LabelMap* gt, const LabelMap* pred, int64_t axis,
                        const std::vector<int64_t>& indices, const std::string& out_dir) {
    if (axis < 0 || axis > 2) throw std::out_of_range("dump_slices: axis must be 0, 1 or 2");
    if (gt && gt->dims != vol.dims) throw ShapeError("dump_slices: ground truth dims mismatch");
    if (pred && pred->dims != vol.dims) throw ShapeError("dump_slices: prediction dims mismatch");
    std::filesystem::create_directories(out_dir);
    for (int64_t idx : indices) {
        if (idx < 0 || idx >= vol.dims[axis])
            throw std::out_of_range("dump_slices: slice index " + std::to_string(idx) + " out of range");
        std::string stem = out_dir + "/slice_a" + std::to_string(axis) + "_i" + std::to_string(idx);
        detail::slice_image(vol, nullptr, axis, idx, stem + "_img.ppm");
        if (gt) detail::slice_image(vol, gt, axis, idx, stem + "_gt.ppm");
        if (pred) detail::slice_image(vol, pred, axis, idx, stem + "_pred.ppm");
    }
}

} // namespace condseg
