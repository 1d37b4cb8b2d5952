#pragma once

#include <cstring>
#include <fstream>

#include "condseg/models.hpp"
#include "condseg/optim.hpp"
#include "condseg/volume.hpp"

namespace condseg {

class ConfigMismatchError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[4] = {'C', 'S', 'G', 'K'};
inline constexpr uint32_t kCheckpointVersion = 1;

struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<double> data;
};

struct CheckpointData {
    uint64_t config_hash = 0;
    int64_t step = 0;
    std::string rng_state;
    std::vector<NamedArray> tensors;
    bool has_opt = false;
    int64_t opt_t = 0;
    std::vector<std::vector<double>> opt_m, opt_v;

    const NamedArray* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
};

namespace detail {

template <class V>
void write_pod(std::ostream& os, const V& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <class V>
V read_pod(std::istream& is) {
    V v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!is) throw TruncatedError("checkpoint: unexpected end of file");
    return v;
}

inline void write_f64s(std::ostream& os, const std::vector<double>& v) {
    write_pod<uint64_t>(os, v.size());
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
}

inline std::vector<double> read_f64s(std::istream& is) {
    auto n = read_pod<uint64_t>(is);
    if (n > (1ull << 32)) throw TruncatedError("checkpoint: implausible array length");
    std::vector<double> v(n);
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * 8));
    if (static_cast<uint64_t>(is.gcount()) != n * 8) throw TruncatedError("checkpoint: short array payload");
    return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_pod<uint64_t>(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
    auto n = read_pod<uint64_t>(is);
    if (n > (1ull << 24)) throw TruncatedError("checkpoint: implausible string length");
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (static_cast<uint64_t>(is.gcount()) != n) throw TruncatedError("checkpoint: short string payload");
    return s;
}

} // namespace detail

template <class T>
void save_checkpoint(const std::string& path, const Model<T>& model, const AdamW<T>* opt, int64_t step,
                     const Rng* rng, uint64_t config_hash) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    os.write(kCheckpointMagic, 4);
    detail::write_pod<uint32_t>(os, kCheckpointVersion);
    detail::write_pod<uint64_t>(os, config_hash);
    detail::write_pod<int64_t>(os, step);
    detail::write_string(os, rng ? rng->serialize() : std::string());

    const auto& entries = model.params().entries();
    detail::write_pod<uint64_t>(os, entries.size());
    for (const auto& e : entries) {
        detail::write_string(os, e.name);
        Tensor<T> t = e.tensor;
        detail::write_pod<uint32_t>(os, static_cast<uint32_t>(t.shape().size()));
        for (int64_t d : t.shape()) detail::write_pod<int64_t>(os, d);
        std::vector<double> buf(t.data().begin(), t.data().end());
        detail::write_f64s(os, buf);
    }

    detail::write_pod<uint8_t>(os, opt ? 1 : 0);
    if (opt) {
        detail::write_pod<int64_t>(os, opt->step_count());
        for (const auto& m : opt->first_moments()) detail::write_f64s(os, m);
        for (const auto& v : opt->second_moments()) detail::write_f64s(os, v);
    }
    if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw BadMagicError("not a checkpoint file: " + path);
    auto version = detail::read_pod<uint32_t>(is);
    if (version != kCheckpointVersion)
        throw BadVersionError("unsupported checkpoint version " + std::to_string(version));

    CheckpointData ck;
    ck.config_hash = detail::read_pod<uint64_t>(is);
    ck.step = detail::read_pod<int64_t>(is);
    ck.rng_state = detail::read_string(is);

    auto count = detail::read_pod<uint64_t>(is);
    if (count > (1u << 20)) throw TruncatedError("checkpoint: implausible tensor count");
    ck.tensors.resize(count);
    for (auto& t : ck.tensors) {
        t.name = detail::read_string(is);
        auto rank = detail::read_pod<uint32_t>(is);
        if (rank > 16) throw TruncatedError("checkpoint: implausible tensor rank");
        t.shape.resize(rank);
        for (auto& d : t.shape) d = detail::read_pod<int64_t>(is);
        t.data = detail::read_f64s(is);
        if (static_cast<int64_t>(t.data.size()) != numel(t.shape))
            throw TruncatedError("checkpoint: tensor payload does not match its shape");
    }

    ck.has_opt = detail::read_pod<uint8_t>(is) != 0;
    if (ck.has_opt) {
        ck.opt_t = detail::read_pod<int64_t>(is);
        ck.opt_m.resize(count);
        ck.opt_v.resize(count);
        for (auto& m : ck.opt_m) m = detail::read_f64s(is);
        for (auto& v : ck.opt_v) v = detail::read_f64s(is);
    }
    return ck;
}

// loads saved tensors into the model by name; shapes must match exactly
template <class T>
void restore_params(Model<T>& model, const CheckpointData& ck, uint64_t expected_hash, bool allow_mismatch) {
    if (!allow_mismatch && ck.config_hash != expected_hash)
        throw ConfigMismatchError("checkpoint was produced by a different config (hash " +
                                  std::to_string(ck.config_hash) + " vs " + std::to_string(expected_hash) +
                                  "); pass the override to load anyway");
    const auto& entries = model.params().entries();
    if (entries.size() != ck.tensors.size())
        throw ShapeError("checkpoint holds " + std::to_string(ck.tensors.size()) + " tensors, model has " +
                         std::to_string(entries.size()));
    for (const auto& e : entries) {
        const NamedArray* src = ck.find(e.name);
        if (!src) throw ShapeError("checkpoint missing tensor: " + e.name);
        Tensor<T> dst = e.tensor;
        if (src->shape != dst.shape()) throw ShapeError("checkpoint shape mismatch for " + e.name);
        for (size_t i = 0; i < src->data.size(); ++i) dst.data()[i] = static_cast<T>(src->data[i]);
    }
}

template <class T>
void restore_optimizer(AdamW<T>& opt, const CheckpointData& ck) {
    if (!ck.has_opt) throw std::runtime_error("checkpoint carries no optimizer state");
    opt.restore(ck.opt_t, ck.opt_m, ck.opt_v);
}

} // namespace condseg
