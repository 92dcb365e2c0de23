#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "errors.hpp"
#include "hash.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace hammer {

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape(), 0.0) {}
};

enum class Init { zeros, ones, normal, xavier_uniform };

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

// Bounds-checked little-endian reader over an in-memory buffer.
class ByteReader {
public:
    ByteReader(std::string_view bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

    [[nodiscard]] bool at_end() const { return pos_ == bytes_.size(); }
    [[nodiscard]] std::size_t position() const { return pos_; }

    std::string_view take(std::size_t n, std::string_view field) {
        if (bytes_.size() - pos_ < n) {
            throw LoadError(source_ + ": truncated while reading " + std::string(field) + " at byte " +
                            std::to_string(pos_));
        }
        auto view = bytes_.substr(pos_, n);
        pos_ += n;
        return view;
    }

    std::uint32_t u32(std::string_view field) {
        auto b = take(4, field);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[static_cast<std::size_t>(i)]);
        return v;
    }

    std::uint64_t u64(std::string_view field) {
        auto b = take(8, field);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[static_cast<std::size_t>(i)]);
        return v;
    }

    double f64(std::string_view field) { return std::bit_cast<double>(u64(field)); }
    float f32(std::string_view field) { return std::bit_cast<float>(u32(field)); }

private:
    std::string_view bytes_;
    std::string source_;
    std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw LoadError(path.string() + ": cannot open");
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw LoadError(path.string() + ": cannot open for writing");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw LoadError(path.string() + ": write failed");
    }
}

} // namespace detail

inline constexpr std::string_view checkpoint_magic = "HMRCKPT1";
inline constexpr std::uint8_t checkpoint_version = 1;

// Named trainable tensors in registration order. Initial values depend only on
// (seed, name), so adding or removing a parameter never perturbs the others.
class ParameterStore {
public:
    explicit ParameterStore(std::uint64_t seed = 0) : seed_(seed) {}

    ParameterStore(const ParameterStore&) = delete;
    ParameterStore& operator=(const ParameterStore&) = delete;
    ParameterStore(ParameterStore&&) = default;
    ParameterStore& operator=(ParameterStore&&) = default;

    Parameter& add(const std::string& name, Shape shape, Init init, double scale = 0.02) {
        if (index_.contains(name)) {
            throw ConfigError("duplicate parameter name '" + name + "'");
        }
        Tensor value(shape, 0.0);
        Rng rng(mix_seed(seed_, fnv1a(name)));
        switch (init) {
        case Init::zeros: break;
        case Init::ones: value.fill(1.0); break;
        case Init::normal:
            for (double& v : value.data()) v = rng.normal(0.0, scale);
            break;
        case Init::xavier_uniform: {
            const double fan_in = static_cast<double>(value.rows());
            const double fan_out = static_cast<double>(value.cols());
            const double limit = std::sqrt(6.0 / (fan_in + fan_out));
            for (double& v : value.data()) v = rng.uniform(-limit, limit);
            break;
        }
        }
        params_.push_back(std::make_unique<Parameter>(name, std::move(value)));
        index_.emplace(name, params_.size() - 1);
        return *params_.back();
    }

    [[nodiscard]] Parameter* find(std::string_view name) {
        auto it = index_.find(std::string(name));
        return it == index_.end() ? nullptr : params_[it->second].get();
    }
    [[nodiscard]] const Parameter* find(std::string_view name) const {
        auto it = index_.find(std::string(name));
        return it == index_.end() ? nullptr : params_[it->second].get();
    }

    Parameter& at(std::string_view name) {
        if (auto* p = find(name)) return *p;
        throw InputError("unknown parameter '" + std::string(name) + "'");
    }

    [[nodiscard]] std::size_t size() const { return params_.size(); }
    [[nodiscard]] std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p->value.size();
        return n;
    }

    Parameter& operator[](std::size_t i) { return *params_[i]; }
    const Parameter& operator[](std::size_t i) const { return *params_[i]; }

    void zero_grad() {
        for (auto& p : params_) p->grad.fill(0.0);
    }

    [[nodiscard]] std::vector<Parameter*> all() {
        std::vector<Parameter*> out;
        out.reserve(params_.size());
        for (auto& p : params_) out.push_back(p.get());
        return out;
    }

    [[nodiscard]] std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const auto& p : params_) out.push_back(p->name);
        return out;
    }

    [[nodiscard]] std::string serialize() const {
        std::string out(checkpoint_magic);
        out.push_back(static_cast<char>(checkpoint_version));
        for (const auto& p : params_) {
            detail::put_u32(out, static_cast<std::uint32_t>(p->name.size()));
            out += p->name;
            const Shape& shape = p->value.shape();
            detail::put_u32(out, static_cast<std::uint32_t>(shape.size()));
            for (std::size_t d : shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
            for (double v : p->value.data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
        }
        return out;
    }

    // Overwrites values of existing parameters. Every stored tensor must match a
    // registered parameter by name and shape, and every registered parameter
    // must be present.
    void deserialize(std::string_view bytes, const std::string& source = "checkpoint") {
        detail::ByteReader in(bytes, source);
        if (in.take(checkpoint_magic.size(), "magic") != checkpoint_magic) {
            throw LoadError(source + ": bad magic, expected HMRCKPT1");
        }
        const auto version = static_cast<std::uint8_t>(in.take(1, "version")[0]);
        if (version != checkpoint_version) {
            throw LoadError(source + ": unsupported checkpoint version " + std::to_string(version));
        }
        std::map<std::string, Tensor> loaded;
        while (!in.at_end()) {
            const std::uint32_t name_len = in.u32("name length");
            std::string name(in.take(name_len, "name"));
            const std::uint32_t rank = in.u32("rank of " + name);
            Shape shape;
            for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(in.u32("dims of " + name));
            Tensor t(shape, 0.0);
            for (double& v : t.data()) v = in.f64("values of " + name);
            loaded.insert_or_assign(name, std::move(t));
        }
        for (auto& [name, tensor] : loaded) {
            Parameter* p = find(name);
            if (p == nullptr) {
                throw LoadError(source + ": unknown parameter '" + name + "'");
            }
            if (p->value.shape() != tensor.shape()) {
                throw LoadError(source + ": parameter '" + name + "' has shape " + shape_string(tensor.shape()) +
                                ", model expects " + shape_string(p->value.shape()));
            }
        }
        for (auto& p : params_) {
            auto it = loaded.find(p->name);
            if (it == loaded.end()) {
                throw LoadError(source + ": missing parameter '" + p->name + "'");
            }
            p->value = std::move(it->second);
        }
    }

    void save(const std::filesystem::path& path) const { detail::write_file(path, serialize()); }

    void load(const std::filesystem::path& path) { deserialize(detail::read_file(path), path.string()); }

    void copy_values_from(const ParameterStore& other) {
        for (auto& p : params_) {
            const Parameter* q = other.find(p->name);
            if (q == nullptr || q->value.shape() != p->value.shape()) {
                throw ContractError("parameter stores differ at '" + p->name + "'");
            }
            p->value = q->value;
        }
    }

private:
    std::uint64_t seed_;
    std::vector<std::unique_ptr<Parameter>> params_;
    std::map<std::string, std::size_t> index_;
};

} // namespace hammer
