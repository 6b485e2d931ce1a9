#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pls/errors.hpp"

namespace pls {

enum class Dtype : std::uint8_t { Single = 0, Double = 1 };

inline const char* dtype_name(Dtype d) { return d == Dtype::Single ? "single" : "double"; }

// Dense row-major tensor of rank 1..3.
template <typename T>
struct Tensor {
    std::vector<std::size_t> dims;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> d) : dims(std::move(d)) {
        if (dims.empty() || dims.size() > 3)
            throw DimensionError("tensor rank must be 1..3");
        data.assign(numel_of(dims), T(0));
    }
    Tensor(std::vector<std::size_t> d, std::vector<T> values) : dims(std::move(d)), data(std::move(values)) {
        if (dims.empty() || dims.size() > 3)
            throw DimensionError("tensor rank must be 1..3");
        if (data.size() != numel_of(dims))
            throw DimensionError("tensor data size does not match dims");
    }

    static std::size_t numel_of(const std::vector<std::size_t>& d) {
        std::size_t n = 1;
        for (std::size_t x : d) n *= x;
        return n;
    }

    static Tensor zeros(std::vector<std::size_t> d) { return Tensor(std::move(d)); }
    static Tensor full(std::vector<std::size_t> d, T value) {
        Tensor t(std::move(d));
        for (T& x : t.data) x = value;
        return t;
    }

    std::size_t rank() const { return dims.size(); }
    std::size_t numel() const { return data.size(); }
    std::size_t rows() const { return dims[0]; }
    std::size_t cols() const { return rank() >= 2 ? dims[1] : 1; }

    T& at(std::size_t i) { return data[i]; }
    T at(std::size_t i) const { return data[i]; }
    T& at(std::size_t i, std::size_t j) { return data[i * dims[1] + j]; }
    T at(std::size_t i, std::size_t j) const { return data[i * dims[1] + j]; }
    T& at(std::size_t i, std::size_t j, std::size_t k) { return data[(i * dims[1] + j) * dims[2] + k]; }
    T at(std::size_t i, std::size_t j, std::size_t k) const { return data[(i * dims[1] + j) * dims[2] + k]; }

    bool same_shape(const Tensor& o) const { return dims == o.dims; }
};

template <typename T>
constexpr Dtype dtype_of();
template <>
constexpr Dtype dtype_of<float>() { return Dtype::Single; }
template <>
constexpr Dtype dtype_of<double>() { return Dtype::Double; }

template <typename To, typename From>
Tensor<To> cast_tensor(const Tensor<From>& t) {
    Tensor<To> out(t.dims);
    for (std::size_t i = 0; i < t.data.size(); ++i) out.data[i] = static_cast<To>(t.data[i]);
    return out;
}

// Ordered name -> tensor map.  Insertion order is the canonical parameter
// order used for checkpoint layout and gradient flattening.
template <typename T>
struct ParamStore {
    std::vector<std::pair<std::string, Tensor<T>>> items;

    void add(const std::string& name, Tensor<T> t) {
        if (has(name))
            throw ConfigError("duplicate parameter name: " + name);
        items.emplace_back(name, std::move(t));
    }
    bool has(const std::string& name) const { return index_of(name) >= 0; }
    long index_of(const std::string& name) const {
        for (std::size_t i = 0; i < items.size(); ++i)
            if (items[i].first == name) return static_cast<long>(i);
        return -1;
    }
    Tensor<T>& at(const std::string& name) {
        long i = index_of(name);
        if (i < 0)
            throw ConfigError("unknown parameter name: " + name);
        return items[static_cast<std::size_t>(i)].second;
    }
    const Tensor<T>& at(const std::string& name) const {
        long i = index_of(name);
        if (i < 0)
            throw ConfigError("unknown parameter name: " + name);
        return items[static_cast<std::size_t>(i)].second;
    }
    std::size_t size() const { return items.size(); }
    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& kv : items) n += kv.second.numel();
        return n;
    }
};

}  // namespace pls
