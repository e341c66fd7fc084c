#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hmoe/errors.hpp"

namespace hmoe {

// Dense row-major tensor of 64-bit floats. Rank 1 and 2 cover the whole model;
// the checkpoint container supports arbitrary rank.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<int> s, std::vector<double> d);

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double value);
    static Tensor scalar(double value);  // shape {1}
    static Tensor row_major(int rows, int cols, std::vector<double> d);

    static std::int64_t numel_of(const std::vector<int>& shape);
    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }

    int rank() const { return static_cast<int>(shape.size()); }
    int rows() const {
        if (rank() != 2) throw DimError("rows() on tensor of rank " + std::to_string(rank()));
        return shape[0];
    }
    int cols() const {
        if (rank() != 2) throw DimError("cols() on tensor of rank " + std::to_string(rank()));
        return shape[1];
    }

    double& at(int i, int j) {
        return data[static_cast<std::size_t>(i) * static_cast<std::size_t>(shape[1]) +
                    static_cast<std::size_t>(j)];
    }
    double at(int i, int j) const {
        return data[static_cast<std::size_t>(i) * static_cast<std::size_t>(shape[1]) +
                    static_cast<std::size_t>(j)];
    }
    double& at(int i) { return data[static_cast<std::size_t>(i)]; }
    double at(int i) const { return data[static_cast<std::size_t>(i)]; }

    bool all_finite() const;
    void fill(double v);
    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    std::string shape_str() const;
};

// A trainable tensor: value plus an accumulated gradient of identical shape.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;

    Param() = default;
    Param(std::string n, Tensor v);

    void zero_grad() { grad.fill(0.0); }
    std::int64_t numel() const { return value.numel(); }
};

}  // namespace hmoe
