#include "hmoe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace hmoe {

std::int64_t Tensor::numel_of(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d < 0) throw DimError("negative dimension");
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != static_cast<std::int64_t>(data.size())) {
        throw DimError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str());
    }
}

Tensor Tensor::zeros(std::vector<int> shape) {
    std::int64_t n = numel_of(shape);
    Tensor t;
    t.shape = std::move(shape);
    t.data.assign(static_cast<std::size_t>(n), 0.0);
    return t;
}

Tensor Tensor::full(std::vector<int> shape, double value) {
    Tensor t = zeros(std::move(shape));
    t.fill(value);
    return t;
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::row_major(int rows, int cols, std::vector<double> d) {
    return Tensor({rows, cols}, std::move(d));
}

bool Tensor::all_finite() const {
    for (double v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void Tensor::fill(double v) { std::fill(data.begin(), data.end(), v); }

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

Param::Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
    grad = Tensor::zeros(value.shape);
}

}  // namespace hmoe
