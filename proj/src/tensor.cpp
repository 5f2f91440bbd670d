#include "lab/tensor.hpp"

#include <cmath>
#include <sstream>

#include "lab/errors.hpp"

namespace lab {

namespace {

long shape_product(const std::vector<int>& shape) {
    long n = 1;
    for (int d : shape) {
        if (d <= 0) throw DimensionError("tensor dimensions must be positive");
        n *= d;
    }
    return n;
}

}  // namespace

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(shape_product(shape_)), 0.0);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_product(shape_) != static_cast<long>(data_.size())) {
        throw DimensionError("tensor data length does not match shape " + shape_str());
    }
}

Tensor Tensor::full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = v;
    return t;
}

std::vector<double>& Tensor::grad() {
    if (grad_.empty()) {
        throw ContractError("missing gradient on tensor" + (name.empty() ? "" : " '" + name + "'"));
    }
    return grad_;
}

const std::vector<double>& Tensor::grad() const {
    if (grad_.empty()) {
        throw ContractError("missing gradient on tensor" + (name.empty() ? "" : " '" + name + "'"));
    }
    return grad_;
}

std::vector<double>& Tensor::grad_buffer() {
    if (grad_.empty()) grad_.assign(data_.size(), 0.0);
    return grad_;
}

void Tensor::zero_grad() {
    grad_.assign(data_.size(), 0.0);
}

bool Tensor::all_finite() const {
    for (double x : data_) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << "x";
        os << shape_[i];
    }
    os << "]";
    return os.str();
}

TensorPtr constant(Tensor value) {
    auto t = std::make_shared<Tensor>(std::move(value));
    t->set_requires_grad(false);
    return t;
}

TensorPtr param(Tensor value, std::string name) {
    auto t = std::make_shared<Tensor>(std::move(value));
    t->set_requires_grad(true);
    t->name = std::move(name);
    return t;
}

Tensor transpose(const Tensor& m) {
    if (m.rank() != 2) throw DimensionError("transpose expects a rank-2 tensor, got " + m.shape_str());
    Tensor out({m.dim(1), m.dim(0)});
    for (int r = 0; r < m.dim(0); ++r) {
        for (int c = 0; c < m.dim(1); ++c) {
            out.at(c, r) = m.at(r, c);
        }
    }
    return out;
}

}  // namespace lab
