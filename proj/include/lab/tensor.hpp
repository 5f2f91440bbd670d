#pragma once

#include <memory>
#include <string>
#include <vector>

namespace lab {

class Tape;

// Dense row-major f64 array with an optional gradient buffer of identical
// length. Rank is 1 or 2 everywhere in this codebase.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, std::vector<double> data);

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, double v);

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    long size() const { return static_cast<long>(data_.size()); }

    // Rank-2 accessors; a rank-1 tensor counts as a single row.
    int rows() const { return rank() == 2 ? shape_[0] : 1; }
    int cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 0); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& at(long i) { return data_[static_cast<std::size_t>(i)]; }
    double at(long i) const { return data_[static_cast<std::size_t>(i)]; }
    double& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols() + c]; }

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool b) { requires_grad_ = b; }

    bool has_grad() const { return !grad_.empty(); }
    // Throws ContractError when no gradient has been populated.
    std::vector<double>& grad();
    const std::vector<double>& grad() const;
    // Allocates (zeroed) on first use.
    std::vector<double>& grad_buffer();
    void zero_grad();
    void clear_grad() { grad_.clear(); }

    bool all_finite() const;
    std::string shape_str() const;

    // Debug name; set for model parameters so contract errors can name them.
    std::string name;

private:
    std::vector<int> shape_;
    std::vector<double> data_;
    std::vector<double> grad_;
    bool requires_grad_ = false;

    friend class Tape;
    const Tape* tape_tag_ = nullptr;
};

using TensorPtr = std::shared_ptr<Tensor>;

// Leaf constructors. `constant` never participates in gradients; `param` does.
TensorPtr constant(Tensor value);
TensorPtr param(Tensor value, std::string name = "");

Tensor transpose(const Tensor& m);

}  // namespace lab
