#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "facediff/errors.hpp"

namespace facediff {

/// Dense row-major tensor of doubles. Rank 1..4 in practice:
/// images are [C,H,W] or batched [B,C,H,W], matrices [rows,cols],
/// vectors [n], scalars [1].
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<long> shape) : shape_(std::move(shape)) {
        long n = 1;
        for (long d : shape_) {
            if (d <= 0) throw DimensionError("Tensor dimensions must be positive, got " + shape_str());
            n *= d;
        }
        data_.assign(static_cast<size_t>(n), 0.0);
    }

    Tensor(std::initializer_list<long> shape) : Tensor(std::vector<long>(shape)) {}

    static Tensor full(std::vector<long> shape, double v) {
        Tensor t(std::move(shape));
        for (double& x : t.data_) x = v;
        return t;
    }

    static Tensor scalar(double v) {
        Tensor t({1});
        t[0] = v;
        return t;
    }

    const std::vector<long>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    long dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    long numel() const { return static_cast<long>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](long i) { return data_[static_cast<size_t>(i)]; }
    double operator[](long i) const { return data_[static_cast<size_t>(i)]; }

    // Flat index helpers for [C,H,W] and [B,C,H,W] layouts.
    long idx3(long c, long y, long x) const { return (c * shape_[1] + y) * shape_[2] + x; }
    long idx4(long b, long c, long y, long x) const {
        return ((b * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
    }
    double& at3(long c, long y, long x) { return data_[static_cast<size_t>(idx3(c, y, x))]; }
    double at3(long c, long y, long x) const { return data_[static_cast<size_t>(idx3(c, y, x))]; }
    double& at4(long b, long c, long y, long x) { return data_[static_cast<size_t>(idx4(b, c, y, x))]; }
    double at4(long b, long c, long y, long x) const { return data_[static_cast<size_t>(idx4(b, c, y, x))]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    void fill(double v) {
        for (double& x : data_) x = v;
    }

    double min() const {
        double m = data_.empty() ? 0.0 : data_[0];
        for (double v : data_) m = std::min(m, v);
        return m;
    }

    double max() const {
        double m = data_.empty() ? 0.0 : data_[0];
        for (double v : data_) m = std::max(m, v);
        return m;
    }

    double sum() const {
        double s = 0.0;
        for (double v : data_) s += v;
        return s;
    }

    double mean() const { return data_.empty() ? 0.0 : sum() / static_cast<double>(numel()); }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (i) os << ',';
            os << shape_[i];
        }
        os << ']';
        return os.str();
    }

private:
    std::vector<long> shape_;
    std::vector<double> data_;
};

/// Images and batches of images are plain tensors; the alias documents intent
/// at API boundaries ([B,C,H,W] or [C,H,W], values in [-1,1]).
using ImageTensor = Tensor;

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
}

}  // namespace facediff
