#pragma once

// Dense row-major NCHW tensor plus the seeded RNG used everywhere.
// Element type is a template parameter: float for training/inference,
// double for finite-difference gradient checking.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace twinlite {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

[[noreturn]] inline void fail(const std::string& msg) {
    throw std::invalid_argument(msg);
}

inline void require(bool ok, const std::string& msg) {
    if (!ok) fail(msg);
}

template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(Shape s) : shape(std::move(s)) {
        for (int64_t d : shape)
            require(d >= 1, "tensor: every dimension must be >= 1, got " + shape_str(shape));
        data.assign(static_cast<size_t>(shape_numel(shape)), T(0));
    }

    Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
        require(static_cast<int64_t>(data.size()) == shape_numel(shape),
                "tensor: " + std::to_string(data.size()) + " values do not fill shape " + shape_str(shape));
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

    static Tensor full(Shape s, T v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

    T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    // unchecked 4-D NCHW access
    T& at(int64_t n, int64_t c, int64_t y, int64_t x) {
        return data[static_cast<size_t>(((n * shape[1] + c) * shape[2] + y) * shape[3] + x)];
    }
    const T& at(int64_t n, int64_t c, int64_t y, int64_t x) const {
        return data[static_cast<size_t>(((n * shape[1] + c) * shape[2] + y) * shape[3] + x)];
    }

    // unchecked 3-D access
    T& at3(int64_t b, int64_t i, int64_t j) {
        return data[static_cast<size_t>((b * shape[1] + i) * shape[2] + j)];
    }
    const T& at3(int64_t b, int64_t i, int64_t j) const {
        return data[static_cast<size_t>((b * shape[1] + i) * shape[2] + j)];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename T>
const char* dtype_name();
template <>
inline const char* dtype_name<float>() { return "single"; }
template <>
inline const char* dtype_name<double>() { return "double"; }

// Deterministic RNG. The generator is mt19937_64 but the real-valued draws are
// hand-rolled so streams are identical across standard-library implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed ^ 0x9e3779b97f4a7c15ull) {
        // warm up past weak low-entropy seeds
        for (int i = 0; i < 4; ++i) next_u64();
    }

    uint64_t next_u64() {
        // xorshift* — trivially portable and plenty for data/weight generation
        state_ ^= state_ >> 12;
        state_ ^= state_ << 25;
        state_ ^= state_ >> 27;
        return state_ * 0x2545f4914f6cdd1dull;
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive bounds
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(uniform() * static_cast<double>(hi - lo + 1));
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // Box-Muller; 1-u keeps the log argument in (0, 1]
        double u1 = 1.0 - uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, double lo, double hi) {
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
}

template <typename T>
void fill_normal(Tensor<T>& t, Rng& rng, double mean, double stddev) {
    for (auto& v : t.data) v = static_cast<T>(mean + stddev * rng.normal());
}

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
    Tensor<To> out(t.shape);
    for (int64_t i = 0; i < t.numel(); ++i) out[i] = static_cast<To>(t[i]);
    return out;
}

}  // namespace twinlite
