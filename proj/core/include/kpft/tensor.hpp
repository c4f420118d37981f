#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace kpft {

using index = std::ptrdiff_t;

// Allocation instrumentation for the `bench` command. When enabled, every
// tensor allocation is recorded so the benchmark can assert that the
// block-structured apply path never materializes a full k x d weight.
struct AllocStats {
    bool enabled = false;
    size_t current_bytes = 0;
    size_t peak_bytes = 0;
    std::vector<std::pair<index, index>> shapes;  // recorded 2-d shapes

    void reset() {
        current_bytes = 0;
        peak_bytes = 0;
        shapes.clear();
    }
};

AllocStats& alloc_stats();

namespace detail {
void record_alloc(index rows, index cols, size_t bytes);
}

// Dense row-major matrix. f64 is the reference scalar for every correctness
// statement in this library; f32 exists for storage and is carried through
// the checkpoint format.
template <typename T>
struct Mat {
    index rows = 0;
    index cols = 0;
    std::vector<T> data;

    Mat() = default;
    Mat(index r, index c) : rows(r), cols(c), data(static_cast<size_t>(r * c), T(0)) {
        if (r < 0 || c < 0) throw std::invalid_argument("Mat: negative dimension");
        detail::record_alloc(r, c, data.size() * sizeof(T));
    }
    Mat(index r, index c, std::vector<T> d) : rows(r), cols(c), data(std::move(d)) {
        if (static_cast<size_t>(r * c) != data.size())
            throw std::invalid_argument("Mat: data length does not match rows*cols");
        detail::record_alloc(r, c, data.size() * sizeof(T));
    }
    Mat(std::initializer_list<std::initializer_list<T>> lists) {
        rows = static_cast<index>(lists.size());
        cols = rows == 0 ? 0 : static_cast<index>(lists.begin()->size());
        data.reserve(static_cast<size_t>(rows * cols));
        for (const auto& row : lists) {
            if (static_cast<index>(row.size()) != cols)
                throw std::invalid_argument("Mat: ragged initializer");
            data.insert(data.end(), row.begin(), row.end());
        }
    }

    T& at(index r, index c) { return data[static_cast<size_t>(r * cols + c)]; }
    const T& at(index r, index c) const { return data[static_cast<size_t>(r * cols + c)]; }
    size_t size() const { return data.size(); }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

// Batched matrices, one contiguous row-major block per batch entry.
template <typename T>
struct Batched {
    index batch = 0;
    index rows = 0;
    index cols = 0;
    std::vector<T> data;

    Batched() = default;
    Batched(index b, index r, index c)
        : batch(b), rows(r), cols(c), data(static_cast<size_t>(b * r * c), T(0)) {
        if (b < 0 || r < 0 || c < 0) throw std::invalid_argument("Batched: negative dimension");
    }

    T& at(index b, index r, index c) {
        return data[static_cast<size_t>((b * rows + r) * cols + c)];
    }
    const T& at(index b, index r, index c) const {
        return data[static_cast<size_t>((b * rows + r) * cols + c)];
    }
    size_t size() const { return data.size(); }
};

using Tensor2 = Mat<double>;
using Tensor3 = Batched<double>;
using Tensor2f = Mat<float>;

namespace detail {
inline std::string shape_str(index r, index c) {
    return std::to_string(r) + "x" + std::to_string(c);
}
}  // namespace detail

// Kronecker product: block (i,j) of the result is a(i,j) * b.
// a[m x f] kron b[p x q] -> [mp x fq].
template <typename T>
Mat<T> kron(const Mat<T>& a, const Mat<T>& b) {
    Mat<T> out(a.rows * b.rows, a.cols * b.cols);
    for (index i = 0; i < a.rows; ++i) {
        for (index j = 0; j < a.cols; ++j) {
            const T aij = a.at(i, j);
            for (index p = 0; p < b.rows; ++p) {
                T* dst = &out.at(i * b.rows + p, j * b.cols);
                const T* src = &b.at(p, 0);
                for (index q = 0; q < b.cols; ++q) dst[q] = aij * src[q];
            }
        }
    }
    return out;
}

// plain matrix product, deterministic left-to-right accumulation over the
// shared dimension
template <typename T>
Mat<T> matmul(const Mat<T>& a, const Mat<T>& b) {
    if (a.cols != b.rows)
        throw std::invalid_argument("matmul: inner dimensions differ, " +
                                    detail::shape_str(a.rows, a.cols) + " * " +
                                    detail::shape_str(b.rows, b.cols));
    Mat<T> out(a.rows, b.cols);
    for (index i = 0; i < a.rows; ++i) {
        T* orow = &out.at(i, 0);
        for (index l = 0; l < a.cols; ++l) {
            const T ail = a.at(i, l);
            if (ail == T(0)) continue;
            const T* brow = &b.at(l, 0);
            for (index j = 0; j < b.cols; ++j) orow[j] += ail * brow[j];
        }
    }
    return out;
}

// Product of two rank-r factors, s[a x r] * t[r x b]. Same arithmetic as
// matmul; named so the rank-r structure is visible at call sites. r = 0 is
// rejected rather than treated as an empty sum.
template <typename T>
Mat<T> outer(const Mat<T>& s, const Mat<T>& t) {
    if (s.cols < 1) throw std::invalid_argument("outer: rank dimension must be >= 1");
    return matmul(s, t);
}

template <typename T>
Mat<T> add(const Mat<T>& a, const Mat<T>& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("add: shape mismatch, " + detail::shape_str(a.rows, a.cols) +
                                    " vs " + detail::shape_str(b.rows, b.cols));
    Mat<T> out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return out;
}

template <typename T>
Mat<T> sub(const Mat<T>& a, const Mat<T>& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("sub: shape mismatch, " + detail::shape_str(a.rows, a.cols) +
                                    " vs " + detail::shape_str(b.rows, b.cols));
    Mat<T> out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.data[i];
    return out;
}

template <typename T>
Mat<T> scale(const Mat<T>& a, T factor) {
    Mat<T> out = a;
    for (auto& v : out.data) v *= factor;
    return out;
}

template <typename T>
Mat<T> transpose(const Mat<T>& a) {
    Mat<T> out(a.cols, a.rows);
    for (index i = 0; i < a.rows; ++i)
        for (index j = 0; j < a.cols; ++j) out.at(j, i) = a.at(i, j);
    return out;
}

// reshape preserves row-major element order
template <typename T>
Mat<T> reshape(const Mat<T>& a, index r, index c) {
    if (r * c != a.rows * a.cols)
        throw std::invalid_argument("reshape: element count changes, " +
                                    detail::shape_str(a.rows, a.cols) + " -> " +
                                    detail::shape_str(r, c));
    Mat<T> out = a;
    out.rows = r;
    out.cols = c;
    return out;
}

// Tensor3 <-> Tensor2 flattening (batch*rows, cols), row-major order kept
template <typename T>
Mat<T> flatten(const Batched<T>& x) {
    Mat<T> out;
    out.rows = x.batch * x.rows;
    out.cols = x.cols;
    out.data = x.data;
    return out;
}

template <typename T>
Batched<T> unflatten(const Mat<T>& x, index batch) {
    if (batch < 1 || x.rows % batch != 0)
        throw std::invalid_argument("unflatten: rows not divisible by batch");
    Batched<T> out;
    out.batch = batch;
    out.rows = x.rows / batch;
    out.cols = x.cols;
    out.data = x.data;
    return out;
}

template <typename T>
Mat<T> identity(index n) {
    Mat<T> out(n, n);
    for (index i = 0; i < n; ++i) out.at(i, i) = T(1);
    return out;
}

inline Tensor2 eye(index n) { return identity<double>(n); }

}  // namespace kpft
