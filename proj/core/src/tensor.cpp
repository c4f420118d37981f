#include "kpft/tensor.hpp"

namespace kpft {

AllocStats& alloc_stats() {
    static AllocStats stats;
    return stats;
}

namespace detail {

void record_alloc(index rows, index cols, size_t bytes) {
    AllocStats& s = alloc_stats();
    if (!s.enabled || bytes == 0) return;
    s.current_bytes += bytes;
    if (s.current_bytes > s.peak_bytes) s.peak_bytes = s.current_bytes;
    s.shapes.emplace_back(rows, cols);
}

}  // namespace detail
}  // namespace kpft
