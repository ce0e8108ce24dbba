#pragma once

// Allocation accounting for trainable-state scratch buffers. Optimizer code
// allocates its per-step temporaries through TrackedBuffer so tests can
// assert how large the working set got (peak bytes, largest single buffer).

#include <algorithm>
#include <cstddef>
#include <vector>

namespace quzo::memory {

struct Tracker {
    std::size_t current_bytes = 0;
    std::size_t peak_bytes = 0;
    std::size_t largest_elements = 0;
    std::size_t allocations = 0;

    void acquire(std::size_t elements, std::size_t bytes) {
        current_bytes += bytes;
        peak_bytes = std::max(peak_bytes, current_bytes);
        largest_elements = std::max(largest_elements, elements);
        ++allocations;
    }
    void release(std::size_t bytes) { current_bytes -= bytes; }
    void reset() { *this = Tracker{}; }
};

inline Tracker& tracker() {
    thread_local Tracker t;
    return t;
}

/// Charges an allocation made elsewhere for as long as the guard lives.
class ScopedCharge {
public:
    ScopedCharge(std::size_t elements, std::size_t bytes) : bytes_(bytes) { tracker().acquire(elements, bytes); }
    ~ScopedCharge() { tracker().release(bytes_); }
    ScopedCharge(const ScopedCharge&) = delete;
    ScopedCharge& operator=(const ScopedCharge&) = delete;

private:
    std::size_t bytes_;
};

template <typename T>
class TrackedBuffer {
public:
    explicit TrackedBuffer(std::size_t n, T fill = T{}) : data_(n, fill) {
        tracker().acquire(n, n * sizeof(T));
    }
    ~TrackedBuffer() { tracker().release(data_.size() * sizeof(T)); }

    TrackedBuffer(const TrackedBuffer&) = delete;
    TrackedBuffer& operator=(const TrackedBuffer&) = delete;

    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }
    std::size_t size() const { return data_.size(); }
    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    auto begin() { return data_.begin(); }
    auto end() { return data_.end(); }
    auto begin() const { return data_.begin(); }
    auto end() const { return data_.end(); }

private:
    std::vector<T> data_;
};

} // namespace quzo::memory
