#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace snls::memory {

// Byte accounting for auxiliary allocations made inside library kernels.
// The counters are deterministic: kernels register their workspaces from the
// orchestrating thread before entering parallel regions, so the peak for a
// given call sequence does not depend on scheduling. OS-level RSS is never
// consulted.

void reset();
std::uint64_t peak();
std::uint64_t current();
void add(std::uint64_t bytes);
void sub(std::uint64_t bytes);

// Holds a byte count on the running total for the lifetime of a kernel call.
// Used for result tensors, which outlive the call but must count toward its
// peak alongside the workspaces.
class TransientCharge {
public:
    explicit TransientCharge(std::uint64_t bytes) : bytes_(bytes) { add(bytes_); }
    ~TransientCharge() { sub(bytes_); }
    TransientCharge(const TransientCharge&) = delete;
    TransientCharge& operator=(const TransientCharge&) = delete;

private:
    std::uint64_t bytes_;
};

// Workspace vector registered with the accounting above.
template <typename T>
class TrackedBuffer {
public:
    explicit TrackedBuffer(std::size_t n) : v_(n) { add(bytes()); }
    ~TrackedBuffer() { sub(bytes()); }
    TrackedBuffer(const TrackedBuffer&) = delete;
    TrackedBuffer& operator=(const TrackedBuffer&) = delete;

    T* data() { return v_.data(); }
    const T* data() const { return v_.data(); }
    T& operator[](std::size_t i) { return v_[i]; }
    const T& operator[](std::size_t i) const { return v_[i]; }
    std::size_t size() const { return v_.size(); }
    std::uint64_t bytes() const { return std::uint64_t(v_.size()) * sizeof(T); }

private:
    std::vector<T> v_;
};

} // namespace snls::memory
