#include "snls/memory.hpp"

#include <atomic>

namespace snls::memory {

namespace {
std::atomic<std::uint64_t> g_current{0};
std::atomic<std::uint64_t> g_peak{0};

void raise_peak(std::uint64_t candidate) {
    std::uint64_t prev = g_peak.load(std::memory_order_relaxed);
    while (prev < candidate &&
           !g_peak.compare_exchange_weak(prev, candidate, std::memory_order_relaxed)) {
    }
}
} // namespace

void reset() {
    g_current.store(0, std::memory_order_relaxed);
    g_peak.store(0, std::memory_order_relaxed);
}

std::uint64_t peak() { return g_peak.load(std::memory_order_relaxed); }

std::uint64_t current() { return g_current.load(std::memory_order_relaxed); }

void add(std::uint64_t bytes) {
    const std::uint64_t now = g_current.fetch_add(bytes, std::memory_order_relaxed) + bytes;
    raise_peak(now);
}

void sub(std::uint64_t bytes) { g_current.fetch_sub(bytes, std::memory_order_relaxed); }

} // namespace snls::memory
