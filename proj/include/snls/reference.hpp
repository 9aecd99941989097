#pragma once

#include "snls/aggregate.hpp"
#include "snls/search.hpp"

// Single-threaded reference implementations kept alongside the OpenMP
// kernels. They follow the plain textbook structure (materialize the whole
// window grid, sort per row; scatter patches query by query) and are the
// comparison baseline for the kernel tests and the benchmark runner.
namespace snls::reference {

SearchResult shifted_nls_forward(const VideoTensor& q, const VideoTensor& k,
                                 const FlowField& fflow, const FlowField& bflow,
                                 const SearchConfig& cfg);

SearchResult nls_forward(const VideoTensor& q, const VideoTensor& k, const SearchConfig& cfg);

WpsumResult wpsum(const VideoTensor& v, const WeightTensor& weights, const OffsetTensor& offsets,
                  const SearchConfig& cfg);

StackedTensor gather_stack(const VideoTensor& v, const WeightTensor& weights,
                           const OffsetTensor& offsets, const SearchConfig& cfg);

} // namespace snls::reference
