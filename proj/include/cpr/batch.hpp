#pragma once

#include "cpr/physiomask.hpp"
#include "cpr/signals.hpp"
#include "cpr/tensor.hpp"

#include <span>
#include <string>
#include <vector>

namespace cpr {

/// Records stacked into network-ready tensors.
template <typename S>
struct LabeledBatch {
  Tensor<S> x;       // [N, leads, samples], normalised per record
  Tensor<S> labels;  // [N, classes]
  Tensor<S> mask;    // [N, leads, samples]; empty when no masks were supplied
  std::vector<std::string> ids;
  double fs = 0.0;

  Index size() const { return x.empty() ? 0 : x.dim(0); }
  LabeledBatch slice(Index begin, Index end) const;
  LabeledBatch gather(std::span<const Index> rows) const;
};

/// Stacks records; masks (if given) must be aligned with records by position.
template <typename S>
LabeledBatch<S> make_batch(const std::vector<EcgRecord>& records,
                           const std::vector<PhysioMask>* masks = nullptr, bool normalize = true);

// Row range / row selection on the leading axis.
template <typename S> Tensor<S> slice_rows(const Tensor<S>& t, Index begin, Index end);
template <typename S> Tensor<S> gather_rows(const Tensor<S>& t, std::span<const Index> rows);

}  // namespace cpr
