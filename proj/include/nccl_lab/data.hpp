// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "nccl_lab/autodiff.hpp"

namespace nccl_lab {

struct Sample {
  std::vector<double> x;
  int label = 0;

  bool operator==(const Sample&) const = default;
};

using Dataset = std::vector<Sample>;

enum class Origin { Current, Buffer };

// 2N augmented views stacked row-wise; views 2i and 2i+1 share a source sample.
struct Batch {
  ad::Tensor inputs;
  std::vector<int> labels;
  std::vector<Origin> origins;

  std::size_t size() const { return labels.size(); }
};

}  // namespace nccl_lab
