// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "nccl_lab/autodiff.hpp"
#include "nccl_lab/config.hpp"
#include "nccl_lab/continual.hpp"
#include "nccl_lab/data.hpp"
#include "nccl_lab/error.hpp"
#include "nccl_lab/eval.hpp"
#include "nccl_lab/experiment.hpp"
#include "nccl_lab/geometry.hpp"
#include "nccl_lab/losses.hpp"
#include "nccl_lab/model.hpp"
#include "nccl_lab/random.hpp"
#include "nccl_lab/record.hpp"
#include "nccl_lab/samix.hpp"
