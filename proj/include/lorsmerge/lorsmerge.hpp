// Copyright 2026 The lorsmerge Authors
// SPDX-License-Identifier: Apache-2.0

// Umbrella header.

#pragma once

#include "lorsmerge/checkpoint.hpp"
#include "lorsmerge/common.hpp"
#include "lorsmerge/experiment.hpp"
#include "lorsmerge/linalg.hpp"
#include "lorsmerge/merge.hpp"
#include "lorsmerge/metrics.hpp"
#include "lorsmerge/plan.hpp"
#include "lorsmerge/pruning.hpp"
#include "lorsmerge/tensor.hpp"
#include "lorsmerge/workbench.hpp"
