// ----------------------------------------------------------------------------
// Copyright 2026 The depthfuse Authors
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// ----------------------------------------------------------------------------

#pragma once

#include "depthfuse/error.hpp"
#include "depthfuse/rng.hpp"
#include "depthfuse/tensor.hpp"
#include "depthfuse/ops.hpp"
#include "depthfuse/param.hpp"
#include "depthfuse/optim.hpp"
#include "depthfuse/gradcheck.hpp"
#include "depthfuse/encoder.hpp"
#include "depthfuse/fusion.hpp"
#include "depthfuse/data.hpp"
#include "depthfuse/metrics.hpp"
#include "depthfuse/config.hpp"
#include "depthfuse/io.hpp"
#include "depthfuse/checkpoint.hpp"
#include "depthfuse/train.hpp"
#include "depthfuse/report.hpp"
#include "depthfuse/verify.hpp"
