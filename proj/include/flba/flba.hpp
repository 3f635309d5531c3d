// Copyright 2026 The fewshot-backdoor Authors
//
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
// limitations under the License.

// Umbrella header.

#ifndef FLBA_FLBA_HPP_
#define FLBA_FLBA_HPP_

#include "flba/adapt.hpp"
#include "flba/artifact_io.hpp"
#include "flba/common.hpp"
#include "flba/config.hpp"
#include "flba/dataset.hpp"
#include "flba/defense.hpp"
#include "flba/embedding.hpp"
#include "flba/experiment.hpp"
#include "flba/head.hpp"
#include "flba/image.hpp"
#include "flba/image_io.hpp"
#include "flba/perturb.hpp"
#include "flba/poison.hpp"
#include "flba/pretrain.hpp"
#include "flba/trigger.hpp"

#endif  // FLBA_FLBA_HPP_
