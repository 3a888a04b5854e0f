// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "d2m/cascade.hpp"
#include "d2m/error.hpp"
#include "d2m/evaluate.hpp"
#include "d2m/hesitation.hpp"
#include "d2m/metrics.hpp"
#include "d2m/normalize.hpp"
#include "d2m/parallel.hpp"
#include "d2m/probe_file.hpp"
#include "d2m/probes.hpp"
#include "d2m/random.hpp"
#include "d2m/synth.hpp"
#include "d2m/train.hpp"
#include "d2m/trajectory.hpp"
