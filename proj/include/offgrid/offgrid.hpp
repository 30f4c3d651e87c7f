#pragma once

// Off-grid sparse Bayesian channel estimation for arbitrary 2D antenna
// arrays: steering models, cluster channel simulation, the block-MM
// estimators (downlink-only, planar 2D, uplink-aided) and the DFT / l1
// baselines, plus the benchmark harness.

#include "array_model.hpp"
#include "baselines.hpp"
#include "bench.hpp"
#include "channel_sim.hpp"
#include "joint_uplink.hpp"
#include "offgrid_refine.hpp"
#include "rng.hpp"
#include "sbl_core.hpp"
#include "types.hpp"
