#pragma once

// Umbrella header.

#include "jooci/archive.hpp"
#include "jooci/config.hpp"
#include "jooci/data.hpp"
#include "jooci/gradcheck.hpp"
#include "jooci/gradcheck_suite.hpp"
#include "jooci/labels.hpp"
#include "jooci/losses.hpp"
#include "jooci/model.hpp"
#include "jooci/nn.hpp"
#include "jooci/ops.hpp"
#include "jooci/optim.hpp"
#include "jooci/probe.hpp"
#include "jooci/rng.hpp"
#include "jooci/signal.hpp"
#include "jooci/tensor.hpp"
#include "jooci/trainer.hpp"
