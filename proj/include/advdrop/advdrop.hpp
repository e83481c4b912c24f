#pragma once

// Umbrella header: the whole library.

#include "common.hpp"
#include "tensor.hpp"
#include "distributions.hpp"
#include "dropout.hpp"
#include "network.hpp"
#include "data.hpp"
#include "training.hpp"
#include "eval.hpp"
#include "pruning.hpp"
#include "serialize.hpp"
#include "experiment.hpp"
