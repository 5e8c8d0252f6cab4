#pragma once

// Umbrella header: the whole library.

#include "common.hpp"
#include "types.hpp"
#include "criteria.hpp"
#include "glasso.hpp"
#include "two_step.hpp"
#include "em_observed.hpp"
#include "vem.hpp"
#include "zero_inflated.hpp"
#include "parallel.hpp"
#include "selection.hpp"
#include "simulate.hpp"
#include "metrics.hpp"
#include "io.hpp"
