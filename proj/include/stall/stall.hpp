#pragma once

#include "stall/calibration.hpp"
#include "stall/embedseq.hpp"
#include "stall/error.hpp"
#include "stall/evalharness.hpp"
#include "stall/likelihood.hpp"
#include "stall/random.hpp"
#include "stall/scoring.hpp"
#include "stall/stattests.hpp"
#include "stall/whitening.hpp"
