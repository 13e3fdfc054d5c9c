#pragma once

#include "statpool/frame_sequence.hpp"
#include "statpool/moments.hpp"
#include "statpool/pooling.hpp"
#include "statpool/seed.hpp"
#include "statpool/text_io.hpp"
#include "statpool/encoder.hpp"
#include "statpool/synthdata.hpp"
#include "statpool/scoring.hpp"
#include "statpool/probe.hpp"
#include "statpool/experiment.hpp"
