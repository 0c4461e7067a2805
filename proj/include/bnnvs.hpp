#pragma once

#include "bnnvs/error.hpp"
#include "bnnvs/rng.hpp"
#include "bnnvs/parallel.hpp"
#include "bnnvs/net.hpp"
#include "bnnvs/hmc.hpp"
#include "bnnvs/importance.hpp"
#include "bnnvs/select.hpp"
#include "bnnvs/diagnostics.hpp"
#include "bnnvs/synth.hpp"
#include "bnnvs/runner.hpp"
