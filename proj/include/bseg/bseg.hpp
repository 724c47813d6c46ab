#pragma once

#include "bseg/autodiff.hpp"
#include "bseg/checkpoint.hpp"
#include "bseg/config.hpp"
#include "bseg/dataset.hpp"
#include "bseg/error.hpp"
#include "bseg/export.hpp"
#include "bseg/gradcheck.hpp"
#include "bseg/grid.hpp"
#include "bseg/metrics.hpp"
#include "bseg/network.hpp"
#include "bseg/objective.hpp"
#include "bseg/optimizer.hpp"
#include "bseg/pgm.hpp"
#include "bseg/rng.hpp"
#include "bseg/scheduler.hpp"
#include "bseg/selftest.hpp"
#include "bseg/trainer.hpp"
#include "bseg/uncertainty.hpp"
#include "bseg/variational.hpp"
