#pragma once

#include "mtabl/checkpoint.hpp"
#include "mtabl/data.hpp"
#include "mtabl/error.hpp"
#include "mtabl/experiment.hpp"
#include "mtabl/layers.hpp"
#include "mtabl/matrix.hpp"
#include "mtabl/metrics.hpp"
#include "mtabl/network.hpp"
#include "mtabl/optim.hpp"
#include "mtabl/run_config.hpp"
#include "mtabl/verify.hpp"
