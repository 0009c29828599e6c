#pragma once

#include "tslab/error.hpp"
#include "tslab/linalg.hpp"
#include "tslab/net.hpp"
#include "tslab/teacher.hpp"
#include "tslab/beta.hpp"
#include "tslab/dynamics.hpp"
#include "tslab/metrics.hpp"
#include "tslab/config.hpp"
#include "tslab/report.hpp"
#include "tslab/experiment.hpp"
