#pragma once

#include "vegcast/baselines.hpp"
#include "vegcast/binary_io.hpp"
#include "vegcast/config.hpp"
#include "vegcast/error.hpp"
#include "vegcast/evaluation.hpp"
#include "vegcast/gradcheck.hpp"
#include "vegcast/metrics.hpp"
#include "vegcast/minicube.hpp"
#include "vegcast/model.hpp"
#include "vegcast/synthgen.hpp"
#include "vegcast/tensor.hpp"
#include "vegcast/training.hpp"
