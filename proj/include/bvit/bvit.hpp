#pragma once

#include "bvit/analysis.hpp"
#include "bvit/attention.hpp"
#include "bvit/bittensor.hpp"
#include "bvit/config_io.hpp"
#include "bvit/errors.hpp"
#include "bvit/gradcheck.hpp"
#include "bvit/layers.hpp"
#include "bvit/model.hpp"
#include "bvit/quant.hpp"
#include "bvit/selftest.hpp"
#include "bvit/serialize.hpp"
#include "bvit/tensor.hpp"
#include "bvit/train.hpp"
