#pragma once

#include "mhex/analysis.hpp"
#include "mhex/checkpoint.hpp"
#include "mhex/data.hpp"
#include "mhex/datagen.hpp"
#include "mhex/errors.hpp"
#include "mhex/hosts.hpp"
#include "mhex/kv_config.hpp"
#include "mhex/metrics.hpp"
#include "mhex/mhex_block.hpp"
#include "mhex/ops.hpp"
#include "mhex/rng.hpp"
#include "mhex/saliency.hpp"
#include "mhex/stats.hpp"
#include "mhex/tensor.hpp"
#include "mhex/train.hpp"
