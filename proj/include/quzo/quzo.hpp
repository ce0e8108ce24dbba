#pragma once

#include "quzo/errors.hpp"
#include "quzo/tensor.hpp"
#include "quzo/rng.hpp"
#include "quzo/quant.hpp"
#include "quzo/serialize.hpp"
#include "quzo/memory.hpp"
#include "quzo/model.hpp"
#include "quzo/checkpoint.hpp"
#include "quzo/data.hpp"
#include "quzo/estimators.hpp"
#include "quzo/trainer.hpp"
#include "quzo/analysis.hpp"
