#pragma once

#include "shbmil/bench_harness.hpp"
#include "shbmil/common.hpp"
#include "shbmil/feature_store.hpp"
#include "shbmil/mil_models.hpp"
#include "shbmil/shift_metrics.hpp"
#include "shbmil/tsne.hpp"
