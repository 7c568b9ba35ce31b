#pragma once

#include "msq/common.hpp"
#include "msq/csv.hpp"
#include "msq/datasets.hpp"
#include "msq/model_store.hpp"
#include "msq/net.hpp"
#include "msq/packed.hpp"
#include "msq/quantizers.hpp"
#include "msq/tensor.hpp"
#include "msq/trainer.hpp"
#include "msq/wavelet.hpp"
