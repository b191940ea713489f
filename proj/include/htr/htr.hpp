#pragma once

// Umbrella header for the whole toolkit.

#include "htr/charset.hpp"
#include "htr/checkpoint.hpp"
#include "htr/cost.hpp"
#include "htr/ctc.hpp"
#include "htr/dataset.hpp"
#include "htr/gru.hpp"
#include "htr/image.hpp"
#include "htr/layers.hpp"
#include "htr/metrics.hpp"
#include "htr/model.hpp"
#include "htr/preprocess.hpp"
#include "htr/tensor.hpp"
#include "htr/threading.hpp"
#include "htr/trainer.hpp"
#include "htr/util.hpp"
#include "htr/wbs.hpp"
