#pragma once

// Umbrella header.

#include "trimlab/autograd.hpp"
#include "trimlab/checkpoint.hpp"
#include "trimlab/config.hpp"
#include "trimlab/core.hpp"
#include "trimlab/costbench.hpp"
#include "trimlab/data.hpp"
#include "trimlab/kernels.hpp"
#include "trimlab/masking.hpp"
#include "trimlab/nn.hpp"
#include "trimlab/pipeline.hpp"
#include "trimlab/serialize.hpp"
#include "trimlab/tensor.hpp"
#include "trimlab/training.hpp"
#include "trimlab/trimming.hpp"
