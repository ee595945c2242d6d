#pragma once

#include "oucovit/nn/checkpoint.hpp"
#include "oucovit/nn/layers.hpp"
#include "oucovit/nn/model.hpp"
#include "oucovit/nn/optim.hpp"
#include "oucovit/nn/tensor.hpp"
