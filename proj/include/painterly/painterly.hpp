#pragma once

#include "painterly/backbone.hpp"
#include "painterly/errors.hpp"
#include "painterly/estimator.hpp"
#include "painterly/harmonizer.hpp"
#include "painterly/lbfgs.hpp"
#include "painterly/losses.hpp"
#include "painterly/mapping.hpp"
#include "painterly/postprocess.hpp"
#include "painterly/tensor.hpp"
