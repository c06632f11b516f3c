#pragma once

#include "psp/autodiff.hpp"
#include "psp/checkpoint.hpp"
#include "psp/corpus.hpp"
#include "psp/decoding.hpp"
#include "psp/errors.hpp"
#include "psp/evaluation.hpp"
#include "psp/model.hpp"
#include "psp/pseudodata.hpp"
#include "psp/rouge.hpp"
#include "psp/tensor.hpp"
#include "psp/training.hpp"
