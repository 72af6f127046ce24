#pragma once

#include "gmpstar/checkpoint.hpp"
#include "gmpstar/distillation.hpp"
#include "gmpstar/encoder.hpp"
#include "gmpstar/optimizer.hpp"
#include "gmpstar/pruning.hpp"
#include "gmpstar/recipe.hpp"
#include "gmpstar/rng.hpp"
#include "gmpstar/schedules.hpp"
#include "gmpstar/sweep.hpp"
#include "gmpstar/task.hpp"
#include "gmpstar/tensor.hpp"
#include "gmpstar/trainer.hpp"
