#pragma once

#include "nutripred/error.hpp"
#include "nutripred/nutrients.hpp"
#include "nutripred/rng.hpp"
#include "nutripred/tensor.hpp"
#include "nutripred/nn.hpp"
#include "nutripred/config.hpp"
#include "nutripred/serialize.hpp"
#include "nutripred/backbone.hpp"
#include "nutripred/model.hpp"
#include "nutripred/loss.hpp"
#include "nutripred/optimizer.hpp"
#include "nutripred/image.hpp"
#include "nutripred/dataio.hpp"
#include "nutripred/evaluation.hpp"
#include "nutripred/checkpoint.hpp"
#include "nutripred/trainer.hpp"
#include "nutripred/synthdata.hpp"
