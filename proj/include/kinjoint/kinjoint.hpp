#pragma once

// Umbrella header for the kinjoint library.

#include "kinjoint/augment.hpp"
#include "kinjoint/autograd.hpp"
#include "kinjoint/checkpoint.hpp"
#include "kinjoint/config.hpp"
#include "kinjoint/data.hpp"
#include "kinjoint/experiment.hpp"
#include "kinjoint/image.hpp"
#include "kinjoint/joint.hpp"
#include "kinjoint/metrics.hpp"
#include "kinjoint/models.hpp"
#include "kinjoint/nn.hpp"
#include "kinjoint/optim.hpp"
#include "kinjoint/rng.hpp"
#include "kinjoint/synth.hpp"
#include "kinjoint/tensor.hpp"
#include "kinjoint/trainer.hpp"
#include "kinjoint/types.hpp"
