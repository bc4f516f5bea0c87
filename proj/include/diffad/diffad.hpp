#pragma once

// Umbrella header.
#include "tensor.hpp"
#include "tape.hpp"
#include "ops.hpp"
#include "grad_check.hpp"
#include "wavelets.hpp"
#include "diffusion.hpp"
#include "denoiser.hpp"
#include "perception.hpp"
#include "scoring.hpp"
#include "io_util.hpp"
#include "checkpoint.hpp"
#include "training.hpp"
#include "data.hpp"
#include "pipeline.hpp"
#include "config.hpp"
