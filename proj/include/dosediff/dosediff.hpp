#pragma once

#include "tensor.hpp"
#include "rng.hpp"
#include "records.hpp"
#include "metrics.hpp"
#include "volume_io.hpp"
#include "wavelet.hpp"
#include "conv.hpp"
#include "autograd.hpp"
#include "ops.hpp"
#include "nn.hpp"
#include "attention.hpp"
#include "hwa.hpp"
#include "diffusion.hpp"
#include "denoiser.hpp"
#include "checkpoint.hpp"
#include "phantom.hpp"
#include "optim.hpp"
#include "harness.hpp"
