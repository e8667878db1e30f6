#pragma once

#include "dmalign/dataset.hpp"
#include "dmalign/diffusion.hpp"
#include "dmalign/dmp.hpp"
#include "dmalign/denoiser.hpp"
#include "dmalign/eval.hpp"
#include "dmalign/latent_codec.hpp"
#include "dmalign/model.hpp"
#include "dmalign/sampler.hpp"
#include "dmalign/scene_sim.hpp"
#include "dmalign/trainer.hpp"
