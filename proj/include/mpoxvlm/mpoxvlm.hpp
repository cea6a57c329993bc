#pragma once

// Umbrella header for the mpoxvlm library.

#include "mpoxvlm/common.hpp"
#include "mpoxvlm/clinical_codes.hpp"
#include "mpoxvlm/image.hpp"
#include "mpoxvlm/png_io.hpp"
#include "mpoxvlm/data_synth.hpp"
#include "mpoxvlm/tokenizer.hpp"
#include "mpoxvlm/nn.hpp"
#include "mpoxvlm/encoders.hpp"
#include "mpoxvlm/fusion.hpp"
#include "mpoxvlm/metrics.hpp"
#include "mpoxvlm/checkpoint.hpp"
#include "mpoxvlm/pipeline.hpp"
#include "mpoxvlm/trainer.hpp"
#include "mpoxvlm/gradcheck.hpp"
#include "mpoxvlm/config.hpp"
#include "mpoxvlm/eval_harness.hpp"
