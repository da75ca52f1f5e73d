#pragma once

#include "agreid/autograd.hpp"
#include "agreid/core.hpp"
#include "agreid/image.hpp"
#include "agreid/synthgen.hpp"
#include "agreid/nn.hpp"
#include "agreid/aie.hpp"
#include "agreid/pacg.hpp"
#include "agreid/cpt.hpp"
#include "agreid/objective.hpp"
#include "agreid/evalkit.hpp"
#include "agreid/model.hpp"
#include "agreid/harness/train_config.hpp"
#include "agreid/harness/sampler.hpp"
#include "agreid/harness/augment.hpp"
#include "agreid/harness/schedule.hpp"
#include "agreid/harness/optimizer.hpp"
#include "agreid/harness/checkpoint.hpp"
#include "agreid/harness/presets.hpp"
#include "agreid/harness/trainer.hpp"
