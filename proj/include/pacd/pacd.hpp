#pragma once

#include "pacd/common.hpp"
#include "pacd/glycemic.hpp"
#include "pacd/dataio.hpp"
#include "pacd/views.hpp"
#include "pacd/autograd.hpp"
#include "pacd/swin_crb.hpp"
#include "pacd/cnn_encoder.hpp"
#include "pacd/heads.hpp"
#include "pacd/metrics.hpp"
#include "pacd/optim.hpp"
#include "pacd/config.hpp"
#include "pacd/trainer.hpp"
#include "pacd/evalkit.hpp"
