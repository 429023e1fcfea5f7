#pragma once

#include "physiosync/errors.hpp"
#include "physiosync/io.hpp"
#include "physiosync/ad/tensor.hpp"
#include "physiosync/ad/ops.hpp"
#include "physiosync/ad/nn.hpp"
#include "physiosync/ad/gradcheck.hpp"
#include "physiosync/ad/checkpoint.hpp"
#include "physiosync/dataset.hpp"
#include "physiosync/augment.hpp"
#include "physiosync/encoder.hpp"
#include "physiosync/contrastive.hpp"
#include "physiosync/fusion.hpp"
#include "physiosync/optim.hpp"
#include "physiosync/metrics.hpp"
#include "physiosync/synth.hpp"
#include "physiosync/config.hpp"
#include "physiosync/trainer.hpp"
#include "physiosync/selfcheck.hpp"
