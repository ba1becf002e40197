#pragma once

#include "bissl/autodiff.hpp"
#include "bissl/batch_stack.hpp"
#include "bissl/checkpoint.hpp"
#include "bissl/config.hpp"
#include "bissl/datagen.hpp"
#include "bissl/errors.hpp"
#include "bissl/hypergrad.hpp"
#include "bissl/losses.hpp"
#include "bissl/models.hpp"
#include "bissl/objective.hpp"
#include "bissl/optim.hpp"
#include "bissl/oracle.hpp"
#include "bissl/params.hpp"
#include "bissl/pipeline.hpp"
#include "bissl/rng.hpp"
#include "bissl/tensor.hpp"
#include "bissl/train.hpp"
#include "bissl/verify.hpp"
