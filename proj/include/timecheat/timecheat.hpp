#pragma once

#include "timecheat/errors.hpp"
#include "timecheat/tensor.hpp"
#include "timecheat/autodiff.hpp"
#include "timecheat/params.hpp"
#include "timecheat/data.hpp"
#include "timecheat/synthetic.hpp"
#include "timecheat/patcher.hpp"
#include "timecheat/graph_embedder.hpp"
#include "timecheat/ci_encoder.hpp"
#include "timecheat/heads.hpp"
#include "timecheat/model.hpp"
#include "timecheat/metrics.hpp"
#include "timecheat/training.hpp"
