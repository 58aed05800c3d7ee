#pragma once

#include "vcmamba/tensor.hpp"
#include "vcmamba/ops.hpp"
#include "vcmamba/gradcheck.hpp"
#include "vcmamba/random.hpp"
#include "vcmamba/scan_paths.hpp"
#include "vcmamba/ssm.hpp"
#include "vcmamba/blocks.hpp"
#include "vcmamba/model.hpp"
#include "vcmamba/config.hpp"
#include "vcmamba/checkpoint.hpp"
#include "vcmamba/optim.hpp"
#include "vcmamba/data.hpp"
#include "vcmamba/train.hpp"
#include "vcmamba/invariants.hpp"
