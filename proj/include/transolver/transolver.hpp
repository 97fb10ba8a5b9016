#pragma once

#include "transolver/autodiff.hpp"
#include "transolver/checkpoint.hpp"
#include "transolver/complexity.hpp"
#include "transolver/counters.hpp"
#include "transolver/error.hpp"
#include "transolver/geometry.hpp"
#include "transolver/inference_cache.hpp"
#include "transolver/linalg.hpp"
#include "transolver/mesh.hpp"
#include "transolver/mesh_io.hpp"
#include "transolver/metrics.hpp"
#include "transolver/model.hpp"
#include "transolver/physattn.hpp"
#include "transolver/train.hpp"
#include "transolver/verify.hpp"
