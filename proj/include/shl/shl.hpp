#pragma once

#include "core.hpp"
#include "evaluate.hpp"
#include "features.hpp"
#include "hierarchy.hpp"
#include "loss.hpp"
#include "netarch.hpp"
#include "pipeline.hpp"
#include "reconcile.hpp"
#include "train.hpp"
