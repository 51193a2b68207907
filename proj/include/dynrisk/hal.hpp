#pragma once

#include "dynrisk/hal/basis.hpp"
#include "dynrisk/hal/json.hpp"
#include "dynrisk/hal/lasso.hpp"
#include "dynrisk/hal/path.hpp"
