#pragma once

// Umbrella header: the whole library.
#include "hammer/autograd.hpp"
#include "hammer/config.hpp"
#include "hammer/data.hpp"
#include "hammer/encoders.hpp"
#include "hammer/errors.hpp"
#include "hammer/heads.hpp"
#include "hammer/inference.hpp"
#include "hammer/metrics.hpp"
#include "hammer/parameters.hpp"
#include "hammer/records.hpp"
#include "hammer/training.hpp"
