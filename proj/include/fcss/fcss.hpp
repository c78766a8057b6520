#pragma once

// Umbrella header.

#include "fcss/backbone.hpp"
#include "fcss/css.hpp"
#include "fcss/descriptor.hpp"
#include "fcss/error.hpp"
#include "fcss/evalkit.hpp"
#include "fcss/gradcheck.hpp"
#include "fcss/io.hpp"
#include "fcss/learning.hpp"
#include "fcss/matching.hpp"
#include "fcss/parallel.hpp"
#include "fcss/random.hpp"
#include "fcss/rect.hpp"
#include "fcss/selftest.hpp"
#include "fcss/tensor.hpp"
