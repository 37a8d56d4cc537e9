#pragma once

#include "errors.hpp"
#include "functional.hpp"
#include "geometry.hpp"
#include "indicators.hpp"
#include "io.hpp"
#include "kernel.hpp"
#include "meanfield.hpp"
#include "rng.hpp"
#include "simulator.hpp"
