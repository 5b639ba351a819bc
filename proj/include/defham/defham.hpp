#pragma once

// Convenience header pulling in the whole library.

#include "defham/bracket.hpp"
#include "defham/dynamics.hpp"
#include "defham/expr.hpp"
#include "defham/forms.hpp"
#include "defham/morse.hpp"
#include "defham/ode.hpp"
#include "defham/phase.hpp"
#include "defham/random.hpp"
#include "defham/rational.hpp"
