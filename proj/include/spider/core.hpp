#pragma once

#include "spider/ops.hpp"
#include "spider/tensor.hpp"

namespace spider {

// Production scalar type. 32-bit float everywhere; tests may instantiate the
// templated core at double for finite-difference oracles.
using real = float;
using Tensor = TensorT<real>;
using Tape = TapeT<real>;

}  // namespace spider
