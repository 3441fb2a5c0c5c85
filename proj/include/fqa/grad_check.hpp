#pragma once

#include <functional>
#include <vector>

#include "fqa/tensor.hpp"

namespace fqa {

using ScalarFn = std::function<Tensor(const std::vector<Tensor>& inputs)>;

/// Compares reverse-mode gradients of `fn` against central differences with
/// step `h`. `inputs` must be leaves with requires_grad; their gradients are
/// reset. Returns max |analytic - numeric| / (|analytic| + |numeric|) over every
/// coordinate of every input.
///
/// A coordinate where both values are below `zero_tol` in magnitude counts as
/// agreeing: its true derivative is zero (a key bias cancelled by softmax, for
/// instance) and the numeric side holds only rounding noise of order
/// eps * |f| / h.
double grad_check(const ScalarFn& fn, std::vector<Tensor>& inputs, double h = 1e-5, double zero_tol = 1e-9);

}  // namespace fqa
