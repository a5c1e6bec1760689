// Serial reference implementation. Same bodies as the OpenMP kernels without
// the pragmas; tests assert bit-identical outputs between the two.

#include <cmath>

#include "framefuse/kernels.hpp"
#include "kernels_detail.hpp"

#define FF_NS ref
#define FF_PAR_FOR
#define FF_PAR_FOR2

#include "kernels_body.inc"
