#include <cmath>

#include "framefuse/kernels.hpp"
#include "kernels_detail.hpp"

#define FF_NS kern
#define FF_PAR_FOR _Pragma("omp parallel for schedule(static)")
#define FF_PAR_FOR2 _Pragma("omp parallel for collapse(2) schedule(static)")

#include "kernels_body.inc"
