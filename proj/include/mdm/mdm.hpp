#ifndef MDM_MDM_HPP
#define MDM_MDM_HPP

// Umbrella header for the multiple-dynamic-masks explanation library.

#include "mdm/adam.hpp"
#include "mdm/error.hpp"
#include "mdm/image.hpp"
#include "mdm/masks.hpp"
#include "mdm/matrix_io.hpp"
#include "mdm/metrics.hpp"
#include "mdm/model.hpp"
#include "mdm/model_io.hpp"
#include "mdm/oracle.hpp"
#include "mdm/ordering_check.hpp"
#include "mdm/rng.hpp"
#include "mdm/run_config.hpp"
#include "mdm/synth.hpp"
#include "mdm/tape.hpp"
#include "mdm/tensor.hpp"

#endif  // MDM_MDM_HPP
