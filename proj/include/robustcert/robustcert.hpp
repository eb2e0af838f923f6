#ifndef ROBUSTCERT_ROBUSTCERT_HPP
#define ROBUSTCERT_ROBUSTCERT_HPP

#include "attacks.hpp"
#include "bounds.hpp"
#include "certify.hpp"
#include "core.hpp"
#include "data.hpp"
#include "dual.hpp"
#include "layers.hpp"
#include "losses.hpp"
#include "lp.hpp"
#include "model_io.hpp"
#include "network.hpp"
#include "oracle.hpp"
#include "training.hpp"

#endif  // ROBUSTCERT_ROBUSTCERT_HPP
