#pragma once

#include "lrvb/errors.hpp"
#include "lrvb/expfam.hpp"
#include "lrvb/linear_response.hpp"
#include "lrvb/mfvb.hpp"
#include "lrvb/model.hpp"
#include "lrvb/models/conjugate.hpp"
#include "lrvb/models/microcredit.hpp"
#include "lrvb/oracle.hpp"
#include "lrvb/parallel.hpp"
#include "lrvb/quadrature.hpp"
#include "lrvb/robustness.hpp"
