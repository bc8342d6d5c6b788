#pragma once

#include "dmfa/dataset.hpp"
#include "dmfa/deep.hpp"
#include "dmfa/em.hpp"
#include "dmfa/evaluation.hpp"
#include "dmfa/experiment.hpp"
#include "dmfa/matrix_io.hpp"
#include "dmfa/model.hpp"
#include "dmfa/model_file.hpp"
#include "dmfa/synth.hpp"
