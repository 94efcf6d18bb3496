#pragma once

#include "modhifi/analysis.hpp"
#include "modhifi/data.hpp"
#include "modhifi/error.hpp"
#include "modhifi/fidelity.hpp"
#include "modhifi/model/builders.hpp"
#include "modhifi/model/forward.hpp"
#include "modhifi/model/graph.hpp"
#include "modhifi/model/io.hpp"
#include "modhifi/model/train.hpp"
#include "modhifi/modify.hpp"
#include "modhifi/numerics.hpp"
#include "modhifi/selection.hpp"
#include "modhifi/tensor.hpp"
