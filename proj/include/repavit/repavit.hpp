#pragma once

#include "repavit/errors.hpp"
#include "repavit/tensor.hpp"
#include "repavit/norm.hpp"
#include "repavit/init.hpp"
#include "repavit/config.hpp"
#include "repavit/model.hpp"
#include "repavit/reparam.hpp"
#include "repavit/build.hpp"
#include "repavit/accounting.hpp"
#include "repavit/training.hpp"
#include "repavit/io.hpp"
#include "repavit/bench.hpp"
