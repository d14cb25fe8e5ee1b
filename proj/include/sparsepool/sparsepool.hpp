#pragma once

#include "sparsepool/checkpoint.hpp"
#include "sparsepool/config.hpp"
#include "sparsepool/dataset.hpp"
#include "sparsepool/error.hpp"
#include "sparsepool/gradcheck.hpp"
#include "sparsepool/harness.hpp"
#include "sparsepool/image.hpp"
#include "sparsepool/layers.hpp"
#include "sparsepool/model.hpp"
#include "sparsepool/pooling.hpp"
#include "sparsepool/spt4.hpp"
#include "sparsepool/synth.hpp"
#include "sparsepool/tensor.hpp"
#include "sparsepool/train.hpp"
