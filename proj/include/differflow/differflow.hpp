#pragma once

#include "differflow/autodiff.hpp"
#include "differflow/config.hpp"
#include "differflow/dataset.hpp"
#include "differflow/detect.hpp"
#include "differflow/extractor.hpp"
#include "differflow/flow.hpp"
#include "differflow/image.hpp"
#include "differflow/metrics.hpp"
#include "differflow/model_io.hpp"
#include "differflow/pipeline.hpp"
#include "differflow/report.hpp"
#include "differflow/store.hpp"
#include "differflow/synth.hpp"
#include "differflow/tensor.hpp"
#include "differflow/training.hpp"
