#pragma once

#include "edmsound/bench.hpp"
#include "edmsound/binary_io.hpp"
#include "edmsound/config.hpp"
#include "edmsound/denoiser.hpp"
#include "edmsound/denoiser_interface.hpp"
#include "edmsound/edm.hpp"
#include "edmsound/error.hpp"
#include "edmsound/fft.hpp"
#include "edmsound/gradcheck.hpp"
#include "edmsound/log.hpp"
#include "edmsound/nn.hpp"
#include "edmsound/pipeline.hpp"
#include "edmsound/replication.hpp"
#include "edmsound/sampler.hpp"
#include "edmsound/spectral.hpp"
#include "edmsound/stats.hpp"
#include "edmsound/toy_data.hpp"
#include "edmsound/wav.hpp"
