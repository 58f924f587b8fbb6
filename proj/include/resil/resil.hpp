#pragma once

#include "resil/agents.hpp"
#include "resil/bisimulation.hpp"
#include "resil/comms.hpp"
#include "resil/error.hpp"
#include "resil/game.hpp"
#include "resil/gridworld.hpp"
#include "resil/harness.hpp"
#include "resil/io.hpp"
#include "resil/kantorovich.hpp"
#include "resil/observation.hpp"
#include "resil/perturbation.hpp"
#include "resil/plots.hpp"
#include "resil/random.hpp"
#include "resil/replay_buffer.hpp"
#include "resil/resilience.hpp"
