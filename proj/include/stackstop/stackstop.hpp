#pragma once

#include "game_model.hpp"
#include "numerics.hpp"
#include "path_tree.hpp"
#include "finite_horizon.hpp"
#include "follower_dynamics.hpp"
#include "precommit_value.hpp"
#include "entropy_equilibrium.hpp"
#include "philox.hpp"
#include "sim_oracle.hpp"
