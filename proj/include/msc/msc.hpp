#pragma once

#include "msc/commands.hpp"
#include "msc/coulomb.hpp"
#include "msc/ddef.hpp"
#include "msc/delaunay.hpp"
#include "msc/elastic.hpp"
#include "msc/expression.hpp"
#include "msc/generators.hpp"
#include "msc/grad.hpp"
#include "msc/integrators.hpp"
#include "msc/mesh.hpp"
#include "msc/scene.hpp"
#include "msc/trajectory_io.hpp"
#include "msc/types.hpp"
