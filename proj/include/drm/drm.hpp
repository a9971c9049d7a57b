#ifndef DRM_DRM_HPP
#define DRM_DRM_HPP

#include "drm/basis.hpp"
#include "drm/bfgs.hpp"
#include "drm/counterfactual.hpp"
#include "drm/csv.hpp"
#include "drm/datagen.hpp"
#include "drm/dataset.hpp"
#include "drm/effects.hpp"
#include "drm/el_solver.hpp"
#include "drm/error.hpp"
#include "drm/features.hpp"
#include "drm/fit.hpp"
#include "drm/model.hpp"
#include "drm/numeric.hpp"
#include "drm/replication.hpp"
#include "drm/rng.hpp"

#endif  // DRM_DRM_HPP
