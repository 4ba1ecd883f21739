// Synthetic high-resolution hyperspectral scenes for simulation and tests.
//
// A scene is a linear mixture of a few smooth endmember spectra with spatial
// abundance maps built from blurred blobs, sharp-edged rectangles and disks,
// and a fine oriented texture. Values stay inside [0.02, 0.98].

#ifndef HSIFUSE_SCENE_H_
#define HSIFUSE_SCENE_H_

#include "hsifuse/core.h"

namespace hsifuse {

struct SceneOptions {
  int endmembers = 5;
  int blobs = 6;
  int shapes = 8;
  double texture_amplitude = 0.25;
  // Relative amplitude and count of smooth spectral distortion modes.
  double variability = 0.08;
  int variability_modes = 4;
};

HsiCube synthetic_scene(int bands, int height, int width, Rng& rng,
                        const SceneOptions& options = {});

}  // namespace hsifuse

#endif  // HSIFUSE_SCENE_H_
