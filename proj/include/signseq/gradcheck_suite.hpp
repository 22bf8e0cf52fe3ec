#pragma once

// Canonical finite-difference check suite over every layer op and both full
// architectures at tiny shapes. Shared by the CLI gradcheck subcommand and
// the test binaries.

#include <string>
#include <vector>

#include "signseq/gradcheck.hpp"

namespace signseq {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0;
  double tolerance = 0;
  std::size_t checked = 0;
  bool passed = false;
};

std::vector<GradCheckEntry> run_layer_gradchecks(double epsilon = 1e-5);
std::vector<GradCheckEntry> run_model_gradchecks(double epsilon = 1e-5);

}  // namespace signseq
