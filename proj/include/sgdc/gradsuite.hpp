#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sgdc {

inline constexpr double kGradTolerance = 1e-4;

struct GradCheckEntry {
  std::string op;     // primitive or composite name
  std::string input;  // which argument was perturbed
  double max_rel_error = 0;
  std::size_t elements = 0;
};

// 64-bit central-difference checks of every differentiable primitive and of
// full SGDC / SGE / loss compositions on small random shapes. Each scalar loss
// is a random projection sum(out * W) of the op's output.
std::vector<GradCheckEntry> run_grad_suite(std::uint64_t seed = 0);

}  // namespace sgdc
