#pragma once

#include <cstdint>
#include <vector>

#include "lapo/errors.hpp"

namespace lapo {

constexpr int kActionBins = 256;

// H consecutive control vectors, A components each, every component in
// [-1, 1]. Flattened row-major: step-major, component-minor.
struct ActionChunk {
  int horizon = 0;     // H
  int action_dim = 0;  // A
  std::vector<float> values;  // horizon * action_dim

  float at(int step, int comp) const {
    return values[static_cast<size_t>(step) * action_dim + comp];
  }
  float& at(int step, int comp) {
    return values[static_cast<size_t>(step) * action_dim + comp];
  }
};

// N_a = H*A discrete tokens, each in [0, 255].
struct ActionTokens {
  std::vector<int> tokens;
};

// token = clamp(floor((a + 1)/2 * 256), 0, 255)
ActionTokens tokenize(const ActionChunk& chunk);

// a = -1 + (2*token + 1)/256 (bin center)
ActionChunk detokenize(const ActionTokens& tokens, int horizon, int action_dim);

int tokenize_component(float a);
float detokenize_component(int token);

}  // namespace lapo
