#include "lapo/codec.hpp"

#include <cmath>
#include <string>

namespace lapo {

int tokenize_component(float a) {
  if (!(a >= -1.0f && a <= 1.0f))
    throw NumericError("codec: action component " + std::to_string(a) +
                       " outside [-1,1]; caller must pre-normalize");
  const int raw = static_cast<int>(std::floor((static_cast<double>(a) + 1.0) / 2.0 * 256.0));
  return raw < 0 ? 0 : (raw > 255 ? 255 : raw);
}

float detokenize_component(int token) {
  if (token < 0 || token >= kActionBins)
    throw NumericError("codec: token " + std::to_string(token) + " outside [0,255]");
  return static_cast<float>(-1.0 + (2.0 * token + 1.0) / 256.0);
}

ActionTokens tokenize(const ActionChunk& chunk) {
  ActionTokens out;
  out.tokens.reserve(chunk.values.size());
  for (float v : chunk.values) out.tokens.push_back(tokenize_component(v));
  return out;
}

ActionChunk detokenize(const ActionTokens& tokens, int horizon, int action_dim) {
  if (tokens.tokens.size() != static_cast<size_t>(horizon) * action_dim)
    throw ShapeError("codec: token count " + std::to_string(tokens.tokens.size()) +
                     " != H*A = " + std::to_string(horizon * action_dim));
  ActionChunk out;
  out.horizon = horizon;
  out.action_dim = action_dim;
  out.values.reserve(tokens.tokens.size());
  for (int t : tokens.tokens) out.values.push_back(detokenize_component(t));
  return out;
}

}  // namespace lapo
