#include "recall/attention.hpp"

namespace recall {

Matrix xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Matrix m(fan_in, fan_out);
  for (double& v : m.data()) v = rng.uniform(-limit, limit);
  return m;
}

AttentionParams init_attention(std::size_t d_model, std::size_t d_k, std::size_t heads, Rng& rng) {
  AttentionParams p;
  for (std::size_t h = 0; h < heads; ++h) {
    p.query.push_back(xavier_uniform(d_model, d_k, rng));
    p.key.push_back(xavier_uniform(d_model, d_k, rng));
    p.value.push_back(xavier_uniform(d_model, d_k, rng));
  }
  p.output = xavier_uniform(heads * d_k, d_model, rng);
  return p;
}

FfnParams init_ffn(std::size_t d_model, std::size_t d_ff, Rng& rng) {
  FfnParams p;
  p.w1 = xavier_uniform(d_model, d_ff, rng);
  p.b1 = Matrix(1, d_ff);
  p.w2 = xavier_uniform(d_ff, d_model, rng);
  p.b2 = Matrix(1, d_model);
  return p;
}

}  // namespace recall
