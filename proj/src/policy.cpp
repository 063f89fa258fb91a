#include "lapo/policy.hpp"

#include <algorithm>
#include <cmath>

#include "lapo/kernels.hpp"

namespace lapo {

namespace {
constexpr float kMaskOff = -1e9f;
constexpr float kLnEps = 1e-5f;
}  // namespace

HybridMask build_mask(int n_prompt, int n_latent, int n_action) {
  if (n_prompt < 0 || n_latent < 0 || n_action < 0)
    throw ShapeError("build_mask: counts must be >= 0");
  HybridMask m;
  m.n_prompt = n_prompt;
  m.n_latent = n_latent;
  m.n_action = n_action;
  m.size = n_prompt + n_latent + 1 + n_action;
  m.allow.assign(static_cast<size_t>(m.size) * m.size, 0);
  const int causal = n_prompt + n_latent + 1;  // prompt + latents + <latent_end>
  for (int i = 0; i < m.size; ++i)
    for (int j = 0; j < m.size; ++j) {
      const bool ok = i < causal ? (j <= i) : true;
      m.allow[static_cast<size_t>(i) * m.size + j] = ok ? 1 : 0;
    }
  return m;
}

int sample_length_index(const std::vector<double>& logits, double beta, Rng& rng) {
  if (logits.empty()) throw ShapeError("sample_length_index: no candidates");
  if (beta <= 0.0)
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> w(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) w[i] = std::exp((logits[i] - mx) / beta);
  return static_cast<int>(rng.categorical(w));
}

std::vector<int> sample_action_tokens(const TensorValue& logits, double tau, Rng& rng) {
  const int rows = logits.rows(), cols = logits.cols();
  std::vector<int> out(static_cast<size_t>(rows));
  for (int i = 0; i < rows; ++i) {
    const float* row = logits.data.data() + static_cast<size_t>(i) * cols;
    if (tau <= 0.0) {
      int best = 0;
      for (int j = 1; j < cols; ++j)
        if (row[j] > row[best]) best = j;
      out[static_cast<size_t>(i)] = best;
    } else {
      std::vector<double> scaled(static_cast<size_t>(cols));
      for (int j = 0; j < cols; ++j) scaled[static_cast<size_t>(j)] = row[j] / tau;
      std::vector<double> probs(static_cast<size_t>(cols));
      kern::softmax_row(scaled.data(), probs.data(), cols);
      out[static_cast<size_t>(i)] = static_cast<int>(rng.categorical(probs));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameters

void PolicyNet::build_params_(uint64_t seed) {
  Rng rng(derive_seed(seed, 0x1417ull));
  const int d = cfg_.d_model;
  const int dh = cfg_.d_head();
  const int pe_hidden = 2 * d;
  using I = ParamStore::Init;

  store_.add("task_embed", {n_tasks(), cfg_.d_task_embed}, I::kTruncNormal, rng);
  store_.add("prompt.w1", {kObsSize + cfg_.d_task_embed, pe_hidden}, I::kTruncNormal, rng);
  store_.add("prompt.b1", {pe_hidden}, I::kZeros, rng);
  for (int t = 0; t < cfg_.n_prompt; ++t) {
    store_.add("prompt.tok" + std::to_string(t) + ".w", {pe_hidden, d}, I::kTruncNormal, rng);
    store_.add("prompt.tok" + std::to_string(t) + ".b", {d}, I::kZeros, rng);
  }
  store_.add("pos_embed", {max_seq_len(), d}, I::kTruncNormal, rng);
  for (int b = 0; b < cfg_.n_blocks; ++b) {
    const std::string p = "blk" + std::to_string(b) + ".";
    store_.add(p + "ln1.g", {d}, I::kOnes, rng);
    store_.add(p + "ln1.b", {d}, I::kZeros, rng);
    for (int h = 0; h < cfg_.n_heads; ++h) {
      const std::string hs = std::to_string(h);
      store_.add(p + "attn.q" + hs, {d, dh}, I::kTruncNormal, rng);
      store_.add(p + "attn.k" + hs, {d, dh}, I::kTruncNormal, rng);
      store_.add(p + "attn.v" + hs, {d, dh}, I::kTruncNormal, rng);
      store_.add(p + "attn.o" + hs, {dh, d}, I::kTruncNormal, rng);
    }
    store_.add(p + "ln2.g", {d}, I::kOnes, rng);
    store_.add(p + "ln2.b", {d}, I::kZeros, rng);
    store_.add(p + "mlp.w1", {d, cfg_.mlp_mult * d}, I::kTruncNormal, rng);
    store_.add(p + "mlp.b1", {cfg_.mlp_mult * d}, I::kZeros, rng);
    store_.add(p + "mlp.w2", {cfg_.mlp_mult * d, d}, I::kTruncNormal, rng);
    store_.add(p + "mlp.b2", {d}, I::kZeros, rng);
  }
  store_.add("ln_f.g", {d}, I::kOnes, rng);
  store_.add("ln_f.b", {d}, I::kZeros, rng);
  store_.add("latent_head.w", {d, d}, I::kTruncNormal, rng);
  store_.add("latent_head.b", {d}, I::kZeros, rng);
  store_.add("end_head.w", {1, d}, I::kTruncNormal, rng);
  store_.add("end_head.cont", {1, 1}, I::kZeros, rng);
  store_.add("action_head.w", {d, kActionBins}, I::kTruncNormal, rng);
  store_.add("action_head.b", {kActionBins}, I::kZeros, rng);
  store_.add("action_placeholder", {cfg_.n_actions(), d}, I::kTruncNormal, rng);
  store_.add("end_token", {1, d}, I::kTruncNormal, rng);
  // Value head: 4 affine layers, zero-initialized output so v == 0 at init.
  store_.add("value.w1", {d, 64}, I::kTruncNormal, rng);
  store_.add("value.b1", {64}, I::kZeros, rng);
  store_.add("value.w2", {64, 64}, I::kTruncNormal, rng);
  store_.add("value.b2", {64}, I::kZeros, rng);
  store_.add("value.w3", {64, 64}, I::kTruncNormal, rng);
  store_.add("value.b3", {64}, I::kZeros, rng);
  store_.add("value.w4", {64, 1}, I::kZeros, rng);
  store_.add("value.b4", {1}, I::kZeros, rng);
}

PolicyNet::PolicyNet(const TrainConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  build_params_(init_seed);
}

// ---------------------------------------------------------------------------
// Fast incremental path

namespace {

// All fast-path math goes through kern:: with the same loop structure as the
// tape ops, so cached and uncached evaluation agree bit-for-bit.
void matvec(const float* x, const TensorValue& w, float* out) {
  kern::matmul(x, w.data.data(), out, 1, w.shape[0], w.shape[1], false, false);
}

void affine_norm(const std::vector<float>& x, std::vector<float>& out, const TensorValue& g,
                 const TensorValue& b) {
  out.resize(x.size());
  kern::norm_row(x.data(), out.data(), static_cast<int>(x.size()),
                 static_cast<double>(kLnEps), true);
  for (size_t i = 0; i < x.size(); ++i) {
    const float t = out[i] * g.data[i];
    out[i] = t + b.data[i];
  }
}

}  // namespace

TrunkCache::TrunkCache(const PolicyNet& net) : net_(net) {
  k_cache_.resize(static_cast<size_t>(net.cfg().n_blocks));
  v_cache_.resize(static_cast<size_t>(net.cfg().n_blocks));
  for (auto& blk : k_cache_) blk.resize(static_cast<size_t>(net.cfg().n_heads));
  for (auto& blk : v_cache_) blk.resize(static_cast<size_t>(net.cfg().n_heads));
}

void TrunkCache::reset() {
  n_positions_ = 0;
  for (auto& blk : k_cache_)
    for (auto& h : blk) h.clear();
  for (auto& blk : v_cache_)
    for (auto& h : blk) h.clear();
}

void TrunkCache::truncate(int n) {
  if (n > n_positions_) throw ShapeError("trunk cache: cannot truncate upward");
  const size_t dh = static_cast<size_t>(net_.cfg().d_head());
  for (auto& blk : k_cache_)
    for (auto& h : blk) h.resize(static_cast<size_t>(n) * dh);
  for (auto& blk : v_cache_)
    for (auto& h : blk) h.resize(static_cast<size_t>(n) * dh);
  n_positions_ = n;
}

std::vector<float> TrunkCache::append(const std::vector<float>& input_embed, int pos_index) {
  return append_block({input_embed}, {pos_index})[0];
}

std::vector<std::vector<float>> TrunkCache::append_block(
    const std::vector<std::vector<float>>& inputs, const std::vector<int>& pos_indices) {
  const TrainConfig& cfg = net_.cfg();
  const ParamStore& ps = net_.params();
  const int d = cfg.d_model;
  const int dh = cfg.d_head();
  const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));
  const int nb = static_cast<int>(inputs.size());
  // A single append is a causal position and is retained; a block is the
  // bidirectional action region and is transient.
  const bool retain = nb == 1;

  const auto& pos_embed = ps.group("pos_embed").value;
  std::vector<std::vector<float>> x(static_cast<size_t>(nb));
  for (int i = 0; i < nb; ++i) {
    auto& xi = x[static_cast<size_t>(i)];
    xi.resize(static_cast<size_t>(d));
    for (int j = 0; j < d; ++j)
      xi[static_cast<size_t>(j)] = inputs[static_cast<size_t>(i)][static_cast<size_t>(j)] +
                                   pos_embed.at(pos_indices[static_cast<size_t>(i)], j);
  }

  std::vector<std::vector<float>> xns(static_cast<size_t>(nb)), attn(static_cast<size_t>(nb));
  std::vector<float> q(static_cast<size_t>(dh)), o(static_cast<size_t>(dh));
  std::vector<float> head_out(static_cast<size_t>(d)), scores, probs;
  std::vector<float> m1, m2(static_cast<size_t>(d));

  for (int b = 0; b < cfg.n_blocks; ++b) {
    const std::string bp = "blk" + std::to_string(b) + ".";
    const auto& ln1g = ps.group(bp + "ln1.g").value;
    const auto& ln1b = ps.group(bp + "ln1.b").value;

    // Pre-norm + K/V for the whole block first: every block position is
    // visible to every other one.
    std::vector<std::vector<float>> blk_k(static_cast<size_t>(nb)),
        blk_v(static_cast<size_t>(nb));
    for (int i = 0; i < nb; ++i) {
      affine_norm(x[static_cast<size_t>(i)], xns[static_cast<size_t>(i)], ln1g, ln1b);
      blk_k[static_cast<size_t>(i)].resize(static_cast<size_t>(cfg.n_heads) * dh);
      blk_v[static_cast<size_t>(i)].resize(static_cast<size_t>(cfg.n_heads) * dh);
      for (int h = 0; h < cfg.n_heads; ++h) {
        matvec(xns[static_cast<size_t>(i)].data(),
               ps.group(bp + "attn.k" + std::to_string(h)).value,
               blk_k[static_cast<size_t>(i)].data() + static_cast<size_t>(h) * dh);
        matvec(xns[static_cast<size_t>(i)].data(),
               ps.group(bp + "attn.v" + std::to_string(h)).value,
               blk_v[static_cast<size_t>(i)].data() + static_cast<size_t>(h) * dh);
      }
    }

    for (int h = 0; h < cfg.n_heads; ++h) {
      const std::string hs = std::to_string(h);
      auto& kc = k_cache_[static_cast<size_t>(b)][static_cast<size_t>(h)];
      auto& vc = v_cache_[static_cast<size_t>(b)][static_cast<size_t>(h)];
      const size_t n_ctx = static_cast<size_t>(n_positions_) + static_cast<size_t>(nb);
      std::vector<float> kall(n_ctx * dh), vall(n_ctx * dh);
      std::copy(kc.begin(), kc.end(), kall.begin());
      std::copy(vc.begin(), vc.end(), vall.begin());
      for (int i = 0; i < nb; ++i) {
        std::copy(blk_k[static_cast<size_t>(i)].begin() + static_cast<long>(h) * dh,
                  blk_k[static_cast<size_t>(i)].begin() + static_cast<long>(h + 1) * dh,
                  kall.begin() + (static_cast<size_t>(n_positions_) + i) * dh);
        std::copy(blk_v[static_cast<size_t>(i)].begin() + static_cast<long>(h) * dh,
                  blk_v[static_cast<size_t>(i)].begin() + static_cast<long>(h + 1) * dh,
                  vall.begin() + (static_cast<size_t>(n_positions_) + i) * dh);
      }

      for (int i = 0; i < nb; ++i) {
        matvec(xns[static_cast<size_t>(i)].data(), ps.group(bp + "attn.q" + hs).value,
               q.data());
        scores.resize(n_ctx);
        kern::matmul(q.data(), kall.data(), scores.data(), 1, dh, static_cast<int>(n_ctx),
                     false, true);
        for (auto& s : scores) s = s * inv_sqrt_dh;
        probs.resize(n_ctx);
        kern::softmax_row(scores.data(), probs.data(), static_cast<int>(n_ctx));
        kern::matmul(probs.data(), vall.data(), o.data(), 1, static_cast<int>(n_ctx), dh,
                     false, false);
        matvec(o.data(), ps.group(bp + "attn.o" + hs).value, head_out.data());
        auto& ai = attn[static_cast<size_t>(i)];
        if (h == 0) {
          ai.assign(head_out.begin(), head_out.end());
        } else {
          for (int j = 0; j < d; ++j)
            ai[static_cast<size_t>(j)] = ai[static_cast<size_t>(j)] + head_out[static_cast<size_t>(j)];
        }
      }

      if (retain) {
        kc.insert(kc.end(), blk_k[0].begin() + static_cast<long>(h) * dh,
                  blk_k[0].begin() + static_cast<long>(h + 1) * dh);
        vc.insert(vc.end(), blk_v[0].begin() + static_cast<long>(h) * dh,
                  blk_v[0].begin() + static_cast<long>(h + 1) * dh);
      }
    }

    const auto& ln2g = ps.group(bp + "ln2.g").value;
    const auto& ln2b = ps.group(bp + "ln2.b").value;
    const auto& w1 = ps.group(bp + "mlp.w1").value;
    const auto& b1 = ps.group(bp + "mlp.b1").value;
    const auto& w2 = ps.group(bp + "mlp.w2").value;
    const auto& b2 = ps.group(bp + "mlp.b2").value;
    for (int i = 0; i < nb; ++i) {
      auto& xi = x[static_cast<size_t>(i)];
      const auto& ai = attn[static_cast<size_t>(i)];
      for (int j = 0; j < d; ++j)
        xi[static_cast<size_t>(j)] = xi[static_cast<size_t>(j)] + ai[static_cast<size_t>(j)];
      std::vector<float> xn2;
      affine_norm(xi, xn2, ln2g, ln2b);
      m1.resize(static_cast<size_t>(w1.shape[1]));
      matvec(xn2.data(), w1, m1.data());
      for (size_t j = 0; j < m1.size(); ++j) m1[j] = m1[j] + b1.data[j];
      for (auto& v : m1) v = kern::gelu_s(v);
      matvec(m1.data(), w2, m2.data());
      for (int j = 0; j < d; ++j) {
        const float t = m2[static_cast<size_t>(j)] + b2.data[static_cast<size_t>(j)];
        xi[static_cast<size_t>(j)] = xi[static_cast<size_t>(j)] + t;
      }
    }
  }

  if (retain) n_positions_ += 1;

  const auto& lfg = ps.group("ln_f.g").value;
  const auto& lfb = ps.group("ln_f.b").value;
  std::vector<std::vector<float>> out(static_cast<size_t>(nb));
  for (int i = 0; i < nb; ++i)
    affine_norm(x[static_cast<size_t>(i)], out[static_cast<size_t>(i)], lfg, lfb);
  return out;
}

// ---------------------------------------------------------------------------
// PolicyNet fast-path operations

std::vector<std::vector<float>> PolicyNet::prompt_tokens(const std::vector<float>& obs,
                                                         int task_id) const {
  if (obs.size() != kObsSize) throw ShapeError("policy: observation size mismatch");
  if (task_id < 0 || task_id >= n_tasks()) throw ShapeError("policy: bad task id");
  const auto& te = store_.group("task_embed").value;
  std::vector<float> in(obs);
  for (int j = 0; j < cfg_.d_task_embed; ++j) in.push_back(te.at(task_id, j));

  const auto& w1 = store_.group("prompt.w1").value;
  const auto& b1 = store_.group("prompt.b1").value;
  std::vector<float> h(static_cast<size_t>(w1.shape[1]));
  matvec(in.data(), w1, h.data());
  for (size_t j = 0; j < h.size(); ++j) h[j] = h[j] + b1.data[j];
  for (auto& v : h) v = kern::gelu_s(v);

  std::vector<std::vector<float>> toks(static_cast<size_t>(cfg_.n_prompt));
  for (int t = 0; t < cfg_.n_prompt; ++t) {
    const auto& w = store_.group("prompt.tok" + std::to_string(t) + ".w").value;
    const auto& b = store_.group("prompt.tok" + std::to_string(t) + ".b").value;
    auto& tok = toks[static_cast<size_t>(t)];
    tok.resize(static_cast<size_t>(cfg_.d_model));
    matvec(h.data(), w, tok.data());
    for (int j = 0; j < cfg_.d_model; ++j)
      tok[static_cast<size_t>(j)] = tok[static_cast<size_t>(j)] + b.data[static_cast<size_t>(j)];
  }
  return toks;
}

PolicyNet::GenResult PolicyNet::generate_latents(const std::vector<float>& obs, int task_id,
                                                 LatentMode mode, TrunkCache& cache,
                                                 Rng* rng) const {
  GenResult res;
  cache.reset();
  const auto toks = prompt_tokens(obs, task_id);
  std::vector<float> last_h;
  for (int t = 0; t < cfg_.n_prompt; ++t) last_h = cache.append(toks[static_cast<size_t>(t)], t);

  const auto candidates = cfg_.candidates();
  const auto& lw = store_.group("latent_head.w").value;
  const auto& lb = store_.group("latent_head.b").value;
  const auto& ew = store_.group("end_head.w").value;
  const float cont = store_.group("end_head.cont").value.data[0];

  const int n_target = mode == LatentMode::kFixed ? cfg_.fixed_n_z : cfg_.n_max;

  auto end_logit_from = [&](const std::vector<float>& h) {
    double e = 0.0;
    for (int j = 0; j < cfg_.d_model; ++j)
      e += static_cast<double>(ew.data[static_cast<size_t>(j)]) *
           static_cast<double>(h[static_cast<size_t>(j)]);
    return e;
  };
  auto end_logprob_of = [&](double e) {
    // log P(end) from the binary (end vs shared-continue) softmax.
    const double pair[2] = {e, static_cast<double>(cont)};
    double out[2];
    kern::log_softmax_row(pair, out, 2);
    return out[0];
  };

  for (int k = 1; k <= n_target; ++k) {
    std::vector<float> z(static_cast<size_t>(cfg_.d_model));
    matvec(last_h.data(), lw, z.data());
    for (int j = 0; j < cfg_.d_model; ++j)
      z[static_cast<size_t>(j)] = z[static_cast<size_t>(j)] + lb.data[static_cast<size_t>(j)];
    if (rng != nullptr && cfg_.sigma_explore > 0.0)
      for (auto& v : z) v += static_cast<float>(rng->gauss(0.0, cfg_.sigma_explore));
    res.latents.push_back(z);
    last_h = cache.append(z, cfg_.n_prompt + k - 1);

    const auto cand_it = std::find(candidates.begin(), candidates.end(), k);
    if (cand_it != candidates.end()) {
      const double e = end_logit_from(last_h);
      res.candidate_logits.push_back(e);
      if (mode == LatentMode::kAdaptiveExit) {
        const double p_end = std::exp(end_logprob_of(e));
        if (p_end >= cfg_.p_exit) {
          res.n_used = k;
          res.m = static_cast<int>(cand_it - candidates.begin());
          res.logp_end = end_logprob_of(e);
          return res;
        }
      }
    }
  }

  switch (mode) {
    case LatentMode::kFixed:
      res.n_used = n_target;
      res.m = cfg_.candidate_index_of(n_target);
      if (res.m >= 0 && !res.candidate_logits.empty())
        res.logp_end = end_logprob_of(res.candidate_logits[static_cast<size_t>(res.m)]);
      break;
    case LatentMode::kAdaptiveSample: {
      if (rng == nullptr) throw Error("policy: adaptive-sample mode requires an RNG");
      res.m = sample_length_index(res.candidate_logits, cfg_.beta, *rng);
      res.n_used = candidates[static_cast<size_t>(res.m)];
      res.logp_end = end_logprob_of(res.candidate_logits[static_cast<size_t>(res.m)]);
      cache.truncate(cfg_.n_prompt + res.n_used);
      break;
    }
    case LatentMode::kAdaptiveExit:
      // No candidate reached the exit threshold: run to N_max.
      res.n_used = n_target;
      res.m = static_cast<int>(candidates.size()) - 1;
      res.logp_end = end_logprob_of(res.candidate_logits.back());
      break;
  }
  return res;
}

PolicyNet::DecodeResult PolicyNet::decode_actions(TrunkCache& cache) const {
  DecodeResult out;
  const int end_pos = cache.size();
  const auto& end_tok = store_.group("end_token").value;
  const auto h_end = cache.append(end_tok.data, end_pos);

  // Value head: 4 affine layers with tanh nonlinearities.
  std::vector<float> h = h_end;
  for (int layer = 1; layer <= 4; ++layer) {
    const auto& w = store_.group("value.w" + std::to_string(layer)).value;
    const auto& b = store_.group("value.b" + std::to_string(layer)).value;
    std::vector<float> nh(static_cast<size_t>(w.shape[1]));
    matvec(h.data(), w, nh.data());
    for (size_t j = 0; j < nh.size(); ++j) nh[j] = nh[j] + b.data[j];
    if (layer < 4)
      for (auto& v : nh) v = kern::tanh_s(v);
    h = std::move(nh);
  }
  out.value = static_cast<double>(h[0]);

  const int n_act = cfg_.n_actions();
  const auto& ph = store_.group("action_placeholder").value;
  std::vector<std::vector<float>> inputs(static_cast<size_t>(n_act));
  std::vector<int> pos(static_cast<size_t>(n_act));
  for (int j = 0; j < n_act; ++j) {
    inputs[static_cast<size_t>(j)].assign(
        ph.data.begin() + static_cast<long>(j) * cfg_.d_model,
        ph.data.begin() + static_cast<long>(j + 1) * cfg_.d_model);
    pos[static_cast<size_t>(j)] = end_pos + 1 + j;
  }
  const auto hs = cache.append_block(inputs, pos);

  const auto& aw = store_.group("action_head.w").value;
  const auto& ab = store_.group("action_head.b").value;
  out.logits = TensorValue({n_act, kActionBins});
  for (int j = 0; j < n_act; ++j) {
    float* row = out.logits.data.data() + static_cast<size_t>(j) * kActionBins;
    matvec(hs[static_cast<size_t>(j)].data(), aw, row);
    for (int c = 0; c < kActionBins; ++c) row[c] = row[c] + ab.data[static_cast<size_t>(c)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tape-side graph

int TapeParams::id(const std::string& name) const {
  const auto it = by_name.find(name);
  if (it == by_name.end()) throw Error("tape params: no group " + name);
  return it->second;
}

TapeParams TapeParams::push(Tape& tape, const ParamStore& store) {
  TapeParams tp;
  for (int i = 0; i < store.count(); ++i) {
    const auto& g = store.group(i);
    const int id = tape.leaf(g.value, true);
    tp.ids.push_back(id);
    tp.by_name[g.name] = id;
  }
  return tp;
}

std::vector<TensorValue> collect_grads(const Tape& tape, const TapeParams& tp,
                                       const ParamStore& store) {
  std::vector<TensorValue> out;
  out.reserve(tp.ids.size());
  for (size_t i = 0; i < tp.ids.size(); ++i) {
    out.push_back(tape.grad(tp.ids[i]));
    if (out.back().shape != store.group(static_cast<int>(i)).value.shape)
      throw Error("collect_grads: shape drift");
  }
  return out;
}

PolicyGraph::PolicyGraph(Tape& tape, const TapeParams& tp, const TrainConfig& cfg)
    : t_(tape), tp_(tp), cfg_(cfg) {}

void PolicyGraph::trunk(const std::vector<float>& obs, int task_id,
                        const std::vector<std::vector<float>>& latent_inputs,
                        bool with_actions) {
  const int d = cfg_.d_model;
  const int dh = cfg_.d_head();
  const int P = cfg_.n_prompt;
  n_lat_ = static_cast<int>(latent_inputs.size());
  with_actions_ = with_actions;
  const int n_act = with_actions ? cfg_.n_actions() : 0;
  const int T = P + n_lat_ + (with_actions ? 1 + n_act : 0);

  // Prompt encoder.
  const int phi = t_.constant(TensorValue({1, kObsSize}, std::vector<float>(obs)));
  const int temb = t_.gather_rows(tp_.id("task_embed"), {task_id});
  const int pe_in = t_.concat({phi, temb}, 1);
  const int h1 = t_.gelu(t_.add(t_.matmul(pe_in, tp_.id("prompt.w1")), tp_.id("prompt.b1")));
  std::vector<int> rows;
  for (int tok = 0; tok < P; ++tok) {
    const std::string ts = std::to_string(tok);
    rows.push_back(t_.add(t_.matmul(h1, tp_.id("prompt.tok" + ts + ".w")),
                          tp_.id("prompt.tok" + ts + ".b")));
  }
  for (int k = 0; k < n_lat_; ++k)
    rows.push_back(t_.constant(TensorValue({1, d}, std::vector<float>(latent_inputs[static_cast<size_t>(k)]))));
  if (with_actions) {
    rows.push_back(tp_.id("end_token"));
    rows.push_back(tp_.id("action_placeholder"));
  }
  int x = t_.concat(rows, 0);

  std::vector<int> pos_rows(static_cast<size_t>(T));
  for (int i = 0; i < T; ++i) pos_rows[static_cast<size_t>(i)] = i;
  x = t_.add(x, t_.gather_rows(tp_.id("pos_embed"), pos_rows));

  // Additive attention bias from the hybrid mask (0 visible, -1e9 hidden).
  TensorValue bias({T, T});
  if (with_actions) {
    const HybridMask m = build_mask(P, n_lat_, n_act);
    for (int i = 0; i < T; ++i)
      for (int j = 0; j < T; ++j) bias.at(i, j) = m.at(i, j) ? 0.0f : kMaskOff;
  } else {
    for (int i = 0; i < T; ++i)
      for (int j = 0; j < T; ++j) bias.at(i, j) = j <= i ? 0.0f : kMaskOff;
  }
  const int mask_bias = t_.constant(std::move(bias));

  auto affine_ln = [&](int in, const std::string& g, const std::string& b) {
    return t_.add(t_.mul(t_.layer_norm(in, kLnEps, true), tp_.id(g)), tp_.id(b));
  };

  for (int b = 0; b < cfg_.n_blocks; ++b) {
    const std::string bp = "blk" + std::to_string(b) + ".";
    const int xn = affine_ln(x, bp + "ln1.g", bp + "ln1.b");
    int attn = -1;
    for (int h = 0; h < cfg_.n_heads; ++h) {
      const std::string hs = std::to_string(h);
      const int q = t_.matmul(xn, tp_.id(bp + "attn.q" + hs));
      const int k = t_.matmul(xn, tp_.id(bp + "attn.k" + hs));
      const int v = t_.matmul(xn, tp_.id(bp + "attn.v" + hs));
      int s = t_.scale(t_.matmul(q, k, false, true),
                       1.0f / std::sqrt(static_cast<float>(dh)));
      s = t_.add(s, mask_bias);
      const int a = t_.softmax(s);
      const int head = t_.matmul(t_.matmul(a, v), tp_.id(bp + "attn.o" + hs));
      attn = h == 0 ? head : t_.add(attn, head);
    }
    x = t_.add(x, attn);
    const int xn2 = affine_ln(x, bp + "ln2.g", bp + "ln2.b");
    const int m1 = t_.gelu(t_.add(t_.matmul(xn2, tp_.id(bp + "mlp.w1")), tp_.id(bp + "mlp.b1")));
    const int m2 = t_.add(t_.matmul(m1, tp_.id(bp + "mlp.w2")), tp_.id(bp + "mlp.b2"));
    x = t_.add(x, m2);
  }
  hid_ = affine_ln(x, "ln_f.g", "ln_f.b");
}

int PolicyGraph::row_readout_(const std::vector<int>& rows) const {
  return t_.gather_rows(hid_, rows);
}

int PolicyGraph::latent_outputs(int n) const {
  if (n < 1 || n > n_lat_ + 1)
    throw ShapeError("policy graph: latent_outputs n out of range");
  // Output for latent k is read at the position holding its predecessor:
  // the last prompt token for k=1, latent k-1 otherwise.
  std::vector<int> rows;
  for (int k = 1; k <= n; ++k) rows.push_back(cfg_.n_prompt + k - 2);
  Tape& t = t_;
  const int h = t.gather_rows(hid_, rows);
  return t.add(t.matmul(h, tp_.id("latent_head.w")), tp_.id("latent_head.b"));
}

int PolicyGraph::end_logit(int candidate) const {
  if (candidate < 1 || candidate > n_lat_)
    throw ShapeError("policy graph: end candidate out of range");
  const int row = cfg_.n_prompt + candidate - 1;
  Tape& t = t_;
  const int h = t.gather_rows(hid_, {row});
  return t.matmul(tp_.id("end_head.w"), h, false, true);  // (1,1)
}

int PolicyGraph::end_logprob(int candidate, bool end_label) const {
  Tape& t = t_;
  const int e = end_logit(candidate);
  const int pair = t.concat({e, tp_.id("end_head.cont")}, 1);  // (1,2)
  const int ls = t.log_softmax(pair);
  TensorValue pick({1, 2});
  pick.data = end_label ? std::vector<float>{1.0f, 0.0f} : std::vector<float>{0.0f, 1.0f};
  return t.sum(t.mul(ls, t.constant(std::move(pick))));
}

int PolicyGraph::action_logits() const {
  if (!with_actions_) throw ShapeError("policy graph: trunk built without actions");
  const int first = cfg_.n_prompt + n_lat_ + 1;
  std::vector<int> rows;
  for (int j = 0; j < cfg_.n_actions(); ++j) rows.push_back(first + j);
  Tape& t = t_;
  const int h = t.gather_rows(hid_, rows);
  return t.add(t.matmul(h, tp_.id("action_head.w")), tp_.id("action_head.b"));
}

int PolicyGraph::action_logprob_sum(const std::vector<int>& tokens, double tau) const {
  if (tau <= 0.0) throw ShapeError("policy graph: tau must be positive");
  if (tokens.size() != static_cast<size_t>(cfg_.n_actions()))
    throw ShapeError("policy graph: token count mismatch");
  Tape& t = t_;
  const int logits = action_logits();
  const int ls = t.log_softmax(t.scale(logits, static_cast<float>(1.0 / tau)));
  TensorValue onehot({cfg_.n_actions(), kActionBins});
  for (int j = 0; j < cfg_.n_actions(); ++j)
    onehot.at(j, tokens[static_cast<size_t>(j)]) = 1.0f;
  return t.sum(t.mul(ls, t.constant(std::move(onehot))));
}

int PolicyGraph::value() const {
  if (!with_actions_) throw ShapeError("policy graph: trunk built without end position");
  const int row = cfg_.n_prompt + n_lat_;
  Tape& t = t_;
  int h = t.gather_rows(hid_, {row});
  for (int layer = 1; layer <= 4; ++layer) {
    const std::string ls = std::to_string(layer);
    h = t.add(t.matmul(h, tp_.id("value.w" + ls)), tp_.id("value.b" + ls));
    if (layer < 4) h = t.tanh_op(h);
  }
  return h;  // (1,1)
}

}  // namespace lapo
