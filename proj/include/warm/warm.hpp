#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "warm/matrix.hpp"
#include "warm/rng.hpp"

namespace warm {

inline constexpr double kDefaultEps = 1e-4;

// Per-class alignment statistics. sqrt/inv_sqrt share the clamped spectrum.
struct WhitenStats {
  std::vector<double> mean;
  Matrix cov;
  Matrix inv_sqrt;
  Matrix sqrt;
  double eps = kDefaultEps;
};

// Unbiased covariance (divisor L-1). Throws Argument when rows < 2.
WhitenStats compute_stats(const Matrix& features, double eps = kDefaultEps);
// (F - 1 mu^T) Sigma^{-1/2}
Matrix whiten(const Matrix& features, const WhitenStats& stats);
// P Sigma^{1/2} + 1 mu^T
Matrix color(const Matrix& whitened, const WhitenStats& stats);

// Learnable state. tokens holds 2M rows: FG pool first, BG pool second.
// Projections act on row vectors: W_q(u) = u * wq (+ bq).
struct WarmParams {
  Matrix tokens;
  Matrix wq, wk, wv;
  std::vector<double> bq, bk, bv;  // empty unless biases are enabled

  std::size_t tokens_per_class() const { return tokens.rows() / 2; }
  std::size_t dim() const { return tokens.cols(); }
  bool has_bias() const { return !bq.empty(); }

  Matrix fg_tokens() const;
  Matrix bg_tokens() const;

  // Tokens ~ N(0, token_std^2); projections ~ N(0, 1/D).
  static WarmParams init(std::size_t dim, std::size_t tokens_per_class, Rng& rng,
                         double token_std = 0.02, bool with_bias = false);
  static WarmParams zeros_like(const WarmParams& p);

  // Flat view in the order tokens, wq, wk, wv, bq, bk, bv.
  std::vector<double> flatten() const;
  void assign_flat(const std::vector<double>& flat);
  std::size_t num_values() const;

  void validate() const;
  friend bool operator==(const WarmParams&, const WarmParams&) = default;
};

using WarmGrads = WarmParams;

struct AttentionOptions {
  // Divide logits by sqrt(D). Off reproduces plain softmax(Q K^T).
  bool scale_logits = false;
};

struct AttentionOutput {
  Matrix attended;  // M x D
  Matrix weights;   // M x L
};

// softmax(W_q(queries) W_k(keys)^T) W_v(keys). Throws Argument on zero keys.
AttentionOutput cross_attention(const Matrix& queries, const Matrix& keys, const WarmParams& params,
                                const AttentionOptions& opts = {});

// Prototype-generation variants; see Method.
enum class Alignment { None, Center, Normalize, Whiten };

struct Method {
  Alignment align = Alignment::Whiten;
  bool restore = true;

  static Method warm() { return {Alignment::Whiten, true}; }
  static Method naive() { return {Alignment::None, false}; }

  std::string name() const;  // e.g. "warm", "naive", "center+restore"
  static Method parse(const std::string& s);  // throws Config
  friend bool operator==(const Method&, const Method&) = default;
};

// The seven component-ablation rows in table order (a)-(g).
std::vector<Method> ablation_grid();

// Per-class affine maps around the attention step: keys are
// (F - 1 shift^T) * forward, prototypes are P~ * restore + 1 offset^T.
// Empty matrices stand for the identity, empty vectors for zero.
struct ClassTransform {
  std::vector<double> shift;
  Matrix forward;
  Matrix restore;
  std::vector<double> offset;
  std::optional<WhitenStats> stats;
};

ClassTransform make_transform(const Matrix& features, Method method, double eps);
Matrix apply_forward(const Matrix& features, const ClassTransform& t);
Matrix apply_restore(const Matrix& attended_tokens, const ClassTransform& t);

// Everything the backward pass needs for one class pool on one support cloud.
struct ClassTrace {
  Matrix tokens;   // M x D, this pool's rows of P_0
  Matrix keys_in;  // transformed features X
  Matrix q, k, v;  // projections
  Matrix weights;  // A
  Matrix refined;  // P~ = tokens + A V
  Matrix prototypes;
  ClassTransform transform;
  bool fg = true;  // which half of P_0
};

ClassTrace class_forward(const WarmParams& params, const Matrix& features, bool fg_pool,
                         Method method, double eps, const AttentionOptions& opts = {});

// Accumulates d(loss)/d(params) for one class given d(loss)/d(prototypes).
void class_backward(const WarmParams& params, const ClassTrace& trace,
                    const Matrix& grad_prototypes, const AttentionOptions& opts, WarmGrads& grads);

enum class Provenance { Warm, Naive, Fps, Centered, Normalized, WhitenedNoRestore };
std::string to_string(Provenance p);
Provenance provenance_of(Method m);

// Index 0 is background, index w + 1 is foreground way w.
struct PrototypeSet {
  std::vector<Matrix> classes;
  Provenance provenance = Provenance::Warm;

  void validate() const;
};

struct SupportForward {
  PrototypeSet prototypes;  // {BG, FG}
  ClassTrace bg;
  ClassTrace fg;

  AttentionOutput attention(bool fg_pool) const;
  const WhitenStats& stats(bool fg_pool) const;  // throws Usage unless whitening was used
};

// One support cloud: FG tokens attend to F_FG only, BG tokens to F_BG only.
SupportForward warm_forward(const WarmParams& params, const Matrix& fg, const Matrix& bg,
                            double eps = kDefaultEps, const AttentionOptions& opts = {});
PrototypeSet naive_forward(const WarmParams& params, const Matrix& fg, const Matrix& bg,
                           const AttentionOptions& opts = {});
SupportForward ablation_forward(const WarmParams& params, const Matrix& fg, const Matrix& bg,
                                Method method, double eps = kDefaultEps,
                                const AttentionOptions& opts = {});

// Element-wise mean over shots; throws Argument on shape/provenance mismatch.
PrototypeSet average_shots(const std::vector<PrototypeSet>& sets);

// grad_prototypes = {dL/dP_BG, dL/dP_FG}. Gradients summed over both classes.
WarmGrads warm_backward(const WarmParams& params, const SupportForward& trace,
                        const std::array<Matrix, 2>& grad_prototypes,
                        const AttentionOptions& opts = {});

// Mean distance between projected tokens W_q(tokens) and projected keys W_k(keys).
double qk_distance(const Matrix& tokens, const Matrix& keys, const WarmParams& params);

// JSON checkpoint {version, D, M, seed, method, scale_logits, P0, Wq, Wk, Wv, [bq,bk,bv], config_hash}.
struct Checkpoint {
  WarmParams params;
  std::uint64_t seed = 0;
  Method method = Method::warm();
  AttentionOptions attention;
  std::string config_hash;
};

nlohmann::json checkpoint_to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const nlohmann::json& j);
// Atomic: writes a sibling temp file then renames it over `path`.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace warm
