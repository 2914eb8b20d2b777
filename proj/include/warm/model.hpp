#pragma once

#include <vector>

#include "warm/episode.hpp"
#include "warm/losses.hpp"
#include "warm/warm.hpp"

namespace warm {

// Episode-level prototype generation: one SupportForward per support cloud,
// FG prototypes averaged over a way's shots, BG prototypes averaged over all
// support clouds.
struct EpisodeForward {
  PrototypeSet prototypes;                // index 0 BG, w + 1 way w
  std::vector<SupportForward> shots;      // aligned with Episode::support
  std::vector<Matrix> support_features;   // per class, shots stacked (simplification target)
  std::uint32_t n_way = 1;
  std::uint32_t k_shot = 1;
};

EpisodeForward forward_episode(const WarmParams& params, const Episode& ep, Method method,
                               double eps = kDefaultEps, const AttentionOptions& opts = {});

// grad_prototypes follows EpisodeForward::prototypes layout.
WarmGrads backward_episode(const WarmParams& params, const EpisodeForward& fwd,
                           const std::vector<Matrix>& grad_prototypes,
                           const AttentionOptions& opts = {});

struct LossOptions {
  double lambda = 0.5;
  double margin = 0.0;
};

struct EpisodeLoss {
  LossReport report;
  std::vector<Matrix> grad_prototypes;  // d(total)/d(prototypes)
};

// Margin loss summed over every query cloud plus lambda * simplification
// loss of the support features against the prototypes.
EpisodeLoss episode_loss(const EpisodeForward& fwd, const Episode& ep, const LossOptions& opts);

struct LossAndGrads {
  LossReport report;
  WarmGrads grads;
};

LossAndGrads loss_and_grads(const WarmParams& params, const Episode& ep, Method method, double eps,
                            const AttentionOptions& attn, const LossOptions& loss);

}  // namespace warm
