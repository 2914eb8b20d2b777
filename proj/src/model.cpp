#include "warm/model.hpp"

#include "warm/error.hpp"

namespace warm {

EpisodeForward forward_episode(const WarmParams& params, const Episode& ep, Method method,
                               double eps, const AttentionOptions& opts) {
  require(ep.support.size() == static_cast<std::size_t>(ep.n_way) * ep.k_shot, ErrorKind::Argument,
          "forward_episode: support size != n_way * k_shot");
  EpisodeForward out;
  out.n_way = ep.n_way;
  out.k_shot = ep.k_shot;
  out.prototypes.provenance = provenance_of(method);
  out.prototypes.classes.assign(ep.n_way + 1, Matrix(params.tokens_per_class(), params.dim()));

  std::vector<std::vector<Matrix>> feats(ep.n_way + 1);
  for (std::uint32_t w = 0; w < ep.n_way; ++w) {
    for (std::uint32_t s = 0; s < ep.k_shot; ++s) {
      auto split = split_fg_bg(ep.support_cloud(w, s), w + 1);
      require(!split.bg_empty, ErrorKind::Argument, "forward_episode: support cloud without background");
      out.shots.push_back(ablation_forward(params, split.fg, split.bg, method, eps, opts));
      const auto& sf = out.shots.back();
      out.prototypes.classes[w + 1] += sf.prototypes.classes[1];
      out.prototypes.classes[0] += sf.prototypes.classes[0];
      feats[w + 1].push_back(std::move(split.fg));
      feats[0].push_back(std::move(split.bg));
    }
    out.prototypes.classes[w + 1] *= 1.0 / static_cast<double>(ep.k_shot);
  }
  out.prototypes.classes[0] *= 1.0 / static_cast<double>(out.shots.size());
  for (auto& parts : feats) out.support_features.push_back(vstack(parts));
  return out;
}

WarmGrads backward_episode(const WarmParams& params, const EpisodeForward& fwd,
                           const std::vector<Matrix>& grad_prototypes, const AttentionOptions& opts) {
  require(grad_prototypes.size() == fwd.prototypes.classes.size(), ErrorKind::Argument,
          "backward_episode: gradient layout mismatch");
  WarmGrads grads = WarmParams::zeros_like(params);
  const double bg_share = 1.0 / static_cast<double>(fwd.shots.size());
  const double fg_share = 1.0 / static_cast<double>(fwd.k_shot);
  const Matrix d_bg = grad_prototypes[0] * bg_share;
  for (std::uint32_t w = 0; w < fwd.n_way; ++w) {
    const Matrix d_fg = grad_prototypes[w + 1] * fg_share;
    for (std::uint32_t s = 0; s < fwd.k_shot; ++s) {
      const auto& shot = fwd.shots[w * fwd.k_shot + s];
      class_backward(params, shot.bg, d_bg, opts, grads);
      class_backward(params, shot.fg, d_fg, opts, grads);
    }
  }
  return grads;
}

EpisodeLoss episode_loss(const EpisodeForward& fwd, const Episode& ep, const LossOptions& opts) {
  const auto& protos = fwd.prototypes.classes;
  EpisodeLoss out;
  out.grad_prototypes.reserve(protos.size());
  for (const auto& p : protos) out.grad_prototypes.emplace_back(p.rows(), p.cols());

  double margin = 0.0;
  for (const auto& q : ep.query) {
    const auto field = point_distances(q.features, protos);
    margin += margin_loss(field, q.labels, opts.margin);
    margin_loss_grad(field, q.labels, q.features, protos, out.grad_prototypes, opts.margin);
  }

  std::vector<Matrix> sim_grads;
  for (const auto& p : protos) sim_grads.emplace_back(p.rows(), p.cols());
  const double sim = simplification_loss(fwd.support_features, protos, &sim_grads);
  for (std::size_t c = 0; c < protos.size(); ++c) out.grad_prototypes[c] += sim_grads[c] * opts.lambda;

  out.report = total_loss(margin, sim, opts.lambda);
  return out;
}

LossAndGrads loss_and_grads(const WarmParams& params, const Episode& ep, Method method, double eps,
                            const AttentionOptions& attn, const LossOptions& loss) {
  const auto fwd = forward_episode(params, ep, method, eps, attn);
  auto l = episode_loss(fwd, ep, loss);
  return {l.report, backward_episode(params, fwd, l.grad_prototypes, attn)};
}

}  // namespace warm
