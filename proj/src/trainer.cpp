#include "streamlod/trainer.hpp"

#include "streamlod/metrics.hpp"
#include "streamlod/rng.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace streamlod {

void TrainConfig::validate() const {
  if (init_epochs < 0 || stream_epochs < 0) throw std::invalid_argument("epoch counts must be non-negative");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must lie in [0, 1]");
  for (double v : {lr.feature, lr.offsets, lr.scales, lr.mlp, lr.latents, lr.pos, lr.latent_decoders})
    if (!(v > 0.0)) throw std::invalid_argument("learning rates must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0) || !(adam.eps > 0.0))
    throw std::invalid_argument("invalid Adam parameters");
  if (!(static_frame_tolerance >= 0.0)) throw std::invalid_argument("static frame tolerance must be non-negative");
  if (init_window < 1 || stream_window < 1) throw std::invalid_argument("windows must be positive");
  const double r = effective_rho();
  if (!(r > 0.0 && r < 1.0)) throw std::invalid_argument("rho must lie in (0, 1)");
  if (!(quant_step_feature > 0.f) || !(quant_step_offset > 0.f))
    throw std::invalid_argument("quantization step must be positive");
  render.validate();
}

LossResult loss(const Image& render, const Image& target, double lambda) {
  if (!render.same_shape(target)) throw std::invalid_argument("image shape mismatch");
  LossResult out;
  out.grad = Image(render.width(), render.height(), render.channels());
  const auto pr = render.pixels();
  const auto pt = target.pixels();
  auto pg = out.grad.pixels();
  const double n = static_cast<double>(pr.size());
  double l1 = 0.0;
  for (std::size_t i = 0; i < pr.size(); ++i) {
    const double d = pr[i] - pt[i];
    l1 += std::abs(d);
    pg[i] = (1.0 - lambda) * (d > 0.0 ? 1.0 : d < 0.0 ? -1.0 : 0.0) / n;
  }
  out.l1 = l1 / n;
  out.value = (1.0 - lambda) * out.l1;
  if (lambda > 0.0) {
    const SsimResult s = ssim_with_grad(render, target);
    out.ssim = s.value;
    out.value += lambda * (1.0 - s.value);
    const auto gs = s.grad_a.pixels();
    for (std::size_t i = 0; i < pg.size(); ++i) pg[i] -= lambda * gs[i];
  }
  return out;
}

void adam_step(Eigen::Ref<Eigen::VectorXd> param, const Eigen::VectorXd& grad, AdamState& s, double lr,
               const AdamParams& p) {
  if (grad.size() != param.size()) throw std::invalid_argument("gradient size mismatch");
  if (s.m.size() != param.size()) {
    s.m = Eigen::VectorXd::Zero(param.size());
    s.v = Eigen::VectorXd::Zero(param.size());
    s.t = 0;
  }
  ++s.t;
  const double c1 = 1.0 - std::pow(p.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(p.beta2, static_cast<double>(s.t));
  for (Eigen::Index i = 0; i < param.size(); ++i) {
    s.m[i] = p.beta1 * s.m[i] + (1.0 - p.beta1) * grad[i];
    s.v[i] = p.beta2 * s.v[i] + (1.0 - p.beta2) * grad[i] * grad[i];
    const double mh = s.m[i] / c1;
    const double vh = s.v[i] / c2;
    param[i] -= lr * mh / (std::sqrt(vh) + p.eps);
  }
}

Model make_initial_model(std::span<const Vec3> points, double d_max, double d_min, const LoDConfig& cfg,
                         const InitOptions& init, DecoderLayout layout, std::uint64_t seed) {
  Model m;
  m.hierarchy = init_hierarchy(points, d_max, d_min, cfg, init);
  m.decoder = GaussianDecoder(cfg.k, layout, seed);
  return m;
}

namespace {

Eigen::Map<Eigen::VectorXd> flat(RowMatX3& m) { return {m.data(), m.size()}; }
Eigen::Map<const Eigen::VectorXd> flat(const RowMatX3& m) { return {m.data(), m.size()}; }
Eigen::Map<Eigen::VectorXd> flat(Eigen::MatrixXd& m) { return {m.data(), m.size()}; }

void check_views(std::span<const TrainingView> views) {
  if (views.empty()) throw std::invalid_argument("no training views");
  for (const auto& v : views) {
    v.camera.validate();
    if (v.image.width() != v.camera.width || v.image.height() != v.camera.height || v.image.channels() != 3)
      throw std::invalid_argument("view shape mismatch");
  }
}

struct ViewScore {
  double loss = 0.0;
  double psnr = 0.0;
};

ViewScore score_views(const Model& m, std::span<const TrainingView> views, const TrainConfig& cfg,
                      std::vector<double>* per_view = nullptr) {
  ViewScore s;
  for (const auto& v : views) {
    const RenderOutput out = render_model(m, v.camera, cfg.render);
    s.loss += loss(out.image, v.image, cfg.lambda).value;
    const double p = psnr(out.image, v.image);
    s.psnr += p;
    if (per_view) per_view->push_back(p);
  }
  s.loss /= static_cast<double>(views.size());
  s.psnr /= static_cast<double>(views.size());
  return s;
}

}  // namespace

StreamTrainer::StreamTrainer(Model model, TrainConfig cfg) : model_(std::move(model)), cfg_(cfg) {
  cfg_.validate();
  model_.hierarchy.config().validate();
  if (model_.decoder.k() != model_.hierarchy.config().k) throw std::invalid_argument("decoder K mismatch");
  canonical_ = model_;
}

InitialReport StreamTrainer::train_initial(std::span<const TrainingView> views) {
  check_views(views);
  InitialReport rep;
  LoDHierarchy& h = model_.hierarchy;
  const int levels = h.config().levels;
  const int k = model_.decoder.k();
  const std::int64_t total = static_cast<std::int64_t>(cfg_.init_epochs) * static_cast<std::int64_t>(views.size());
  const DropoutSchedule sched{std::max<std::int64_t>(total, 1)};
  const int epochs_per_level = std::max(1, cfg_.init_epochs / levels);
  mlp_moments_.assign(4 * model_.decoder.nets().size(), AdamState{});

  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg_.init_epochs; ++epoch) {
    h.config().l_max = std::min(levels - 1, epoch / epochs_per_level);
    double epoch_loss = 0.0;
    for (const auto& view : views) {
      const Camera& cam = view.camera;
      try {
        const auto ids = select_anchors(h, cam);
        const DecodedView dv = decode_view(h, model_.decoder, cam, ids);
        const DropoutMask mask = dropout_mask(dv.levels, step, sched, cfg_.seed, cfg_.dropout);
        const RenderOutput out = render(dv.gaussians, cam, cfg_.render, mask.factor);
        const LossResult lr = loss(out.image, view.image, cfg_.lambda);
        epoch_loss += lr.value;
        const RenderGrad rg = render_backward(dv.gaussians, cam, cfg_.render, out, lr.grad, mask.factor);

        std::vector<MlpNet> mlp_grad = model_.decoder.zero_grad();
        std::vector<AnchorGrad> grads;
        grads.reserve(ids.size());
        for (std::size_t i = 0; i < ids.size(); ++i) {
          const std::span<const GaussianGrad> up(rg.gaussian.data() + i * k, k);
          grads.push_back(decode_backward(dv.tapes[i], up, model_.decoder, &mlp_grad));
        }

        for (std::size_t i = 0; i < ids.size(); ++i) {
          Anchor& a = *h.find(ids[i]);
          double sg = 0.0, op = 0.0;
          for (int j = 0; j < k; ++j) {
            sg += rg.screen_grad[i * k + j];
            op += dv.gaussians[i * k + j].opacity;
          }
          a.grad_sum += sg / k;
          ++a.grad_count;
          a.opacity_sum += op / k;
          ++a.opacity_count;
          ++a.visibility_count;

          AnchorMoments& mom = anchor_moments_[a.id];
          adam_step(a.feature, grads[i].feature, mom.feature, cfg_.lr.feature, cfg_.adam);
          adam_step(flat(a.offsets), flat(grads[i].offsets), mom.offsets, cfg_.lr.offsets, cfg_.adam);
          adam_step(flat(a.raw_scales), flat(grads[i].raw_scales), mom.scales, cfg_.lr.scales, cfg_.adam);
        }

        auto& nets = model_.decoder.mutable_nets();
        for (std::size_t n = 0; n < nets.size(); ++n) {
          adam_step(flat(nets[n].w1), flat(mlp_grad[n].w1), mlp_moments_[4 * n], cfg_.lr.mlp, cfg_.adam);
          adam_step(nets[n].b1, mlp_grad[n].b1, mlp_moments_[4 * n + 1], cfg_.lr.mlp, cfg_.adam);
          adam_step(flat(nets[n].w2), flat(mlp_grad[n].w2), mlp_moments_[4 * n + 2], cfg_.lr.mlp, cfg_.adam);
          adam_step(nets[n].b2, mlp_grad[n].b2, mlp_moments_[4 * n + 3], cfg_.lr.mlp, cfg_.adam);
        }
      } catch (const DecoderDivergence& e) {
        throw TrainingError(e.what(), step);
      }
      ++step;

      if (cfg_.refine_structure && step % cfg_.init_window == 0) {
        rep.promoted += promote_levels(h);
        rep.pruned += prune_anchors(h);
        std::set<AnchorId> alive;
        for (const auto& a : h.anchors()) alive.insert(a.id);
        std::erase_if(anchor_moments_, [&](const auto& kv) { return !alive.contains(kv.first); });
      }
    }
    rep.epoch_loss.push_back(epoch_loss / static_cast<double>(views.size()));
  }
  h.config().l_max = levels - 1;
  for (auto& a : h.anchors()) a.reset_statistics();
  rep.steps = step;

  model_.round_to_f32();
  canonical_ = model_;
  reference_.clear();
  for (const auto& v : views) reference_.push_back(v.image);
  score_views(model_, views, cfg_, &rep.view_psnr);
  return rep;
}

FrameResult StreamTrainer::train_frame(std::span<const TrainingView> views, int frame) {
  if (frame < 1) throw std::invalid_argument("streamed frames start at 1");
  check_views(views);
  FrameResult res;
  res.frame = frame;
  LoDHierarchy& h = model_.hierarchy;
  const int k = model_.decoder.k();

  std::vector<AnchorId> all_ids;
  for (const auto& a : h.anchors()) all_ids.push_back(a.id);

  bool unchanged = reference_.size() == views.size();
  for (std::size_t v = 0; unchanged && v < views.size(); ++v) {
    if (!views[v].image.same_shape(reference_[v])) {
      unchanged = false;
      break;
    }
    const auto a = views[v].image.pixels();
    const auto b = reference_[v].pixels();
    for (std::size_t i = 0; i < a.size(); ++i)
      if (std::abs(a[i] - b[i]) > cfg_.static_frame_tolerance) {
        unchanged = false;
        break;
      }
  }

  if (!cfg_.partition) {
    partition_ = all_ids;
  } else if (!unchanged && cfg_.identifies_at(frame)) {
    const GradientLedger ledger =
        accumulate_motion_gradients(h, model_.decoder, views, cfg_.render, cfg_.stream_window);
    const std::vector<double> values = ledger.means();
    const Gmm2 gmm = fit_gmm(values);
    const Partition part = classify_dynamic(gmm, ledger, all_ids, cfg_.effective_rho());
    partition_ = part.dynamic_ids;
    res.gmm = gmm;
    res.partition = part;
    res.identified = true;
  }
  std::vector<AnchorId> dyn;
  if (cfg_.partition && unchanged) {
    res.static_frame = true;
  } else {
    for (AnchorId id : partition_)
      if (h.find(id)) dyn.push_back(id);
    reference_.clear();
    for (const auto& v : views) reference_.push_back(v.image);
  }
  for (auto& a : h.anchors()) a.state = AnchorState::Static;
  for (AnchorId id : dyn) h.find(id)->state = AnchorState::Dynamic;
  res.dynamic_ids = dyn;

  const bool quantized = cfg_.quantize;
  if (!model_.latents) model_.latents = LatentDecoders::random(k, mix_seed(cfg_.seed, 0x1a7e57ull));
  LatentDecoders& ld = *model_.latents;
  const bool train_decoders = quantized && !frozen_ && !dyn.empty();

  struct Residual {
    Eigen::VectorXd pos = Eigen::VectorXd::Zero(3);
    Eigen::VectorXd feat, off;
    AdamState m_pos, m_feat, m_off;
  };
  std::map<AnchorId, Residual> residuals;
  std::map<AnchorId, Anchor> base;
  for (AnchorId id : dyn) {
    Residual r;
    r.feat = Eigen::VectorXd::Zero(quantized ? kLatentDim : kFeatureDim);
    r.off = Eigen::VectorXd::Zero(quantized ? kLatentDim : 3 * k);
    residuals.emplace(id, std::move(r));
    base.emplace(id, *h.find(id));
  }
  AdamState m_df, m_do;

  const auto feature_delta = [&](const Residual& r) -> Eigen::VectorXd {
    return quantized ? ld.feature_residual(quantize_ste(r.feat, cfg_.quant_step_feature).values) : r.feat;
  };
  const auto offset_delta = [&](const Residual& r) -> Eigen::VectorXd {
    return quantized ? ld.offset_residual(quantize_ste(r.off, cfg_.quant_step_offset).values) : r.off;
  };

  if (!dyn.empty()) {
    LoDHierarchy work = h;
    // Static anchors and the MLP are frozen for the whole frame, so their decode
    // per view is computed once and reused by every epoch.
    std::vector<std::map<AnchorId, DecodedAnchor>> static_decodes(views.size());
    for (int epoch = 0; epoch < cfg_.stream_epochs; ++epoch) {
      double epoch_loss = 0.0;
      for (std::size_t vi = 0; vi < views.size(); ++vi) {
        const TrainingView& view = views[vi];
        for (const auto& [id, r] : residuals) {
          Anchor& a = *work.find(id);
          const Anchor& b = base.at(id);
          a.center = b.center + r.pos;
          a.feature = b.feature + feature_delta(r);
          a.offsets = b.offsets;
          flat(a.offsets) += offset_delta(r);
        }
        const Camera& cam = view.camera;
        const auto ids = select_anchors(work, cam);
        DecodedView dv;
        std::vector<std::uint8_t> needs_grad;
        dv.anchor_ids = ids;
        for (AnchorId id : ids) {
          const bool dynamic = residuals.contains(id);
          DecodedAnchor fresh;
          const DecodedAnchor* d = nullptr;
          if (dynamic) {
            fresh = decode(*work.find(id), cam, model_.decoder, work.config());
            d = &fresh;
          } else {
            auto [it, inserted] = static_decodes[vi].try_emplace(id);
            if (inserted) it->second = decode(*work.find(id), cam, model_.decoder, work.config());
            d = &it->second;
          }
          for (const auto& g : d->gaussians) {
            dv.gaussians.push_back(g);
            dv.levels.push_back(g.level);
            needs_grad.push_back(dynamic ? 1 : 0);
          }
          dv.tapes.push_back(d->tape);
        }
        const RenderOutput out = render(dv.gaussians, cam, cfg_.render);
        const LossResult lr = loss(out.image, view.image, cfg_.lambda);
        epoch_loss += lr.value;
        const RenderGrad rg = render_backward(dv.gaussians, cam, cfg_.render, out, lr.grad, {}, needs_grad);

        Eigen::MatrixXd g_df = Eigen::MatrixXd::Zero(ld.feature.rows(), ld.feature.cols());
        Eigen::MatrixXd g_do = Eigen::MatrixXd::Zero(ld.offset.rows(), ld.offset.cols());
        for (std::size_t i = 0; i < ids.size(); ++i) {
          const auto it = residuals.find(ids[i]);
          if (it == residuals.end()) continue;
          Residual& r = it->second;
          const std::span<const GaussianGrad> up(rg.gaussian.data() + i * k, k);
          const AnchorGrad ag = decode_backward(dv.tapes[i], up, model_.decoder, nullptr);
          const Eigen::VectorXd g_off = flat(ag.offsets);
          Eigen::VectorXd g_feat_code, g_off_code;
          if (quantized) {
            // Straight-through: the rounding is the identity in the backward pass.
            g_feat_code = quantize_ste_backward(ld.feature.transpose() * ag.feature);
            g_off_code = quantize_ste_backward(ld.offset.transpose() * g_off);
            if (train_decoders) {
              g_df += ag.feature * quantize_ste(r.feat, cfg_.quant_step_feature).values.transpose();
              g_do += g_off * quantize_ste(r.off, cfg_.quant_step_offset).values.transpose();
            }
          } else {
            g_feat_code = ag.feature;
            g_off_code = g_off;
          }
          adam_step(r.pos, ag.center, r.m_pos, cfg_.lr.pos, cfg_.adam);
          adam_step(r.feat, g_feat_code, r.m_feat, cfg_.lr.latents, cfg_.adam);
          adam_step(r.off, g_off_code, r.m_off, cfg_.lr.latents, cfg_.adam);
        }
        if (train_decoders) {
          adam_step(flat(ld.feature), Eigen::Map<const Eigen::VectorXd>(g_df.data(), g_df.size()), m_df,
                    cfg_.lr.latent_decoders, cfg_.adam);
          adam_step(flat(ld.offset), Eigen::Map<const Eigen::VectorXd>(g_do.data(), g_do.size()), m_do,
                    cfg_.lr.latent_decoders, cfg_.adam);
        }
      }
      res.epoch_loss.push_back(epoch_loss / static_cast<double>(views.size()));
    }
  }

  if (train_decoders) {
    ld.round_to_f32();
    ld.frozen = true;
    frozen_ = true;
  }
  if (frozen_) canonical_.latents = ld;

  ResidualSet set;
  set.frame = static_cast<std::uint32_t>(frame);
  set.kind = quantized ? ResidualKind::Quantized : ResidualKind::Raw;
  set.step_feature = cfg_.quant_step_feature;
  set.step_offset = cfg_.quant_step_offset;
  for (const auto& [id, r] : residuals) {
    ResidualEntry e;
    e.anchor_id = id;
    for (int c = 0; c < 3; ++c) e.pos_delta[c] = static_cast<float>(r.pos[c]);
    e.feature_code = r.feat;
    e.offset_code = r.off;
    set.entries.push_back(std::move(e));
  }
  finalize_quantized(set);
  res.bytes = encode_frame(set);
  // Apply what a decoder will read, so playback reproduces this model exactly.
  res.residuals = decode_frame(res.bytes);
  for (const auto& e : res.residuals.entries) apply_residual(*h.find(e.anchor_id), e, res.residuals.kind, ld);

  res.optimized_scalars = dyn.size() * (quantized ? 3 + 2 * kLatentDim : 3 + kFeatureDim + 3 * k);
  if (train_decoders) res.optimized_scalars += ld.feature.size() + ld.offset.size();
  const ViewScore s = score_views(model_, views, cfg_);
  res.loss = s.loss;
  res.psnr = s.psnr;
  return res;
}

}  // namespace streamlod
