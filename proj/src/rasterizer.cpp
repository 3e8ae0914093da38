#include "streamlod/rasterizer.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <thread>

namespace streamlod {

void RenderSettings::validate() const {
  if (tile_size < 1) throw std::invalid_argument("tile size must be at least 1");
  if (!((background.array() >= 0.0).all() && (background.array() <= 1.0).all()))
    throw std::invalid_argument("background must lie in [0,1]");
  if (max_splats_per_pixel < 1) throw std::invalid_argument("max splats per pixel must be positive");
  if (threads < 1) throw std::invalid_argument("thread count must be positive");
}

namespace {

constexpr double kSupportQ = kSupportSigma * kSupportSigma;

void hash_mix(std::uint64_t& h, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xffu;
    h *= 0x100000001b3ull;
  }
}
void hash_mix(std::uint64_t& h, double v) { hash_mix(h, std::bit_cast<std::uint64_t>(v)); }

double factor_of(OpacityFactors f, std::size_t i) { return f.empty() ? 1.0 : f[i]; }

int tiles_x(const Camera& cam, const RenderSettings& s) { return (cam.width + s.tile_size - 1) / s.tile_size; }
int tiles_y(const Camera& cam, const RenderSettings& s) { return (cam.height + s.tile_size - 1) / s.tile_size; }

struct PixelHit {
  const Splat* splat;
  std::size_t slot;  // position in the candidate list
  double alpha;
  double gauss;
  double dx, dy;
  double transmittance;  // before this splat
};

// Front-to-back compositing of one pixel over an ordered candidate list. The
// single implementation keeps the tiled and reference paths bit-identical.
template <typename Visit>
Vec3 composite_pixel(std::span<const Splat* const> candidates, double px, double py,
                     const RenderSettings& s, Visit&& visit) {
  Vec3 color = Vec3::Zero();
  double t = 1.0;
  int used = 0;
  for (std::size_t slot = 0; slot < candidates.size(); ++slot) {
    const Splat& sp = *candidates[slot];
    const double dx = px - sp.mean.x();
    const double dy = py - sp.mean.y();
    const double q = sp.conic_a * dx * dx + 2.0 * sp.conic_b * dx * dy + sp.conic_c * dy * dy;
    if (s.hard_cutoffs && q > kSupportQ) continue;
    const double g = std::exp(-0.5 * q);
    const double alpha = sp.opacity * g;
    visit(PixelHit{&sp, slot, alpha, g, dx, dy, t});
    color += sp.color * (alpha * t);
    t *= (1.0 - alpha);
    ++used;
    if (used >= s.max_splats_per_pixel) break;
    if (s.hard_cutoffs && t < s.min_transmittance) break;
  }
  return color + s.background * t;
}

template <typename Fn>
void for_each_tile(int tile_count, int threads, Fn&& fn) {
  if (threads <= 1 || tile_count <= 1) {
    for (int t = 0; t < tile_count; ++t) fn(t);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < std::min(threads, tile_count); ++w)
    pool.emplace_back([&] {
      for (int t = next++; t < tile_count; t = next++) fn(t);
    });
  for (auto& th : pool) th.join();
}

std::vector<std::vector<const Splat*>> bin_tiles(const RenderOutput& out, const Camera& cam,
                                                 const RenderSettings& s) {
  const int tx = tiles_x(cam, s), ty = tiles_y(cam, s);
  std::vector<std::vector<const Splat*>> bins(static_cast<std::size_t>(tx) * ty);
  for (const Splat& sp : out.splats)
    for (int y = sp.tile_y0; y <= sp.tile_y1; ++y)
      for (int x = sp.tile_x0; x <= sp.tile_x1; ++x) bins[static_cast<std::size_t>(y) * tx + x].push_back(&sp);
  return bins;
}

}  // namespace

std::uint64_t fingerprint(std::span<const NeuralGaussian> gaussians, OpacityFactors factors,
                          const Camera& cam) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  hash_mix(h, static_cast<std::uint64_t>(gaussians.size()));
  for (std::size_t i = 0; i < gaussians.size(); ++i) {
    const auto& g = gaussians[i];
    for (int c = 0; c < 3; ++c) {
      hash_mix(h, g.mu[c]);
      hash_mix(h, g.scale[c]);
      hash_mix(h, g.color[c]);
    }
    hash_mix(h, g.rot.w);
    hash_mix(h, g.rot.x);
    hash_mix(h, g.rot.y);
    hash_mix(h, g.rot.z);
    hash_mix(h, g.opacity);
    hash_mix(h, g.id);
    hash_mix(h, factor_of(factors, i));
  }
  for (int i = 0; i < 9; ++i) hash_mix(h, cam.rotation.data()[i]);
  for (int i = 0; i < 3; ++i) hash_mix(h, cam.translation[i]);
  hash_mix(h, cam.fx);
  hash_mix(h, cam.fy);
  hash_mix(h, cam.cx);
  hash_mix(h, cam.cy);
  return h;
}

RenderOutput prepare_splats(std::span<const NeuralGaussian> gaussians, OpacityFactors factors,
                            const Camera& cam, const RenderSettings& s) {
  cam.validate();
  s.validate();
  if (!factors.empty() && factors.size() != gaussians.size())
    throw std::invalid_argument("opacity factor count mismatch");
  RenderOutput out;
  out.visible.assign(gaussians.size(), 0);
  out.fingerprint = fingerprint(gaussians, factors, cam);
  const int tx = tiles_x(cam, s), ty = tiles_y(cam, s);

  for (std::size_t i = 0; i < gaussians.size(); ++i) {
    const double f = factor_of(factors, i);
    if (f == 0.0) continue;
    const NeuralGaussian& g = gaussians[i];
    const auto proj = project_gaussian(g.mu, build_covariance(g.scale, g.rot), cam);
    if (!proj) {
      ++out.culled;
      continue;
    }
    const Mat2& cv = proj->cov;
    const double det = cv(0, 0) * cv(1, 1) - cv(0, 1) * cv(1, 0);
    if (!(det > 0.0) || !std::isfinite(det)) {
      ++out.skipped_singular;
      continue;
    }
    Splat sp;
    sp.index = i;
    sp.id = g.id;
    sp.mean = proj->mean;
    sp.cov = cv;
    sp.conic_a = cv(1, 1) / det;
    sp.conic_b = -cv(0, 1) / det;
    sp.conic_c = cv(0, 0) / det;
    sp.depth = proj->depth;
    sp.opacity = g.opacity * f;
    sp.color = g.color;
    const double mid = 0.5 * (cv(0, 0) + cv(1, 1));
    const double lambda = mid + std::sqrt(std::max(0.0, mid * mid - det));
    sp.radius = kSupportSigma * std::sqrt(lambda);

    if (s.hard_cutoffs) {
      // Pixel centers sit at +0.5; one extra pixel of margin absorbs rounding.
      const double x0 = std::floor(sp.mean.x() - sp.radius - 1.0), x1 = std::floor(sp.mean.x() + sp.radius + 1.0);
      const double y0 = std::floor(sp.mean.y() - sp.radius - 1.0), y1 = std::floor(sp.mean.y() + sp.radius + 1.0);
      if (x1 < 0.0 || y1 < 0.0 || x0 >= cam.width || y0 >= cam.height) continue;
      sp.tile_x0 = static_cast<int>(std::max(0.0, x0)) / s.tile_size;
      sp.tile_y0 = static_cast<int>(std::max(0.0, y0)) / s.tile_size;
      sp.tile_x1 = static_cast<int>(std::min<double>(cam.width - 1, x1)) / s.tile_size;
      sp.tile_y1 = static_cast<int>(std::min<double>(cam.height - 1, y1)) / s.tile_size;
    } else {
      sp.tile_x0 = sp.tile_y0 = 0;
      sp.tile_x1 = tx - 1;
      sp.tile_y1 = ty - 1;
    }
    out.visible[i] = 1;
    out.splats.push_back(sp);
  }
  std::sort(out.splats.begin(), out.splats.end(), [](const Splat& a, const Splat& b) {
    if (a.depth != b.depth) return a.depth < b.depth;
    if (a.id != b.id) return a.id < b.id;
    return a.index < b.index;
  });
  return out;
}

RenderOutput render(std::span<const NeuralGaussian> gaussians, const Camera& cam,
                    const RenderSettings& s, OpacityFactors factors) {
  RenderOutput out = prepare_splats(gaussians, factors, cam, s);
  out.image = Image(cam.width, cam.height, 3);
  const auto bins = bin_tiles(out, cam, s);
  const int tx = tiles_x(cam, s);
  for_each_tile(static_cast<int>(bins.size()), s.threads, [&](int t) {
    const int bx = (t % tx) * s.tile_size, by = (t / tx) * s.tile_size;
    const auto& list = bins[t];
    for (int y = by; y < std::min(by + s.tile_size, cam.height); ++y)
      for (int x = bx; x < std::min(bx + s.tile_size, cam.width); ++x) {
        const Vec3 c = composite_pixel(list, x + 0.5, y + 0.5, s, [](const PixelHit&) {});
        for (int ch = 0; ch < 3; ++ch) out.image.at(x, y, ch) = c[ch];
      }
  });
  return out;
}

Image render_reference(std::span<const NeuralGaussian> gaussians, const Camera& cam,
                       const RenderSettings& s, OpacityFactors factors) {
  const RenderOutput prep = prepare_splats(gaussians, factors, cam, s);
  std::vector<const Splat*> all;
  all.reserve(prep.splats.size());
  for (const Splat& sp : prep.splats) all.push_back(&sp);
  Image img(cam.width, cam.height, 3);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const Vec3 c = composite_pixel(all, x + 0.5, y + 0.5, s, [](const PixelHit&) {});
      for (int ch = 0; ch < 3; ++ch) img.at(x, y, ch) = c[ch];
    }
  return img;
}

namespace {

struct ConicGrad {
  Vec2 mean = Vec2::Zero();
  double a = 0.0, b = 0.0, c = 0.0;
  double opacity = 0.0;
  Vec3 color = Vec3::Zero();
};

}  // namespace

RenderGrad render_backward(std::span<const NeuralGaussian> gaussians, const Camera& cam,
                           const RenderSettings& s, const RenderOutput& output, const Image& dL_dC,
                           OpacityFactors factors, std::span<const std::uint8_t> needs_grad) {
  if (output.fingerprint != fingerprint(gaussians, factors, cam) ||
      output.visible.size() != gaussians.size())
    throw StaleForwardState();
  if (dL_dC.width() != cam.width || dL_dC.height() != cam.height || dL_dC.channels() != 3)
    throw std::invalid_argument("image shape mismatch");
  if (!needs_grad.empty() && needs_grad.size() != gaussians.size())
    throw std::invalid_argument("gradient mask size mismatch");
  const auto wanted = [&](std::size_t index) { return needs_grad.empty() || needs_grad[index] != 0; };

  const auto bins = bin_tiles(output, cam, s);
  const int tx = tiles_x(cam, s);
  // Per-tile partial sums, reduced in tile order for schedule-independent results.
  std::vector<std::vector<ConicGrad>> partial(bins.size());
  for_each_tile(static_cast<int>(bins.size()), s.threads, [&](int t) {
    const auto& list = bins[t];
    auto& acc = partial[t];
    acc.assign(list.size(), ConicGrad{});
    if (list.empty()) return;
    std::vector<const Splat*> flagged;
    if (!needs_grad.empty()) {
      for (const Splat* sp : list)
        if (wanted(sp->index)) flagged.push_back(sp);
      if (flagged.empty()) return;
    }
    // With hard cutoffs a pixel outside every flagged support adds nothing for them.
    const auto reaches_flagged = [&](double px, double py) {
      if (needs_grad.empty() || !s.hard_cutoffs) return true;
      return std::any_of(flagged.begin(), flagged.end(), [&](const Splat* sp) {
        const double dx = px - sp->mean.x(), dy = py - sp->mean.y();
        return sp->conic_a * dx * dx + 2.0 * sp->conic_b * dx * dy + sp->conic_c * dy * dy <= kSupportQ;
      });
    };
    const int bx = (t % tx) * s.tile_size, by = (t / tx) * s.tile_size;
    std::vector<PixelHit> hits;
    for (int y = by; y < std::min(by + s.tile_size, cam.height); ++y)
      for (int x = bx; x < std::min(bx + s.tile_size, cam.width); ++x) {
        const Vec3 g_pix(dL_dC.at(x, y, 0), dL_dC.at(x, y, 1), dL_dC.at(x, y, 2));
        if (g_pix.isZero(0.0)) continue;
        if (!reaches_flagged(x + 0.5, y + 0.5)) continue;
        hits.clear();
        composite_pixel(list, x + 0.5, y + 0.5, s, [&](const PixelHit& h) { hits.push_back(h); });
        Vec3 behind = s.background;
        for (auto it = hits.rbegin(); it != hits.rend(); ++it) {
          const Splat& sp = *it->splat;
          const double d_alpha = it->transmittance * (sp.color - behind).dot(g_pix);
          behind = sp.color * it->alpha + behind * (1.0 - it->alpha);
          if (!wanted(sp.index)) continue;
          ConicGrad& cg = acc[it->slot];
          cg.color += g_pix * (it->alpha * it->transmittance);
          cg.opacity += d_alpha * it->gauss;
          const double d_q = -0.5 * d_alpha * sp.opacity * it->gauss;
          cg.mean.x() -= d_q * (2.0 * sp.conic_a * it->dx + 2.0 * sp.conic_b * it->dy);
          cg.mean.y() -= d_q * (2.0 * sp.conic_b * it->dx + 2.0 * sp.conic_c * it->dy);
          cg.a += d_q * it->dx * it->dx;
          cg.b += d_q * 2.0 * it->dx * it->dy;
          cg.c += d_q * it->dy * it->dy;
        }
      }
  });

  std::vector<ConicGrad> total(gaussians.size());
  for (std::size_t t = 0; t < bins.size(); ++t)
    for (std::size_t j = 0; j < bins[t].size(); ++j) {
      ConicGrad& dst = total[bins[t][j]->index];
      const ConicGrad& src = partial[t][j];
      dst.mean += src.mean;
      dst.a += src.a;
      dst.b += src.b;
      dst.c += src.c;
      dst.opacity += src.opacity;
      dst.color += src.color;
    }

  RenderGrad out;
  out.splat.assign(gaussians.size(), SplatGrad{});
  out.screen_grad.assign(gaussians.size(), 0.0);
  out.gaussian.assign(gaussians.size(), GaussianGrad{});
  for (const Splat& sp : output.splats) {
    if (!wanted(sp.index)) continue;
    const ConicGrad& cg = total[sp.index];
    SplatGrad& sg = out.splat[sp.index];
    sg.mean = cg.mean;
    sg.opacity = cg.opacity;
    sg.color = cg.color;
    Mat2 conic;
    conic << sp.conic_a, sp.conic_b, sp.conic_b, sp.conic_c;
    Mat2 g_conic;
    g_conic << cg.a, 0.5 * cg.b, 0.5 * cg.b, cg.c;
    sg.cov = -conic * g_conic * conic;
    out.screen_grad[sp.index] = cg.mean.norm();
    out.gaussian[sp.index] = gaussian_backward(gaussians[sp.index], cam, sg, factor_of(factors, sp.index));
  }
  return out;
}

GaussianGrad gaussian_backward(const NeuralGaussian& g, const Camera& cam, const SplatGrad& sg,
                               double opacity_factor) {
  GaussianGrad out;
  const Covariance3D sigma = build_covariance(g.scale, g.rot);
  const ProjectionGrad pg = project_gaussian_backward(g.mu, sigma, cam, sg.mean, sg.cov);
  const CovarianceGrad cg = build_covariance_backward(g.scale, g.rot, pg.sigma);
  out.mu = pg.mu;
  out.scale = cg.scale;
  out.rot = cg.rotation;
  out.opacity = sg.opacity * opacity_factor;
  out.color = sg.color;
  return out;
}

}  // namespace streamlod
