#include "streamlod/motion_gmm.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <set>
#include <stdexcept>

namespace streamlod {

void GradientLedger::add(AnchorId id, double value) {
  Entry& e = entries_[id];
  e.sum += value;
  ++e.count;
}

double GradientLedger::mean(AnchorId id) const {
  const Entry& e = entries_.at(id);
  return e.sum / static_cast<double>(e.count);
}

std::int64_t GradientLedger::count(AnchorId id) const {
  const auto it = entries_.find(id);
  return it == entries_.end() ? 0 : it->second.count;
}

std::vector<AnchorId> GradientLedger::ids() const {
  std::vector<AnchorId> out;
  out.reserve(entries_.size());
  for (const auto& [id, e] : entries_) out.push_back(id);
  return out;
}

std::vector<double> GradientLedger::means() const {
  std::vector<double> out;
  out.reserve(entries_.size());
  for (const auto& [id, e] : entries_) out.push_back(e.sum / static_cast<double>(e.count));
  return out;
}

GradientLedger accumulate_motion_gradients(const LoDHierarchy& h, const GaussianDecoder& decoder,
                                           std::span<const TrainingView> views,
                                           const RenderSettings& settings, int window) {
  if (views.empty()) throw std::invalid_argument("no views");
  if (window < 1) throw std::invalid_argument("gradient window must be positive");
  const int k = decoder.k();
  std::vector<std::vector<std::pair<AnchorId, double>>> per_view(views.size());
  for (std::size_t v = 0; v < views.size(); ++v) {
    const Camera& cam = views[v].camera;
    const Image& target = views[v].image;
    if (target.width() != cam.width || target.height() != cam.height || target.channels() != 3)
      throw std::invalid_argument("view shape mismatch");
    const auto ids = select_anchors(h, cam);
    const DecodedView dv = decode_view(h, decoder, cam, ids);
    const RenderOutput out = render(dv.gaussians, cam, settings);
    // d/dI_hat of ||I - I_hat||^2.
    Image grad(cam.width, cam.height, 3);
    const auto pr = out.image.pixels();
    const auto pt = target.pixels();
    auto pg = grad.pixels();
    for (std::size_t i = 0; i < pg.size(); ++i) pg[i] = 2.0 * (pr[i] - pt[i]);
    const RenderGrad rg = render_backward(dv.gaussians, cam, settings, out, grad);
    for (std::size_t a = 0; a < ids.size(); ++a) {
      double s = 0.0;
      for (int i = 0; i < k; ++i) s += rg.screen_grad[a * k + i];
      per_view[v].emplace_back(ids[a], s / k);
    }
  }
  GradientLedger ledger(window);
  for (int it = 0; it < window; ++it)
    for (const auto& [id, value] : per_view[it % views.size()]) ledger.add(id, value);
  return ledger;
}

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

double log_component(double x, double w, double m, double v) {
  if (!(w > 0.0)) return -std::numeric_limits<double>::infinity();
  const double d = x - m;
  return std::log(w) - 0.5 * (kLog2Pi + std::log(v)) - d * d / (2.0 * v);
}

double log_sum_exp(double a, double b) {
  const double hi = std::max(a, b);
  if (hi == -std::numeric_limits<double>::infinity()) return hi;
  return hi + std::log(std::exp(a - hi) + std::exp(b - hi));
}

double percentile(const std::vector<double>& sorted, double p) {
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

}  // namespace

double Gmm2::posterior_high(double v) const {
  if (degenerate) return 0.0;
  const double l0 = log_component(v, weights[0], means[0], variances[0]);
  const double l1 = log_component(v, weights[1], means[1], variances[1]);
  const double lse = log_sum_exp(l0, l1);
  return std::exp(l1 - lse);
}

double Gmm2::log_likelihood(std::span<const double> values) const {
  double ll = 0.0;
  for (double x : values)
    ll += log_sum_exp(log_component(x, weights[0], means[0], variances[0]),
                      log_component(x, weights[1], means[1], variances[1]));
  return ll;
}

Gmm2 fit_gmm(std::span<const double> values, const GmmOptions& opts) {
  Gmm2 g;
  if (values.empty()) {
    g.degenerate = true;
    return g;
  }
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(values.size());
  double mean = 0.0;
  for (double x : values) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : values) var += (x - mean) * (x - mean);
  var /= n;

  if (sorted.front() == sorted.back() || !(var > 0.0)) {
    g.degenerate = true;
    g.means[0] = g.means[1] = sorted.front();
    g.variances[0] = g.variances[1] = 0.0;
    g.weights[0] = 1.0;
    g.weights[1] = 0.0;
    return g;
  }

  const double floor = opts.variance_floor_ratio * var;
  g.means[0] = percentile(sorted, 0.10);
  g.means[1] = percentile(sorted, 0.90);
  if (g.means[0] == g.means[1]) {
    // Heavily tied data: spread the initial means to the extremes instead.
    g.means[0] = sorted.front();
    g.means[1] = sorted.back();
  }
  g.variances[0] = g.variances[1] = var;

  std::vector<double> resp(values.size());
  double ll_prev = g.log_likelihood(values);
  g.log_likelihood_trace.push_back(ll_prev);
  for (int it = 0; it < opts.max_iterations; ++it) {
    // E-step: responsibility of the second component.
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double x = values[i];
      const double l0 = log_component(x, g.weights[0], g.means[0], g.variances[0]);
      const double l1 = log_component(x, g.weights[1], g.means[1], g.variances[1]);
      resp[i] = std::exp(l1 - log_sum_exp(l0, l1));
    }
    // M-step.
    for (int j = 0; j < 2; ++j) {
      double nj = 0.0, sx = 0.0;
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double r = j == 1 ? resp[i] : 1.0 - resp[i];
        nj += r;
        sx += r * values[i];
      }
      g.weights[j] = nj / n;
      if (!(nj > 0.0)) continue;
      const double mj = sx / nj;
      double sv = 0.0;
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double r = j == 1 ? resp[i] : 1.0 - resp[i];
        sv += r * (values[i] - mj) * (values[i] - mj);
      }
      g.means[j] = mj;
      g.variances[j] = std::max(sv / nj, floor);
    }
    ++g.iterations;
    const double ll = g.log_likelihood(values);
    g.log_likelihood_trace.push_back(ll);
    const bool converged = ll - ll_prev < opts.tolerance;
    ll_prev = ll;
    if (converged) break;
  }

  if (g.means[0] > g.means[1]) {
    std::swap(g.means[0], g.means[1]);
    std::swap(g.variances[0], g.variances[1]);
    std::swap(g.weights[0], g.weights[1]);
  }
  return g;
}

Partition classify_dynamic(const Gmm2& gmm, const GradientLedger& ledger, std::span<const AnchorId> anchors,
                           double rho) {
  if (!(rho > 0.0 && rho < 1.0)) throw std::invalid_argument("rho must lie in (0, 1)");
  Partition p;
  for (AnchorId id : anchors) {
    const bool seen = ledger.contains(id);
    const double v = seen ? ledger.mean(id) : 0.0;
    const double post = seen ? gmm.posterior_high(v) : 0.0;
    p.grad_mean[id] = v;
    p.posterior[id] = post;
    (seen && post > rho ? p.dynamic_ids : p.static_ids).push_back(id);
  }
  return p;
}

void apply_partition(LoDHierarchy& h, const Partition& p) {
  for (auto& a : h.anchors()) a.state = AnchorState::Static;
  for (AnchorId id : p.dynamic_ids)
    if (Anchor* a = h.find(id)) a->state = AnchorState::Dynamic;
}

void write_partition(std::ostream& os, const Partition& p) {
  std::set<AnchorId> dyn(p.dynamic_ids.begin(), p.dynamic_ids.end());
  const auto flags = os.flags();
  os << std::setprecision(17);
  for (const auto& [id, post] : p.posterior) {
    os << id << ',' << (dyn.contains(id) ? "dynamic" : "static") << ',' << p.grad_mean.at(id) << ','
       << post << '\n';
  }
  os.flags(flags);
}

}  // namespace streamlod
