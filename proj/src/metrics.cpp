#include "streamlod/metrics.hpp"

#include <cmath>
#include <vector>

namespace streamlod {

namespace {

void require_same_shape(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("image shape mismatch");
}

std::vector<double> gaussian_kernel(int size, double sigma) {
  std::vector<double> k(size);
  const double mid = 0.5 * (size - 1);
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    k[i] = std::exp(-((i - mid) * (i - mid)) / (2.0 * sigma * sigma));
    sum += k[i];
  }
  for (double& v : k) v /= sum;
  return k;
}

// Dense single-channel plane.
struct Plane {
  int w = 0, h = 0;
  std::vector<double> v;
  Plane(int w_, int h_) : w(w_), h(h_), v(static_cast<std::size_t>(w_) * h_, 0.0) {}
  double& operator()(int x, int y) { return v[static_cast<std::size_t>(y) * w + x]; }
  double operator()(int x, int y) const { return v[static_cast<std::size_t>(y) * w + x]; }
};

// Valid-mode separable correlation.
Plane filter_valid(const Plane& in, const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  Plane tmp(in.w - n + 1, in.h);
  for (int y = 0; y < in.h; ++y)
    for (int x = 0; x < tmp.w; ++x) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += k[i] * in(x + i, y);
      tmp(x, y) = s;
    }
  Plane out(tmp.w, in.h - n + 1);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += k[i] * tmp(x, y + i);
      out(x, y) = s;
    }
  return out;
}

// Adjoint of filter_valid: scatters a valid-size plane back to full size.
Plane filter_adjoint(const Plane& in, const std::vector<double>& k, int full_w, int full_h) {
  const int n = static_cast<int>(k.size());
  Plane tmp(in.w, full_h);
  for (int y = 0; y < in.h; ++y)
    for (int x = 0; x < in.w; ++x)
      for (int i = 0; i < n; ++i) tmp(x, y + i) += k[i] * in(x, y);
  Plane out(full_w, full_h);
  for (int y = 0; y < full_h; ++y)
    for (int x = 0; x < in.w; ++x)
      for (int i = 0; i < n; ++i) out(x + i, y) += k[i] * tmp(x, y);
  return out;
}

Plane channel(const Image& img, int c) {
  Plane p(img.width(), img.height());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) p(x, y) = img.at(x, y, c);
  return p;
}

Plane product(const Plane& a, const Plane& b) {
  Plane p(a.w, a.h);
  for (std::size_t i = 0; i < p.v.size(); ++i) p.v[i] = a.v[i] * b.v[i];
  return p;
}

SsimResult ssim_impl(const Image& a, const Image& b, const SsimParams& prm, bool want_grad) {
  require_same_shape(a, b);
  if (a.width() < prm.window || a.height() < prm.window)
    throw std::invalid_argument("image too small for SSIM");
  const auto k = gaussian_kernel(prm.window, prm.sigma);
  const int vw = a.width() - prm.window + 1;
  const int vh = a.height() - prm.window + 1;
  const double norm = 1.0 / (static_cast<double>(vw) * vh * a.channels());

  SsimResult res;
  if (want_grad) res.grad_a = Image(a.width(), a.height(), a.channels());
  double total = 0.0;
  for (int c = 0; c < a.channels(); ++c) {
    const Plane x = channel(a, c), y = channel(b, c);
    const Plane mx = filter_valid(x, k), my = filter_valid(y, k);
    const Plane exx = filter_valid(product(x, x), k), eyy = filter_valid(product(y, y), k);
    const Plane exy = filter_valid(product(x, y), k);
    Plane da(vw, vh), db(vw, vh), dc(vw, vh);
    for (std::size_t i = 0; i < mx.v.size(); ++i) {
      const double ux = mx.v[i], uy = my.v[i];
      const double sxx = exx.v[i] - ux * ux, syy = eyy.v[i] - uy * uy, sxy = exy.v[i] - ux * uy;
      const double n1 = 2.0 * ux * uy + prm.c1, n2 = 2.0 * sxy + prm.c2;
      const double d1 = ux * ux + uy * uy + prm.c1, d2 = sxx + syy + prm.c2;
      const double s = (n1 * n2) / (d1 * d2);
      total += s;
      if (!want_grad) continue;
      const double ds_dux = (2.0 * uy * n2) / (d1 * d2) - s * 2.0 * ux / d1;
      const double ds_dsxx = -s / d2;
      const double ds_dsxy = 2.0 * n1 / (d1 * d2);
      // d s / d x_q = w (A + B x_q + C y_q)
      da.v[i] = norm * (ds_dux - 2.0 * ux * ds_dsxx - uy * ds_dsxy);
      db.v[i] = norm * 2.0 * ds_dsxx;
      dc.v[i] = norm * ds_dsxy;
    }
    if (!want_grad) continue;
    const Plane ga = filter_adjoint(da, k, a.width(), a.height());
    const Plane gb = filter_adjoint(db, k, a.width(), a.height());
    const Plane gc = filter_adjoint(dc, k, a.width(), a.height());
    for (int yy = 0; yy < a.height(); ++yy)
      for (int xx = 0; xx < a.width(); ++xx)
        res.grad_a.at(xx, yy, c) = ga(xx, yy) + gb(xx, yy) * x(xx, yy) + gc(xx, yy) * y(xx, yy);
  }
  res.value = total * norm;
  return res;
}

}  // namespace

double mse(const Image& a, const Image& b) {
  require_same_shape(a, b);
  if (a.empty()) throw std::invalid_argument("empty image");
  double s = 0.0;
  const auto pa = a.pixels(), pb = b.pixels();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const double d = pa[i] - pb[i];
    s += d * d;
  }
  return s / static_cast<double>(pa.size());
}

double psnr(const Image& a, const Image& b) {
  const double m = mse(a, b);
  if (m == 0.0) return kPsnrIdentical;
  return 10.0 * std::log10(1.0 / m);
}

double ssim(const Image& a, const Image& b, const SsimParams& params) {
  return ssim_impl(a, b, params, false).value;
}

SsimResult ssim_with_grad(const Image& a, const Image& b, const SsimParams& params) {
  return ssim_impl(a, b, params, true);
}

}  // namespace streamlod
